"""Multi-marginal entropic Sinkhorn engine for local-volatility calibration."""

__version__ = "0.1.0"

_SUBMODULES = ("market", "discretization", "dual", "solver", "acceleration",
               "diagnostics", "oracle", "cli", "errors")


def __getattr__(name):
    # lazy so the CLI can pin thread env vars before numpy loads
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
