"""Config loading, end-to-end runs, artifact schemas and exit codes."""
import json
import os

import numpy as np
import pytest

from mmcalib import cli
from mmcalib.errors import ConfigError

TINY = {
    "spot": 100.0,
    "ref_vol": 0.2,
    "horizon": 0.5,
    "schedule": [6],
    "delta": 4.0,
    "k_pts": 6.0,
    "epsilon": 1e-5,
    "max_sweeps": 40,
    "w_price": 10.0,
    "maturities": [0.2, 0.4],
    "strike_counts": [1, 1],
    "emit_plots": True,
}


def write_config(tmp_path, overrides=None, name="config.json"):
    cfg = dict(TINY)
    cfg["output_dir"] = str(tmp_path / "out")
    cfg.update(overrides or {})
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


class TestConfig:
    def test_defaults_validate(self):
        cli.RunConfig().validate()

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"spots": 1}))
        with pytest.raises(ConfigError, match="unknown keys"):
            cli.load_config(str(p))

    def test_json_error_has_line_info(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{\n  \"spot\": 100,,\n}")
        with pytest.raises(ConfigError, match=r":2:"):
            cli.load_config(str(p))

    def test_off_grid_maturity_rejected(self, tmp_path):
        p = write_config(tmp_path, {"schedule": [8], "maturities": [0.2, 0.4]})
        with pytest.raises(ConfigError, match="maturity"):
            cli.load_config(p)

    def test_non_monotone_schedule_rejected(self):
        cfg = cli.RunConfig(schedule=(21, 11))
        with pytest.raises(ConfigError):
            cfg.validate()


class TestMain:
    def test_run_produces_artifacts(self, tmp_path):
        p = write_config(tmp_path)
        rc = cli.main(["--config", p])
        assert rc in (0, 2)
        out = tmp_path / "out"
        expected = {"convergence.csv", "local_vol.csv", "run_meta.json",
                    "smile_0.2.csv", "smile_0.4.csv"}
        names = {f.name for f in out.iterdir()}
        assert expected <= names
        assert any(n.startswith("marginal_") for n in names)
        assert any(n.endswith(".svg") for n in names)

    def test_convergence_csv_schema_and_ascent(self, tmp_path):
        p = write_config(tmp_path)
        cli.main(["--config", p])
        lines = (tmp_path / "out" / "convergence.csv").read_text().splitlines()
        assert lines[0] == ("sweep,level,n_timesteps,dual_value,e_max,"
                            "price_err_l2,mart_err_l2,wall_ms")
        duals = [float(l.split(",")[3]) for l in lines[1:]]
        for a, b in zip(duals, duals[1:]):
            assert b >= a - 1e-9 * max(1.0, abs(a))

    def test_smile_csv_schema(self, tmp_path):
        p = write_config(tmp_path)
        cli.main(["--config", p])
        lines = (tmp_path / "out" / "smile_0.2.csv").read_text().splitlines()
        assert lines[0] == "strike,kind,target_price,model_price,market_iv,model_iv"
        assert len(lines) == 1 + 4  # one call and one put ladder of 2 strikes
        for line in lines[1:]:
            cells = line.split(",")
            assert cells[1] in ("call", "put")
            assert float(cells[2]) > 0

    def test_deterministic_reruns(self, tmp_path):
        p1 = write_config(tmp_path, {"output_dir": str(tmp_path / "a")},
                          name="c1.json")
        p2 = write_config(tmp_path, {"output_dir": str(tmp_path / "b")},
                          name="c2.json")
        cli.main(["--config", p1])
        cli.main(["--config", p2])
        for name in ("local_vol.csv", "smile_0.2.csv", "smile_0.4.csv"):
            a = (tmp_path / "a" / name).read_bytes()
            b = (tmp_path / "b" / name).read_bytes()
            assert a == b, name
        # convergence is byte-identical apart from the measured wall time
        for name in ("convergence.csv",):
            a = (tmp_path / "a" / name).read_text().splitlines()
            b = (tmp_path / "b" / name).read_text().splitlines()
            strip = [",".join(l.split(",")[:-1]) for l in a]
            assert strip == [",".join(l.split(",")[:-1]) for l in b]

    def test_schedule_flag_overrides(self, tmp_path):
        p = write_config(tmp_path)
        rc = cli.main(["--config", p, "--schedule", "6",
                       "--output-dir", str(tmp_path / "s")])
        assert rc in (0, 2)
        meta = json.loads((tmp_path / "s" / "run_meta.json").read_text())
        assert meta["config"]["schedule"] == [6]

    def test_bad_maturity_exit_code(self, tmp_path):
        p = write_config(tmp_path, {"schedule": [8]})
        assert cli.main(["--config", p]) == 1

    def test_missing_config_exit_code(self, tmp_path):
        assert cli.main(["--config", str(tmp_path / "absent.json")]) == 1

    def test_meta_records_conventions(self, tmp_path):
        p = write_config(tmp_path)
        cli.main(["--config", p])
        meta = json.loads((tmp_path / "out" / "run_meta.json").read_text())
        assert "martingale_error" in meta["conventions"]
        assert meta["level_boundaries"]
