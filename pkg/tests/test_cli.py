import json

import numpy as np
import pytest

from isac_alloc import cli

SMALL = ["--n", "8", "--m", "4", "--lmax", "2", "--numax", "1"]


def run_ok(argv):
    code = cli.main(argv)
    assert code == 0
    return code


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


class TestConfig:
    def test_layering(self, tmp_path):
        cfgfile = tmp_path / "c.ini"
        cfgfile.write_text("[grid]\nn_subcarriers = 32\nn_symbols = 8\n[levels]\neta0 = 1.5\n")
        vals, src = cli.read_config_file(cfgfile)
        c, s = cli.resolve_config("desk", vals, src, {"eta0": 2.5})
        assert c["n_subcarriers"] == 32 and s["n_subcarriers"] == "file"
        assert c["n_users"] == 2 and s["n_users"] == "preset:desk"
        assert c["eta0"] == 2.5 and s["eta0"] == "flag"
        assert s["gamma0"] == "default"

    def test_db_keys(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"beta0_db": -40, "gamma0_db": 10, "noise_psd_dbm_hz": -150}))
        vals, _ = cli.read_config_file(f)
        assert vals["beta0"] == pytest.approx(0.01)
        assert vals["gamma0"] == pytest.approx(10.0)
        assert vals["noise_psd"] == pytest.approx(1e-18)

    @pytest.mark.parametrize("text,match", [("bogus = 1\n", "unknown"), ("n_subcarriers = 1.5\n", "expects int"),
                                            ("a\n", "parse"), ("eta0 = 1\n[x]\neta0 = 2\n", "twice")])
    def test_bad_files(self, tmp_path, text, match):
        f = tmp_path / "bad.ini"
        f.write_text(text)
        with pytest.raises(cli.ConfigError, match=match):
            cli.read_config_file(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(cli.ConfigError):
            cli.read_config_file(tmp_path / "nope.ini")


class TestExitCodes:
    def test_config_error_json(self, tmp_path, capsys):
        code = cli.main(["af", "--out", str(tmp_path), "--n", "abc"])
        assert code == cli.EXIT_CONFIG
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "config"

    def test_random_needs_seed(self, tmp_path):
        assert cli.main(["af", "--out", str(tmp_path), *SMALL]) == cli.EXIT_CONFIG

    def test_variant_mismatch(self, tmp_path):
        assert cli.main(["solve-res", "--out", str(tmp_path), "--tau-factor", "1.3", "--seed", "0", *SMALL]) == 2

    def test_unknown_command(self, tmp_path):
        assert cli.main(["fly", "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_region_too_large(self, tmp_path):
        assert cli.main(["af", "--out", str(tmp_path), "--n", "4", "--m", "4", "--lmax", "4", "--kind", "TDM"]) == 2

    def test_infeasible(self, tmp_path, capsys):
        # an SNR floor far above what the power budget allows
        code = cli.main(["solve-res", "--out", str(tmp_path), "--seed", "0", "--k", "1", "--gamma0-db", "80",
                         "--eta0", "1", "--max-iter", "2", *SMALL])
        assert code == cli.EXIT_INFEASIBLE
        assert json.loads(capsys.readouterr().err.strip())["error"] == "infeasible"


class TestCommands:
    def test_af(self, tmp_path):
        run_ok(["af", "--out", str(tmp_path), "--kind", "TDM", *SMALL])
        names = set(files(tmp_path))
        assert {"af.csv", "af.csv.json", "af_cuts.csv", "allocation.json", "summary.json"} <= names
        meta = json.loads((tmp_path / "af.csv.json").read_text())
        assert meta["command"] == "af"
        assert meta["sources"]["kind"] == "flag"

    def test_baseline_all_kinds(self, tmp_path):
        run_ok(["baseline", "--out", str(tmp_path), "--seed", "1", *SMALL])
        lines = (tmp_path / "baselines.csv").read_text().splitlines()
        assert len(lines) == 1 + 6

    def test_solve_psl(self, tmp_path):
        run_ok(["solve-psl", "--out", str(tmp_path), "--seed", "0", "--k", "1", "--eta0", "2", *SMALL])
        res = json.loads((tmp_path / "result.json").read_text())
        assert res["feasible"] is True
        alloc = np.loadtxt(tmp_path / "allocation.csv", delimiter=",")
        assert alloc.shape == (8, 4)

    def test_simulate(self, tmp_path):
        run_ok(["simulate", "--out", str(tmp_path), "--seed", "3", "--kind", "RadarOnly", "--values=-10,0",
                "--trials", "5", "--n", "16", "--m", "8"])
        assert len((tmp_path / "rmse.csv").read_text().splitlines()) == 3

    def test_simulate_uses_allocation_grid(self, tmp_path):
        src, out = tmp_path / "src", tmp_path / "out"
        run_ok(["af", "--out", str(src), "--kind", "TDM", *SMALL])
        run_ok(["simulate", "--out", str(out), "--seed", "3", "--allocation", str(src / "allocation.json"),
                "--values", "0", "--trials", "3"])
        assert len((out / "rmse.csv").read_text().splitlines()) == 2

    def test_simulate_grid_mismatch(self, tmp_path):
        run_ok(["af", "--out", str(tmp_path), "--kind", "TDM", *SMALL])
        d = json.loads((tmp_path / "allocation.json").read_text())
        del d["config"]
        bare = tmp_path / "bare.json"
        bare.write_text(json.dumps(d))
        code = cli.main(["simulate", "--out", str(tmp_path / "o"), "--seed", "3", "--allocation", str(bare),
                         "--values", "0", "--trials", "3"])
        assert code == cli.EXIT_CONFIG

    def test_sweep(self, tmp_path):
        run_ok(["sweep", "--out", str(tmp_path), "--seed", "0", "--k", "1", "--algorithm", "res",
                "--variable", "eta0", "--values", "1,2", "--max-iter", "3", *SMALL])
        assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 3


class TestRerun:
    @pytest.mark.parametrize("argv,sidecar", [
        (["af", "--kind", "Random", "--seed", "5", "--rof", "0.25", *SMALL], "af.csv.json"),
        (["baseline", "--seed", "2", *SMALL], "baselines.csv.json"),
        (["simulate", "--seed", "3", "--kind", "TDM", "--values", "0", "--trials", "4"] + SMALL, "rmse.csv.json"),
    ])
    def test_byte_identical(self, tmp_path, argv, sidecar):
        a, b = tmp_path / "a", tmp_path / "b"
        run_ok([argv[0], "--out", str(a), *argv[1:]])
        run_ok(["rerun", str(a / sidecar), "--out", str(b)])
        assert files(a) == files(b)

    def test_sidecar_as_config(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_ok(["af", "--out", str(a), "--kind", "Uniform", *SMALL])
        run_ok(["af", "--config", str(a / "summary.json.json"), "--out", str(b)])
        assert files(a) == files(b)
