import hashlib
import json
import os

import numpy as np
import pytest

from koopman_rff import cli
from koopman_rff.config import (ConfigError, config_from_dict, config_to_dict,
                                load_config)

DESK_CONFIG = {
    "system": "double_gyre",
    "sampling": {"kind": "grid", "counts": [20, 10]},
    "time": {"t0": 0.0, "t1": 5.0, "step": 0.1},
    "dictionaries": [{"type": "monomial", "degree": 3}],
    "train": {"epochs": 0},
    "evaluation": {"nt": 5, "lt": 10, "max_starts": 4, "eigfunc_samples": 20,
                   "top_j": 3, "field_grid": [12, 6]},
    "seed": 7,
    "output_dir": "run",
}


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def run_cli(tmp_path, payload, extra=()):
    out = str(tmp_path / payload.get("output_dir", "run"))
    payload = dict(payload, output_dir=out)
    cfg_path = write_config(tmp_path, payload)
    code = cli.main(["run", cfg_path, *extra])
    return code, out


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("KOOPMAN_CACHE_DIR", str(tmp_path / "cache"))


class TestConfig:
    def test_roundtrip_identity(self):
        cfg = config_from_dict(DESK_CONFIG)
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_unknown_key_rejected(self, tmp_path):
        payload = dict(DESK_CONFIG, tyop=1)
        with pytest.raises(ConfigError, match="tyop"):
            config_from_dict(payload)

    def test_nested_unknown_key_rejected(self):
        payload = json.loads(json.dumps(DESK_CONFIG))
        payload["evaluation"]["horizonn"] = 10
        with pytest.raises(ConfigError, match="horizonn"):
            config_from_dict(payload)

    def test_comments_stripped(self, tmp_path):
        text = "// a comment\n" + json.dumps(DESK_CONFIG) + "\n/* block\ncomment */\n"
        path = tmp_path / "c.json"
        path.write_text(text)
        assert load_config(path).system == "double_gyre"

    def test_parse_error_is_line_anchored(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "system": "duffing",\n  oops\n}\n')
        with pytest.raises(ConfigError, match=r"bad\.json:3"):
            load_config(path)

    def test_bad_system_params(self):
        payload = dict(DESK_CONFIG, system_params={"epz": 0.3})
        with pytest.raises(ConfigError, match="epz"):
            config_from_dict(payload)

    def test_presets_parse(self):
        import glob
        presets = glob.glob(os.path.join(os.path.dirname(__file__), "..", "presets", "*.json"))
        assert len(presets) == 8
        for preset in presets:
            cfg = load_config(preset)
            assert cfg.system in ("duffing", "double_gyre", "bickley")

    def test_paper_scale_presets(self):
        base = os.path.join(os.path.dirname(__file__), "..", "presets")
        duffing = load_config(os.path.join(base, "duffing_learned.json"))
        assert int(np.prod(duffing.sampling.counts)) == 1000
        assert duffing.time.step == 0.25 and duffing.time.t1 == 2.75
        assert duffing.dictionaries[0].m == 100
        gyre = load_config(os.path.join(base, "double_gyre_learned.json"))
        assert int(np.prod(gyre.sampling.counts)) == 20000
        assert gyre.time.t1 == 20.0 and gyre.time.step == 0.1
        bickley = load_config(os.path.join(base, "bickley_learned.json"))
        assert int(np.prod(bickley.sampling.counts)) == 9900
        assert bickley.dictionaries[0].m == 200
        assert bickley.time.solver == "abm4"
        kernel = load_config(os.path.join(base, "double_gyre_kernel.json"))
        assert kernel.dictionaries[0].sigma == 0.75


class TestRun:
    def test_baseline_run_outputs(self, tmp_path):
        code, out = run_cli(tmp_path, DESK_CONFIG)
        assert code == 0
        for name in ("results.csv", "results.json", "manifest.json",
                     "eigenfunction_errors.csv", "model_monomial_d3.json",
                     "field_monomial_d3.csv"):
            assert os.path.exists(os.path.join(out, name)), name
        lines = open(os.path.join(out, "results.csv")).read().splitlines()
        assert lines[0] == "system,dictionary,nt,lt"
        system, label, nt, lt = lines[1].split(",")
        assert system == "double_gyre" and label == "monomial_d3"
        assert float(nt) > 0 and float(lt) > 0
        assert not os.path.exists(os.path.join(out, ".lock"))

    def test_deterministic_outputs(self, tmp_path):
        def digest(out):
            h = hashlib.sha256()
            for name in ("results.csv", "results.json", "model_monomial_d3.json",
                         "field_monomial_d3.csv", "eigenfunction_errors.csv"):
                h.update(open(os.path.join(out, name), "rb").read())
            return h.hexdigest()

        payload = dict(DESK_CONFIG, output_dir="run_a")
        code, out_a = run_cli(tmp_path, payload)
        assert code == 0
        payload = dict(DESK_CONFIG, output_dir="run_b")
        code, out_b = run_cli(tmp_path, payload)
        assert code == 0
        assert digest(out_a) == digest(out_b)

    def test_learned_run_writes_log(self, tmp_path):
        payload = dict(DESK_CONFIG,
                       dictionaries=[{"type": "rff", "m": 12, "bandwidth": 0.5}],
                       train={"epochs": 2, "minibatch_particles": 64,
                              "step_size": 1e-4})
        code, out = run_cli(tmp_path, payload)
        assert code == 0
        log = os.path.join(out, "training_log_rff_m12.jsonl")
        records = [json.loads(line) for line in open(log)]
        assert len(records) == 2 * 50  # epochs * pairs
        assert {"step", "data_term", "k_reg", "theta_reg", "total",
                "wall_ms"} <= set(records[0])
        assert os.path.exists(os.path.join(out, "trajectories", "truth.csv"))
        assert os.path.exists(os.path.join(out, "trajectories", "rff_m12.csv"))

    def test_kernel_run(self, tmp_path):
        payload = dict(DESK_CONFIG,
                       dictionaries=[{"type": "kernel", "sigma": 0.75,
                                      "max_points": 80, "lag": 5}])
        code, out = run_cli(tmp_path, payload)
        assert code == 0
        assert os.path.exists(os.path.join(out, "field_kernel_s0.75.csv"))
        results = json.load(open(os.path.join(out, "results.json")))
        assert results["rows"] == []
        assert results["kernel"]["kernel_s0.75"]["n_points"] == 80

    def test_overrides(self, tmp_path):
        payload = dict(DESK_CONFIG,
                       dictionaries=[{"type": "rff", "m": 16, "bandwidth": 0.5}],
                       train={"epochs": 3})
        code, out = run_cli(tmp_path, payload,
                            extra=["--particles", "50", "--rff", "8",
                                   "--epochs", "1", "--seed", "9"])
        assert code == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        cfg = manifest["config"]
        assert cfg["train"]["epochs"] == 1
        assert cfg["seed"] == 9
        assert cfg["dictionaries"][0]["m"] == 8
        assert 40 <= np.prod(cfg["sampling"]["counts"]) <= 60

    def test_invalid_config_exit_code(self, tmp_path):
        path = write_config(tmp_path, dict(DESK_CONFIG, system="lorenz"))
        assert cli.main(["run", path]) == 2

    def test_lockfile_blocks_concurrent_runs(self, tmp_path):
        out = tmp_path / "locked"
        out.mkdir()
        (out / ".lock").touch()
        path = write_config(tmp_path, dict(DESK_CONFIG, output_dir=str(out)))
        assert cli.main(["run", path]) == 1

    def test_dataset_cache_reused(self, tmp_path):
        code, _ = run_cli(tmp_path, dict(DESK_CONFIG, output_dir="r1"))
        assert code == 0
        cache = tmp_path / "cache"
        blobs = list(cache.glob("*.bin"))
        assert len(blobs) == 1
        stamp = blobs[0].stat().st_mtime_ns
        code, _ = run_cli(tmp_path, dict(DESK_CONFIG, output_dir="r2"))
        assert code == 0
        assert blobs[0].stat().st_mtime_ns == stamp


class TestCompare:
    def _run_two(self, tmp_path):
        payload = dict(DESK_CONFIG, output_dir="mono")
        _, out_a = run_cli(tmp_path, payload)
        payload = dict(DESK_CONFIG, output_dir="gauss",
                       dictionaries=[{"type": "gaussian", "grid": [4, 3],
                                      "sigma": 0.3}])
        _, out_b = run_cli(tmp_path, payload)
        return out_a, out_b

    def test_merge(self, tmp_path, capsys):
        out_a, out_b = self._run_two(tmp_path)
        merged = tmp_path / "table.csv"
        assert cli.main(["compare", out_a, out_b, "--out", str(merged)]) == 0
        lines = merged.read_text().splitlines()
        assert lines[0] == "system,dictionary,nt,lt"
        labels = {line.split(",")[1] for line in lines[1:]}
        assert labels == {"monomial_d3", "gaussian_4x3"}

    def test_single_passthrough(self, tmp_path, capsys):
        out_a, _ = self._run_two(tmp_path)
        assert cli.main(["compare", out_a]) == 0
        printed = capsys.readouterr().out.splitlines()
        assert len(printed) == 2

    def test_duplicate_rows_error(self, tmp_path, capsys):
        out_a, _ = self._run_two(tmp_path)
        assert cli.main(["compare", out_a, out_a]) == 2
        err = capsys.readouterr().err
        assert "duplicate" in err and out_a in err

    def test_missing_results(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert cli.main(["compare", str(empty)]) == 2


class TestExportField:
    def test_export_grid_shape(self, tmp_path):
        _, out = run_cli(tmp_path, DESK_CONFIG)
        target = tmp_path / "field.csv"
        code = cli.main(["export-field", out, "--top-j", "2", "--grid", "10x5",
                         "--out", str(target)])
        assert code == 0
        data = np.loadtxt(target, delimiter=",", skiprows=1)
        assert data.shape == (50, 2 + 2 * 2)
        header = target.read_text().splitlines()[0]
        assert header == "x0,x1,re_psi_1,im_psi_1,re_psi_2,im_psi_2"

    def test_export_kernel_checkpoint(self, tmp_path):
        payload = dict(DESK_CONFIG,
                       dictionaries=[{"type": "kernel", "sigma": 0.75,
                                      "max_points": 60, "lag": 3}])
        _, out = run_cli(tmp_path, payload)
        code = cli.main(["export-field", out, "--top-j", "1", "--grid", "8x4"])
        assert code == 0
        assert os.path.exists(os.path.join(out, "field_kernel_s0.75_8x4.csv"))

    def test_missing_checkpoint(self, tmp_path):
        _, out = run_cli(tmp_path, DESK_CONFIG)
        assert cli.main(["export-field", out, "--dictionary", "nope"]) == 2

    def test_identity_checkpoint_constant_field(self, tmp_path):
        # a hand-built identity-operator checkpoint exports a constant
        # dominant field (the first monomial column is the constant 1)
        from koopman_rff.dictionary import MonomialDictionary
        from koopman_rff.koopman import KoopmanModel, eig_scaled, save_model

        mono = MonomialDictionary(2, 2)
        m = mono.n_features
        dec = eig_scaled(np.eye(m))
        model = KoopmanModel(K=np.eye(m), mu=dec.mu, V=dec.V, W=dec.W,
                             B=np.zeros((m, 2)), defective=dec.defective)
        run_dir = tmp_path / "fake_run"
        run_dir.mkdir()
        save_model(run_dir / "model_monomial_d2.json", model, mono)
        (run_dir / "manifest.json").write_text(
            json.dumps({"domain": [[0, 1], [0, 1]]}))
        target = tmp_path / "const.csv"
        assert cli.main(["export-field", str(run_dir), "--top-j", "1",
                         "--grid", "6x6", "--out", str(target)]) == 0
        data = np.loadtxt(target, delimiter=",", skiprows=1, ndmin=2)
        psi1 = data[:, 2] + 1j * data[:, 3]
        assert np.abs(psi1 - psi1[0]).max() < 1e-12
