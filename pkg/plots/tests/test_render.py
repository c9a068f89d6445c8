"""Tests drive render.py the way users do: as a subprocess over real CSVs.

The double gyre fixtures come from an actual desk-scale `koopman-rff run`
(the kernel coherence preset shrunk via CLI overrides), so the heatmap test
exercises the exact CSV contract the main package exports.
"""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

PLOTS_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RENDER = os.path.join(PLOTS_DIR, "render.py")


def render(*args):
    return subprocess.run([sys.executable, RENDER, *args],
                          capture_output=True, text=True)


@pytest.fixture(scope="session")
def kernel_run(tmp_path_factory):
    """Desk-scale double gyre kernel-EDMD run through the main CLI."""
    root = tmp_path_factory.mktemp("dg_kernel")
    out = root / "run"
    config = {
        "system": "double_gyre",
        "sampling": {"kind": "grid", "counts": [50, 40]},
        "time": {"t0": 0.0, "t1": 2.0, "step": 0.1},
        # window give a deterministic, speckle-free sign field
        "dictionaries": [{"type": "kernel", "sigma": 0.75, "max_points": 2000,
                          "lag": 20}],
        "evaluation": {"top_j": 5, "field_grid": [100, 50]},
        "seed": 0,
        "output_dir": str(out),
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config))
    env = dict(os.environ, KOOPMAN_CACHE_DIR=str(root / "cache"))
    proc = subprocess.run(["koopman-rff", "run", str(cfg_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    return out


@pytest.fixture(scope="session")
def baseline_run(tmp_path_factory):
    """Small monomial-EDMD run for trajectory/error-bar fixtures."""
    root = tmp_path_factory.mktemp("dg_mono")
    out = root / "run"
    config = {
        "system": "double_gyre",
        "sampling": {"kind": "grid", "counts": [20, 10]},
        "time": {"t0": 0.0, "t1": 5.0, "step": 0.1},
        "dictionaries": [{"type": "monomial", "degree": 3}],
        "train": {"epochs": 0},
        "evaluation": {"nt": 5, "lt": 10, "max_starts": 4,
                       "eigfunc_samples": 20, "top_j": 3, "field_grid": [10, 5]},
        "seed": 1,
        "output_dir": str(out),
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config))
    env = dict(os.environ, KOOPMAN_CACHE_DIR=str(root / "cache"))
    proc = subprocess.run(["koopman-rff", "run", str(cfg_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    return out


def sign_components(csv_path):
    """Connected components (4-neighborhood) of the sign field of re_psi_1."""
    with open(csv_path) as fh:
        names = fh.readline().strip().split(",")
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1)
    x0 = data[:, names.index("x0")]
    x1 = data[:, names.index("x1")]
    z = data[:, names.index("re_psi_1")]
    nx, ny = len(np.unique(x0)), len(np.unique(x1))
    grid = z.reshape(ny, nx)

    def label(mask):
        seen = np.zeros_like(mask, dtype=bool)
        count = 0
        for i in range(mask.shape[0]):
            for j in range(mask.shape[1]):
                if mask[i, j] and not seen[i, j]:
                    count += 1
                    stack = [(i, j)]
                    seen[i, j] = True
                    while stack:
                        a, b = stack.pop()
                        for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                            na, nb = a + da, b + db
                            if (0 <= na < mask.shape[0] and 0 <= nb < mask.shape[1]
                                    and mask[na, nb] and not seen[na, nb]):
                                seen[na, nb] = True
                                stack.append((na, nb))
        return count

    return label(grid > 0) + label(grid < 0)


class TestHeatmap:
    def test_double_gyre_dominant_field_has_two_lobes(self, kernel_run, tmp_path):
        field = kernel_run / "field_kernel_s0.75_dominant.csv"
        out = tmp_path / "coherence.png"
        proc = render("--kind", "heatmap", "--in", str(field), "--out", str(out))
        assert proc.returncode == 0, proc.stderr
        assert out.exists() and out.stat().st_size > 0
        assert sign_components(field) == 2

    def test_constant_field_single_color(self, tmp_path):
        path = tmp_path / "const.csv"
        rows = ["x0,x1,re_psi_1,im_psi_1"]
        for y in (0.0, 0.5, 1.0):
            for x in (0.0, 1.0, 2.0):
                rows.append(f"{x},{y},0.75,0.0")
        path.write_text("\n".join(rows) + "\n")
        out = tmp_path / "const.png"
        proc = render("--kind", "heatmap", "--in", str(path), "--out", str(out))
        assert proc.returncode == 0, proc.stderr
        import matplotlib.image as mpimg
        img = mpimg.imread(out)
        h, w = img.shape[:2]
        center = img[int(h * 0.3):int(h * 0.6), int(w * 0.25):int(w * 0.55)]
        colors = center.reshape(-1, center.shape[-1])
        assert len(np.unique(colors, axis=0)) == 1

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,x1,re_phi_1\n0,0,1\n")
        out = tmp_path / "bad.png"
        proc = render("--kind", "heatmap", "--in", str(path), "--out", str(out))
        assert proc.returncode != 0
        assert "re_psi_1" in proc.stderr
        assert not out.exists()

    def test_ragged_grid_rejected(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("x0,x1,re_psi_1,im_psi_1\n0,0,1,0\n1,0,2,0\n0,1,3,0\n")
        proc = render("--kind", "heatmap", "--in", str(path),
                      "--out", str(tmp_path / "r.png"))
        assert proc.returncode != 0

    def test_mode_selection(self, kernel_run, tmp_path):
        field = kernel_run / "field_kernel_s0.75.csv"
        out = tmp_path / "mode3.png"
        proc = render("--kind", "heatmap", "--in", str(field), "--out", str(out),
                      "--mode", "3", "--title", "third mode")
        assert proc.returncode == 0, proc.stderr
        assert out.exists()


class TestScatter:
    def test_renders_final_time(self, baseline_run, tmp_path):
        truth = baseline_run / "trajectories" / "truth.csv"
        out = tmp_path / "scatter.png"
        proc = render("--kind", "scatter", "--in", str(truth), "--out", str(out))
        assert proc.returncode == 0, proc.stderr
        assert out.exists() and out.stat().st_size > 0

    def test_empty_trajectory_errors(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("t,particle_id,x0,x1\n")
        out = tmp_path / "nope.png"
        proc = render("--kind", "scatter", "--in", str(path), "--out", str(out))
        assert proc.returncode != 0
        assert not out.exists()


class TestTrajectories:
    def test_overlay(self, baseline_run, tmp_path):
        traj_dir = baseline_run / "trajectories"
        out = tmp_path / "overlay.png"
        proc = render("--kind", "trajectories", "--in", str(traj_dir / "truth.csv"),
                      "--overlay", str(traj_dir / "monomial_d3.csv"),
                      "--out", str(out))
        assert proc.returncode == 0, proc.stderr
        assert out.exists() and out.stat().st_size > 0

    def test_schema_violation(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,particle,x,y\n0,0,1,2\n")
        proc = render("--kind", "trajectories", "--in", str(path),
                      "--out", str(tmp_path / "x.png"))
        assert proc.returncode != 0
        assert "particle_id" in proc.stderr


class TestErrorBars:
    def test_renders(self, baseline_run, tmp_path):
        out = tmp_path / "bars.png"
        proc = render("--kind", "error_bars",
                      "--in", str(baseline_run / "eigenfunction_errors.csv"),
                      "--out", str(out))
        assert proc.returncode == 0, proc.stderr
        assert out.exists() and out.stat().st_size > 0

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("dictionary,mode,error\nrff,0,0.1\n")
        proc = render("--kind", "error_bars", "--in", str(path),
                      "--out", str(tmp_path / "x.png"))
        assert proc.returncode != 0
        assert "eigen_index" in proc.stderr or "e_f" in proc.stderr
