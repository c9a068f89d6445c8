import numpy as np
import pytest

from koopman_rff.dictionary import MonomialDictionary
from koopman_rff.dynamics import SnapshotDataset
from koopman_rff.koopman import KoopmanModel
from koopman_rff.metrics import (eigfunc_error, evaluate_nt_lt, sign_agreement,
                                 traj_error)

A_TOY = np.array([[0.9, 0.1], [0.0, 0.8]])


def linear_toy(n=50, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    Y = X @ A_TOY.T
    mono = MonomialDictionary(1, 2)
    model = KoopmanModel.fit(mono(X), mono(Y), X, ridge=0.0)
    return model, mono, X, Y


def linear_dataset(n=30, pairs=45, seed=1):
    rng = np.random.default_rng(seed)
    snaps = [rng.normal(size=(n, 2))]
    for _ in range(pairs):
        snaps.append(snaps[-1] @ A_TOY.T)
    return SnapshotDataset(X=snaps[:-1], Y=snaps[1:], dt=1.0)


class TestTrajError:
    def test_zero_on_equal(self):
        xs = [np.random.default_rng(0).normal(size=(4, 2)) for _ in range(3)]
        report = traj_error(xs, [x.copy() for x in xs])
        assert report.e_p == 0.0
        assert np.all(report.per_step_errors == 0.0)

    def test_pythagoras(self):
        report = traj_error([np.array([[0.0, 0.0]])], [np.array([[3.0, 4.0]])])
        assert report.e_p == pytest.approx(5.0)

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(2)
        xs = [rng.normal(size=(5, 2)) for _ in range(7)]
        ys = [rng.normal(size=(5, 2)) for _ in range(7)]
        report = traj_error(xs, ys)
        total = 0.0
        for a, b in zip(xs, ys):
            step = 0.0
            for i in range(5):
                for j in range(2):
                    step += (a[i, j] - b[i, j]) ** 2
            total += step
        assert abs(report.e_p - np.sqrt(total / 7)) < 1e-12
        assert abs(report.recomputed() - report.e_p) < 1e-15

    def test_scales_linearly(self):
        rng = np.random.default_rng(3)
        xs = [rng.normal(size=(4, 2)) for _ in range(5)]
        delta = [rng.normal(size=(4, 2)) for _ in range(5)]
        e1 = traj_error(xs, [x + d for x, d in zip(xs, delta)]).e_p
        e3 = traj_error(xs, [x + 3 * d for x, d in zip(xs, delta)]).e_p
        assert e3 == pytest.approx(3 * e1)

    def test_errors(self):
        with pytest.raises(ValueError):
            traj_error([], [])
        with pytest.raises(ValueError):
            traj_error([np.zeros((3, 2))], [np.zeros((4, 2))])


class TestEigfuncError:
    def test_exact_linear_toy(self):
        model, mono, X, Y = linear_toy()
        reports = eigfunc_error(model, mono, X, Y, top_j=3)
        assert len(reports) == 3
        assert all(r.e_f < 1e-8 for r in reports)
        assert all(r.sample_count == 50 for r in reports)

    def test_constant_eigenfunction_zero(self):
        model, mono, X, Y = linear_toy()
        j = int(np.argmin(np.abs(model.mu - 1.0)))
        report = eigfunc_error(model, mono, X, Y, top_j=j + 1)[j]
        assert abs(report.mu - 1.0) < 1e-10
        assert report.e_f < 1e-10

    def test_scaling_convention(self):
        # rescaling one right eigenvector changes nothing under the unit-norm
        # convention; the raw value scales by |c|
        model, mono, X, Y = linear_toy()
        Xs = np.random.default_rng(4).normal(size=(20, 2))
        Ys = Xs @ A_TOY.T + 0.01  # imperfect propagation -> nonzero errors
        base = eigfunc_error(model, mono, Xs, Ys, top_j=3)
        scaled_model = KoopmanModel(K=model.K, mu=model.mu, V=model.V.copy(),
                                    W=model.W.copy(), B=model.B,
                                    defective=model.defective)
        c = 7.5
        scaled_model.V[:, 1] *= c
        scaled_model.W[:, 1] /= np.conj(c)  # keeps w* v = 1
        paired = eigfunc_error(scaled_model, mono, Xs, Ys, top_j=3)
        for a, b in zip(base, paired):
            assert b.e_f == pytest.approx(a.e_f, rel=1e-12)
        raw_base = eigfunc_error(model, mono, Xs, Ys, top_j=3, normalize=False)
        raw_scaled = eigfunc_error(scaled_model, mono, Xs, Ys, top_j=3, normalize=False)
        assert raw_scaled[1].e_f == pytest.approx(abs(c) * raw_base[1].e_f, rel=1e-10)

    def test_shape_mismatch(self):
        model, mono, X, Y = linear_toy()
        with pytest.raises(ValueError):
            eigfunc_error(model, mono, X, Y[:-1], top_j=1)


class TestEvaluateNtLt:
    def test_exact_linear_toy(self):
        model, mono, *_ = linear_toy()
        ds = linear_dataset()
        results = evaluate_nt_lt(model, ds, mono, nt=10, lt=40)
        assert results["nt"].e_p < 1e-6
        assert results["lt"].e_p < 1e-6
        assert results["nt"].horizon == 10 and results["lt"].horizon == 40

    def test_nt_equals_lt_when_horizons_match(self):
        model, mono, *_ = linear_toy()
        ds = linear_dataset()
        results = evaluate_nt_lt(model, ds, mono, nt=12, lt=12)
        assert results["nt"].e_p == results["lt"].e_p

    def test_insufficient_horizon(self):
        model, mono, *_ = linear_toy()
        ds = linear_dataset(pairs=5)
        with pytest.raises(ValueError):
            evaluate_nt_lt(model, ds, mono, nt=3, lt=40)

    def test_max_starts_subsampling(self):
        model, mono, *_ = linear_toy()
        ds = linear_dataset()
        full = evaluate_nt_lt(model, ds, mono, nt=2, lt=4)
        sub = evaluate_nt_lt(model, ds, mono, nt=2, lt=4, max_starts=3)
        assert len(sub["lt"].per_start) == 3
        assert len(full["lt"].per_start) == len(ds) - 4 + 1


class TestSignAgreement:
    def test_identical_fields(self):
        field = np.sin(np.linspace(0, 6, 100))
        assert sign_agreement(field, field) == 1.0

    def test_global_flip_is_ignored(self):
        field = np.sin(np.linspace(0, 6, 100))
        assert sign_agreement(field, -field) == 1.0

    def test_independent_fields_near_half(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=500), rng.normal(size=500)
        assert sign_agreement(a, b) < 0.65
