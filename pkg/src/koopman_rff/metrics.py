"""Prediction and eigenfunction-invariance error metrics.

Two scores are computed. The trajectory error aggregates per-step Frobenius
deviations between true and reconstructed snapshots,

    e_p = sqrt( (1/T) sum_t |X(t) - Xhat(t)|_F^2 ),

and the eigenfunction error measures how far each psi_j is from satisfying
the eigenvalue relation along the true flow,

    e_f(j) = sqrt( (1/I) sum_i |psi_j(f(x_i)) - mu_j psi_j(x_i)|^2 ),

where f is the true one-step map (supplied by the dynamics module, never the
model itself). The near-term/long-term protocol sweeps reconstruction start
times over a snapshot dataset and averages e_p per horizon.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import SnapshotDataset
from .koopman import KoopmanModel, reconstruct_series


@dataclass
class PredictionReport:
    """e_p over a horizon plus the per-step Frobenius errors it aggregates."""

    horizon: int
    e_p: float
    per_step_errors: np.ndarray

    def recomputed(self) -> float:
        return float(np.sqrt(np.mean(self.per_step_errors**2)))


@dataclass
class EigenErrorReport:
    """Invariance error of one eigenfunction at I sampled states."""

    eigen_index: int
    mu: complex
    e_f: float
    e_f_rel: float           # e_f divided by the RMS of psi_j over the samples
    sample_count: int


def traj_error(x_true, x_hat) -> PredictionReport:
    """Eq.-style prediction error between two snapshot sequences.

    Both arguments are length-T sequences of (N, d) state matrices (or a
    (T, N, d) array). Per-step errors are Frobenius norms of the snapshot
    difference; e_p is their root mean square.
    """
    x_true = [np.asarray(a, dtype=float) for a in x_true]
    x_hat = [np.asarray(a, dtype=float) for a in x_hat]
    if len(x_true) == 0:
        raise ValueError("empty trajectory")
    if len(x_true) != len(x_hat):
        raise ValueError(f"length mismatch: {len(x_true)} vs {len(x_hat)}")
    per_step = np.empty(len(x_true))
    for t, (a, b) in enumerate(zip(x_true, x_hat)):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch at step {t}: {a.shape} vs {b.shape}")
        per_step[t] = np.linalg.norm(a - b)
    e_p = float(np.sqrt(np.mean(per_step**2)))
    return PredictionReport(horizon=len(per_step), e_p=e_p, per_step_errors=per_step)


def eigfunc_error(model: KoopmanModel, dict_eval: Callable[[np.ndarray], np.ndarray],
                  samples: np.ndarray, propagated: np.ndarray, top_j: int,
                  normalize: bool = True) -> list[EigenErrorReport]:
    """Invariance error of the leading eigenfunctions at sampled states.

    ``propagated[i]`` must be the true one-step image of ``samples[i]``.
    With ``normalize`` (the frozen convention) each v_j is rescaled to unit
    2-norm first, making the score invariant to eigenvector scaling; the raw
    value scales linearly with |c| under v_j -> c v_j.
    """
    samples = np.asarray(samples, dtype=float)
    propagated = np.asarray(propagated, dtype=float)
    if samples.shape != propagated.shape:
        raise ValueError(f"shape mismatch: {samples.shape} vs {propagated.shape}")
    if top_j < 1 or top_j > model.n_features:
        raise ValueError(f"top_j must be in [1, {model.n_features}]")
    phi_x = dict_eval(samples)
    phi_fx = dict_eval(propagated)
    reports = []
    for j in range(top_j):
        v = model.V[:, j]
        if normalize:
            v = v / np.linalg.norm(v)
        psi_x = phi_x @ v
        psi_fx = phi_fx @ v
        resid = psi_fx - model.mu[j] * psi_x
        e_f = float(np.sqrt(np.mean(np.abs(resid) ** 2)))
        rms = float(np.sqrt(np.mean(np.abs(psi_x) ** 2)))
        reports.append(EigenErrorReport(eigen_index=j, mu=complex(model.mu[j]),
                                        e_f=e_f, e_f_rel=e_f / max(rms, 1e-300),
                                        sample_count=samples.shape[0]))
    return reports


@dataclass
class HorizonResult:
    """Mean e_p at one horizon, averaged over reconstruction start times."""

    horizon: int
    e_p: float
    per_start: np.ndarray     # e_p per evaluated start index
    per_step_mean: np.ndarray  # mean per-step error profile across starts


def evaluate_nt_lt(model: KoopmanModel, dataset: SnapshotDataset,
                   dict_eval: Callable[[np.ndarray], np.ndarray],
                   nt: int = 10, lt: int = 40,
                   max_starts: int | None = None) -> dict[str, HorizonResult]:
    """Near-term and long-term prediction errors over a snapshot dataset.

    From each start index s the model reconstructs X(s+1..s+h) out of the
    features of X(s) and compares against the stored truth; e_p values are
    averaged over all valid starts (optionally an even subsample of
    ``max_starts`` of them). Returns {"nt": ..., "lt": ...}.
    """
    horizon = max(nt, lt)
    T = len(dataset)
    if T < horizon:
        raise ValueError(f"dataset has {T} pairs; horizon {horizon} needs at least {horizon}")
    # truth[s + k] for k = 1..horizon lives in X[s + k] (and Y[T-1] for the tail)
    states = dataset.X + [dataset.Y[-1]]
    starts = np.arange(0, T - horizon + 1)
    if max_starts is not None and len(starts) > max_starts:
        idx = np.linspace(0, len(starts) - 1, max_starts).round().astype(int)
        starts = starts[np.unique(idx)]

    results = {}
    per_start = {h: [] for h in {nt, lt}}
    per_step = {h: np.zeros(h) for h in {nt, lt}}
    for s in starts:
        phi0 = dict_eval(states[s])
        xhat = reconstruct_series(model, phi0, horizon, start_step=1)
        errors = np.array([np.linalg.norm(states[s + 1 + k] - xhat[k])
                           for k in range(horizon)])
        for h in {nt, lt}:
            per_start[h].append(float(np.sqrt(np.mean(errors[:h] ** 2))))
            per_step[h] += errors[:h]
    for name, h in (("nt", nt), ("lt", lt)):
        vals = np.array(per_start[h])
        results[name] = HorizonResult(horizon=h, e_p=float(vals.mean()),
                                      per_start=vals,
                                      per_step_mean=per_step[h] / len(starts))
    return results


def sign_agreement(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of positions where two fields share sign structure.

    Fields are mean-centered real parts; the global sign of an eigenfunction
    is arbitrary, so the better of the two orientations is reported.
    """
    a = np.asarray(a).real.ravel()
    b = np.asarray(b).real.ravel()
    if a.shape != b.shape:
        raise ValueError("fields must have equal size")
    sa = np.sign(a - a.mean())
    sb = np.sign(b - b.mean())
    agree = float(np.mean(sa == sb))
    return max(agree, 1.0 - agree)
