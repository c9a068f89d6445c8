"""Joint training of the RFF dictionary and Koopman operator.

The objective couples a snapshot-consistency term with two penalties,

    sum_t |PhiY(t) - K PhiX(t)|  +  lambda1 |K|  +  lambda2 |theta|_1,

where theta collects all frequencies and phases. Matrix norms are Frobenius;
the data term is reported unsquared as written above, while gradient steps
descend its squared surrogate (the squared variant is what the closed-form
operator minimizes; both values are logged, see docs/CONVENTIONS.md).

Optimization is block-coordinate: the operator is re-estimated in closed
form on current features every ``refit_interval`` minibatches, then the
dictionary takes an SGD step with the operator held fixed. A minibatch is
one snapshot pair with a random particle subset. The online mode ingests
snapshot pairs one at a time into Gram accumulators, so each arrival costs
one M x M solve; dictionary updates invalidate old features, which is
handled by lazily re-featurizing a bounded replay window.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dictionary import RffDictionary, rff_eval, rff_eval_with_sin, rff_grad
from .dynamics import SnapshotDataset
from .koopman import KoopmanModel, estimate_koopman, solve_normal_equations


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the last finite state."""

    def __init__(self, message, dictionary, history):
        super().__init__(message)
        self.dictionary = dictionary
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for batch and online training."""

    lambda1: float = 1e-6          # operator-norm penalty; doubles as the refit ridge
    lambda2: float = 1e-5          # L1 weight on frequencies and phases
    step_size: float = 1e-3
    epochs: int = 50
    minibatch_particles: int = 256
    seed: int = 0
    ridge: float | None = None     # refit stabilizer when lambda1 == 0 (None = auto)
    refit_interval: int = 1        # operator refits, in minibatches
    refit_scope: str = "minibatch"  # "minibatch" or "full"
    k_mode: str = "closed_form"    # or "sgd": treat K as a free gradient variable
    theta_steps_per_ingest: int = 1
    replay_window: int = 32
    forgetting: float = 1.0        # decay on un-replayable Gram contributions

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalty weights must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.minibatch_particles < 1:
            raise ValueError("minibatch_particles must be >= 1")
        if self.refit_interval < 1:
            raise ValueError("refit_interval must be >= 1")
        if self.refit_scope not in ("minibatch", "full"):
            raise ValueError(f"unknown refit_scope {self.refit_scope!r}")
        if self.k_mode not in ("closed_form", "sgd"):
            raise ValueError(f"unknown k_mode {self.k_mode!r}")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if not 0.0 < self.forgetting <= 1.0:
            raise ValueError("forgetting must be in (0, 1]")


def effective_ridge(cfg: TrainConfig, gram_xx: np.ndarray) -> float:
    """Refit ridge: lambda1 when positive, else the configured/auto stabilizer."""
    if cfg.lambda1 > 0:
        return cfg.lambda1
    if cfg.ridge is not None:
        return cfg.ridge
    return 1e-8 * float(np.trace(gram_xx)) / gram_xx.shape[0]


def loss(dictionary: RffDictionary, K: np.ndarray, X_batch, Y_batch,
         lambda1: float, lambda2: float):
    """Objective value on a batch of snapshot pairs.

    ``X_batch``/``Y_batch`` are single (N, d) matrices or lists of them (one
    per snapshot pair). Returns ``(total, data_term, k_reg, theta_reg)`` with
    total = data_term + lambda1 * k_reg + lambda2 * theta_reg exactly.
    """
    xs = X_batch if isinstance(X_batch, (list, tuple)) else [X_batch]
    ys = Y_batch if isinstance(Y_batch, (list, tuple)) else [Y_batch]
    if len(xs) != len(ys):
        raise ValueError("X_batch and Y_batch must pair up")
    data_term = 0.0
    for X, Y in zip(xs, ys):
        resid = rff_eval(dictionary, Y) - rff_eval(dictionary, X) @ K
        data_term += float(np.linalg.norm(resid))
    k_reg = float(np.linalg.norm(K))
    theta_reg = float(np.abs(dictionary.omegas).sum() + np.abs(dictionary.biases).sum())
    total = data_term + lambda1 * k_reg + lambda2 * theta_reg
    return total, data_term, k_reg, theta_reg


def data_term_gradient(dictionary: RffDictionary, K: np.ndarray,
                       X: np.ndarray, Y: np.ndarray):
    """Gradient of the squared data term |PhiY - PhiX K|_F^2 w.r.t. theta.

    Returns ``(grad_omegas, grad_biases, sq_value)``. Both feature matrices
    depend on theta, so upstream sensitivities flow through X and Y rows.
    """
    phi_x, sin_x = rff_eval_with_sin(dictionary, X)
    phi_y, sin_y = rff_eval_with_sin(dictionary, Y)
    resid = phi_y - phi_x @ K
    go_y, gb_y = rff_grad(dictionary, Y, 2.0 * resid, sin_matrix=sin_y)
    go_x, gb_x = rff_grad(dictionary, X, -2.0 * resid @ K.T, sin_matrix=sin_x)
    return go_x + go_y, gb_x + gb_y, float(np.sum(resid**2))


def _theta_step(dictionary: RffDictionary, grad_o, grad_b, cfg: TrainConfig) -> RffDictionary:
    # L1 subgradient, 0 at exactly 0
    go = grad_o + cfg.lambda2 * np.sign(dictionary.omegas)
    gb = grad_b + cfg.lambda2 * np.sign(dictionary.biases)
    return RffDictionary(dictionary.omegas - cfg.step_size * go,
                         dictionary.biases - cfg.step_size * gb,
                         dictionary.bandwidth, dictionary.seed)


def _full_features(dictionary: RffDictionary, dataset: SnapshotDataset):
    X_all, Y_all = dataset.stacked()
    return rff_eval(dictionary, X_all), rff_eval(dictionary, Y_all), X_all


def _refit_full(dictionary: RffDictionary, dataset: SnapshotDataset, cfg: TrainConfig):
    phi_x, phi_y, _ = _full_features(dictionary, dataset)
    return estimate_koopman(phi_x, phi_y, ridge=effective_ridge(cfg, phi_x.T @ phi_x))


def fit(dataset: SnapshotDataset, dict0: RffDictionary, cfg: TrainConfig):
    """Train the dictionary and operator on a snapshot dataset.

    Each epoch visits every snapshot pair once in a seeded random order; a
    minibatch is that pair restricted to ``minibatch_particles`` randomly
    chosen particles (gradients are rescaled by the subsampling ratio so they
    estimate the full-pair gradient). Returns ``(dictionary, model, history)``
    where the model is a fresh full-dataset fit with the final dictionary and
    history holds one record per step:
    {step, data_term, data_term_sq, k_reg, theta_reg, total, wall_ms}.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    dictionary = dict0.copy()
    n_particles = dataset.X[0].shape[0]
    history: list[dict] = []
    # closed-form mode materializes K at the first refit (step 0); only the
    # free-variable mode needs a starting operator up front
    K = _refit_full(dictionary, dataset, cfg) if cfg.k_mode == "sgd" else None
    step = 0

    for _ in range(cfg.epochs):
        for t in rng.permutation(len(dataset)):
            t0 = time.perf_counter()
            if cfg.minibatch_particles < n_particles:
                rows = rng.choice(n_particles, size=cfg.minibatch_particles, replace=False)
                Xb, Yb = dataset.X[t][rows], dataset.Y[t][rows]
            else:
                Xb, Yb = dataset.X[t], dataset.Y[t]
            scale = n_particles / Xb.shape[0]

            # one trig evaluation per step serves the refit, the residual,
            # and the backward pass
            phi_x, sin_x = rff_eval_with_sin(dictionary, Xb)
            phi_y, sin_y = rff_eval_with_sin(dictionary, Yb)

            if cfg.k_mode == "closed_form" and step % cfg.refit_interval == 0:
                if cfg.refit_scope == "full":
                    K = _refit_full(dictionary, dataset, cfg)
                else:
                    gram = phi_x.T @ phi_x
                    K = solve_normal_equations(gram, phi_x.T @ phi_y,
                                               effective_ridge(cfg, gram))

            resid = phi_y - phi_x @ K
            sq = float(np.sum(resid**2))
            go_y, gb_y = rff_grad(dictionary, Yb, 2.0 * resid, sin_matrix=sin_y)
            go_x, gb_x = rff_grad(dictionary, Xb, -2.0 * resid @ K.T, sin_matrix=sin_x)
            if cfg.k_mode == "sgd":
                grad_k = scale * (-2.0 * phi_x.T @ resid) + 2.0 * cfg.lambda1 * K
                K = K - cfg.step_size * grad_k
            new_dict = _theta_step(dictionary, scale * (go_x + go_y),
                                   scale * (gb_x + gb_y), cfg)

            data_term = float(np.sqrt(sq))
            k_reg = float(np.linalg.norm(K))
            theta_reg = float(np.abs(new_dict.omegas).sum() + np.abs(new_dict.biases).sum())
            total = data_term + cfg.lambda1 * k_reg + cfg.lambda2 * theta_reg
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}; reduce step_size", dictionary, history)
            dictionary = new_dict
            history.append({
                "step": step,
                "data_term": data_term,
                "data_term_sq": sq,
                "k_reg": k_reg,
                "theta_reg": theta_reg,
                "total": total,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            })
            step += 1

    phi_x, phi_y, X_all = _full_features(dictionary, dataset)
    model = KoopmanModel.fit(phi_x, phi_y, X_all,
                             ridge=effective_ridge(cfg, phi_x.T @ phi_x))
    return dictionary, model, history


# ---------------------------------------------------------------------------
# Online (streaming) mode
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Streaming trainer state: dictionary, operator, and Gram accumulators.

    ``gram_xx``/``gram_xy`` hold sums of per-pair feature Grams over all
    ingested data. Pairs still inside the bounded replay window are
    re-featurized after dictionary updates; contributions of older pairs
    cannot be refreshed and either persist as-is or decay by the forgetting
    factor (the documented staleness policy).
    """

    dictionary: RffDictionary
    K: np.ndarray
    gram_xx: np.ndarray
    gram_xy: np.ndarray
    samples_seen: int = 0
    loss_history: list = field(default_factory=list)
    replay: deque = field(default_factory=deque)         # (X, Y) pairs
    replay_grams: deque = field(default_factory=deque)   # their cached (cxx, cxy)
    stale: bool = False
    step: int = 0


def init_train_state(dict0: RffDictionary, cfg: TrainConfig) -> TrainState:
    m = dict0.n_features
    return TrainState(dictionary=dict0.copy(), K=np.eye(m),
                      gram_xx=np.zeros((m, m)), gram_xy=np.zeros((m, m)))


def _pair_grams(dictionary: RffDictionary, X, Y):
    phi_x = rff_eval(dictionary, X)
    phi_y = rff_eval(dictionary, Y)
    return phi_x.T @ phi_x, phi_x.T @ phi_y


def _refresh_replay(state: TrainState) -> None:
    for i, (X, Y) in enumerate(state.replay):
        cxx_old, cxy_old = state.replay_grams[i]
        cxx, cxy = _pair_grams(state.dictionary, X, Y)
        state.gram_xx += cxx - cxx_old
        state.gram_xy += cxy - cxy_old
        state.replay_grams[i] = (cxx, cxy)
    state.stale = False


def online_ingest(state: TrainState, Xnew: np.ndarray, Ynew: np.ndarray,
                  cfg: TrainConfig) -> TrainState:
    """Fold one arriving snapshot pair into the trainer state.

    Updates the Gram accumulators with the new pair's features, re-solves the
    operator from the accumulators (one M x M solve), logs the loss on the
    arrival, then takes ``theta_steps_per_ingest`` dictionary steps on it.
    Dictionary movement marks the accumulators stale; the replay window is
    rebuilt lazily on the next ingest. A zero-row batch is a no-op. The state
    is updated in place and returned.
    """
    Xnew = np.asarray(Xnew, dtype=float)
    Ynew = np.asarray(Ynew, dtype=float)
    if Xnew.shape != Ynew.shape:
        raise ValueError(f"pair shapes differ: {Xnew.shape} vs {Ynew.shape}")
    if Xnew.ndim != 2 or Xnew.shape[1] != state.dictionary.dim:
        raise ValueError(f"states must be (N, {state.dictionary.dim})")
    if Xnew.shape[0] == 0:
        return state

    if state.stale:
        _refresh_replay(state)

    cxx, cxy = _pair_grams(state.dictionary, Xnew, Ynew)
    state.gram_xx += cxx
    state.gram_xy += cxy
    state.replay.append((Xnew, Ynew))
    state.replay_grams.append((cxx, cxy))
    while len(state.replay) > cfg.replay_window:
        state.replay.popleft()
        state.replay_grams.popleft()  # contribution stays in the accumulators

    state.K = solve_normal_equations(state.gram_xx, state.gram_xy,
                                     effective_ridge(cfg, state.gram_xx))
    state.samples_seen += Xnew.shape[0]

    total, data_term, k_reg, theta_reg = loss(state.dictionary, state.K, Xnew, Ynew,
                                              cfg.lambda1, cfg.lambda2)
    state.loss_history.append({
        "step": state.step,
        "data_term": data_term,
        "k_reg": k_reg,
        "theta_reg": theta_reg,
        "total": total,
    })
    state.step += 1

    for _ in range(cfg.theta_steps_per_ingest):
        grad_o, grad_b, _ = data_term_gradient(state.dictionary, state.K, Xnew, Ynew)
        state.dictionary = _theta_step(state.dictionary, grad_o, grad_b, cfg)
    if cfg.theta_steps_per_ingest > 0:
        if cfg.forgetting < 1.0:
            replay_xx = sum(c for c, _ in state.replay_grams)
            replay_xy = sum(c for _, c in state.replay_grams)
            state.gram_xx = cfg.forgetting * (state.gram_xx - replay_xx) + replay_xx
            state.gram_xy = cfg.forgetting * (state.gram_xy - replay_xy) + replay_xy
        state.stale = True
    return state


def write_history_jsonl(path, history: list[dict]) -> None:
    """Line-delimited JSON training log."""
    import json

    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")
