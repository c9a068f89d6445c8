"""Benchmark flow simulators and snapshot-dataset assembly.

Three two-dimensional systems are provided: the damped Duffing oscillator,
the periodically driven double gyre, and the Bickley jet. Vector fields are
vectorized over a leading batch axis so that whole particle ensembles can be
integrated as one ODE system. Trajectories are sampled on fixed output grids
and paired into time-shifted snapshot matrices for operator estimation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp


class IntegrationError(RuntimeError):
    """Raised when an integrator cannot reach the end of the time span.

    Carries ``last_time``, the last time that was reached successfully.
    """

    def __init__(self, message, last_time):
        super().__init__(message)
        self.last_time = float(last_time)


# ---------------------------------------------------------------------------
# System parameters (defaults are the benchmark values)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DuffingParams:
    """Damped, unforced Duffing oscillator: x' = y, y' = -delta*y - x*(beta + alpha*x^2)."""

    delta: float = 0.5
    beta: float = -1.0
    alpha: float = 1.0


@dataclass(frozen=True)
class DoubleGyreParams:
    """Time-periodic double gyre on [0, 2] x [0, 1].

    ``alpha`` is retained alongside ``eps`` because both appear in common
    statements of the model with equal values; the velocity implemented here
    uses ``eps`` throughout so the flow is exactly divergence free (see
    docs/CONVENTIONS.md).
    """

    eps: float = 0.25
    alpha: float = 0.25
    amplitude: float = 0.25
    omega: float = 2.0 * math.pi


@dataclass(frozen=True)
class BickleyJetParams:
    """Bickley jet: zonal jet plus three travelling Rossby-like waves.

    Scaled parameters; velocities are derived from the stream function with
    the Hamiltonian convention x' = -dpsi/dy, y' = dpsi/dx.
    """

    U0: float = 5.4138
    L0: float = 1.77
    c: tuple[float, float, float] = (0.1446 * 5.4138, 0.2053 * 5.4138, 0.4561 * 5.4138)
    eps: tuple[float, float, float] = (0.075, 0.4, 0.3)
    r0: float = 6.371
    k: tuple[float, float, float] = (2.0 / 6.371, 4.0 / 6.371, 6.0 / 6.371)


SystemParams = DuffingParams | DoubleGyreParams | BickleyJetParams

# Domain rectangles the benchmark datasets are sampled on.
DOMAINS = {
    "duffing": ((-2.0, 2.0), (0.0, 1.0)),
    "double_gyre": ((0.0, 2.0), (0.0, 1.0)),
    "bickley": ((0.0, 20.0), (-3.0, 3.0)),
}


def default_params(system: str) -> SystemParams:
    if system == "duffing":
        return DuffingParams()
    if system == "double_gyre":
        return DoubleGyreParams()
    if system == "bickley":
        return BickleyJetParams()
    raise ValueError(f"unknown system {system!r}")


# ---------------------------------------------------------------------------
# Vector fields
# ---------------------------------------------------------------------------

def duffing_vf(state, params: DuffingParams):
    """Velocity of the Duffing oscillator at ``state`` (shape (..., 2))."""
    if not isinstance(params, DuffingParams):
        raise TypeError(f"duffing_vf requires DuffingParams, got {type(params).__name__}")
    state = np.asarray(state, dtype=float)
    x, y = state[..., 0], state[..., 1]
    vx = y
    vy = -params.delta * y - x * (params.beta + params.alpha * x**2)
    return np.stack([vx, vy], axis=-1)


def double_gyre_vf(state, t, params: DoubleGyreParams):
    """Velocity of the double gyre at ``state`` (shape (..., 2)) and time ``t``.

    f(x, t) = eps*sin(omega*t)*x^2 + (1 - 2*eps*sin(omega*t))*x and its exact
    x-derivative enter the usual stream-function velocities, so the field is
    divergence free to machine precision.
    """
    if not isinstance(params, DoubleGyreParams):
        raise TypeError(f"double_gyre_vf requires DoubleGyreParams, got {type(params).__name__}")
    state = np.asarray(state, dtype=float)
    x, y = state[..., 0], state[..., 1]
    a = params.amplitude
    s = params.eps * math.sin(params.omega * t)
    f = s * x**2 + (1.0 - 2.0 * s) * x
    dfdx = 2.0 * s * x + (1.0 - 2.0 * s)
    vx = -math.pi * a * np.sin(math.pi * f) * np.cos(math.pi * y)
    vy = math.pi * a * np.cos(math.pi * f) * np.sin(math.pi * y) * dfdx
    return np.stack([vx, vy], axis=-1)


def bickley_stream_function(state, t, params: BickleyJetParams):
    """Stream function psi(x, y, t) of the Bickley jet, for testing and plots."""
    state = np.asarray(state, dtype=float)
    x, y = state[..., 0], state[..., 1]
    U0, L0 = params.U0, params.L0
    sech2 = 1.0 / np.cosh(y / L0) ** 2
    psi0 = -U0 * L0 * np.tanh(y / L0)
    wave = sum(
        eps_n * np.cos(k_n * (x - c_n * t))
        for eps_n, k_n, c_n in zip(params.eps, params.k, params.c)
    )
    return psi0 + U0 * L0 * sech2 * wave


def bickley_vf(state, t, params: BickleyJetParams):
    """Velocity of the Bickley jet at ``state`` (shape (..., 2)) and time ``t``.

    Closed-form derivatives of the stream function with x' = -dpsi/dy,
    y' = dpsi/dx (incompressible convention; see docs/CONVENTIONS.md).
    """
    if not isinstance(params, BickleyJetParams):
        raise TypeError(f"bickley_vf requires BickleyJetParams, got {type(params).__name__}")
    state = np.asarray(state, dtype=float)
    x, y = state[..., 0], state[..., 1]
    U0, L0 = params.U0, params.L0
    th = np.tanh(y / L0)
    sech2 = 1.0 - th**2
    wave = np.zeros_like(x)
    dwave_dx = np.zeros_like(x)
    for eps_n, k_n, c_n in zip(params.eps, params.k, params.c):
        phase = k_n * (x - c_n * t)
        wave = wave + eps_n * np.cos(phase)
        dwave_dx = dwave_dx - eps_n * k_n * np.sin(phase)
    # -dpsi/dy: psi0 gives +U0*sech^2, psi1 gives +2*U0*sech^2*tanh*wave
    vx = U0 * sech2 * (1.0 + 2.0 * th * wave)
    # dpsi/dx: only psi1 depends on x
    vy = U0 * L0 * sech2 * dwave_dx
    return np.stack([vx, vy], axis=-1)


def vector_field(params: SystemParams):
    """Return ``f(t, state) -> velocity`` for any parameter variant."""
    if isinstance(params, DuffingParams):
        return lambda t, s: duffing_vf(s, params)
    if isinstance(params, DoubleGyreParams):
        return lambda t, s: double_gyre_vf(s, t, params)
    if isinstance(params, BickleyJetParams):
        return lambda t, s: bickley_vf(s, t, params)
    raise TypeError(f"unsupported params type {type(params).__name__}")


# ---------------------------------------------------------------------------
# Trajectories and snapshot datasets
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """A single sampled solution: ``times`` (T+1,) and ``states`` (T+1, d)."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.ndim != 1 or self.states.ndim != 2:
            raise ValueError("times must be 1-D and states 2-D")
        if self.states.shape[0] != self.times.shape[0]:
            raise ValueError("states rows must match number of times")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")


@dataclass
class EnsembleTrajectory:
    """All particles on one grid: ``times`` (T+1,), ``states`` (T+1, N, d)."""

    times: np.ndarray
    states: np.ndarray

    @property
    def n_particles(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def particle(self, i: int) -> Trajectory:
        return Trajectory(self.times, self.states[:, i, :])


@dataclass
class SnapshotDataset:
    """Time-indexed snapshot pairs: ``X[t]`` and its dt-advanced image ``Y[t]``."""

    X: list[np.ndarray]
    Y: list[np.ndarray]
    dt: float

    def __post_init__(self):
        if len(self.X) != len(self.Y):
            raise ValueError("X and Y must have the same number of snapshots")
        shapes = {a.shape for a in self.X} | {a.shape for a in self.Y}
        if len(shapes) > 1:
            raise ValueError(f"all snapshot matrices must share one shape, got {shapes}")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def dim(self) -> int:
        return self.X[0].shape[1]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All pairs vertically concatenated, (sum N_t, d) each."""
        return np.vstack(self.X), np.vstack(self.Y)


def time_grid(t0: float, t1: float, step: float) -> np.ndarray:
    """Uniform grid from t0 to t1 inclusive; (t1 - t0) must be a whole number of steps."""
    if step <= 0:
        raise ValueError("step must be positive")
    n = (t1 - t0) / step
    n_round = round(n)
    if n_round < 1 or abs(n - n_round) > 1e-9 * max(1.0, abs(n)):
        raise ValueError(f"span {t1 - t0} is not a multiple of step {step}")
    return t0 + step * np.arange(n_round + 1)


def integrate_rk45(vf, x0, t0, t1, *, grid_step=None, t_grid=None,
                   reltol=1e-8, abstol=1e-10, max_step=np.inf):
    """Integrate ``dx/dt = vf(t, x)`` with an adaptive Dormand-Prince 5(4) pair.

    Parameters
    ----------
    vf : callable(t, x) -> velocity, where x has shape (d,) or (N, d).
    x0 : initial state, shape (d,) or (N, d) for a whole ensemble.
    t0, t1 : time span, t1 > t0.
    grid_step : output grid spacing (mutually exclusive with t_grid).
    t_grid : explicit strictly increasing output times starting at t0.
    reltol, abstol : local error tolerances (> 0).
    max_step : optional cap on the internal step.

    Returns
    -------
    Trajectory for a single state, EnsembleTrajectory for an ensemble. The
    solution is sampled on the output grid via the solver's dense output;
    internal steps are chosen adaptively.

    Raises
    ------
    IntegrationError if the solver cannot advance (carries ``last_time``).
    """
    if t1 <= t0:
        raise ValueError("t1 must exceed t0")
    if reltol <= 0 or abstol <= 0:
        raise ValueError("tolerances must be positive")
    times = _output_times(t0, t1, grid_step, t_grid)
    x0 = np.asarray(x0, dtype=float)
    shape = x0.shape

    def rhs(t, y):
        return np.asarray(vf(t, y.reshape(shape)), dtype=float).ravel()

    sol = solve_ivp(rhs, (t0, t1), x0.ravel(), method="RK45", t_eval=times,
                    rtol=reltol, atol=abstol, max_step=max_step)
    if not sol.success:
        last = sol.t[-1] if sol.t.size else t0
        raise IntegrationError(f"RK45 failed: {sol.message}", last)
    states = sol.y.T.reshape((len(times),) + shape)
    return _wrap_trajectory(times, states)


def integrate_abm(vf, x0, t0, t1, grid_step, *, substeps=12):
    """Integrate with a fixed-order Adams-Bashforth-Moulton PECE scheme (order 4).

    An RK4 ramp supplies the first three internal steps; thereafter each step
    is an AB4 prediction corrected once by AM4. The internal step is
    ``grid_step / substeps`` and output lands exactly on the grid.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    times = time_grid(t0, t1, grid_step)
    x0 = np.asarray(x0, dtype=float)
    h = grid_step / substeps
    n_internal = (len(times) - 1) * substeps

    out = np.empty((len(times),) + x0.shape)
    out[0] = x0
    y = x0
    t = t0
    history = [np.asarray(vf(t, y), dtype=float)]  # f values, oldest first

    for k in range(n_internal):
        if len(history) < 4:
            y = _rk4_step(vf, t, y, h)
        else:
            f3, f2, f1, f0 = history[-4], history[-3], history[-2], history[-1]
            # AB4 predictor
            yp = y + (h / 24.0) * (55.0 * f0 - 59.0 * f1 + 37.0 * f2 - 9.0 * f3)
            fp = np.asarray(vf(t + h, yp), dtype=float)
            # AM4 corrector (one pass)
            y = y + (h / 24.0) * (9.0 * fp + 19.0 * f0 - 5.0 * f1 + f2)
        t = t0 + (k + 1) * h
        fy = np.asarray(vf(t, y), dtype=float)
        if not np.all(np.isfinite(fy)):
            raise IntegrationError("ABM4 produced non-finite state", t - h)
        history.append(fy)
        if len(history) > 4:
            history.pop(0)
        if (k + 1) % substeps == 0:
            out[(k + 1) // substeps] = y

    return _wrap_trajectory(times, out)


def _rk4_step(vf, t, y, h):
    k1 = np.asarray(vf(t, y), dtype=float)
    k2 = np.asarray(vf(t + 0.5 * h, y + 0.5 * h * k1), dtype=float)
    k3 = np.asarray(vf(t + 0.5 * h, y + 0.5 * h * k2), dtype=float)
    k4 = np.asarray(vf(t + h, y + h * k3), dtype=float)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _output_times(t0, t1, grid_step, t_grid):
    if (grid_step is None) == (t_grid is None):
        raise ValueError("provide exactly one of grid_step or t_grid")
    if grid_step is not None:
        return time_grid(t0, t1, grid_step)
    times = np.asarray(t_grid, dtype=float)
    if times[0] != t0 or times[-1] != t1 or np.any(np.diff(times) <= 0):
        raise ValueError("t_grid must increase strictly from t0 to t1")
    return times


def _wrap_trajectory(times, states):
    if states.ndim == 2:
        return Trajectory(times, states)
    return EnsembleTrajectory(np.asarray(times, dtype=float), states)


# ---------------------------------------------------------------------------
# Sampling and dataset assembly
# ---------------------------------------------------------------------------

def sample_grid(bounds, counts) -> np.ndarray:
    """Regular lattice over a box, endpoints included.

    ``bounds`` is a sequence of (lo, hi) per axis and ``counts`` the number of
    points per axis. Rows are ordered with axis 0 varying fastest, so the
    total is prod(counts) and layouts are reproducible.
    """
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    counts = [int(c) for c in counts]
    if len(bounds) != len(counts):
        raise ValueError("bounds and counts must have equal length")
    axes = []
    for (lo, hi), c in zip(bounds, counts):
        if c < 1:
            raise ValueError("counts must be >= 1")
        if lo >= hi:
            raise ValueError(f"degenerate bounds ({lo}, {hi})")
        axes.append(np.linspace(lo, hi, c))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1, order="F") for m in mesh], axis=1)


def sample_uniform(bounds, n, seed) -> np.ndarray:
    """n i.i.d. uniform draws from a box (alternative to the lattice layout)."""
    rng = np.random.default_rng(seed)
    bounds = np.asarray(bounds, dtype=float)
    if np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ValueError("degenerate bounds")
    return rng.uniform(bounds[:, 0], bounds[:, 1], size=(int(n), len(bounds)))


def make_snapshots(trajectories) -> SnapshotDataset:
    """Pair up particle positions into time-shifted snapshot matrices.

    Accepts a list of Trajectory on one common grid, or a single
    EnsembleTrajectory. X[t] stacks every particle at time index t and Y[t]
    at index t+1, giving T = len(times) - 1 pairs; Y[t] is X[t+1] by
    construction.
    """
    if isinstance(trajectories, EnsembleTrajectory):
        times, states = trajectories.times, trajectories.states
    else:
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("no trajectories given")
        times = trajectories[0].times
        for tr in trajectories[1:]:
            if tr.times.shape != times.shape or not np.array_equal(tr.times, times):
                raise ValueError("all trajectories must share the same time grid")
        states = np.stack([tr.states for tr in trajectories], axis=1)
    if len(times) < 2:
        raise ValueError("need at least two time points")
    steps = np.diff(times)
    X = [states[t] for t in range(len(times) - 1)]
    Y = [states[t + 1] for t in range(len(times) - 1)]
    return SnapshotDataset(X=X, Y=Y, dt=float(steps[0]))


def simulate_ensemble(params: SystemParams, x0: np.ndarray, t0: float, t1: float,
                      step: float, solver: str = "rk45", *, reltol=1e-8,
                      abstol=1e-10, substeps=12) -> EnsembleTrajectory:
    """Integrate a particle ensemble for one of the benchmark systems."""
    vf = vector_field(params)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if solver == "rk45":
        return integrate_rk45(vf, x0, t0, t1, grid_step=step, reltol=reltol, abstol=abstol)
    if solver == "abm4":
        return integrate_abm(vf, x0, t0, t1, step, substeps=substeps)
    raise ValueError(f"unknown solver {solver!r}")


# ---------------------------------------------------------------------------
# Persistence: columnar CSV and a binary blob for fast reload
# ---------------------------------------------------------------------------

_MAGIC = b"KRFFTRAJ"  # 8 bytes; followed by uint32 version + uint32 reserved
_VERSION = 1


def save_trajectories_csv(path, ens: EnsembleTrajectory) -> None:
    """Write `t,particle_id,x0,...,x{d-1}` rows, particles grouped per time."""
    d = ens.dim
    header = "t,particle_id," + ",".join(f"x{j}" for j in range(d))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for ti, t in enumerate(ens.times):
            for pid in range(ens.n_particles):
                coords = ",".join(repr(float(v)) for v in ens.states[ti, pid])
                fh.write(f"{float(t)!r},{pid},{coords}\n")


def load_trajectories_csv(path) -> EnsembleTrajectory:
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = data.dtype.names
    if names is None or names[:2] != ("t", "particle_id"):
        raise ValueError(f"{path}: expected header t,particle_id,x0,...")
    d = len(names) - 2
    times = np.unique(data["t"])
    n = int(data["particle_id"].max()) + 1
    states = np.empty((len(times), n, d))
    t_index = {t: i for i, t in enumerate(times)}
    rows = np.stack([data[name] for name in names[2:]], axis=-1)
    for row, t, pid in zip(rows, data["t"], data["particle_id"]):
        states[t_index[t], int(pid)] = row
    return EnsembleTrajectory(times, states)


def save_trajectories_bin(path, ens: EnsembleTrajectory) -> None:
    """Binary blob: 16-byte magic/version header, int64 shape, raw float64."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.array([_VERSION, 0], dtype="<u4").tobytes())
        fh.write(np.array(ens.states.shape, dtype="<i8").tobytes())
        fh.write(ens.times.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(ens.states, dtype="<f8").tobytes())


def load_trajectories_bin(path) -> EnsembleTrajectory:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version = np.frombuffer(fh.read(8), dtype="<u4")[0]
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        shape = tuple(np.frombuffer(fh.read(24), dtype="<i8"))
        times = np.frombuffer(fh.read(8 * shape[0]), dtype="<f8").copy()
        states = np.frombuffer(fh.read(8 * int(np.prod(shape))), dtype="<f8").reshape(shape).copy()
    return EnsembleTrajectory(times, states)
