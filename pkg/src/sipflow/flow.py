"""Particle-based Wasserstein gradient-flow solver.

Each iteration draws fresh nuisance realizations (one per particle), pushes
every particle through the random forward operator, evaluates the
data-space gradient of the discrepancy's first variation at the predicted
points, pulls it back through the operator adjoint, and applies an Adam
(or plain Euler) update. All randomness comes from counter-based
substreams keyed by (seed, iteration, purpose), and BLAS pools are pinned
to one thread inside the loop, so trajectories are bit-identical for a
fixed config regardless of scheduling or ambient thread counts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import discrepancy as disc
from .discrepancy import DiscrepancySpec, SampleCloud
from .ensemble import GaussianMixtureSpec, ParticleEnsemble, sample_mixture
from .forward import NuisanceDraw, identity_quaternion, sample_rotations
from .rng import substream

__all__ = [
    "FlowConfig",
    "FlowState",
    "FlowProblem",
    "TrajectoryRecord",
    "FlowAbortError",
    "compute_update_direction",
    "adam_step",
    "euler_step",
    "run_flow",
    "mc_estimate",
    "GaussianNuisance",
    "estimator_variance_report",
]

_STRATEGIES = ("joint#1", "shared#2", "nested#3")


@dataclass(frozen=True)
class FlowConfig:
    """Solver settings; learning_rate may be a scalar or a per-coordinate
    vector. ``particles`` is consulted only when the initial condition is
    a mixture spec rather than a concrete ensemble."""

    iterations: int
    learning_rate: object = 0.01
    adam: tuple = (0.9, 0.999, 1e-8)
    optimizer: str = "adam"
    mc_strategy: str = "joint#1"
    seed: int = 0
    snapshot_every: int = 500
    minibatch: int | None = None
    particles: int | None = None
    data_dtype: str = "float64"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        lr = np.atleast_1d(np.asarray(self.learning_rate, dtype=float))
        if np.any(lr <= 0):
            raise ValueError("learning_rate must be positive elementwise")
        b1, b2, eps = self.adam
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if not eps > 0:
            raise ValueError("adam epsilon must be > 0")
        if self.optimizer not in ("adam", "euler"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mc_strategy not in _STRATEGIES:
            raise ValueError(f"mc_strategy must be one of {_STRATEGIES}")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.minibatch is not None and self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if self.data_dtype not in ("float64", "float32"):
            raise ValueError("data_dtype must be float64 or float32")

    @property
    def dtype(self):
        return np.float32 if self.data_dtype == "float32" else np.float64


@dataclass(frozen=True)
class FlowProblem:
    """What the flow solves: a forward operator, the observed cloud, and
    the discrepancy in force."""

    operator: object
    observed: SampleCloud
    spec: DiscrepancySpec


@dataclass
class FlowState:
    ensemble: ParticleEnsemble
    adam_m: np.ndarray
    adam_v: np.ndarray
    iteration: int
    loss_trace: list = field(default_factory=list)

    @classmethod
    def initial(cls, ensemble: ParticleEnsemble) -> "FlowState":
        shape = ensemble.particles.shape
        return cls(ensemble, np.zeros(shape), np.zeros(shape), 0, [])


@dataclass
class TrajectoryRecord:
    """Per-iteration log rows plus periodic ensemble snapshots."""

    rows: list = field(default_factory=list)  # (iteration, loss, metrics dict)
    snapshots: list = field(default_factory=list)  # (iteration, ParticleEnsemble)
    wall_ms: list = field(default_factory=list)  # per-iteration wall time
    aborted: bool = False
    abort_reason: str = ""


class FlowAbortError(RuntimeError):
    """Raised when an update turns non-finite; carries the last good state."""

    def __init__(self, message: str, state: FlowState):
        super().__init__(message)
        self.state = state


def _draws_to_arrays(draws, operator) -> tuple:
    rotations = np.stack([d.rotation for d in draws])
    noises = np.stack([np.broadcast_to(np.atleast_1d(d.noise), operator.output_shape) for d in draws])
    return rotations, noises


def compute_update_direction(
    ensemble: ParticleEnsemble,
    observed: SampleCloud,
    operator,
    spec: DiscrepancySpec,
    draws,
    dtype=np.float64,
) -> np.ndarray:
    """Descent direction rows -R(theta_i, omega_i), Method-1 pairing (one
    draw per particle)."""
    if len(draws) != ensemble.count:
        raise ValueError("need exactly one nuisance draw per particle")
    rotations, noises = _draws_to_arrays(draws, operator)
    direction, _, _ = _direction_batch(
        ensemble.particles, rotations, noises, observed.points, operator, spec, dtype, None
    )
    return direction


def _direction_batch(theta, rotations, noises, observed_pts, operator, spec, dtype, obs_within):
    pred = operator.apply_batch(theta, rotations, noises)
    flat = pred.reshape(pred.shape[0], -1)
    loss, grads = disc.value_and_grads(flat, observed_pts, spec, dtype=dtype, obs_within=obs_within)
    cots = grads.reshape(pred.shape)
    pullback = operator.vjp_batch(theta, rotations, cots)
    return -pullback, loss, flat


def adam_step(state: FlowState, direction: np.ndarray, config: FlowConfig) -> FlowState:
    """Standard Adam with bias correction, treating -direction as the
    gradient. Aborts (with the last good state attached) on non-finite
    directions."""
    direction = np.asarray(direction, dtype=float)
    if direction.shape != state.ensemble.particles.shape:
        raise ValueError("direction shaped unlike the particles")
    if not np.all(np.isfinite(direction)):
        raise FlowAbortError("non-finite update direction", state)
    beta1, beta2, eps = config.adam
    grad = -direction
    t = state.iteration + 1
    m = beta1 * state.adam_m + (1 - beta1) * grad
    v = beta2 * state.adam_v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    lr = np.atleast_1d(np.asarray(config.learning_rate, dtype=float))
    new_particles = state.ensemble.particles - lr * m_hat / (np.sqrt(v_hat) + eps)
    ensemble = ParticleEnsemble(new_particles, generation=t)
    return FlowState(ensemble, m, v, t, state.loss_trace)


def euler_step(state: FlowState, direction: np.ndarray, config: FlowConfig) -> FlowState:
    """Plain forward Euler: theta += dt * direction (dt = learning_rate)."""
    direction = np.asarray(direction, dtype=float)
    if not np.all(np.isfinite(direction)):
        raise FlowAbortError("non-finite update direction", state)
    lr = np.atleast_1d(np.asarray(config.learning_rate, dtype=float))
    t = state.iteration + 1
    ensemble = ParticleEnsemble(state.ensemble.particles + lr * direction, generation=t)
    return FlowState(ensemble, state.adam_m, state.adam_v, t, state.loss_trace)


def _resolve_init(init, config: FlowConfig) -> ParticleEnsemble:
    if isinstance(init, ParticleEnsemble):
        return init
    if isinstance(init, GaussianMixtureSpec):
        if config.particles is None:
            raise ValueError("config.particles required when init is a mixture spec")
        return sample_mixture(init, config.particles, substream(config.seed, "init"))
    raise ValueError(f"init must be an ensemble or mixture spec, got {type(init)!r}")


def run_flow(
    problem: FlowProblem,
    init,
    config: FlowConfig,
    metric_fn=None,
    noise_sigma: float = 0.0,
    substream_index=None,
    stop_when=None,
) -> tuple:
    """Execute the full gradient-descent loop and return
    (final FlowState, TrajectoryRecord).

    Per iteration: draw per-particle noises and (if the operator uses
    them) rotations, push particles, assemble the predicted cloud, form
    the descent direction, and update. ``metric_fn(ensemble) -> dict`` is
    evaluated on snapshot iterations; when ``stop_when(metrics)`` returns
    true there (including at iteration 0) the loop ends early.
    ``substream_index`` remaps which noise-block row each particle
    consumes (identity by default); it exists so that permuting particles
    together with their stream keys permutes trajectories exactly.
    """
    state = FlowState.initial(_resolve_init(init, config))
    n = state.ensemble.count
    record = TrajectoryRecord()
    obs = problem.observed.points
    operator = problem.operator
    spec = problem.spec
    dtype = config.dtype
    index = np.arange(n) if substream_index is None else np.asarray(substream_index, dtype=int)
    if index.shape != (n,):
        raise ValueError("substream_index must have one entry per particle")
    out_shape = operator.output_shape
    step = adam_step if config.optimizer == "adam" else euler_step

    with threadpool_limits(limits=1, user_api="blas"):
        obs_work = obs.astype(dtype, copy=False)
        full_obs_within = disc.within_cloud_term(obs_work, spec, dtype)
        record.snapshots.append((0, state.ensemble))
        if stop_when is not None and metric_fn is not None:
            if stop_when(metric_fn(state.ensemble)):
                return state, record
        for it in range(config.iterations):
            t_start = time.perf_counter()
            block = substream(config.seed, it, "noise").standard_normal(
                (n, *out_shape), dtype=dtype
            )
            noises = noise_sigma * block[index]
            if operator.uses_rotation:
                rots = sample_rotations(substream(config.seed, it, "rotation"), n)[index]
            else:
                rots = np.broadcast_to(identity_quaternion(), (n, 4))
            if config.minibatch is not None and config.minibatch < obs_work.shape[0]:
                sel = substream(config.seed, it, "minibatch").choice(
                    obs_work.shape[0], size=config.minibatch, replace=False
                )
                batch = obs_work[sel]
                obs_within = None
            else:
                batch = obs_work
                obs_within = full_obs_within
            direction, loss, _ = _direction_batch(
                state.ensemble.particles, rots, noises, batch, operator, spec, dtype, obs_within
            )
            if not np.isfinite(loss):
                record.aborted = True
                record.abort_reason = f"non-finite loss at iteration {it}"
                record.snapshots.append((it, state.ensemble))
                return state, record
            try:
                state = step(state, direction, config)
            except FlowAbortError as err:
                record.aborted = True
                record.abort_reason = str(err)
                record.snapshots.append((it, err.state.ensemble))
                return err.state, record
            wall = time.perf_counter() - t_start
            state.loss_trace.append((state.iteration, loss, wall))
            record.wall_ms.append(wall * 1e3)
            is_snap = state.iteration % config.snapshot_every == 0 or state.iteration == config.iterations
            metrics = {}
            if is_snap:
                metrics = metric_fn(state.ensemble) if metric_fn is not None else {}
                record.snapshots.append((state.iteration, state.ensemble))
            record.rows.append((state.iteration, loss, metrics))
            if is_snap and stop_when is not None and stop_when(metrics):
                break
    return state, record


# --------------------------------------------------------------------------
# Monte Carlo coupling strategies and their variance diagnostics


def _theta_sampler(rho_theta):
    if isinstance(rho_theta, GaussianMixtureSpec):
        return lambda rng, k: sample_mixture(rho_theta, k, rng).particles[:, 0]
    if isinstance(rho_theta, ParticleEnsemble):
        pts = rho_theta.particles[:, 0]
        return lambda rng, k: rng.choice(pts, size=k, replace=True)
    raise ValueError("rho_theta must be an ensemble or a mixture spec")


def mc_estimate(phi, rho_theta, mu_omega, strategy: str, n: int, k: int, rng) -> tuple:
    """Monte Carlo estimate of E[phi(theta, omega)] plus a jackknife
    standard error over the theta index.

    joint#1 pairs one omega with each theta; shared#2 reuses one omega set
    of size k for every theta; nested#3 draws a fresh omega set per theta.
    """
    if strategy not in _STRATEGIES:
        raise ValueError(f"strategy must be one of {_STRATEGIES}")
    if n < 1 or k < 1:
        raise ValueError("n and k must be >= 1")
    draw_theta = _theta_sampler(rho_theta)
    thetas = draw_theta(rng, n)
    if strategy == "joint#1":
        omegas = mu_omega.sample(rng, n)
        rows = np.asarray(phi(thetas, omegas), dtype=float)
    elif strategy == "shared#2":
        omegas = mu_omega.sample(rng, k)
        rows = np.asarray(phi(thetas[:, None], omegas[None, :]), dtype=float).mean(axis=1)
    else:
        omegas = mu_omega.sample(rng, n * k).reshape(n, k)
        rows = np.asarray(phi(thetas[:, None], omegas), dtype=float).mean(axis=1)
    estimate = float(rows.mean())
    if n == 1:
        return estimate, 0.0
    centered = rows - rows.mean()
    se = float(np.sqrt(centered @ centered / (n * (n - 1))))
    return estimate, se


class GaussianNuisance:
    """Scalar Gaussian nuisance law, the omega model of the diagnostics."""

    def __init__(self, mean: float = 0.0, sigma: float = 1.0):
        self.mean = float(mean)
        self.sigma = float(sigma)

    def sample(self, rng, count: int) -> np.ndarray:
        return self.mean + self.sigma * rng.standard_normal(count)


def estimator_variance_report(
    phi, rho_theta, mu_omega, n: int, k: int, replicates: int, rng, inner_budget: int = 1_000_000
) -> list:
    """Empirical versus analytic estimator variances for all three
    strategies.

    The analytic expressions need Var[phi], Var_theta[E_omega phi],
    Var_omega[E_theta phi] and E_theta[Var_omega phi]; these inner
    expectations are estimated once with a high-budget Monte Carlo grid.
    Returns one dict per strategy with empirical, analytic, and ratio.
    """
    if replicates < 50:
        raise ValueError("need at least 50 replicates")
    draw_theta = _theta_sampler(rho_theta)
    side = max(2, int(np.sqrt(inner_budget)))
    thetas = draw_theta(rng, side)
    omegas = mu_omega.sample(rng, side)
    grid = np.asarray(phi(thetas[:, None], omegas[None, :]), dtype=float)
    var_phi = float(grid.var())
    row_means = grid.mean(axis=1)  # E_omega phi at fixed theta
    col_means = grid.mean(axis=0)  # E_theta phi at fixed omega
    var_theta_mean = float(row_means.var())
    var_omega_mean = float(col_means.var())
    mean_theta_var = float(grid.var(axis=1).mean())
    analytic = {
        "joint#1": var_phi / n,
        "shared#2": var_phi / (n * k)
        + (1 / n - 1 / (n * k)) * var_theta_mean
        + (1 / k - 1 / (n * k)) * var_omega_mean,
        "nested#3": mean_theta_var / (n * k) + var_theta_mean / n,
    }
    base = int(rng.integers(2**63 - 1))
    report = []
    for strategy in _STRATEGIES:
        estimates = np.array(
            [
                mc_estimate(
                    phi, rho_theta, mu_omega, strategy, n, k,
                    substream(base, "var-report", strategy, rep),
                )[0]
                for rep in range(replicates)
            ]
        )
        empirical = float(estimates.var(ddof=1))
        report.append(
            {
                "strategy": strategy,
                "empirical": empirical,
                "analytic": analytic[strategy],
                "ratio": empirical / analytic[strategy] if analytic[strategy] > 0 else float("nan"),
                "mean": float(estimates.mean()),
                "stderr": float(estimates.std(ddof=1) / np.sqrt(replicates)),
            }
        )
    return report
