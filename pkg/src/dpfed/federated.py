"""Synchronized M-machine simulation of the private federated optimizer.

Each round the server broadcasts the current query pair (x_t, x_{t-1});
every machine consumes exactly one fresh sample, evaluates two gradients
from it, advances its corrected-momentum estimate, and sends one vector up.
Noise placement is the only difference between the two trust modes:

* untrusted -- each machine perturbs its message with machine-local Gaussian
  noise before sending; the server averages the noisy messages.
* trusted -- machines send raw estimates; the server averages and then adds
  a single (M times smaller-variance) Gaussian before updating.

Aggregation is a sequential mean in ascending machine index, so parallel and
single-threaded execution produce byte-identical records.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .estimator import (
    DivergenceError,
    EstimatorState,
    Schedule,
    TrajectoryState,
    increments,
)
from .geometry import as_vector
from .privacy import (
    TRUSTED,
    UNTRUSTED,
    NoiseSchedule,
    account,
    calibrate,
    gaussian_sample,
    privacy_report,
)
from .problems import Dataset, ProblemConstants, ProblemInstance
from .records import RunRecord, TrajectoryTrace


def learning_rate(mode: str, rho: float, D: float, M: int, S: float,
                  T: int, d: int, L: float) -> float:
    """Theorem step size: min of the privacy-limited and smoothness-limited rates.

    The privacy-limited branch is rho*D*sqrt(M)/(2*S*T*sqrt(d)) for the
    untrusted server and rho*D*M/(2*S*T*sqrt(d)) for the trusted one; both
    modes share the 1/(4*L*T) cap.
    """
    values = {"rho": rho, "D": D, "M": M, "S": S, "T": T, "d": d, "L": L}
    for name, v in values.items():
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"{name} must be positive and finite, got {v}")
    machine_gain = math.sqrt(M) if mode == UNTRUSTED else float(M)
    if mode not in (UNTRUSTED, TRUSTED):
        raise ValueError(f"unknown mode {mode!r}")
    return min(rho * D * machine_gain / (2.0 * S * T * math.sqrt(d)), 1.0 / (4.0 * L * T))


def theoretical_bound(mode: str, constants: ProblemConstants, G_star: float,
                      T: int, M: int, rho: float, d: int) -> float:
    """Closed-form excess-loss guarantee at horizon T.

    4D * ((G* + 2LD)/T + 2S*sqrt(d)/(rho*T*sqrt(M)) + sigma_tilde/sqrt(TM)),
    with sqrt(M) replaced by M in the middle term for the trusted server.
    """
    if mode not in (UNTRUSTED, TRUSTED):
        raise ValueError(f"unknown mode {mode!r}")
    if not 0 <= G_star <= constants.G:
        raise ValueError(f"G_star must lie in [0, G={constants.G}], got {G_star}")
    if T < 1 or M < 1 or rho <= 0 or d < 1:
        raise ValueError(f"need T, M, d >= 1 and rho > 0, got T={T}, M={M}, rho={rho}, d={d}")
    D, L, S = constants.D, constants.L, constants.S
    machine_gain = math.sqrt(M) if mode == UNTRUSTED else float(M)
    return 4.0 * D * (
        (G_star + 2.0 * L * D) / T
        + 2.0 * S * math.sqrt(d) / (rho * T * machine_gain)
        + constants.sigma_tilde / math.sqrt(T * M)
    )


def g_star_for(problem: ProblemInstance) -> tuple[float, str]:
    """G* from the minimizer oracle, or the conservative Lipschitz fallback."""
    opt = problem.minimizer_oracle()
    if opt is None:
        return problem.constants.G, "lipschitz_bound"
    return opt.grad_norm, "minimizer_oracle"


@dataclass
class MachineState:
    """One simulated machine: estimator state, dataset cursor, local noise."""

    index: int
    problem: ProblemInstance
    dataset: Dataset
    estimator: EstimatorState
    noise_variances: np.ndarray | None = None  # untrusted mode only
    noise_rng: np.random.Generator | None = None
    cursor: int = 0
    last_increment: np.ndarray | None = None
    last_sample_loss: float = 0.0


def machine_round(state: MachineState, x_t: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
    """One machine's round: two gradients from one fresh sample, then the message.

    Returns q_{t,i} plus machine-local Gaussian noise when the machine owns a
    noise stream (untrusted placement), or the raw q_{t,i} otherwise.
    """
    if state.cursor >= len(state.dataset):
        raise ValueError(f"machine {state.index} exhausted its dataset "
                         f"after {state.cursor} rounds")
    problem = state.problem
    z = state.dataset[state.cursor]
    state.cursor += 1
    t = state.estimator.t + 1
    g = problem.grad(x_t, z)
    g_tilde = problem.grad(x_prev, z)
    q = state.estimator.update(g, g_tilde)
    state.last_increment = increments(g, g_tilde, Schedule.alpha(t - 1))
    state.last_sample_loss = problem.loss(x_t, z)
    if state.noise_variances is None:
        return q
    var_t = float(state.noise_variances[t - 1])
    if var_t == 0.0:
        return q
    return q + gaussian_sample(problem.dim, var_t, state.noise_rng)


def aggregate(messages: list[np.ndarray], M: int) -> np.ndarray:
    """Arithmetic mean, summed in ascending machine index."""
    if len(messages) != M:
        raise ValueError(f"expected {M} messages, got {len(messages)}")
    total = np.array(messages[0], dtype=np.float64)
    for m in messages[1:]:
        total += as_vector(m, total.size)
    return total / M


@dataclass
class ServerState:
    """Server-side state: the iterate trajectory plus the trusted-mode noise stream."""

    trajectory: TrajectoryState
    noise_rng: np.random.Generator | None = None  # trusted mode only

    @property
    def round(self) -> int:
        return self.trajectory.t


@dataclass
class FederatedConfig:
    """Inputs of a federated run; exactly one of rho / noise_schedule."""

    mode: str
    M: int
    T: int
    rho: float | None = None
    noise_schedule: NoiseSchedule | None = None
    eta: float | None = None
    master_seed: int = 0
    x_init: np.ndarray | None = None
    datasets: list[Dataset] | None = None
    deltas: tuple = ()
    record_trace: bool = False
    workers: int = 0
    config_echo: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (UNTRUSTED, TRUSTED):
            raise ValueError(f"mode must be untrusted or trusted, got {self.mode!r}")
        if self.M < 1 or self.T < 1:
            raise ValueError(f"need M, T >= 1, got M={self.M}, T={self.T}")
        if (self.rho is None) == (self.noise_schedule is None):
            raise ValueError("provide exactly one of rho / noise_schedule")
        if self.rho is not None and self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.noise_schedule is not None:
            ns = self.noise_schedule
            if ns.mode != self.mode:
                raise ValueError(f"noise schedule is for {ns.mode}, run is {self.mode}")
            if ns.n_rounds != self.T or (ns.n_machines not in (None, self.M)):
                raise ValueError("noise schedule shape does not match run dimensions")


def run_untrusted(problem: ProblemInstance, config: FederatedConfig) -> RunRecord:
    """Federated run with machine-side noise placement."""
    if config.mode != UNTRUSTED:
        raise ValueError(f"config mode is {config.mode!r}, expected {UNTRUSTED!r}")
    return _run(problem, config)


def run_trusted(problem: ProblemInstance, config: FederatedConfig) -> RunRecord:
    """Federated run with server-side noise placement."""
    if config.mode != TRUSTED:
        raise ValueError(f"config mode is {config.mode!r}, expected {TRUSTED!r}")
    return _run(problem, config)


def _resolve_schedule(problem, config) -> NoiseSchedule:
    if config.noise_schedule is not None:
        return config.noise_schedule
    return calibrate(config.rho, problem.constants.S, config.T, config.M, config.mode)


def _resolve_eta(problem, config) -> float:
    if config.eta is not None:
        if config.eta <= 0:
            raise ValueError(f"eta override must be positive, got {config.eta}")
        return config.eta
    if config.rho is None:
        raise ValueError("an explicit noise schedule requires an eta override "
                         "(the theorem rate needs rho)")
    c = problem.constants
    return learning_rate(config.mode, config.rho, c.D, config.M, c.S,
                         config.T, problem.dim, c.L)


def _run(problem: ProblemInstance, config: FederatedConfig) -> RunRecord:
    mode, M, T, d = config.mode, config.M, config.T, problem.dim
    seed = config.master_seed
    schedule = _resolve_schedule(problem, config)
    eta = _resolve_eta(problem, config)

    datasets = config.datasets
    if datasets is None:
        datasets = problem.default_datasets(M, T, seed)
    if len(datasets) != M:
        raise ValueError(f"need {M} datasets, got {len(datasets)}")
    for i, ds in enumerate(datasets):
        if len(ds) < T:
            raise ValueError(f"dataset {i} has {len(ds)} samples, horizon needs {T}")

    machines = [
        MachineState(
            index=i,
            problem=problem,
            dataset=datasets[i],
            estimator=EstimatorState.initial(d),
            noise_variances=schedule.machine_variances(i) if mode == UNTRUSTED else None,
            noise_rng=rngmod.stream(seed, rngmod.NOISE, i) if mode == UNTRUSTED else None,
        )
        for i in range(M)
    ]
    x1 = (problem.domain.project(np.zeros(d)) if config.x_init is None
          else as_vector(config.x_init, d))
    if not problem.domain.contains(x1):
        raise ValueError("x_init lies outside the feasible domain")
    server = ServerState(
        trajectory=TrajectoryState.initial(x1),
        noise_rng=rngmod.stream(seed, rngmod.NOISE, 0) if mode == TRUSTED else None,
    )
    traj = server.trajectory

    opt = problem.minimizer_oracle()
    track_pop = problem.has_population_gradient
    loss_rows = np.empty(T)
    qn_rows = np.empty(T)
    sig_rows = np.empty(T)
    eps_rows = np.empty(T) if track_pop else None
    exc_rows = np.empty(T) if opt is not None else None
    tr = _FederatedTraceBuilder(T, d, x1, track_pop) if config.record_trace else None

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        x_last_query = x1
        for t in range(1, T + 1):
            x_t, x_prev = traj.x_curr, traj.x_prev
            if pool is not None:
                messages = list(pool.map(
                    lambda m: machine_round(m, x_t, x_prev), machines))
            else:
                messages = [machine_round(m, x_t, x_prev) for m in machines]
            agg = aggregate(messages, M)
            if mode == TRUSTED:
                q_agg = agg
                var_t = float(schedule.variances[t - 1])
                if var_t > 0:
                    q_tilde = agg + gaussian_sample(d, var_t, server.noise_rng)
                else:
                    q_tilde = agg
                sig_rows[t - 1] = var_t
            else:
                q_tilde = agg
                q_agg = None
                if eps_rows is not None or tr is not None:
                    q_agg = aggregate([m.estimator.q_curr for m in machines], M)
                sig_rows[t - 1] = float(np.mean(schedule.variances[:, t - 1]))

            if problem.cheap_population_loss:
                loss_t = problem.population_loss(x_t)
            else:
                loss_t = float(np.mean([m.last_sample_loss for m in machines]))
            if not np.isfinite(loss_t):
                raise DivergenceError(t, "loss")
            loss_rows[t - 1] = loss_t
            qn_rows[t - 1] = np.linalg.norm(q_tilde)
            if exc_rows is not None:
                exc_rows[t - 1] = problem.population_loss(x_t) - opt.f_star
            gp = problem.population_grad(x_t) if track_pop else None
            if eps_rows is not None:
                eps_rows[t - 1] = float(np.sum((q_agg - Schedule.alpha(t) * gp) ** 2))
            if tr is not None:
                s_mean = aggregate([m.last_increment for m in machines], M)
                tr.record_round(t, q_agg, q_tilde, s_mean, gp)

            x_last_query = x_t
            traj.advance(q_tilde, eta, problem.domain)
            if not np.all(np.isfinite(traj.w_curr)):
                raise DivergenceError(t, "iterate")
            if tr is not None:
                tr.record_state(t, traj)
    finally:
        if pool is not None:
            pool.shutdown()

    privacy = None
    if not schedule.is_zero:
        rho_out = account(schedule, problem.constants.S, M)
        rho_scalar = float(np.max(rho_out)) if mode == UNTRUSTED else rho_out
        privacy = privacy_report(mode, rho_scalar, config.deltas)

    if opt is None:
        g_star, g_star_source = problem.constants.G, "lipschitz_bound"
    else:
        g_star, g_star_source = opt.grad_norm, "minimizer_oracle"
    final_metrics = {
        "final_loss": float(loss_rows[-1]),
        "grad_evals": 2 * M * T,
        "g_star": g_star,
        "g_star_source": g_star_source,
        "rng_algorithm": rngmod.RNG_ALGORITHM,
    }
    if exc_rows is not None:
        final_metrics["final_excess_loss"] = float(exc_rows[-1])
    if hasattr(problem, "accuracy"):
        final_metrics["accuracy"] = problem.accuracy(x_last_query)
        final_metrics["population_loss"] = problem.population_loss(x_last_query)

    echo = dict(config.config_echo) if config.config_echo else {
        "mode": mode, "M": M, "T": T, "rho": config.rho,
        "eta_override": config.eta, "seed": seed,
    }
    return RunRecord(
        mode=mode,
        seed=seed,
        eta=eta,
        loss=loss_rows,
        q_tilde_norm=qn_rows,
        sigma_sq=sig_rows,
        x_final=x_last_query,
        excess_loss=exc_rows,
        eps_norm_sq=eps_rows,
        privacy=privacy,
        config=echo,
        final_metrics=final_metrics,
        trace=tr.build() if tr is not None else None,
    )


class _FederatedTraceBuilder:
    """Accumulates aggregate-level per-round vectors."""

    def __init__(self, T, d, x1, track_pop):
        self.w = np.empty((T + 1, d))
        self.x = np.empty((T + 1, d))
        self.w[0] = x1
        self.x[0] = x1
        self.q = np.empty((T, d))
        self.q_tilde = np.empty((T, d))
        self.s = np.empty((T, d))
        self.s_bar = np.empty((T, d)) if track_pop else None
        self.grad_pop = np.empty((T, d)) if track_pop else None
        self._gp_prev = None

    def record_round(self, t, q_agg, q_tilde, s_mean, gp):
        self.q[t - 1] = q_agg
        self.q_tilde[t - 1] = q_tilde
        self.s[t - 1] = s_mean
        if gp is not None:
            gp_prev = gp if t == 1 else self._gp_prev
            self.s_bar[t - 1] = increments(gp, gp_prev, Schedule.alpha(t - 1))
            self.grad_pop[t - 1] = gp
            self._gp_prev = gp

    def record_state(self, t, traj):
        self.w[t] = traj.w_curr
        self.x[t] = traj.x_curr

    def build(self) -> TrajectoryTrace:
        return TrajectoryTrace(
            w=self.w, x=self.x, q=self.q, q_tilde=self.q_tilde,
            s=self.s, s_bar=self.s_bar, grad_pop=self.grad_pop,
        )
