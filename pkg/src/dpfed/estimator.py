"""Single-trajectory optimization core.

The update couples two mechanisms: query points x_t are importance-weighted
running averages of the iterates w_t (weights alpha_t = t), and the gradient
estimate d_t at x_t is a corrected-momentum recursion (weights beta_t = 1/t)
that reuses each sample for two gradient evaluations.  The weighted estimate
q_t = alpha_t * d_t drives a projected gradient step on w.

With these weight choices q admits the running-sum form
q_{t+1} = q_t + g_{t+1} + alpha_t * (g_{t+1} - g~_t), i.e. q_t is a sum of
per-sample increments s_tau, each bounded in norm by S = G + 2*L*D.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .geometry import ConvexDomain, as_vector
from .privacy import gaussian_sample
from .problems import Dataset, ProblemInstance
from .records import RunRecord, TrajectoryTrace


class DivergenceError(RuntimeError):
    """Iterates or losses became non-finite; carries the failing round."""

    def __init__(self, round_index: int, what: str):
        self.round_index = round_index
        super().__init__(f"{what} became non-finite at round {round_index}")


@dataclass(frozen=True)
class Schedule:
    """Importance weights alpha_t = t, momentum weights beta_t = 1/t, and eta.

    Weights are computed in exact integer arithmetic and converted to float,
    so (1 - beta(t+1)) * alpha(t+1) == alpha(t) holds without drift.
    """

    T: int
    eta: float

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"horizon must be >= 1, got {self.T}")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ValueError(f"eta must be positive and finite, got {self.eta}")

    @staticmethod
    def alpha(t: int) -> float:
        return float(t)

    @staticmethod
    def alpha_sum(t: int) -> float:
        return float(t * (t + 1) // 2)

    @staticmethod
    def beta(t: int) -> float:
        return 1.0 / t


def storm_update(d_prev, g_curr, g_tilde_prev, beta_t: float) -> np.ndarray:
    """Corrected-momentum estimate: g_t + (1 - beta_t) * (d_{t-1} - g~_{t-1})."""
    g_curr = as_vector(g_curr)
    d_prev = as_vector(d_prev, g_curr.size)
    g_tilde_prev = as_vector(g_tilde_prev, g_curr.size)
    if not 0.0 <= beta_t <= 1.0:
        raise ValueError(f"beta_t must lie in [0, 1], got {beta_t}")
    return g_curr + (1.0 - beta_t) * (d_prev - g_tilde_prev)


def q_step(q_prev, g_curr, g_tilde_prev, alpha_prev: float) -> np.ndarray:
    """Running-sum form of the weighted estimate:
    q_{t+1} = q_t + g_{t+1} + alpha_t * (g_{t+1} - g~_t)."""
    g_curr = as_vector(g_curr)
    q_prev = as_vector(q_prev, g_curr.size)
    g_tilde_prev = as_vector(g_tilde_prev, g_curr.size)
    if alpha_prev < 0:
        raise ValueError(f"alpha_prev must be >= 0, got {alpha_prev}")
    return q_prev + g_curr + alpha_prev * (g_curr - g_tilde_prev)


def increments(g_curr, g_tilde_prev, alpha_prev: float) -> np.ndarray:
    """Per-sample increment s_t = g_t + alpha_{t-1} * (g_t - g~_{t-1})."""
    g_curr = as_vector(g_curr)
    g_tilde_prev = as_vector(g_tilde_prev, g_curr.size)
    if alpha_prev < 0:
        raise ValueError(f"alpha_prev must be >= 0, got {alpha_prev}")
    return g_curr + alpha_prev * (g_curr - g_tilde_prev)


def anytime_average(x_curr, w_next, t: int) -> np.ndarray:
    """x_{t+1} = (1 - alpha_{t+1}/alpha_{1:t+1}) x_t + (alpha_{t+1}/alpha_{1:t+1}) w_{t+1}.

    With alpha_t = t the weight on w_{t+1} is 2/(t+2).
    """
    if t < 1:
        raise ValueError(f"round index must be >= 1, got {t}")
    x_curr = np.asarray(x_curr, dtype=np.float64)
    w_next = as_vector(w_next, x_curr.size)
    weight = Schedule.alpha(t + 1) / Schedule.alpha_sum(t + 1)
    return (1.0 - weight) * x_curr + weight * w_next


def ogd_step(w_curr, q_tilde, eta: float, domain: ConvexDomain) -> np.ndarray:
    """Projected step w_{t+1} = Pi(w_t - eta * q~_t)."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    w_curr = np.asarray(w_curr, dtype=np.float64)
    q_tilde = as_vector(q_tilde, w_curr.size)
    return domain.project(w_curr - eta * q_tilde)


@dataclass
class EstimatorState:
    """Corrected-momentum state of one machine: d_t, q_t = alpha_t * d_t."""

    d_curr: np.ndarray
    q_curr: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, dim: int) -> "EstimatorState":
        return cls(d_curr=np.zeros(dim), q_curr=np.zeros(dim), t=0)

    def update(self, g_curr, g_tilde_prev) -> np.ndarray:
        """Advance one round; returns the new weighted estimate q_t."""
        t_next = self.t + 1
        self.d_curr = storm_update(self.d_curr, g_curr, g_tilde_prev, Schedule.beta(t_next))
        self.q_curr = Schedule.alpha(t_next) * self.d_curr
        self.t = t_next
        return self.q_curr


@dataclass
class TrajectoryState:
    """Server-side iterate state: w_t, and the averages x_t, x_{t-1}."""

    w_curr: np.ndarray
    x_curr: np.ndarray
    x_prev: np.ndarray
    t: int = 1

    @classmethod
    def initial(cls, x1: np.ndarray) -> "TrajectoryState":
        x1 = np.array(x1, dtype=np.float64)
        return cls(w_curr=x1, x_curr=x1.copy(), x_prev=x1.copy(), t=1)

    def advance(self, q_tilde, eta: float, domain: ConvexDomain) -> None:
        w_next = ogd_step(self.w_curr, q_tilde, eta, domain)
        x_next = anytime_average(self.x_curr, w_next, self.t)
        self.x_prev = self.x_curr
        self.x_curr = x_next
        self.w_curr = w_next
        self.t += 1


def run_mu2_sgd(
    problem: ProblemInstance,
    schedule: Schedule,
    noise_variances: np.ndarray | None = None,
    seed: int = 0,
    *,
    x_init: np.ndarray | None = None,
    dataset: Dataset | None = None,
    record_trace: bool = False,
) -> RunRecord:
    """Single-machine trajectory, optionally with per-round Gaussian noise.

    ``noise_variances`` is a length-T array of per-round variances for the
    injected noise Y_t added to q_t before the projected step (None or zeros
    for the noiseless method).  A run with a zero schedule is bit-identical
    to a noiseless run under the same seed, because data and noise use
    independent streams and zero-variance draws do not touch the stream.
    """
    if problem.n_machines != 1:
        raise ValueError("single-trajectory runner expects a single-machine problem; "
                         "use the federated runners for M > 1")
    T, d = schedule.T, problem.dim
    if noise_variances is not None:
        noise_variances = np.asarray(noise_variances, dtype=np.float64)
        if noise_variances.shape != (T,):
            raise ValueError(f"noise_variances must have shape ({T},), "
                             f"got {noise_variances.shape}")
        if np.any(noise_variances < 0):
            raise ValueError("noise variances must be >= 0")
    if dataset is None:
        dataset = problem.draw_dataset(0, T, rngmod.stream(seed, rngmod.DATA, 0))
    if len(dataset) < T:
        raise ValueError(f"dataset has {len(dataset)} samples, horizon needs {T}")
    noise_rng = rngmod.stream(seed, rngmod.NOISE, 0)

    x1 = problem.domain.project(np.zeros(d)) if x_init is None else as_vector(x_init, d)
    traj = TrajectoryState.initial(x1)
    est = EstimatorState.initial(d)

    opt = problem.minimizer_oracle()
    track_pop = problem.has_population_gradient
    loss_rows = np.empty(T)
    qn_rows = np.empty(T)
    sig_rows = np.zeros(T)
    eps_rows = np.empty(T) if track_pop else None
    exc_rows = np.empty(T) if opt is not None else None
    tr = _TraceBuilder(T, d, x1, track_pop) if record_trace else None

    x_last_query = x1
    for t in range(1, T + 1):
        x_t, x_prev = traj.x_curr, traj.x_prev
        z = dataset[t - 1]
        g = problem.grad(x_t, z)
        g_tilde = problem.grad(x_prev, z)
        q = est.update(g, g_tilde)

        var_t = float(noise_variances[t - 1]) if noise_variances is not None else 0.0
        if var_t > 0.0:
            q_tilde = q + gaussian_sample(d, var_t, noise_rng)
        else:
            q_tilde = q

        loss_t = (
            problem.population_loss(x_t)
            if problem.cheap_population_loss
            else problem.loss(x_t, z)
        )
        if not np.isfinite(loss_t):
            raise DivergenceError(t, "loss")
        loss_rows[t - 1] = loss_t
        qn_rows[t - 1] = np.linalg.norm(q_tilde)
        sig_rows[t - 1] = var_t
        if exc_rows is not None:
            exc_rows[t - 1] = problem.population_loss(x_t) - opt.f_star
        if track_pop:
            gp = problem.machine_population_grad(0, x_t)
            eps_rows[t - 1] = float(np.sum((q - Schedule.alpha(t) * gp) ** 2))
        if tr is not None:
            tr.record_round(t, q, q_tilde, g, g_tilde, gp if track_pop else None)

        x_last_query = x_t
        traj.advance(q_tilde, schedule.eta, problem.domain)
        if not np.all(np.isfinite(traj.w_curr)):
            raise DivergenceError(t, "iterate")
        if tr is not None:
            tr.record_state(t, traj)

    final_metrics = {
        "final_loss": float(loss_rows[-1]),
        "grad_evals": 2 * T,
        "rng_algorithm": rngmod.RNG_ALGORITHM,
    }
    if exc_rows is not None:
        final_metrics["final_excess_loss"] = float(exc_rows[-1])
    return RunRecord(
        mode="single",
        seed=seed,
        eta=schedule.eta,
        loss=loss_rows,
        q_tilde_norm=qn_rows,
        sigma_sq=sig_rows,
        x_final=x_last_query,
        excess_loss=exc_rows,
        eps_norm_sq=eps_rows,
        final_metrics=final_metrics,
        trace=tr.build() if tr is not None else None,
    )


class _TraceBuilder:
    """Accumulates per-round vectors for a TrajectoryTrace."""

    def __init__(self, T: int, d: int, x1: np.ndarray, track_pop: bool):
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

    def record_round(self, t, q, q_tilde, g, g_tilde, gp):
        self.q[t - 1] = q
        self.q_tilde[t - 1] = q_tilde
        self.s[t - 1] = increments(g, g_tilde, Schedule.alpha(t - 1))
        if gp is not None:
            # alpha_0 = 0 makes the previous-gradient term vanish at t = 1.
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
