"""Empirical oracles for the optimizer's analytic guarantees.

Each check here confronts a claim (sensitivity indicator structure, the
increment decomposition, error decay, pathwise regret inequalities,
convergence against the closed-form bound, the martingale second-moment
identity) with simulation, and reports a signed margin: positive margins mean
the claim held with slack, negative ones that it was violated.  Statistical
checks state their tolerance in standard errors so pass/fail is reproducible
under fixed seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .estimator import EstimatorState, Schedule, run_mu2_sgd
from .geometry import sample_point
from .problems import Dataset, ProblemInstance, synthetic_logistic, synthetic_quadratic
from .records import RunRecord, TrajectoryTrace


def _payload_equal(a, b) -> bool:
    if isinstance(a, tuple) and isinstance(b, tuple):
        return len(a) == len(b) and all(_payload_equal(u, v) for u, v in zip(a, b))
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(a, b)
    return a == b


@dataclass(frozen=True)
class NeighborPair:
    """Two datasets of equal length that differ only at round ``tau_star`` (1-based)."""

    base: Dataset
    variant: Dataset
    tau_star: int

    def __post_init__(self):
        if len(self.base) != len(self.variant):
            raise ValueError("neighboring datasets must have equal length")
        if not 1 <= self.tau_star <= len(self.base):
            raise ValueError(f"tau_star must lie in [1, {len(self.base)}], got {self.tau_star}")
        for t in range(len(self.base)):
            same = _payload_equal(self.base[t], self.variant[t])
            if t == self.tau_star - 1:
                continue  # the differing slot may (degenerately) also be equal
            if not same:
                raise ValueError(f"datasets differ at round {t + 1}, not only at {self.tau_star}")


@dataclass(frozen=True)
class SensitivityTrace:
    """Per-round message distance under a fixed query sequence."""

    deltas: np.ndarray
    tau_star: int

    def zero_before_tau(self) -> bool:
        return bool(np.all(self.deltas[: self.tau_star - 1] == 0.0))

    def max_delta(self) -> float:
        return float(np.max(self.deltas))

    def constant_after_tau(self, rel_tol: float = 1e-9) -> bool:
        tail = self.deltas[self.tau_star - 1:]
        ref = float(tail[0])
        return bool(np.all(np.abs(tail - ref) <= rel_tol * max(1.0, ref)))


def q_trajectory(problem: ProblemInstance, dataset: Dataset, queries: np.ndarray) -> np.ndarray:
    """Weighted estimates q_1..q_T produced against a fixed query sequence.

    ``queries`` holds x_1..x_T; the lagged gradient at round 1 is taken at
    x_1 itself (x_0 = x_1), matching the optimizer's initialization.
    """
    T = queries.shape[0]
    if len(dataset) < T:
        raise ValueError(f"dataset has {len(dataset)} samples, queries need {T}")
    est = EstimatorState.initial(problem.dim)
    out = np.empty((T, problem.dim))
    for t in range(1, T + 1):
        z = dataset[t - 1]
        x_t = queries[t - 1]
        x_prev = queries[t - 2] if t > 1 else queries[0]
        g = problem.grad(x_t, z)
        g_tilde = problem.grad(x_prev, z)
        out[t - 1] = est.update(g, g_tilde)
    return out


def empirical_sensitivity(
    problem: ProblemInstance, pair: NeighborPair, queries: np.ndarray
) -> SensitivityTrace:
    """Delta_t = ||q_t(base) - q_t(variant)|| under shared queries.

    Conditioning on the query sequence mirrors the privacy analysis: given
    the queries, the recursion is deterministic in the dataset, rounds before
    tau_star are bitwise identical, and afterwards only the tau_star
    increment differs.
    """
    q_base = q_trajectory(problem, pair.base, queries)
    q_var = q_trajectory(problem, pair.variant, queries)
    deltas = np.linalg.norm(q_base - q_var, axis=1)
    return SensitivityTrace(deltas=deltas, tau_star=pair.tau_star)


def trusted_aggregate_deltas(machine_trace: SensitivityTrace, M: int) -> np.ndarray:
    """Aggregate-message sensitivity when one of M machines' data changes.

    The other machines' contributions cancel in exact arithmetic, so the
    aggregate difference is the machine difference divided by M; the scaling
    is applied analytically to keep the 1/M relation exact.
    """
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    return machine_trace.deltas / M


def random_neighbor_pair(
    problem: ProblemInstance, T: int, rng: np.random.Generator, machine: int = 0
) -> NeighborPair:
    """A fresh dataset and a copy with one resampled round."""
    base = problem.draw_dataset(machine, T, rng)
    tau_star = int(rng.integers(1, T + 1))
    variant = base.replace(tau_star - 1, problem.sample(machine, rng))
    return NeighborPair(base=base, variant=variant, tau_star=tau_star)


def random_anytime_queries(problem: ProblemInstance, T: int,
                           rng: np.random.Generator) -> np.ndarray:
    """A random query sequence with the averaged structure the optimizer emits.

    Queries are importance-weighted running averages of uniform feasible
    iterates.  The averaging is what keeps consecutive queries close
    (alpha_{t-1} * ||x_t - x_{t-1}|| <= 2D), which the increment-norm bound S
    depends on; an i.i.d. feasible sequence would not satisfy it.
    """
    queries = np.empty((T, problem.dim))
    x = sample_point(problem.domain, rng)
    queries[0] = x
    for t in range(1, T):
        w_next = sample_point(problem.domain, rng)
        weight = Schedule.alpha(t + 1) / Schedule.alpha_sum(t + 1)
        x = (1.0 - weight) * x + weight * w_next
        queries[t] = x
    return queries


@dataclass(frozen=True)
class DecompositionReport:
    """Residuals of q_t = sum_tau s_tau and eps_t = sum_tau (s_tau - s_bar_tau)."""

    max_q_residual: float
    max_eps_residual: float | None
    tolerance: float = 1e-9

    @property
    def passed(self) -> bool:
        ok = self.max_q_residual <= self.tolerance
        if self.max_eps_residual is not None:
            ok = ok and self.max_eps_residual <= self.tolerance
        return ok


def decomposition_check(trace: TrajectoryTrace, tolerance: float = 1e-9) -> DecompositionReport:
    """Verify both running-sum identities per round, per entry."""
    if trace.s is None:
        raise ValueError("trace is missing per-round increments")
    q_resid = float(np.max(np.abs(trace.q - np.cumsum(trace.s, axis=0))))
    eps_resid = None
    if trace.s_bar is not None and trace.grad_pop is not None:
        eps = trace.estimate_errors()
        eps_resid = float(np.max(np.abs(eps - np.cumsum(trace.s - trace.s_bar, axis=0))))
    return DecompositionReport(q_resid, eps_resid, tolerance)


@dataclass(frozen=True)
class ErrorDecayReport:
    """Monte-Carlo second moment of the estimate error against its linear bound."""

    mean_eps_sq: np.ndarray      # per-round E||eps_t||^2 estimate
    se_eps_sq: np.ndarray
    bound: np.ndarray            # sigma_tilde^2 * t
    n_seeds: int
    se_factor: float = 3.0

    def worst_violation(self) -> float:
        return float(np.max(self.mean_eps_sq - self.bound - self.se_factor * self.se_eps_sq))

    @property
    def passed(self) -> bool:
        return self.worst_violation() <= 0.0

    def normalized(self, t: int) -> float:
        """E||eps_t||^2 / t^2, the squared error of the unweighted estimate d_t."""
        return float(self.mean_eps_sq[t - 1]) / t**2


def error_decay_mc(
    problem: ProblemInstance,
    T: int,
    n_seeds: int,
    eta: float | None = None,
    noise_variances: np.ndarray | None = None,
    base_seed: int = 0,
) -> ErrorDecayReport:
    """Run n_seeds trajectories and compare E||eps_t||^2 with sigma_tilde^2 * t."""
    if not problem.has_population_gradient:
        raise ValueError("error-decay check needs population gradients")
    if n_seeds < 100:
        raise ValueError(f"need at least 100 seeds for stable standard errors, got {n_seeds}")
    if eta is None:
        eta = 1.0 / (4.0 * problem.constants.L * T)
    schedule = Schedule(T=T, eta=eta)
    eps_sq = np.empty((n_seeds, T))
    for s in range(n_seeds):
        rec = run_mu2_sgd(problem, schedule, noise_variances, seed=base_seed + s)
        eps_sq[s] = rec.eps_norm_sq
    mean = eps_sq.mean(axis=0)
    se = eps_sq.std(axis=0, ddof=1) / math.sqrt(n_seeds)
    rounds = np.arange(1, T + 1, dtype=np.float64)
    bound = problem.constants.sigma_tilde**2 * rounds
    return ErrorDecayReport(mean, se, bound, n_seeds)


@dataclass(frozen=True)
class MartingaleReport:
    """Paired check of E||sum_t Z_t||^2 = sum_t E||Z_t||^2 for Z_t = s_t - s_bar_t."""

    mean_diff: float
    se_diff: float
    n_seeds: int
    se_factor: float = 5.0

    @property
    def passed(self) -> bool:
        if self.se_diff == 0.0:
            return self.mean_diff == 0.0
        return abs(self.mean_diff) <= self.se_factor * self.se_diff


def martingale_check(
    problem: ProblemInstance,
    T: int,
    n_seeds: int,
    eta: float | None = None,
    base_seed: int = 0,
) -> MartingaleReport:
    if not problem.has_population_gradient:
        raise ValueError("martingale check needs population gradients")
    if n_seeds < 2:
        raise ValueError("need at least two seeds")
    if eta is None:
        eta = 1.0 / (4.0 * problem.constants.L * T)
    schedule = Schedule(T=T, eta=eta)
    diffs = np.empty(n_seeds)
    for s in range(n_seeds):
        rec = run_mu2_sgd(problem, schedule, seed=base_seed + s, record_trace=True)
        tr = rec.trace
        total = float(np.sum((tr.s - tr.s_bar).sum(axis=0) ** 2))       # ||sum_t Z_t||^2
        per_round = float(np.sum((tr.s - tr.s_bar) ** 2))               # sum_t ||Z_t||^2
        diffs[s] = total - per_round
    se = float(diffs.std(ddof=1) / math.sqrt(n_seeds))
    return MartingaleReport(mean_diff=float(diffs.mean()), se_diff=se, n_seeds=n_seeds)


@dataclass(frozen=True)
class RegretReport:
    """Worst per-round margins of the pathwise inequalities (negative = violated)."""

    anytime_margin: float
    ogd_margin: float
    bound_consec_margin: float
    smoothness_margin: float
    scale: float
    rel_tolerance: float = 1e-8
    abs_tolerance: float = 1e-9

    @property
    def passed(self) -> bool:
        tol = self.rel_tolerance * self.scale
        return (
            self.anytime_margin >= -tol
            and self.ogd_margin >= -tol
            and self.smoothness_margin >= -tol
            and self.bound_consec_margin >= -self.abs_tolerance
        )

    def worst_relative_margin(self) -> float:
        rel = min(self.anytime_margin, self.ogd_margin, self.smoothness_margin) / self.scale
        return min(rel, self.bound_consec_margin)


def regret_checks(record: RunRecord, problem: ProblemInstance,
                  x_star: np.ndarray | None = None) -> RegretReport:
    """Pathwise inequalities along one recorded trajectory.

    Checks, for every round prefix: the weighted average's excess loss is
    dominated by the weighted linearized regret; the projected-step regret
    against the fixed comparator never exceeds D^2/(2 eta) minus the path
    energy; consecutive queries satisfy alpha_{t-1}*||x_t - x_{t-1}|| <= 2D;
    and the gradient gap at visited points obeys the smoothness bound.
    """
    tr = record.trace
    if tr is None or tr.grad_pop is None:
        raise ValueError("regret checks need a trace recorded with population gradients")
    if x_star is None:
        opt = problem.minimizer_oracle()
        if opt is None:
            raise ValueError("no minimizer available; pass x_star explicitly")
        x_star = opt.x_star
    T = tr.n_rounds
    D = problem.domain.diameter()
    eta = record.eta
    f_star = problem.population_loss(x_star)
    g_star = problem.population_grad(x_star)
    alphas = np.arange(1, T + 1, dtype=np.float64)

    x_queries = tr.x[:T]                     # x_1 .. x_T
    w_iters = tr.w[:T]                       # w_1 .. w_T
    w_next = tr.w[1:T + 1]                   # w_2 .. w_{T+1}
    f_x = np.array([problem.population_loss(x) for x in x_queries])

    # Weighted-average excess vs weighted linearized regret, every prefix.
    regret_terms = alphas * np.einsum("td,td->t", tr.grad_pop, w_iters - x_star)
    regret_prefix = np.cumsum(regret_terms)
    alpha_sums = alphas * (alphas + 1.0) / 2.0
    anytime_lhs = alpha_sums * (f_x - f_star)
    anytime_margin = float(np.min(regret_prefix - anytime_lhs))

    # Projected-step regret against x_star, every prefix.
    ogd_terms = np.einsum("td,td->t", tr.q_tilde, w_next - x_star)
    path_energy = np.cumsum(np.sum((w_iters - w_next) ** 2, axis=1))
    ogd_rhs = D**2 / (2.0 * eta) - path_energy / (2.0 * eta)
    ogd_margin = float(np.min(ogd_rhs - np.cumsum(ogd_terms)))

    # Scaled consecutive-query distance, rounds 2..T+1.
    x_all = tr.x                              # x_1 .. x_{T+1}
    step_norms = np.linalg.norm(np.diff(x_all, axis=0), axis=1)  # ||x_{t+1} - x_t||
    scaled = alphas * step_norms              # alpha_{t-1} * ||x_t - x_{t-1}|| at t = 2..T+1
    bound_consec_margin = float(np.min(2.0 * D - scaled))

    # Gradient-gap smoothness bound at the visited queries.
    gap = np.sum((tr.grad_pop - g_star) ** 2, axis=1)
    smooth_rhs = 2.0 * problem.constants.L * (f_x - f_star)
    smoothness_margin = float(np.min(smooth_rhs - gap))

    scale = max(
        1.0,
        float(np.max(np.abs(anytime_lhs))), float(np.max(np.abs(regret_prefix))),
        float(np.max(np.abs(ogd_rhs))), float(np.max(np.abs(np.cumsum(ogd_terms)))),
        float(np.max(gap)), float(np.max(np.abs(smooth_rhs))),
    )
    return RegretReport(
        anytime_margin=anytime_margin,
        ogd_margin=ogd_margin,
        bound_consec_margin=bound_consec_margin,
        smoothness_margin=smoothness_margin,
        scale=scale,
    )


@dataclass(frozen=True)
class ConvergenceReport:
    """Mean final excess loss over seeds against the closed-form guarantee."""

    mean_excess: float
    se_excess: float
    bound: float
    n_runs: int

    @property
    def ratio(self) -> float:
        return self.mean_excess / self.bound

    @property
    def passed(self) -> bool:
        return self.mean_excess <= self.bound


def convergence_report(records: list[RunRecord], bound: float) -> ConvergenceReport:
    """Compare the seed-averaged final excess loss with ``bound``."""
    if len(records) < 30:
        raise ValueError(f"expectation claim needs at least 30 seeded runs, got {len(records)}")
    if bound <= 0:
        raise ValueError(f"bound must be positive, got {bound}")
    excess = np.array([r.final_metrics["final_excess_loss"] for r in records])
    return ConvergenceReport(
        mean_excess=float(excess.mean()),
        se_excess=float(excess.std(ddof=1) / math.sqrt(len(excess))),
        bound=float(bound),
        n_runs=len(records),
    )


# --- named suites -----------------------------------------------------------
#
# Thin orchestration over the checks above, used by the command-line verify
# entry point.  Every suite returns CheckResult rows ready for the JSON report.


@dataclass(frozen=True)
class CheckResult:
    name: str
    paper_ref: str
    status: str          # "pass" | "fail"
    margin: float
    tolerance: float
    n_trials: int

    @classmethod
    def build(cls, name, ref, passed, margin, tolerance, n_trials) -> "CheckResult":
        return cls(name, ref, "pass" if passed else "fail",
                   float(margin), float(tolerance), int(n_trials))

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "paper_ref": self.paper_ref,
            "status": self.status,
            "margin": self.margin,
            "tolerance": self.tolerance,
            "n_trials": self.n_trials,
        }


def aggregate_delta_empirical(problem: ProblemInstance, pair: NeighborPair,
                              queries: np.ndarray, fixed_datasets: list[Dataset]) -> np.ndarray:
    """Aggregate-message distance recomputed the long way, via full averages.

    The changed machine is averaged with ``len(fixed_datasets)`` unchanged
    ones; used to cross-validate the analytic 1/M scaling within float
    tolerance.
    """
    others = [q_trajectory(problem, ds, queries) for ds in fixed_datasets]
    M = len(fixed_datasets) + 1

    def mean_traj(changed):
        total = q_trajectory(problem, changed, queries)
        for q in others:
            total = total + q
        return total / M

    return np.linalg.norm(mean_traj(pair.base) - mean_traj(pair.variant), axis=1)


def suite_sensitivity(n_pairs: int = 1000, dim: int = 5, T: int = 50,
                      M_for_aggregate: int = 8, seed: int = 0) -> list[CheckResult]:
    problem = synthetic_logistic(dim=dim, M=1, T=T, heterogeneity=0.0, seed=seed)
    S = problem.constants.S
    rng = rngmod.stream(seed, rngmod.QUERY)
    worst_excess = -math.inf
    all_zero_before = True
    all_constant_after = True
    scaling_exact = True
    worst_agg_dev = 0.0
    for k in range(n_pairs):
        pair = random_neighbor_pair(problem, T, rng)
        queries = random_anytime_queries(problem, T, rng)
        trace = empirical_sensitivity(problem, pair, queries)
        worst_excess = max(worst_excess, trace.max_delta() - 2.0 * S)
        all_zero_before = all_zero_before and trace.zero_before_tau()
        all_constant_after = all_constant_after and trace.constant_after_tau()
        agg = trusted_aggregate_deltas(trace, M_for_aggregate)
        scaling_exact = scaling_exact and bool(np.all(agg == trace.deltas / M_for_aggregate))
        if k % 100 == 0:
            # Cross-validate the analytic scaling against the full average.
            fixed = [problem.draw_dataset(0, T, rng) for _ in range(M_for_aggregate - 1)]
            emp = aggregate_delta_empirical(problem, pair, queries, fixed)
            worst_agg_dev = max(worst_agg_dev, float(np.max(np.abs(emp - agg))))
    agg_close = worst_agg_dev <= 1e-9 * max(1.0, 2.0 * S / M_for_aggregate)
    return [
        CheckResult.build("sensitivity-bound", "per-round message distance at most 2S",
                          worst_excess <= 0.0, -worst_excess, 0.0, n_pairs),
        CheckResult.build("sensitivity-indicator", "zero distance strictly before the "
                          "differing round, constant afterwards",
                          all_zero_before and all_constant_after,
                          1.0 if (all_zero_before and all_constant_after) else -1.0,
                          0.0, n_pairs),
        CheckResult.build("sensitivity-aggregate-scaling", "aggregate sensitivity is the "
                          "machine sensitivity divided by M",
                          scaling_exact and agg_close,
                          -worst_agg_dev, 1e-9, n_pairs),
    ]


def suite_decomposition(n_runs: int = 50, dim: int = 10, T: int = 200,
                        seed: int = 0, perturb: float = 0.0) -> list[CheckResult]:
    worst_q = 0.0
    worst_eps = 0.0
    for r in range(n_runs):
        problem = synthetic_quadratic(dim=dim, M=1, T=T, heterogeneity=0.0,
                                      noise_level=0.5, seed=seed + r)
        schedule = Schedule(T=T, eta=1.0 / (4.0 * problem.constants.L * T))
        rec = run_mu2_sgd(problem, schedule, seed=seed + r, record_trace=True)
        if perturb:
            rec.trace.s[T // 2] += perturb  # verification test hook
        rep = decomposition_check(rec.trace)
        worst_q = max(worst_q, rep.max_q_residual)
        worst_eps = max(worst_eps, rep.max_eps_residual)
    tol = 1e-9
    passed = worst_q <= tol and worst_eps <= tol
    return [
        CheckResult.build("decomposition-identities", "weighted estimate equals the running "
                          "increment sum; estimate error equals the centered sum",
                          passed, tol - max(worst_q, worst_eps), tol, n_runs),
    ]


def suite_error_decay(n_seeds: int = 200, dim: int = 5, T: int = 200,
                      seed: int = 0) -> list[CheckResult]:
    problem = synthetic_quadratic(dim=dim, M=1, T=T, heterogeneity=0.0,
                                  noise_level=0.5, seed=seed)
    rep = error_decay_mc(problem, T=T, n_seeds=n_seeds, base_seed=seed)
    decayed = rep.normalized(min(100, T)) < rep.normalized(10)
    return [
        CheckResult.build("error-decay-bound", "estimate-error second moment grows at most "
                          "linearly in the round index",
                          rep.passed, -rep.worst_violation(), 3.0, n_seeds),
        CheckResult.build("error-decay-normalized", "normalized estimate error shrinks with "
                          "the round index",
                          decayed, rep.normalized(10) - rep.normalized(min(100, T)),
                          0.0, n_seeds),
    ]


def suite_regret(n_runs: int = 50, dim: int = 5, T: int = 200,
                 seed: int = 0) -> list[CheckResult]:
    worst = math.inf
    for r in range(n_runs):
        problem = synthetic_quadratic(dim=dim, M=1, T=T, heterogeneity=0.0,
                                      noise_level=0.5, seed=seed + r)
        schedule = Schedule(T=T, eta=1.0 / (4.0 * problem.constants.L * T))
        noisy = (r % 2 == 1)
        variances = np.full(T, problem.constants.S**2) if noisy else None
        rec = run_mu2_sgd(problem, schedule, variances, seed=seed + r, record_trace=True)
        rep = regret_checks(rec, problem)
        worst = min(worst, rep.worst_relative_margin())
        if not rep.passed:
            return [CheckResult.build("pathwise-inequalities", "prefix regret, consecutive-"
                                      "query, and smoothness-gap inequalities",
                                      False, worst, 1e-8, n_runs)]
    return [
        CheckResult.build("pathwise-inequalities", "prefix regret, consecutive-query, and "
                          "smoothness-gap inequalities hold on every round",
                          True, worst, 1e-8, n_runs),
    ]


def suite_martingale(n_seeds: int = 200, dim: int = 5, T: int = 100,
                     seed: int = 0) -> list[CheckResult]:
    problem = synthetic_quadratic(dim=dim, M=1, T=T, heterogeneity=0.0,
                                  noise_level=0.5, seed=seed)
    rep = martingale_check(problem, T=T, n_seeds=n_seeds, base_seed=seed)
    margin = (5.0 * rep.se_diff - abs(rep.mean_diff)) if rep.se_diff else 0.0
    return [
        CheckResult.build("martingale-second-moment", "second moment of the error sum equals "
                          "the sum of increment second moments",
                          rep.passed, margin, 5.0, n_seeds),
    ]


def suite_convergence(n_seeds: int = 50, dim: int = 5, M: int = 4, T: int = 200,
                      rho: float = 4.0, seed: int = 0) -> list[CheckResult]:
    # Imported here: federated depends on estimator, which sits below verify.
    from .federated import FederatedConfig, run_trusted, run_untrusted, theoretical_bound

    problem = synthetic_quadratic(dim=dim, M=M, T=T, heterogeneity=0.0,
                                  noise_level=0.5, seed=seed)
    opt = problem.minimizer_oracle()
    results = []
    for mode, runner in (("untrusted", run_untrusted), ("trusted", run_trusted)):
        records = [
            runner(problem, FederatedConfig(mode=mode, M=M, T=T, rho=rho,
                                            master_seed=seed + 1000 * s))
            for s in range(n_seeds)
        ]
        bound = theoretical_bound(mode, problem.constants, opt.grad_norm,
                                  T, M, rho, problem.dim)
        rep = convergence_report(records, bound)
        results.append(CheckResult.build(
            f"convergence-{mode}", "seed-averaged final excess loss within the "
            "closed-form guarantee", rep.passed, 1.0 - rep.ratio, 1.0, n_seeds))
    return results


SUITES = {
    "sensitivity": suite_sensitivity,
    "decomposition": suite_decomposition,
    "error_decay": suite_error_decay,
    "regret": suite_regret,
    "martingale": suite_martingale,
    "convergence": suite_convergence,
}
