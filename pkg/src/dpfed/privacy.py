"""Renyi-DP accounting for the Gaussian mechanism, and noise calibration.

All accounting is analytic: the per-round L2 sensitivity of a machine's
weighted-momentum message is bounded by ``2*S`` (one sample change affects a
single increment, whose norm is at most S), so a round with Gaussian noise of
variance ``sigma_sq`` costs ``alpha * (2S)^2 / (2*sigma_sq)`` in
(alpha, eps)-RDP, and rounds compose additively.  With the trusted-server
placement the aggregate's sensitivity shrinks to ``2*S/M``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNTRUSTED = "untrusted"
TRUSTED = "trusted"
MODES = (UNTRUSTED, TRUSTED)

RDP_CURVE_FORM = "alpha*rho^2/2"


class NoPrivacyError(ValueError):
    """A finite privacy parameter was requested for a zero-noise schedule."""


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


@dataclass(frozen=True)
class RdpCurve:
    """The linear RDP curve eps(alpha) = alpha * rho^2 / 2, alpha > 1."""

    rho: float

    def __post_init__(self):
        if not (np.isfinite(self.rho) and self.rho >= 0):
            raise ValueError(f"rho must be finite and >= 0, got {self.rho}")

    def epsilon(self, alpha: float) -> float:
        if alpha <= 1:
            raise ValueError(f"RDP order must exceed 1, got {alpha}")
        return alpha * self.rho**2 / 2.0


@dataclass(frozen=True)
class DpGuarantee:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")


@dataclass(frozen=True)
class SensitivityBound:
    """Per-round L2 sensitivity of the protected message: 2S, or 2S/M aggregated."""

    per_round_delta: float

    @classmethod
    def for_mode(cls, S: float, M: int, mode: str) -> "SensitivityBound":
        _check_mode(mode)
        if S <= 0 or M < 1:
            raise ValueError(f"need S > 0 and M >= 1, got S={S}, M={M}")
        return cls(2.0 * S / M if mode == TRUSTED else 2.0 * S)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-round Gaussian variances: shape (M, T) untrusted, (T,) trusted.

    Variances are either all positive or uniformly zero (the explicit
    no-privacy mode, which `account` refuses to rate).
    """

    mode: str
    variances: np.ndarray = field(repr=False)

    def __post_init__(self):
        _check_mode(self.mode)
        var = np.ascontiguousarray(self.variances, dtype=np.float64)
        expected_ndim = 1 if self.mode == TRUSTED else 2
        if var.ndim != expected_ndim:
            raise ValueError(
                f"{self.mode} schedule needs a {expected_ndim}-D variance table, got shape {var.shape}"
            )
        if var.size == 0 or not np.all(np.isfinite(var)) or np.any(var < 0):
            raise ValueError("variances must be finite and >= 0")
        if np.any(var == 0) and np.any(var > 0):
            raise ValueError("variances must be all positive or uniformly zero")
        object.__setattr__(self, "variances", var)

    @property
    def n_rounds(self) -> int:
        return self.variances.shape[-1]

    @property
    def n_machines(self) -> int | None:
        return None if self.mode == TRUSTED else self.variances.shape[0]

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.variances == 0.0))

    def machine_variances(self, machine: int) -> np.ndarray:
        """Round-indexed variances used on machine ``machine`` (untrusted only)."""
        if self.mode == TRUSTED:
            raise ValueError("trusted schedules place noise at the server, not machines")
        return self.variances[machine]


def gaussian_renyi(delta_norm: float, sigma_sq: float, alpha: float) -> float:
    """Order-alpha Renyi divergence between N(mu, sigma_sq*I) and its delta_norm shift."""
    if sigma_sq <= 0:
        raise ValueError(f"sigma_sq must be positive, got {sigma_sq}")
    if delta_norm < 0:
        raise ValueError(f"delta_norm must be >= 0, got {delta_norm}")
    if alpha <= 1:
        raise ValueError(f"RDP order must exceed 1, got {alpha}")
    return alpha * delta_norm**2 / (2.0 * sigma_sq)


def compose(divergences) -> float:
    """Adaptive composition: RDP budgets at a fixed order add up."""
    total = 0.0
    for eps in divergences:
        if not (np.isfinite(eps) and eps >= 0):
            raise ValueError(f"divergences must be finite and >= 0, got {eps}")
        total += float(eps)
    return total


def account(schedule: NoiseSchedule, S: float, M: int):
    """Privacy scale rho of a run under ``schedule``.

    Untrusted mode protects each machine's message sequence and returns the
    per-machine array rho_i = 2S * sqrt(sum_t 1/sigma_{t,i}^2).  Trusted mode
    protects the published query sequence and returns the scalar
    rho = (2S/M) * sqrt(sum_t 1/sigma_t^2).  Either way the mechanism is
    (alpha, alpha*rho^2/2)-RDP for every alpha > 1.
    """
    if S <= 0 or M < 1:
        raise ValueError(f"need S > 0 and M >= 1, got S={S}, M={M}")
    if schedule.is_zero:
        raise NoPrivacyError("zero-noise schedule provides no finite privacy guarantee")
    if schedule.mode == UNTRUSTED:
        if schedule.n_machines != M:
            raise ValueError(f"schedule has {schedule.n_machines} machines, expected {M}")
        return 2.0 * S * np.sqrt(np.sum(1.0 / schedule.variances, axis=1))
    return float(2.0 * S / M * math.sqrt(np.sum(1.0 / schedule.variances)))


def calibrate(rho_target: float, S: float, T: int, M: int, mode: str) -> NoiseSchedule:
    """Constant-in-t schedule achieving privacy scale ``rho_target`` exactly.

    sigma^2 = 4 S^2 T / rho^2 on every machine and round (untrusted), or
    sigma^2 = 4 S^2 T / (rho^2 M^2) at the server (trusted).
    """
    _check_mode(mode)
    if rho_target <= 0:
        raise ValueError(f"rho_target must be positive, got {rho_target}")
    if S <= 0 or T < 1 or M < 1:
        raise ValueError(f"need S > 0, T >= 1, M >= 1, got S={S}, T={T}, M={M}")
    if mode == UNTRUSTED:
        sigma_sq = 4.0 * S**2 * T / rho_target**2
        return NoiseSchedule(UNTRUSTED, np.full((M, T), sigma_sq))
    sigma_sq = 4.0 * S**2 * T / (rho_target**2 * M**2)
    return NoiseSchedule(TRUSTED, np.full(T, sigma_sq))


def zero_schedule(T: int, M: int, mode: str) -> NoiseSchedule:
    """The explicit no-privacy schedule (all variances zero)."""
    _check_mode(mode)
    shape = (T,) if mode == TRUSTED else (M, T)
    return NoiseSchedule(mode, np.zeros(shape))


def rdp_to_dp(rho: float, delta: float) -> DpGuarantee:
    """Best (eps, delta)-DP implied by (alpha, alpha*rho^2/2)-RDP over all orders.

    The optimum of eps(alpha) + log(1/delta)/(alpha-1) sits at
    alpha = 1 + sqrt(2*log(1/delta))/rho, giving
    eps = rho^2/2 + rho*sqrt(2*log(1/delta)).
    """
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    epsilon = rho**2 / 2.0 + rho * math.sqrt(2.0 * math.log(1.0 / delta))
    return DpGuarantee(epsilon=epsilon, delta=delta)


def generic_rdp_to_dp(alphas, epsilons, delta: float) -> DpGuarantee:
    """Convert an arbitrary sampled RDP curve: min over the grid of eps + log(1/delta)/(alpha-1)."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    alphas = np.asarray(alphas, dtype=np.float64)
    epsilons = np.asarray(epsilons, dtype=np.float64)
    if alphas.size == 0 or alphas.shape != epsilons.shape:
        raise ValueError("need a non-empty grid of matching alpha/epsilon samples")
    if np.any(alphas <= 1) or not np.all(np.isfinite(epsilons)):
        raise ValueError("grid requires alpha > 1 and finite epsilon values")
    candidates = epsilons + math.log(1.0 / delta) / (alphas - 1.0)
    return DpGuarantee(epsilon=float(np.min(candidates)), delta=delta)


def gaussian_sample(dim: int, sigma_sq: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. N(0, sigma_sq) entries; sigma_sq = 0 yields zeros without consuming the stream."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if sigma_sq < 0:
        raise ValueError(f"sigma_sq must be >= 0, got {sigma_sq}")
    if sigma_sq == 0.0:
        return np.zeros(dim)
    return rng.normal(0.0, math.sqrt(sigma_sq), size=dim)


def privacy_report(mode: str, rho: float, deltas) -> dict:
    """JSON-ready summary: the RDP curve plus (eps, delta) rows for each delta.

    Untrusted mode rates each machine's transmitted message sequence; trusted
    mode rates the query sequence the server publishes.
    """
    _check_mode(mode)
    rows = [
        {"delta": float(d), "epsilon": rdp_to_dp(rho, float(d)).epsilon} for d in deltas
    ]
    return {
        "mode": mode,
        "rho": float(rho),
        "rdp_curve": RDP_CURVE_FORM,
        "epsilon_at_delta": rows,
    }
