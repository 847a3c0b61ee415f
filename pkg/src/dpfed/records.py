"""Run records: per-round scalar rows, optional vector traces, serialization.

The CSV trace has a mandatory header and one row per round with columns
``t, loss, excess_loss, eps_norm_sq, q_tilde_norm, eta, sigma_sq``; floats are
written with 17 significant digits so identical runs serialize to identical
bytes.  Quantities that a problem cannot provide (e.g. excess loss without a
minimizer oracle) are left as empty fields.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

CSV_COLUMNS = ("t", "loss", "excess_loss", "eps_norm_sq", "q_tilde_norm", "eta", "sigma_sq")


def fmt(value: float | None) -> str:
    if value is None:
        return ""
    return format(float(value), ".17g")


@dataclass
class TrajectoryTrace:
    """Full per-round vectors, recorded on demand for verification runs.

    ``w`` holds w_1..w_{T+1} and ``x`` holds x_1..x_{T+1} (both shape
    (T+1, d)); ``q``, ``q_tilde`` and the increment arrays are round-indexed
    with shape (T, d).  Aggregate quantities are machine averages, which for
    a single machine are the per-machine quantities themselves.
    """

    w: np.ndarray
    x: np.ndarray
    q: np.ndarray
    q_tilde: np.ndarray
    s: np.ndarray
    s_bar: np.ndarray | None = None
    grad_pop: np.ndarray | None = None

    @property
    def n_rounds(self) -> int:
        return self.q.shape[0]

    def estimate_errors(self) -> np.ndarray:
        """eps_t = q_t - alpha_t * grad f(x_t), shape (T, d)."""
        if self.grad_pop is None:
            raise ValueError("trace was recorded without population gradients")
        alphas = np.arange(1, self.n_rounds + 1, dtype=np.float64)[:, None]
        return self.q - alphas * self.grad_pop


@dataclass
class RunRecord:
    """Everything a run produces: scalar rows, final point, privacy, config echo."""

    mode: str
    seed: int
    eta: float
    loss: np.ndarray
    q_tilde_norm: np.ndarray
    sigma_sq: np.ndarray
    x_final: np.ndarray
    excess_loss: np.ndarray | None = None
    eps_norm_sq: np.ndarray | None = None
    privacy: dict | None = None
    config: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)
    trace: TrajectoryTrace | None = None

    @property
    def n_rounds(self) -> int:
        return len(self.loss)

    def to_csv(self) -> str:
        T = self.n_rounds
        out = io.StringIO()
        out.write(",".join(CSV_COLUMNS) + "\r\n")
        for i in range(T):
            row = (
                str(i + 1),
                fmt(self.loss[i]),
                fmt(self.excess_loss[i] if self.excess_loss is not None else None),
                fmt(self.eps_norm_sq[i] if self.eps_norm_sq is not None else None),
                fmt(self.q_tilde_norm[i]),
                fmt(self.eta),
                fmt(self.sigma_sq[i]),
            )
            out.write(",".join(row) + "\r\n")
        return out.getvalue()

    def to_json(self) -> str:
        payload = {
            "mode": self.mode,
            "seed": self.seed,
            "eta": self.eta,
            "rounds": self.n_rounds,
            "config": self.config,
            "privacy": self.privacy,
            "final_metrics": self.final_metrics,
            "x_final_norm": float(np.linalg.norm(self.x_final)),
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"
