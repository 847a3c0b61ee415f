"""Differentially private federated stochastic convex optimization.

A library and CLI for running the noisy corrected-momentum federated
optimizer under untrusted- and trusted-server noise placements, accounting
its Renyi differential privacy, calibrating noise to a target privacy scale,
and empirically verifying the method's sensitivity, error-decay, and
convergence guarantees.
"""

from .estimator import (
    DivergenceError,
    EstimatorState,
    Schedule,
    TrajectoryState,
    anytime_average,
    increments,
    ogd_step,
    q_step,
    run_mu2_sgd,
    storm_update,
)
from .federated import (
    FederatedConfig,
    MachineState,
    ServerState,
    aggregate,
    learning_rate,
    machine_round,
    run_trusted,
    run_untrusted,
    theoretical_bound,
)
from .geometry import (
    Box,
    ConvexDomain,
    DimensionMismatchError,
    L2Ball,
    diameter,
    project,
)
from .privacy import (
    TRUSTED,
    UNTRUSTED,
    DpGuarantee,
    NoiseSchedule,
    NoPrivacyError,
    RdpCurve,
    SensitivityBound,
    account,
    calibrate,
    compose,
    gaussian_renyi,
    gaussian_sample,
    generic_rdp_to_dp,
    privacy_report,
    rdp_to_dp,
    zero_schedule,
)
from .problems import (
    Dataset,
    IdxFormatError,
    OracleUnavailableError,
    ProblemConstants,
    ProblemInstance,
    mnist_problem,
    shard,
    synthetic_logistic,
    synthetic_quadratic,
)
from .records import RunRecord, TrajectoryTrace

__version__ = "0.1.0"
