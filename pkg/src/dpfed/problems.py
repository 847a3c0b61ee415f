"""Stochastic convex objectives with certified constants.

Three problem families:

* ``synthetic_quadratic`` -- per-machine shifted quadratics over an L2 ball,
  with a closed-form population objective and minimizer.  The workhorse for
  convergence and error-decay checks because every constant is exact.
* ``synthetic_logistic`` -- binary logistic regression over a finite pool of
  bounded feature atoms, so the population objective is an exact finite sum.
* ``mnist_problem`` -- 10-class logistic regression on MNIST IDX files with
  the usual 785-feature encoding (784 scaled pixels plus a constant bias).

A problem instance certifies G (Lipschitz), L (smoothness), sigma (gradient
variance), sigma_L (smoothness variance) and the domain diameter D, from
which the increment bound S = G + 2*L*D and the increment deviation
sigma_tilde = sigma + 2*sigma_L*D follow.
"""

from __future__ import annotations

import abc
import gzip
import math
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import rng as rngmod
from .geometry import ConvexDomain, L2Ball, as_vector, uniform_in_ball, unit_vector


class OracleUnavailableError(RuntimeError):
    """The requested population quantity is not computable for this problem."""


class IdxFormatError(ValueError):
    """An IDX file failed to parse; carries the file path and byte offset."""

    def __init__(self, path: str, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} (offset {offset}): {message}")


@dataclass(frozen=True)
class ProblemConstants:
    """Certified bounds of a problem family; S and sigma_tilde are derived."""

    G: float
    L: float
    sigma: float
    sigma_L: float
    D: float

    def __post_init__(self):
        vals = (self.G, self.L, self.sigma, self.sigma_L, self.D)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"constants must be finite, got {vals}")
        if self.G <= 0 or self.L <= 0 or self.D <= 0:
            raise ValueError(f"G, L, D must be positive, got G={self.G}, L={self.L}, D={self.D}")
        if not 0 <= self.sigma <= self.G:
            raise ValueError(f"need 0 <= sigma <= G, got sigma={self.sigma}, G={self.G}")
        if not 0 <= self.sigma_L <= self.L:
            raise ValueError(f"need 0 <= sigma_L <= L, got sigma_L={self.sigma_L}, L={self.L}")

    @property
    def S(self) -> float:
        return self.G + 2.0 * self.L * self.D

    @property
    def sigma_tilde(self) -> float:
        return self.sigma + 2.0 * self.sigma_L * self.D


class Minimizer(NamedTuple):
    x_star: np.ndarray
    f_star: float
    grad_norm: float  # G* = ||grad f(x*)||


@dataclass(frozen=True)
class Dataset:
    """One machine's ordered samples, one per round.

    Sample identity is positional: entry t is the sample consumed at round
    t+1 by the owning machine, which makes (machine, round) ids unique within
    a run by construction.
    """

    machine: int
    payloads: tuple

    def __len__(self) -> int:
        return len(self.payloads)

    def __getitem__(self, t: int):
        return self.payloads[t]

    def replace(self, t: int, payload) -> "Dataset":
        """Copy with round-t payload swapped out (neighboring dataset)."""
        items = list(self.payloads)
        items[t] = payload
        return Dataset(self.machine, tuple(items))


class ProblemInstance(abc.ABC):
    """A stochastic convex objective shared by M machines.

    Immutable after construction; all sampling state lives in caller-owned
    generators, so instances are safe to share across threads.
    """

    dim: int
    domain: ConvexDomain
    constants: ProblemConstants
    n_machines: int
    # Whether population_loss is cheap enough to evaluate every round.
    cheap_population_loss: bool = True
    has_population_gradient: bool = True

    @abc.abstractmethod
    def sample(self, machine: int, rng: np.random.Generator):
        """Draw one payload from machine's distribution."""

    @abc.abstractmethod
    def loss(self, x: np.ndarray, z) -> float:
        """Per-sample loss f(x; z)."""

    @abc.abstractmethod
    def grad(self, x: np.ndarray, z) -> np.ndarray:
        """Per-sample gradient of f(x; z) with respect to x."""

    @abc.abstractmethod
    def population_loss(self, x: np.ndarray) -> float:
        """Expected loss averaged over machines."""

    def population_grad(self, x: np.ndarray) -> np.ndarray:
        raise OracleUnavailableError(f"{type(self).__name__} exposes no population gradient")

    def machine_population_grad(self, machine: int, x: np.ndarray) -> np.ndarray:
        raise OracleUnavailableError(f"{type(self).__name__} exposes no population gradient")

    def minimizer_oracle(self) -> Minimizer | None:
        """(x*, f(x*), ||grad f(x*)||), or None when not computable."""
        return None

    def draw_dataset(self, machine: int, T: int, rng: np.random.Generator) -> Dataset:
        return Dataset(machine, tuple(self.sample(machine, rng) for _ in range(T)))

    def default_datasets(self, M: int, T: int, master_seed: int) -> list[Dataset]:
        """Fresh per-machine datasets from the per-machine data streams."""
        if M != self.n_machines:
            raise ValueError(f"problem has {self.n_machines} machines, requested {M}")
        return [
            self.draw_dataset(i, T, rngmod.stream(master_seed, rngmod.DATA, i))
            for i in range(M)
        ]


class QuadraticProblem(ProblemInstance):
    """f_i(x; z) = 0.5 * ||x - z||^2 with z = c_i + xi, xi uniform in a ball.

    Per-machine centers c_i deviate from the mean center by at most the
    heterogeneity knob and sum to the mean exactly, so the population
    objective is the isotropic quadratic 0.5*||x - c_bar||^2 plus a constant,
    and the constrained minimizer is the projection of c_bar.
    """

    def __init__(self, dim, M, centers, center_mean, noise_level, radius):
        self.dim = dim
        self.n_machines = M
        self.domain = L2Ball(np.zeros(dim), radius)
        self._centers = centers  # (M, dim)
        self._center_mean = center_mean
        self._noise_level = float(noise_level)
        # Uniform-in-ball second moment, exact: r^2 * d / (d + 2).
        self._noise_second_moment = noise_level**2 * dim / (dim + 2)
        self._center_spread = float(np.mean(np.sum((centers - center_mean) ** 2, axis=1)))
        G = radius + float(np.max(np.linalg.norm(centers, axis=1))) + noise_level
        self.constants = ProblemConstants(
            G=G, L=1.0, sigma=noise_level, sigma_L=0.0, D=2.0 * radius
        )

    def sample(self, machine, rng):
        return self._centers[machine] + uniform_in_ball(rng, self.dim, self._noise_level)

    def loss(self, x, z):
        return 0.5 * float(np.sum((x - z) ** 2))

    def grad(self, x, z):
        return x - z

    def population_loss(self, x):
        base = 0.5 * float(np.sum((x - self._center_mean) ** 2))
        return base + 0.5 * self._center_spread + 0.5 * self._noise_second_moment

    def population_grad(self, x):
        return x - self._center_mean

    def machine_population_grad(self, machine, x):
        return x - self._centers[machine]

    def minimizer_oracle(self):
        x_star = self.domain.project(self._center_mean)
        return Minimizer(
            x_star=x_star,
            f_star=self.population_loss(x_star),
            grad_norm=float(np.linalg.norm(x_star - self._center_mean)),
        )


def synthetic_quadratic(
    dim: int,
    M: int,
    T: int,
    heterogeneity: float,
    noise_level: float,
    seed: int,
    *,
    radius: float = 1.0,
    center_norm: float | None = None,
) -> QuadraticProblem:
    """Shifted-quadratic testbed; all constants certified analytically.

    ``center_norm`` places the mean center at that distance from the origin
    (default radius/2, i.e. interior, which makes G* = 0).
    """
    if dim < 1 or M < 1 or T < 1:
        raise ValueError(f"need dim, M, T >= 1, got dim={dim}, M={M}, T={T}")
    params = (heterogeneity, noise_level, radius)
    if not all(np.isfinite(p) for p in params) or heterogeneity < 0 or noise_level < 0 or radius <= 0:
        raise ValueError(f"bad parameters: heterogeneity={heterogeneity}, "
                         f"noise_level={noise_level}, radius={radius}")
    rng = rngmod.stream(seed, rngmod.PROBLEM)
    if center_norm is None:
        center_norm = 0.5 * radius
    center_mean = unit_vector(rng, dim) * center_norm if center_norm > 0 else np.zeros(dim)
    offsets = np.zeros((M, dim))
    if M > 1 and heterogeneity > 0:
        raw = rng.standard_normal((M, dim))
        raw -= raw.mean(axis=0)  # offsets sum to zero, mean center stays put
        max_norm = float(np.max(np.linalg.norm(raw, axis=1)))
        if max_norm > 0:
            offsets = raw * (heterogeneity / max_norm)
    centers = center_mean + offsets
    return QuadraticProblem(dim, M, centers, center_mean, noise_level, radius)


def _sigmoid(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


class LogisticProblem(ProblemInstance):
    """Binary logistic regression over a finite pool of bounded feature atoms.

    Machines share the atom pool but differ in per-atom label probabilities
    (label flips parameterized by the heterogeneity knob), which keeps the
    population objective an exact finite sum per machine.
    """

    def __init__(self, dim, M, atoms, label_probs, radius):
        self.dim = dim
        self.n_machines = M
        self.domain = L2Ball(np.zeros(dim), radius)
        self._atoms = atoms          # (K, dim)
        self._label_probs = label_probs  # (M, K), P(y=+1 | atom, machine)
        self._minimizer_cache: dict[int, Minimizer] = {}
        R_a = float(np.max(np.linalg.norm(atoms, axis=1)))
        G = R_a
        L = R_a**2 / 4.0
        self.constants = ProblemConstants(G=G, L=L, sigma=G, sigma_L=L, D=2.0 * radius)

    @property
    def atoms(self) -> np.ndarray:
        return self._atoms

    def sample(self, machine, rng):
        k = int(rng.integers(len(self._atoms)))
        y = 1 if rng.uniform() < self._label_probs[machine, k] else -1
        return (self._atoms[k], y)

    def loss(self, x, z):
        a, y = z
        return float(np.logaddexp(0.0, -y * float(a @ x)))

    def grad(self, x, z):
        a, y = z
        m = y * float(a @ x)
        return (-y * float(_sigmoid(-m))) * a

    def _margins(self, x):
        return self._atoms @ x

    def _machine_loss(self, machine, s):
        p = self._label_probs[machine]
        loss_pos = np.logaddexp(0.0, -s)
        loss_neg = np.logaddexp(0.0, s)
        return float(np.mean(p * loss_pos + (1.0 - p) * loss_neg))

    def _machine_grad(self, machine, s):
        p = self._label_probs[machine]
        coeff = (1.0 - p) * _sigmoid(s) - p * _sigmoid(-s)
        return self._atoms.T @ coeff / len(self._atoms)

    def population_loss(self, x):
        s = self._margins(x)
        return float(np.mean([self._machine_loss(i, s) for i in range(self.n_machines)]))

    def population_grad(self, x):
        s = self._margins(x)
        grads = [self._machine_grad(i, s) for i in range(self.n_machines)]
        return np.mean(grads, axis=0)

    def machine_population_grad(self, machine, x):
        return self._machine_grad(machine, self._margins(x))

    def minimizer_oracle(self, iterations: int = 4000):
        if iterations not in self._minimizer_cache:
            x_star = self._fista(iterations)
            self._minimizer_cache[iterations] = Minimizer(
                x_star=x_star,
                f_star=self.population_loss(x_star),
                grad_norm=float(np.linalg.norm(self.population_grad(x_star))),
            )
        return self._minimizer_cache[iterations]

    def _fista(self, iterations):
        # Accelerated projected gradient; defined on all of R^d so the
        # extrapolated point may leave the domain.
        step = 1.0 / self.constants.L
        x = self.domain.project(np.zeros(self.dim))
        y = x
        t_acc = 1.0
        for _ in range(iterations):
            x_next = self.domain.project(y - step * self.population_grad(y))
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_acc**2))
            y = x_next + ((t_acc - 1.0) / t_next) * (x_next - x)
            x, t_acc = x_next, t_next
        return x


def synthetic_logistic(
    dim: int,
    M: int,
    T: int,
    heterogeneity: float,
    seed: int,
    *,
    n_atoms: int = 16,
    feature_radius: float = 2.0,
    radius: float = 1.0,
) -> LogisticProblem:
    """Logistic testbed: G = feature_radius, L = feature_radius^2 / 4.

    The heterogeneity knob in [0, 1] sets per-machine label-flip rates that
    ramp linearly from 0 (machine 0) to heterogeneity/2 (last machine).
    """
    if dim < 1 or M < 1 or T < 1:
        raise ValueError(f"need dim, M, T >= 1, got dim={dim}, M={M}, T={T}")
    if not np.isfinite(heterogeneity) or not 0 <= heterogeneity <= 1:
        raise ValueError(f"heterogeneity must lie in [0, 1], got {heterogeneity}")
    if feature_radius <= 0 or radius <= 0 or n_atoms < 2:
        raise ValueError("need feature_radius > 0, radius > 0, n_atoms >= 2")
    rng = rngmod.stream(seed, rngmod.PROBLEM)
    atoms = rng.standard_normal((n_atoms, dim)) * (feature_radius / math.sqrt(dim))
    norms = np.linalg.norm(atoms, axis=1)
    over = norms > feature_radius
    atoms[over] *= (feature_radius / norms[over])[:, None]
    teacher = unit_vector(rng, dim) * feature_radius
    base_probs = _sigmoid(atoms @ teacher)
    flip = np.zeros(M) if M == 1 else 0.5 * heterogeneity * np.arange(M) / (M - 1)
    label_probs = (1.0 - flip[:, None]) * base_probs[None, :] + flip[:, None] * (
        1.0 - base_probs[None, :]
    )
    return LogisticProblem(dim, M, atoms, label_probs, radius)


IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_exact(f, n: int, path: str, offset: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(path, offset, f"truncated file while reading {what}: "
                                           f"wanted {n} bytes, got {len(buf)}")
    return buf


def _open_idx(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    """Parse a big-endian IDX image file into a uint8 array of shape (N, rows*cols)."""
    with _open_idx(path) as f:
        header = _read_exact(f, 16, path, 0, "image header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(path, 0, f"bad magic number 0x{magic:08x}, "
                                          f"expected 0x{IDX_IMAGE_MAGIC:08x}")
        n_bytes = count * rows * cols
        data = _read_exact(f, n_bytes, path, 16, f"{count} images of {rows}x{cols}")
    return np.frombuffer(data, dtype=np.uint8).reshape(count, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    """Parse a big-endian IDX label file into a uint8 array of shape (N,)."""
    with _open_idx(path) as f:
        header = _read_exact(f, 8, path, 0, "label header")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(path, 0, f"bad magic number 0x{magic:08x}, "
                                          f"expected 0x{IDX_LABEL_MAGIC:08x}")
        data = _read_exact(f, count, path, 8, f"{count} labels")
    return np.frombuffer(data, dtype=np.uint8)


class MnistProblem(ProblemInstance):
    """10-class logistic regression on MNIST, constrained to a small L2 ball.

    Parameters live in R^(10*785); samples are indices into the training
    arrays.  The population loss is the empirical mean cross-entropy on the
    held-out test set (no closed-form population gradient is exposed).
    """

    N_CLASSES = 10
    N_FEATURES = 785  # 784 pixels scaled to [0, 1] plus a constant bias

    cheap_population_loss = False
    has_population_gradient = False

    def __init__(self, train_pixels, train_labels, test_pixels, test_labels):
        self.n_machines = 1  # dataset assignment is external, via shard()
        self.dim = self.N_CLASSES * self.N_FEATURES
        self.domain = L2Ball(np.zeros(self.dim), 0.05)
        G = math.sqrt(2.0 * self.N_FEATURES)
        L = self.N_FEATURES / 2.0
        self.constants = ProblemConstants(G=G, L=L, sigma=G, sigma_L=L, D=0.1)
        self._train_pixels = train_pixels  # uint8 (N, 784)
        self._train_labels = train_labels
        feats = np.empty((len(test_labels), self.N_FEATURES))
        feats[:, :784] = test_pixels / 255.0
        feats[:, 784] = 1.0
        self._test_features = feats
        self._test_labels = test_labels.astype(np.int64)

    @property
    def n_train(self) -> int:
        return len(self._train_labels)

    def train_indices(self) -> range:
        """The full training set as shard() input (payloads are indices)."""
        return range(self.n_train)

    def _features(self, idx: int) -> np.ndarray:
        a = np.empty(self.N_FEATURES)
        a[:784] = self._train_pixels[idx] / 255.0
        a[784] = 1.0
        return a

    def sample(self, machine, rng):
        raise OracleUnavailableError(
            "MNIST has no per-machine sampler; shard() the training set instead"
        )

    def default_datasets(self, M, T, master_seed):
        return shard(self.train_indices(), M, T, master_seed)

    def _logits(self, x, a):
        return x.reshape(self.N_CLASSES, self.N_FEATURES) @ a

    def loss(self, x, z):
        a = self._features(int(z))
        logits = self._logits(x, a)
        m = float(np.max(logits))
        lse = m + math.log(float(np.sum(np.exp(logits - m))))
        return lse - float(logits[self._train_labels[int(z)]])

    def grad(self, x, z):
        idx = int(z)
        a = self._features(idx)
        logits = self._logits(x, a)
        p = np.exp(logits - np.max(logits))
        p /= p.sum()
        p[self._train_labels[idx]] -= 1.0
        return np.outer(p, a).ravel()

    def _test_logits(self, x):
        return self._test_features @ x.reshape(self.N_CLASSES, self.N_FEATURES).T

    def population_loss(self, x):
        logits = self._test_logits(x)
        m = logits.max(axis=1)
        lse = m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))
        picked = logits[np.arange(len(logits)), self._test_labels]
        return float(np.mean(lse - picked))

    def accuracy(self, x) -> float:
        pred = np.argmax(self._test_logits(x), axis=1)
        return float(np.mean(pred == self._test_labels))


def mnist_problem(
    train_images_path,
    train_labels_path,
    test_images_path,
    test_labels_path,
) -> MnistProblem:
    """Load the four IDX files and build the constrained logistic model."""
    train_pixels = read_idx_images(train_images_path)
    train_labels = read_idx_labels(train_labels_path)
    if len(train_pixels) != len(train_labels):
        raise IdxFormatError(
            str(train_labels_path), 4,
            f"label count {len(train_labels)} does not match "
            f"image count {len(train_pixels)} in {train_images_path}",
        )
    test_pixels = read_idx_images(test_images_path)
    test_labels = read_idx_labels(test_labels_path)
    if len(test_pixels) != len(test_labels):
        raise IdxFormatError(
            str(test_labels_path), 4,
            f"label count {len(test_labels)} does not match "
            f"image count {len(test_pixels)} in {test_images_path}",
        )
    return MnistProblem(train_pixels, train_labels, test_pixels, test_labels)


def shard(full_dataset: Sequence, M: int, T: int, seed: int) -> list[Dataset]:
    """Split a sample pool into M disjoint per-machine datasets of length T.

    The pool is shuffled once under the shard stream of ``seed`` and sliced
    contiguously, so two calls with the same seed yield identical shards.
    """
    if M < 1 or T < 1:
        raise ValueError(f"need M, T >= 1, got M={M}, T={T}")
    n = len(full_dataset)
    if M * T > n:
        raise ValueError(f"cannot shard {n} samples into M={M} machines x T={T} rounds "
                         f"({M * T} needed)")
    order = rngmod.stream(seed, rngmod.SHARD).permutation(n)
    return [
        Dataset(i, tuple(full_dataset[j] for j in order[i * T:(i + 1) * T]))
        for i in range(M)
    ]


def finite_diff_grad(problem: ProblemInstance, x: np.ndarray, z, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the per-sample loss (test oracle)."""
    x = as_vector(x, problem.dim)
    g = np.empty(problem.dim)
    for j in range(problem.dim):
        e = np.zeros(problem.dim)
        e[j] = h
        g[j] = (problem.loss(x + e, z) - problem.loss(x - e, z)) / (2.0 * h)
    return g


def smoothness_gap_margin(problem: ProblemInstance, points: Sequence[np.ndarray]) -> float:
    """Worst violation of ||grad f(x) - grad f(x*)||^2 <= 2L (f(x) - f(x*)).

    Positive return values mean the inequality failed by that much somewhere.
    """
    opt = problem.minimizer_oracle()
    if opt is None:
        raise OracleUnavailableError("smoothness-gap check needs a minimizer oracle")
    g_star = problem.population_grad(opt.x_star)
    worst = -math.inf
    for x in points:
        lhs = float(np.sum((problem.population_grad(x) - g_star) ** 2))
        rhs = 2.0 * problem.constants.L * (problem.population_loss(x) - opt.f_star)
        worst = max(worst, lhs - rhs)
    return worst
