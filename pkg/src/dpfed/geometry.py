"""Convex feasible domains, diameters, and Euclidean projection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np


class DimensionMismatchError(ValueError):
    """A vector's dimension does not match the domain's."""

    def __init__(self, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"dimension mismatch: expected {expected}, got {actual}")


def as_vector(x, dim: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 1-D array, optionally checking its dimension."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"expected a 1-D vector with at least one entry, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    if dim is not None and arr.size != dim:
        raise DimensionMismatchError(dim, arr.size)
    return arr


@dataclass(frozen=True)
class L2Ball:
    """Euclidean ball of radius ``radius`` around ``center``."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_vector(self.center))
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValueError(f"ball radius must be positive and finite, got {self.radius}")

    @property
    def dim(self) -> int:
        return self.center.size

    def diameter(self) -> float:
        return 2.0 * self.radius

    def project(self, x) -> np.ndarray:
        x = as_vector(x, self.dim)
        offset = x - self.center
        norm = float(np.linalg.norm(offset))
        if norm <= self.radius:
            return x
        return self.center + offset * (self.radius / norm)

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = as_vector(x, self.dim)
        return float(np.linalg.norm(x - self.center)) <= self.radius * (1.0 + tol) + tol


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``{x : lower <= x <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", as_vector(self.lower))
        object.__setattr__(self, "upper", as_vector(self.upper, self.lower.size))
        if not np.all(self.lower < self.upper):
            raise ValueError("box requires lower[i] < upper[i] for every coordinate")

    @property
    def dim(self) -> int:
        return self.lower.size

    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def project(self, x) -> np.ndarray:
        x = as_vector(x, self.dim)
        return np.clip(x, self.lower, self.upper)

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = as_vector(x, self.dim)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


ConvexDomain = Union[L2Ball, Box]


def project(domain: ConvexDomain, x) -> np.ndarray:
    """Euclidean-nearest point of the domain; identity for feasible points."""
    return domain.project(x)


def diameter(domain: ConvexDomain) -> float:
    """Largest distance between two feasible points."""
    return domain.diameter()


def unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    norm = np.linalg.norm(v)
    while norm == 0.0:
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
    return v / norm


def uniform_in_ball(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    """Uniform draw from the origin-centered L2 ball of the given radius."""
    if radius == 0.0:
        return np.zeros(dim)
    return unit_vector(rng, dim) * radius * rng.uniform() ** (1.0 / dim)


def sample_point(domain: ConvexDomain, rng: np.random.Generator) -> np.ndarray:
    """Uniform random feasible point."""
    if isinstance(domain, L2Ball):
        return domain.center + uniform_in_ball(rng, domain.dim, domain.radius)
    return rng.uniform(domain.lower, domain.upper)
