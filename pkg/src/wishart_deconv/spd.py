"""2x2 symmetric positive-definite matrices.

Scalar value types (``SpdMatrix``, ``UpperTriangular``, ``EigenPair``,
``PolarPoint``) plus vectorized helpers operating on stacks of matrices with
shape ``(n, 2, 2)``.  The matrix square root used throughout is the
upper-triangular Cholesky factor ``U`` with ``U.T @ U == y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# det below this fraction of x11*x22 is treated as singular
SINGULAR_RTOL = 1e-14


class NotPositiveDefiniteError(ValueError):
    """Raised when a matrix is not (numerically) positive definite."""


def _check_pd(x11, x12, x22):
    if not (math.isfinite(x11) and math.isfinite(x12) and math.isfinite(x22)):
        raise NotPositiveDefiniteError("matrix entries must be finite")
    if x11 <= 0 or x22 <= 0:
        raise NotPositiveDefiniteError(f"non-positive diagonal ({x11}, {x22})")
    det = x11 * x22 - x12 * x12
    if det <= SINGULAR_RTOL * x11 * x22:
        raise NotPositiveDefiniteError(f"matrix is singular or indefinite (det={det})")


@dataclass(frozen=True)
class SpdMatrix:
    """Symmetric positive-definite 2x2 matrix ``[[x11, x12], [x12, x22]]``."""

    x11: float
    x12: float
    x22: float

    def __post_init__(self):
        _check_pd(self.x11, self.x12, self.x22)

    @classmethod
    def from_array(cls, y) -> SpdMatrix:
        y = np.asarray(y, dtype=float)
        if y.shape != (2, 2):
            raise ValueError(f"expected a 2x2 matrix, got shape {y.shape}")
        if abs(y[0, 1] - y[1, 0]) > 1e-12 * np.max(np.abs(y)):
            raise NotPositiveDefiniteError("matrix is not symmetric")
        return cls(float(y[0, 0]), float(0.5 * (y[0, 1] + y[1, 0])), float(y[1, 1]))

    @classmethod
    def identity(cls, scale: float = 1.0) -> SpdMatrix:
        return cls(scale, 0.0, scale)

    def to_array(self) -> np.ndarray:
        return np.array([[self.x11, self.x12], [self.x12, self.x22]])

    @property
    def det(self) -> float:
        return self.x11 * self.x22 - self.x12 * self.x12


@dataclass(frozen=True)
class UpperTriangular:
    u11: float
    u12: float
    u22: float

    def to_array(self) -> np.ndarray:
        return np.array([[self.u11, self.u12], [0.0, self.u22]])

    def gram(self) -> SpdMatrix:
        """Return ``U.T @ U``."""
        return SpdMatrix(self.u11**2, self.u11 * self.u12, self.u12**2 + self.u22**2)


@dataclass(frozen=True)
class EigenPair:
    """Eigenvalues ``a1 >= a2 > 0`` and the angle of ``k_theta``.

    ``k_theta = [[cos, -sin], [sin, cos]]`` and the source matrix is
    ``k_theta.T @ diag(a1, a2) @ k_theta``.
    """

    a1: float
    a2: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.a1 >= self.a2 > 0):
            raise ValueError(f"eigenvalues must satisfy a1 >= a2 > 0, got ({self.a1}, {self.a2})")

    def to_matrix(self) -> SpdMatrix:
        # entries of k.T diag(a1, a2) k, written out so the result is exactly symmetric
        c, s = math.cos(self.theta), math.sin(self.theta)
        return SpdMatrix(
            self.a1 * c * c + self.a2 * s * s,
            (self.a2 - self.a1) * c * s,
            self.a1 * s * s + self.a2 * c * c,
        )


@dataclass(frozen=True)
class PolarPoint:
    """Polar coordinates: ``a1 = exp(u1 + u2)``, ``a2 = exp(-u1 + u2)``."""

    u1: float
    u2: float

    def __post_init__(self):
        if self.u1 < 0:
            raise ValueError(f"u1 must be non-negative, got {self.u1}")


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def cholesky_upper(y: SpdMatrix) -> UpperTriangular:
    """Upper-triangular factor ``U`` with ``U.T @ U == y`` and positive diagonal."""
    u11 = math.sqrt(y.x11)
    u12 = y.x12 / u11
    u22 = math.sqrt(y.det / y.x11)
    return UpperTriangular(u11, u12, u22)


def eigen_sorted(y: SpdMatrix) -> EigenPair:
    a1, a2, theta = eigen_sorted_batch(y.to_array()[None])
    return EigenPair(float(a1[0]), float(a2[0]), float(theta[0]))


def convolve(x: SpdMatrix, z: SpdMatrix) -> SpdMatrix:
    """Group convolution ``x^{t/2} z x^{1/2}`` with the Cholesky square root."""
    u = cholesky_upper(x).to_array()
    return SpdMatrix.from_array(u.T @ z.to_array() @ u)


def to_polar(e: EigenPair) -> PolarPoint:
    return PolarPoint(0.5 * math.log(e.a1 / e.a2), 0.5 * math.log(e.a1 * e.a2))


def from_polar(u: PolarPoint) -> EigenPair:
    return EigenPair(math.exp(u.u1 + u.u2), math.exp(-u.u1 + u.u2), 0.0)


def principal_minors(y: SpdMatrix) -> tuple[float, float]:
    return y.x11, y.det


# --- vectorized helpers -----------------------------------------------------


def as_matrix_stack(ys) -> np.ndarray:
    """Coerce matrices to a float array of shape ``(n, 2, 2)``.

    Accepts a sequence of ``SpdMatrix``, an ``(n, 2, 2)`` array or an
    ``(n, 3)`` array of ``(y11, y12, y22)`` rows.
    """
    if len(ys) and isinstance(ys[0], SpdMatrix):
        return np.stack([y.to_array() for y in ys])
    arr = np.asarray(ys, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 3:
        out = np.empty((arr.shape[0], 2, 2))
        out[:, 0, 0] = arr[:, 0]
        out[:, 0, 1] = out[:, 1, 0] = arr[:, 1]
        out[:, 1, 1] = arr[:, 2]
        return out
    if arr.ndim != 3 or arr.shape[1:] != (2, 2):
        raise ValueError(f"expected shape (n, 2, 2) or (n, 3), got {arr.shape}")
    return arr


def is_positive_definite(ys) -> np.ndarray:
    """Boolean mask using the same singularity threshold as ``SpdMatrix``."""
    ys = as_matrix_stack(ys)
    x11, x12, x22 = ys[:, 0, 0], ys[:, 0, 1], ys[:, 1, 1]
    det = x11 * x22 - x12 * x12
    with np.errstate(invalid="ignore"):
        return (x11 > 0) & (x22 > 0) & (det > SINGULAR_RTOL * x11 * x22) & np.isfinite(det)


def cholesky_upper_batch(ys) -> np.ndarray:
    ys = as_matrix_stack(ys)
    u = np.zeros_like(ys)
    u[:, 0, 0] = np.sqrt(ys[:, 0, 0])
    u[:, 0, 1] = ys[:, 0, 1] / u[:, 0, 0]
    det = ys[:, 0, 0] * ys[:, 1, 1] - ys[:, 0, 1] ** 2
    u[:, 1, 1] = np.sqrt(det / ys[:, 0, 0])
    return u


def convolve_batch(xs, zs) -> np.ndarray:
    u = cholesky_upper_batch(xs)
    return np.einsum("nji,njk,nkl->nil", u, as_matrix_stack(zs), u)


def eigen_sorted_batch(ys):
    """Sorted eigenvalues and rotation angles for a stack of matrices.

    Returns ``(a1, a2, theta)`` with ``a1 >= a2`` and ``theta`` in
    ``(-pi/2, pi/2]``; ties get ``theta = 0``.
    """
    ys = as_matrix_stack(ys)
    p, q, r = ys[:, 0, 0], ys[:, 0, 1], ys[:, 1, 1]
    half_diff = 0.5 * (p - r)
    d = np.hypot(half_diff, q)
    a1 = 0.5 * (p + r) + d
    # product form avoids cancellation in the small eigenvalue
    a2 = np.minimum((p * r - q * q) / a1, a1)
    theta = np.where(d > 0, 0.5 * np.arctan2(-2.0 * q, p - r), 0.0)
    theta = np.where(theta <= -0.5 * np.pi, theta + np.pi, theta)
    return a1, a2, theta


def polar_batch(a1, a2):
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    return 0.5 * np.log(a1 / a2), 0.5 * np.log(a1 * a2)


def from_polar_batch(u1, u2):
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    return np.exp(u1 + u2), np.exp(-u1 + u2)


def as_eigen_array(eigs) -> np.ndarray:
    """Coerce eigenvalue data to an ``(n, 2)`` array of ``(a1, a2)`` rows."""
    if len(eigs) and isinstance(eigs[0], EigenPair):
        return np.array([[e.a1, e.a2] for e in eigs], dtype=float)
    arr = np.asarray(eigs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected eigenvalue pairs of shape (n, 2), got {arr.shape}")
    if np.any(arr[:, 1] <= 0) or np.any(arr[:, 0] < arr[:, 1]):
        raise ValueError("eigenvalue pairs must satisfy a1 >= a2 > 0")
    return arr


def eigenvalues_of(ys) -> np.ndarray:
    """``(n, 2)`` array of sorted eigenvalues of a matrix stack."""
    a1, a2, _ = eigen_sorted_batch(ys)
    return np.column_stack([a1, a2])
