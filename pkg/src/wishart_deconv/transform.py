"""Spherical transform on the cone of 2x2 SPD matrices.

Spectral points sit on the critical line ``s = (-1/2 + i b1, 1/4 + i b2)``
and are parametrized here by ``(b1, beta2)`` with ``beta2 = b1 + 2 b2``.
In polar coordinates ``u = (u1, u2)`` the zonal spherical function is

    h_s(u) = P_{-1/2 + i b1}(cosh u1) * exp(i beta2 u2),

and the Laplacian eigenvalue is ``lambda = (b1^2 + beta2^2 + 1/4) / 2``.

Inversion of a K-invariant density integrates over the half plane
``b1 >= 0`` against ``plancherel_weight(b1) db1 dbeta2``.  Real densities
have ``fhat(b1, -beta2) = conj(fhat(b1, beta2))``, so quadrature nodes are
laid on the quarter disk ``beta2 >= 0`` with doubled weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .spd import EigenPair, SpdMatrix, as_eigen_array, polar_batch, principal_minors, to_polar
from .special import (
    KAPPA2,
    PoleError,
    conical_legendre,
    conical_table,
    multivariate_gamma_log,
    plancherel_weight,
)

LOG2 = math.log(2.0)
DEFAULT_AMPLIFICATION_CAP = 1e12


def laplacian_eigenvalue(b1, beta2):
    return 0.5 * (np.square(b1) + np.square(beta2) + 0.25)


@dataclass(frozen=True)
class SpectralPoint:
    b1: float
    beta2: float

    @property
    def b2(self) -> float:
        return 0.5 * (self.beta2 - self.b1)

    @property
    def s1(self) -> complex:
        return complex(-0.5, self.b1)

    @property
    def s2(self) -> complex:
        return complex(0.25, self.b2)

    @property
    def lam(self) -> float:
        return float(laplacian_eigenvalue(self.b1, self.beta2))


@dataclass(frozen=True)
class CutoffRegion:
    """Spectral points with ``lambda < T``: the disk ``b1^2 + beta2^2 < 2T - 1/4``."""

    T: float

    def __post_init__(self):
        if not self.T > 0.125:
            raise ValueError(f"cutoff T must exceed 1/8, got {self.T}")

    @property
    def radius(self) -> float:
        return math.sqrt(2.0 * self.T - 0.25)

    def contains(self, s: SpectralPoint) -> bool:
        return s.lam < self.T


@dataclass(frozen=True)
class QuadratureSpec:
    """Spectral integration scheme.

    ``grid``: tensor Gauss-Legendre on the bounding square of the quarter disk
    with an indicator for ``lambda < T``.  ``monte-carlo``: uniform points on
    the quarter disk.
    """

    mode: str = "grid"
    nodes_per_axis: int = 64
    n_samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("grid", "monte-carlo"):
            raise ValueError(f"unknown quadrature mode {self.mode!r}")
        if self.nodes_per_axis < 1 or self.n_samples < 1:
            raise ValueError("quadrature counts must be positive")


@dataclass(frozen=True)
class SpectralNodes:
    """Quadrature nodes with weights that already include the Plancherel density."""

    b1: np.ndarray
    beta2: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return self.b1.size

    def subset(self, mask) -> SpectralNodes:
        return SpectralNodes(self.b1[mask], self.beta2[mask], self.weight[mask])


def spectral_nodes(region: CutoffRegion, quad: QuadratureSpec = QuadratureSpec()) -> SpectralNodes:
    R = region.radius
    if quad.mode == "grid":
        x, w = np.polynomial.legendre.leggauss(quad.nodes_per_axis)
        x = 0.5 * R * (x + 1.0)
        w = 0.5 * R * w
        b1, beta2 = np.meshgrid(x, x, indexing="ij")
        wt = np.outer(w, w)
        inside = b1**2 + beta2**2 < R * R
        b1, beta2, wt = b1[inside], beta2[inside], wt[inside]
    else:
        rng = np.random.default_rng(quad.seed)
        rad = R * np.sqrt(rng.random(quad.n_samples))
        ang = 0.5 * math.pi * rng.random(quad.n_samples)
        b1, beta2 = rad * np.cos(ang), rad * np.sin(ang)
        wt = np.full(quad.n_samples, 0.25 * math.pi * R * R / quad.n_samples)
    return SpectralNodes(b1, beta2, 2.0 * wt * plancherel_weight(b1))


# --- spherical functions ----------------------------------------------------


def power_function(s: SpectralPoint, y: SpdMatrix) -> complex:
    m1, m2 = principal_minors(y)
    return complex(np.exp(s.s1 * math.log(m1) + s.s2 * math.log(m2)))


def spherical_function(s: SpectralPoint, e: EigenPair) -> complex:
    u = to_polar(e)
    p = conical_legendre(s.b1, math.cosh(u.u1))
    return p * complex(math.cos(s.beta2 * u.u2), math.sin(s.beta2 * u.u2))


def _polar_of(eigs):
    if isinstance(eigs, EigenPair):
        eigs = [eigs]
    arr = as_eigen_array(eigs)
    return polar_batch(arr[:, 0], arr[:, 1])


class SpectralBasis:
    """Spherical functions of a fixed node set evaluated at fixed points.

    Stores ``P[j, i] = P_{-1/2 + i b1_i}(cosh u1_j)`` over the distinct ``b1``
    values and ``E[j, k] = exp(i beta2_k u2_j)`` over the distinct ``beta2``
    values, so ``h_node(u_j) = P[j, ib1[node]] * E[j, ib2[node]]``.
    """

    def __init__(self, u1, u2, nodes: SpectralNodes):
        self.u1 = np.asarray(u1, dtype=float)
        self.u2 = np.asarray(u2, dtype=float)
        self.nodes = nodes
        b1u, self.ib1 = np.unique(nodes.b1, return_inverse=True)
        b2u, self.ib2 = np.unique(nodes.beta2, return_inverse=True)
        self.P = conical_table(b1u, self.u1)
        self.E = np.exp(1j * self.u2[:, None] * b2u[None, :])
        # dense path pays off when the node set is (close to) a tensor grid
        self.dense = b1u.size * b2u.size <= 4 * max(1, len(nodes))

    def analysis(self) -> np.ndarray:
        """``sum_j conj(h_node(u_j))`` for every node."""
        if self.dense:
            M = self.P.T @ np.conj(self.E)
            return M[self.ib1, self.ib2]
        out = np.zeros(len(self.nodes), dtype=complex)
        for sl in _chunks(self.u1.size, len(self.nodes)):
            out += np.sum(self.P[sl][:, self.ib1] * np.conj(self.E[sl][:, self.ib2]), axis=0)
        return out

    def squared_modulus_sum(self) -> np.ndarray:
        """``sum_j |h_node(u_j)|^2`` (the phase factor has unit modulus)."""
        return np.sum(self.P**2, axis=0)[self.ib1]

    def synthesis(self, coeffs) -> np.ndarray:
        """``sum_node coeffs[node] * h_node(u_j)`` for every point ``j``."""
        coeffs = np.asarray(coeffs, dtype=complex)
        if self.dense:
            C = np.zeros((self.P.shape[1], self.E.shape[1]), dtype=complex)
            np.add.at(C, (self.ib1, self.ib2), coeffs)
            G = self.E @ C.T
            return np.sum(self.P * G, axis=1)
        out = np.empty(self.u1.size, dtype=complex)
        for sl in _chunks(self.u1.size, len(self.nodes)):
            out[sl] = (self.P[sl][:, self.ib1] * self.E[sl][:, self.ib2]) @ coeffs
        return out


def _chunks(n_rows: int, n_cols: int, budget: int = 2_000_000):
    step = max(1, budget // max(1, n_cols))
    for start in range(0, n_rows, step):
        yield slice(start, min(n_rows, start + step))


# --- transforms -------------------------------------------------------------


def wishart_transform_array(b1, beta2, N: float) -> np.ndarray:
    """Closed-form spherical transform of the standard Wishart ``W_N(I_2)``.

    ``Gamma_2(s1, N/2 - s1 - s2) / Gamma_2(0, N/2) * 2^{-(s1 + 2 s2)}``.
    """
    if not N > 0.5:
        raise ValueError(f"degrees of freedom must exceed 1/2, got {N}")
    b1 = np.asarray(b1, dtype=float)
    beta2 = np.asarray(beta2, dtype=float)
    s1 = -0.5 + 1j * b1
    s2 = 0.25 + 0.5j * (beta2 - b1)
    log_num = special.loggamma(0.5 * N - s2) + special.loggamma(0.5 * N - s1 - s2 - 0.5)
    log_den = special.gammaln(0.5 * N) + special.gammaln(0.5 * N - 0.5)
    return np.exp(log_num - log_den - (s1 + 2.0 * s2) * LOG2)


def wishart_transform(s: SpectralPoint, N: float) -> complex:
    if not N > 0.5:
        raise ValueError(f"degrees of freedom must exceed 1/2, got {N}")
    try:
        num = multivariate_gamma_log(s.s1, -(s.s1 + s.s2) + 0.5 * N)
    except PoleError as exc:
        raise PoleError(f"Wishart transform undefined at {s}: {exc}") from exc
    den = multivariate_gamma_log(0.0, 0.5 * N)
    return complex(np.exp(num - den - (s.s1 + 2.0 * s.s2) * LOG2))


def amplification_ok(b1, beta2, N: float, cap: float = DEFAULT_AMPLIFICATION_CAP) -> np.ndarray:
    """True where dividing by the Wishart transform amplifies by at most ``cap``."""
    return np.abs(wishart_transform_array(b1, beta2, N)) * cap >= 1.0


def empirical_transform(eigs, s: SpectralPoint) -> complex:
    """``(1/n) sum_j conj(h_s(E_j))`` at one spectral point."""
    if len(eigs) == 0:
        raise ValueError("empirical transform of an empty sample")
    u1, u2 = _polar_of(eigs)
    p = conical_table([s.b1], u1)[:, 0]
    return complex(np.mean(p * np.exp(-1j * s.beta2 * u2)))


def empirical_transform_nodes(eigs, nodes: SpectralNodes) -> np.ndarray:
    if len(eigs) == 0:
        raise ValueError("empirical transform of an empty sample")
    u1, u2 = _polar_of(eigs)
    return SpectralBasis(u1, u2, nodes).analysis() / u1.size


class NonConvergenceError(RuntimeError):
    pass


def forward_transform_numeric(
    density: Callable,
    points,
    support: tuple[float, float, float],
    rtol: float = 1e-10,
    atol: float = 1e-12,
    start_nodes: int = 48,
    max_nodes: int = 1536,
) -> np.ndarray:
    """Spherical transform of a K-invariant density by 2D quadrature.

    Computes ``int density(u1, u2) conj(h_s(u)) 4 pi sinh(u1) du1 du2`` over
    ``support = (u1_max, u2_min, u2_max)`` with tensor Gauss-Legendre rules,
    doubling the node count until successive results agree.

    Args:
        density: vectorized callable ``density(u1, u2)`` (density w.r.t. the
            invariant measure on the cone).
        points: a ``SpectralPoint`` or a sequence of them.
    """
    single = isinstance(points, SpectralPoint)
    pts = [points] if single else list(points)
    b1 = np.array([p.b1 for p in pts])
    beta2 = np.array([p.beta2 for p in pts])
    u1_max, u2_min, u2_max = support

    def rule(n):
        x, w = np.polynomial.legendre.leggauss(n)
        u1 = 0.5 * u1_max * (x + 1.0)
        w1 = 0.5 * u1_max * w
        u2 = u2_min + 0.5 * (u2_max - u2_min) * (x + 1.0)
        w2 = 0.5 * (u2_max - u2_min) * w
        dens = density(u1[:, None], u2[None, :])
        radial = conical_table(b1, u1) * (w1 * 4.0 * math.pi * np.sinh(u1))[:, None]
        phase = np.exp(-1j * u2[:, None] * beta2[None, :]) * w2[:, None]
        return np.einsum("ik,is,ks->s", dens, radial, phase)

    n = start_nodes
    prev = rule(n)
    while n < max_nodes:
        n *= 2
        cur = rule(n)
        if np.all(np.abs(cur - prev) <= atol + rtol * np.abs(cur)):
            return cur[0] if single else cur
        prev = cur
    raise NonConvergenceError(f"forward transform did not converge with {n} nodes per axis")


def inverse_transform(
    fhat: Callable,
    e,
    region: CutoffRegion,
    quad: QuadratureSpec = QuadratureSpec(),
):
    """Cutoff inversion ``int_{lambda < T} Re{fhat(s) h_s(a)} d*s``.

    ``fhat(b1, beta2)`` is vectorized over node arrays.  ``e`` is an
    ``EigenPair`` (returns a float) or a sequence/array of eigenvalue pairs.
    """
    nodes = spectral_nodes(region, quad)
    values = np.asarray(fhat(nodes.b1, nodes.beta2), dtype=complex)
    u1, u2 = _polar_of(e)
    out = SpectralBasis(u1, u2, nodes).synthesis(values * nodes.weight).real
    return float(out[0]) if isinstance(e, EigenPair) else out


def plancherel_mass(fhat: Callable, region: CutoffRegion, quad: QuadratureSpec = QuadratureSpec()) -> float:
    """``int_{lambda < T} |fhat(s)|^2 d*s``."""
    nodes = spectral_nodes(region, quad)
    values = np.asarray(fhat(nodes.b1, nodes.beta2), dtype=complex)
    return float(np.sum(nodes.weight * np.abs(values) ** 2))


# --- reference densities and calibration -----------------------------------


def wishart_log_density_polar(u1, u2, N: float, scale: float = 1.0):
    """Log density of ``W_N(scale * I_2)`` w.r.t. ``d*y``, in polar coordinates.

    ``w(y) = |y|^{N/2} exp(-tr(y)/2) / (2^N Gamma_2(0, N/2))`` evaluated at
    ``y / scale``; ``|y| = exp(2 u2)`` and ``tr y = 2 exp(u2) cosh(u1)``.
    """
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float) - math.log(scale)
    return N * u2 - np.exp(u2) * np.cosh(u1) - wishart_log_norm(N)


def wishart_log_norm(N: float) -> float:
    """``log(2^N Gamma_2(0, N/2))``."""
    return N * LOG2 + multivariate_gamma_log(0.0, 0.5 * N).real


def calibrate_kappa(N: float = 20.0, T: float = 200.0, nodes_per_axis: int = 128, points=None) -> float:
    """Plancherel constant implied by inverting the Wishart transform.

    Inverts ``wishart_transform`` with unit constant and compares against the
    closed-form Wishart density; returns the mean ratio over ``points``
    (``(u1, u2)`` pairs, defaulting to a few points near the mode).
    """
    if points is None:
        c = math.log(N)
        points = [(0.1, c), (0.3, c - 0.1), (0.5, c - 0.1), (0.2, c + 0.15)]
    u1 = np.array([p[0] for p in points])
    u2 = np.array([p[1] for p in points])
    nodes = spectral_nodes(CutoffRegion(T), QuadratureSpec(nodes_per_axis=nodes_per_axis))
    raw = SpectralNodes(nodes.b1, nodes.beta2, nodes.weight / KAPPA2)
    recon = SpectralBasis(u1, u2, raw).synthesis(wishart_transform_array(raw.b1, raw.beta2, N) * raw.weight).real
    truth = np.exp(wishart_log_density_polar(u1, u2, N))
    return float(np.mean(truth / recon))
