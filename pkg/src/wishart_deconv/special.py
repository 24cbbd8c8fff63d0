"""Scalar special functions: log-gamma, multivariate gamma, conical functions.

The conical (Mehler) function ``P_{-1/2+it}(x)`` has three evaluators:

* ``conical_legendre`` -- adaptive quadrature of the Laplace integral
  ``(1/pi) int_0^pi (x + sqrt(x^2-1) cos phi)^(-1/2+it) dphi``;
* ``conical_legendre_mehler`` -- adaptive quadrature of the Mehler-Dirichlet
  integral, used as an independent cross-check;
* ``conical_table`` -- fixed-order Gauss-Legendre evaluation of the
  Mehler-Dirichlet form after the substitution ``theta = r (1 - tau^2)``,
  vectorized over many ``(t, r)`` pairs for the estimator.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, special

# Plancherel density constant in (b1, beta2) coordinates over b1 >= 0:
# 1/(4 pi) from the polar measure times 1/(2 pi) from Fourier inversion in u2.
KAPPA2 = 1.0 / (8.0 * math.pi**2)

QUAD_EPSABS = 1e-10
QUAD_EPSREL = 1e-8
QUAD_LIMIT = 1000  # max adaptive subintervals


class PoleError(ValueError):
    """Argument hits a pole of the gamma function."""


def _is_pole(z: complex) -> bool:
    return z.imag == 0 and z.real <= 0 and float(z.real).is_integer()


def log_gamma_complex(z) -> complex:
    """Principal branch of ``log Gamma(z)``."""
    z = complex(z)
    if _is_pole(z):
        raise PoleError(f"log-gamma pole at z={z}")
    return complex(special.loggamma(z))


def multivariate_gamma_log(*s) -> complex:
    """``log Gamma_m(s_1, ..., s_m)`` for ``m = len(s)``.

    ``Gamma_m(s) = pi^{m(m-1)/4} prod_j Gamma(s_j + ... + s_m - (j-1)/2)``;
    at ``m = 2`` this is ``sqrt(pi) Gamma(s1 + s2) Gamma(s2 - 1/2)``.
    """
    m = len(s)
    if m == 0:
        raise ValueError("need at least one argument")
    s = [complex(v) for v in s]
    total = complex(m * (m - 1) / 4 * math.log(math.pi))
    for j in range(m):
        arg = sum(s[j:]) - 0.5 * j
        if _is_pole(arg):
            raise PoleError(f"factor {j + 1} of Gamma_{m} has a pole (argument {arg})")
        total += complex(special.loggamma(arg))
    return total


def _laplace_integrand(t: float, x: float):
    root = math.sqrt(x * x - 1.0)

    def re(phi):
        lb = math.log(x + root * math.cos(phi))
        return math.exp(-0.5 * lb) * math.cos(t * lb)

    return re


def conical_legendre(t: float, x: float) -> float:
    """Conical function ``P_{-1/2+it}(x)`` for ``x >= 1``.

    The imaginary part of the Laplace integral vanishes by symmetry, so only
    the real part is integrated.
    """
    if x < 1:
        raise ValueError(f"conical_legendre requires x >= 1, got {x}")
    if x == 1:
        return 1.0
    re = _laplace_integrand(t, x)
    # the integrand peaks near phi = pi with width ~ sqrt(2 (x - root) / root)
    root = math.sqrt(x * x - 1.0)
    width = math.sqrt(2.0 * (x - root) / root)
    breaks = [p for p in (math.pi - 4 * width, math.pi - width) if 0 < p < math.pi]
    val, _ = integrate.quad(
        re, 0.0, math.pi, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL,
        limit=QUAD_LIMIT, points=breaks or None,
    )
    return val / math.pi


def conical_legendre_mehler(t: float, x: float) -> float:
    """Mehler-Dirichlet representation, for cross-checking.

    ``P_{-1/2+it}(cosh r) = (2/pi) int_0^r cos(t th) / sqrt(2 (cosh r - cosh th)) dth``,
    integrated after ``th = r (1 - tau^2)`` to remove the endpoint singularity.
    """
    if x < 1:
        raise ValueError(f"conical_legendre_mehler requires x >= 1, got {x}")
    r = math.acosh(x)
    if r == 0:
        return 1.0

    def integrand(tau):
        th = r * (1.0 - tau * tau)
        # cosh r - cosh th = 2 sinh((r+th)/2) sinh((r-th)/2), r - th = r tau^2
        denom = math.sqrt(4.0 * math.sinh(0.5 * (r + th)) * _sinh_over_x(0.5 * r * tau * tau) * 0.5 * r)
        return math.cos(t * th) * 2.0 * r / denom

    val, _ = integrate.quad(integrand, 0.0, 1.0, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=QUAD_LIMIT)
    return 2.0 / math.pi * val


def _sinh_over_x(x):
    return math.sinh(x) / x if x != 0 else 1.0


def _conical_nodes(tr_max: float) -> int:
    return int(min(2000, 48 + math.ceil(1.5 * tr_max)))


def conical_table(t, r, n_nodes: int | None = None) -> np.ndarray:
    """``P_{-1/2+i t_k}(cosh r_j)`` for all pairs, shape ``(len(r), len(t))``.

    ``r`` is the geodesic argument (``x = cosh r``), not ``x`` itself.
    Gauss-Legendre on the smooth Mehler-Dirichlet form; the node count
    grows with ``max |t| * max r`` to resolve the oscillation.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r < 0):
        raise ValueError("r must be non-negative")
    out = np.ones((r.size, t.size))
    pos = r > 0
    if not np.any(pos) or t.size == 0:
        return out
    rp = r[pos]
    if n_nodes is None:
        n_nodes = _conical_nodes(float(np.max(np.abs(t))) * float(rp.max()) + float(rp.max()))
    tau, wts = np.polynomial.legendre.leggauss(n_nodes)
    tau = 0.5 * (tau + 1.0)
    wts = 0.5 * wts
    tau2 = tau * tau
    th = rp[:, None] * (1.0 - tau2[None, :])
    half_gap = 0.5 * rp[:, None] * tau2[None, :]
    sinhc = np.sinh(half_gap) / half_gap
    denom = np.sqrt(4.0 * np.sinh(0.5 * (rp[:, None] + th)) * sinhc * 0.5 * rp[:, None])
    kern = (2.0 / math.pi) * wts[None, :] * 2.0 * rp[:, None] / denom
    # chunk over t to bound memory at (n_r, n_nodes) per step
    block = max(1, int(4_000_000 // max(1, rp.size * n_nodes)))
    res = np.empty((rp.size, t.size))
    for start in range(0, t.size, block):
        tt = t[start:start + block]
        res[:, start:start + block] = np.einsum("rk,rkt->rt", kern, np.cos(th[:, :, None] * tt[None, None, :]))
    out[pos] = res
    return out


def plancherel_weight(b1):
    """Spectral density ``KAPPA2 * |b1| * tanh(pi |b1|)`` (flat in beta2)."""
    b = np.abs(np.asarray(b1, dtype=float))
    w = KAPPA2 * b * np.tanh(math.pi * b)
    return float(w) if w.ndim == 0 else w
