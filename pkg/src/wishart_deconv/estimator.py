"""Spectral-cutoff deconvolution of the eigenvalue mixing density.

Given eigenvalues ``E_j`` of observations ``Y_j = X_j^{t/2} Z_j X_j^{1/2}``
with ``Z_j ~ W_N(I_2)``, the estimate at ``a = diag(a1, a2)`` is

    f_n(a) = int_{lambda_s < T} Re{ rhat_n(s) / what(s) * h_s(a) } d*s,

with ``rhat_n(s) = mean_j conj(h_s(E_j))``.  The cutoff ``T`` is chosen by
minimizing an unbiased estimate of the integrated squared error risk.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .spd import as_eigen_array, polar_batch
from .transform import (
    DEFAULT_AMPLIFICATION_CAP,
    CutoffRegion,
    QuadratureSpec,
    SpectralBasis,
    SpectralNodes,
    spectral_nodes,
    wishart_transform_array,
)

# Normalizing constant b_2 of d*a = b_2 gamma(a) da1 da2 / (a1 a2).
B2 = math.pi / 2
# Integrals over the chamber a1 > a2 against d*a are this fraction of the
# corresponding integral over the whole cone against d*y.
CHAMBER_FRACTION = 0.5

DEFAULT_T_GRID = tuple(float(t) for t in np.geomspace(0.5, 200.0, 25))


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Evaluation grid: geometric nodes per eigenvalue axis.

    Without explicit ``bounds`` the range of each axis spans the given
    quantiles of the observed eigenvalues divided by ``N`` (``E[Y | X] = N X``).
    """

    n_a1: int = 40
    n_a2: int = 40
    bounds: tuple[float, float, float, float] | None = None  # a1_lo, a1_hi, a2_lo, a2_hi
    quantiles: tuple[float, float] = (0.01, 0.99)

    def __post_init__(self):
        if self.n_a1 < 2 or self.n_a2 < 2:
            raise ValueError("grid needs at least 2 nodes per axis")


@dataclass(frozen=True)
class EstimatorConfig:
    N: float = 20.0
    T: float | None = None
    T_grid: tuple[float, ...] = DEFAULT_T_GRID
    quad: QuadratureSpec = field(default_factory=QuadratureSpec)
    amplification_cap: float = DEFAULT_AMPLIFICATION_CAP
    grid: GridSpec = field(default_factory=GridSpec)
    clip: bool = False

    def __post_init__(self):
        if not self.N > 0.5:
            raise ValueError(f"N must exceed 1/2, got {self.N}")
        if self.T is not None and not self.T > 0.125:
            raise ValueError(f"T must exceed 1/8, got {self.T}")
        if not self.T_grid or any(not t > 0.125 for t in self.T_grid):
            raise ValueError("T_grid must be non-empty with every entry above 1/8")
        if not self.amplification_cap >= 1:
            raise ValueError("amplification_cap must be >= 1")

    def with_T(self, T: float) -> EstimatorConfig:
        return EstimatorConfig(self.N, T, self.T_grid, self.quad, self.amplification_cap, self.grid, self.clip)


@dataclass
class DensityGrid:
    """Density values on a rectangular eigenvalue grid.

    ``values[i, k]`` is the density at ``diag(a1_nodes[i], a2_nodes[k])``.
    Values are filled on the whole rectangle (the density is symmetric in the
    two eigenvalues) but ``weights`` vanish off the chamber ``a1 > a2``, so
    sums against ``weights`` integrate over ``a1 > a2`` w.r.t. ``d*a``.
    """

    a1_nodes: np.ndarray
    a2_nodes: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.a1_nodes = np.asarray(self.a1_nodes, dtype=float)
        self.a2_nodes = np.asarray(self.a2_nodes, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        shape = (self.a1_nodes.size, self.a2_nodes.size)
        if self.values.shape != shape or self.weights.shape != shape:
            raise ValueError("values/weights shape does not match the nodes")
        for nodes in (self.a1_nodes, self.a2_nodes):
            if np.any(nodes <= 0) or np.any(np.diff(nodes) <= 0):
                raise ValueError("grid nodes must be positive and strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density values must be finite")
        if np.any(self.weights < 0):
            raise ValueError("measure weights must be non-negative")

    @property
    def chamber(self) -> np.ndarray:
        return self.a1_nodes[:, None] > self.a2_nodes[None, :]

    def same_nodes(self, other: DensityGrid) -> bool:
        return (
            self.a1_nodes.shape == other.a1_nodes.shape
            and self.a2_nodes.shape == other.a2_nodes.shape
            and np.array_equal(self.a1_nodes, other.a1_nodes)
            and np.array_equal(self.a2_nodes, other.a2_nodes)
        )

    def integral(self) -> float:
        return float(np.sum(self.values * self.weights))

    def local_maxima(self, rel_height: float = 0.1) -> list[tuple[int, int]]:
        """Chamber nodes above all chamber neighbours (8-neighbourhood).

        Maxima lower than ``rel_height`` times the global maximum are dropped;
        a sharp spectral cutoff leaves small ripples in the tails.
        """
        v = np.where(self.chamber, self.values, -np.inf)
        n1, n2 = v.shape
        padded = np.full((n1 + 2, n2 + 2), -np.inf)
        padded[1:-1, 1:-1] = v
        is_max = self.chamber & (v >= rel_height * np.max(v))
        for di in (-1, 0, 1):
            for dk in (-1, 0, 1):
                if di == 0 and dk == 0:
                    continue
                is_max &= v > padded[1 + di:n1 + 1 + di, 1 + dk:n2 + 1 + dk]
        return [tuple(int(x) for x in ik) for ik in np.argwhere(is_max)]

    def total_variation(self) -> float:
        """Sum of absolute differences between adjacent chamber nodes."""
        c = self.chamber
        v = self.values
        tv = np.abs(np.diff(v, axis=0))[c[1:] & c[:-1]].sum()
        tv += np.abs(np.diff(v, axis=1))[c[:, 1:] & c[:, :-1]].sum()
        return float(tv)

    # --- serialization --------------------------------------------------

    def to_csv(self, path) -> None:
        """Columns ``a1, a2, value, weight``; one row per node, a1-major."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a1", "a2", "value", "weight"])
            for i, a1 in enumerate(self.a1_nodes):
                for k, a2 in enumerate(self.a2_nodes):
                    w.writerow([repr(float(a1)), repr(float(a2)), repr(float(self.values[i, k])), repr(float(self.weights[i, k]))])

    @classmethod
    def from_csv(cls, path) -> DensityGrid:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        a1 = np.array(sorted({float(r["a1"]) for r in rows}))
        a2 = np.array(sorted({float(r["a2"]) for r in rows}))
        values = np.full((a1.size, a2.size), np.nan)
        weights = np.full((a1.size, a2.size), np.nan)
        i1 = {v: i for i, v in enumerate(a1)}
        i2 = {v: i for i, v in enumerate(a2)}
        for r in rows:
            i, k = i1[float(r["a1"])], i2[float(r["a2"])]
            values[i, k] = float(r["value"])
            weights[i, k] = float(r["weight"])
        return cls(a1, a2, values, weights)

    def to_dict(self) -> dict:
        return {
            "a1_nodes": self.a1_nodes.tolist(),
            "a2_nodes": self.a2_nodes.tolist(),
            "values": self.values.ravel().tolist(),
            "weights": self.weights.ravel().tolist(),
            "layout": "row-major, a1 index outer",
            "meta": self.meta,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> DensityGrid:
        a1 = np.asarray(d["a1_nodes"], dtype=float)
        a2 = np.asarray(d["a2_nodes"], dtype=float)
        shape = (a1.size, a2.size)
        return cls(
            a1, a2,
            np.asarray(d["values"], dtype=float).reshape(shape),
            np.asarray(d["weights"], dtype=float).reshape(shape),
            dict(d.get("meta", {})),
        )

    @classmethod
    def from_json(cls, path) -> DensityGrid:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def measure_weights(a1_nodes, a2_nodes) -> np.ndarray:
    """Trapezoid weights in log coordinates for ``d*a`` on the chamber ``a1 > a2``."""
    def log_trap(nodes):
        logs = np.log(nodes)
        w = np.zeros_like(logs)
        d = np.diff(logs)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
        return w

    a1 = np.asarray(a1_nodes, dtype=float)[:, None]
    a2 = np.asarray(a2_nodes, dtype=float)[None, :]
    gamma = np.abs(a1 - a2) / np.sqrt(a1 * a2)
    w = B2 * gamma * np.outer(log_trap(a1_nodes), log_trap(a2_nodes))
    return np.where(a1 > a2, w, 0.0)


def make_grid(spec: GridSpec, eigs=None, N: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nodes and weights of the evaluation grid."""
    if spec.bounds is not None:
        lo1, hi1, lo2, hi2 = spec.bounds
    else:
        if eigs is None:
            raise ValueError("grid bounds need either explicit bounds or observed eigenvalues")
        arr = as_eigen_array(eigs) / N
        lo1, hi1 = np.quantile(arr[:, 0], spec.quantiles)
        lo2, hi2 = np.quantile(arr[:, 1], spec.quantiles)
    if not (0 < lo1 < hi1 and 0 < lo2 < hi2):
        raise ValueError(f"degenerate grid bounds {(lo1, hi1, lo2, hi2)}")
    a1 = np.geomspace(lo1, hi1, spec.n_a1)
    a2 = np.geomspace(lo2, hi2, spec.n_a2)
    return a1, a2, measure_weights(a1, a2)


def _grid_polar(a1_nodes, a2_nodes):
    A1, A2 = np.meshgrid(a1_nodes, a2_nodes, indexing="ij")
    hi, lo = np.maximum(A1, A2), np.minimum(A1, A2)
    return polar_batch(hi.ravel(), lo.ravel())


class SampleSpectrum:
    """Empirical spectral quantities of a sample on the node set of one cutoff.

    Nodes where ``1 / |what(s)|`` exceeds the amplification cap are dropped;
    their count is kept in ``excluded``.
    """

    def __init__(self, eigs, T: float, cfg: EstimatorConfig):
        arr = as_eigen_array(eigs)
        if arr.shape[0] == 0:
            raise EstimationError("empty sample")
        self.n = arr.shape[0]
        self.T = T
        nodes = spectral_nodes(CutoffRegion(T), cfg.quad)
        what = wishart_transform_array(nodes.b1, nodes.beta2, cfg.N)
        ok = np.abs(what) * cfg.amplification_cap >= 1.0
        self.excluded = int(np.count_nonzero(~ok))
        self.total_nodes = len(nodes)
        if not np.any(ok):
            raise EstimationError(
                f"all {self.total_nodes} spectral nodes excluded by the amplification guard (T={T})"
            )
        self.nodes: SpectralNodes = nodes.subset(ok)
        self.what = what[ok]
        u1, u2 = polar_batch(arr[:, 0], arr[:, 1])
        basis = SpectralBasis(u1, u2, self.nodes)
        self.sum_conj_h = basis.analysis()
        self.sum_sq_h = basis.squared_modulus_sum()

    @property
    def rhat(self) -> np.ndarray:
        return self.sum_conj_h / self.n

    @property
    def fhat(self) -> np.ndarray:
        return self.rhat / self.what

    def pairwise(self) -> np.ndarray:
        """U-statistic ``(1/(n(n-1))) sum_{j != l} conj(h(E_j)) h(E_l)``, real-valued."""
        n = self.n
        return (np.abs(self.sum_conj_h) ** 2 - self.sum_sq_h) / (n * (n - 1))

    def risk(self) -> float:
        if self.n < 2:
            raise EstimationError("unbiased risk needs at least 2 observations")
        integrand = (np.abs(self.rhat) ** 2 - 2.0 * self.pairwise()) / np.abs(self.what) ** 2
        return CHAMBER_FRACTION * float(np.sum(self.nodes.weight * integrand))

    def evaluate(self, u1, u2) -> np.ndarray:
        basis = SpectralBasis(u1, u2, self.nodes)
        return basis.synthesis(self.fhat * self.nodes.weight).real


def deconvolve(eigs, cfg: EstimatorConfig, workers: int = 1) -> DensityGrid:
    """Estimate the eigenvalue mixing density on the configured grid.

    Uses ``cfg.T`` when set, otherwise the risk-minimizing cutoff over
    ``cfg.T_grid``.  Values are left signed unless ``cfg.clip`` is set, in
    which case negatives are zeroed and the chamber integral is restored.
    """
    arr = as_eigen_array(eigs)
    if arr.shape[0] == 0:
        raise EstimationError("empty sample")
    curve = None
    if cfg.T is None:
        curve = risk_curve(arr, cfg, workers)
        T = _argmin_T(*curve)
    else:
        T = cfg.T
    spec = SampleSpectrum(arr, T, cfg)
    a1, a2, weights = make_grid(cfg.grid, arr, cfg.N)
    u1, u2 = _grid_polar(a1, a2)
    values = spec.evaluate(u1, u2).reshape(a1.size, a2.size)
    if cfg.clip:
        before = np.sum(values * weights)
        values = np.clip(values, 0.0, None)
        after = np.sum(values * weights)
        if after > 0:
            values *= before / after
    meta = {
        "T": T,
        "T_selected": cfg.T is None,
        "T_at_grid_edge": cfg.T is None and T in (min(cfg.T_grid), max(cfg.T_grid)),
        "n": int(arr.shape[0]),
        "N": cfg.N,
        "quadrature": cfg.quad.mode,
        "spectral_nodes": spec.total_nodes,
        "excluded_nodes": spec.excluded,
        "clipped": cfg.clip,
    }
    if curve is not None:
        meta["risk_curve"] = {"T": curve[0].tolist(), "risk": curve[1].tolist()}
    return DensityGrid(a1, a2, values, weights, meta)


def unbiased_risk(eigs, cfg: EstimatorConfig, T: float | None = None) -> float:
    """Unbiased estimate of ``E int f_n^2 d*a - 2 E int f_n f d*a`` at cutoff ``T``.

    In the spectral domain this is ``int (|rhat|^2 - 2 Phat) / |what|^2 d*s``
    over the cutoff disk, with ``Phat`` the pairwise U-statistic estimating
    ``|r^(s)|^2``, scaled to the chamber measure.
    """
    arr = as_eigen_array(eigs)
    if arr.shape[0] < 2:
        raise EstimationError("unbiased risk needs at least 2 observations")
    T = cfg.T if T is None else T
    if T is None:
        raise ValueError("no cutoff given")
    return SampleSpectrum(arr, T, cfg).risk()


def _risk_task(task):
    arr, T, cfg = task
    return SampleSpectrum(arr, T, cfg).risk()


def risk_curve(eigs, cfg: EstimatorConfig, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """``M0(T)`` over ``cfg.T_grid``; entries are independent and may run in a process pool."""
    arr = as_eigen_array(eigs)
    if arr.shape[0] < 2:
        raise EstimationError("unbiased risk needs at least 2 observations")
    Ts = np.asarray(cfg.T_grid, dtype=float)
    tasks = [(arr, float(T), cfg) for T in Ts]
    if workers <= 1:
        risks = [_risk_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            risks = list(pool.map(_risk_task, tasks))
    return Ts, np.array(risks)


def _argmin_T(Ts, risks) -> float:
    order = np.lexsort((Ts, risks))
    return float(Ts[order[0]])


def select_cutoff(eigs, cfg: EstimatorConfig, workers: int = 1) -> float:
    """Grid cutoff minimizing the unbiased risk; ties go to the smaller ``T``."""
    return _argmin_T(*risk_curve(eigs, cfg, workers))


def mise_against(estimate: DensityGrid, reference: DensityGrid) -> float:
    """Integrated squared error over the chamber w.r.t. ``d*a``."""
    if not estimate.same_nodes(reference):
        raise ValueError("estimate and reference are on different grids")
    return float(np.sum((estimate.values - reference.values) ** 2 * reference.weights))
