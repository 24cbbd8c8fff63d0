"""Wishart and Wishart-mixture sampling, the simulation protocol and MISE studies.

Random streams come from numpy's ``PCG64`` bit generator seeded through
``SeedSequence(seed, spawn_key=stream)``, so each replicate owns an
addressable, independent stream regardless of how work is scheduled.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .estimator import DensityGrid, EstimatorConfig, GridSpec, deconvolve, make_grid, mise_against
from .spd import (
    SpdMatrix,
    cholesky_upper_batch,
    convolve_batch,
    eigen_sorted_batch,
    eigenvalues_of,
    polar_batch,
)
from .transform import wishart_log_density_polar, wishart_log_norm

RNG_ALGORITHM = "numpy.random.PCG64 via SeedSequence(seed, spawn_key=stream)"


def make_rng(seed: int, stream: tuple[int, ...] = ()) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(stream))))


@dataclass(frozen=True)
class Component:
    """Mixture component ``W_N(sigma)``; ``N=None`` is a point mass at ``sigma``."""

    weight: float
    N: float | None
    sigma: SpdMatrix

    @property
    def is_point_mass(self) -> bool:
        return self.N is None

    @property
    def isotropic(self) -> bool:
        return self.sigma.x12 == 0 and self.sigma.x11 == self.sigma.x22


@dataclass(frozen=True)
class MixtureSpec:
    components: tuple[Component, ...]

    def __post_init__(self):
        if not self.components:
            raise ValueError("mixture needs at least one component")
        weights = [c.weight for c in self.components]
        if any(w <= 0 for w in weights):
            raise ValueError("mixture weights must be positive")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must sum to 1, got {sum(weights)}")
        for c in self.components:
            if c.N is not None and not c.N > 1:
                raise ValueError(f"component degrees of freedom must exceed 1, got {c.N}")

    @classmethod
    def wishart(cls, N: float, scale: float) -> MixtureSpec:
        return cls((Component(1.0, N, SpdMatrix.identity(scale)),))

    @classmethod
    def point_mass(cls, sigma: SpdMatrix) -> MixtureSpec:
        return cls((Component(1.0, None, sigma),))

    def to_dict(self) -> dict:
        return {
            "components": [
                {"weight": c.weight, "N": c.N, "sigma": [c.sigma.x11, c.sigma.x12, c.sigma.x22]}
                for c in self.components
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> MixtureSpec:
        comps = []
        for i, c in enumerate(d["components"]):
            try:
                comps.append(Component(float(c["weight"]), None if c.get("N") is None else float(c["N"]), SpdMatrix(*map(float, c["sigma"]))))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"components[{i}]: {exc}") from exc
        return cls(tuple(comps))


UNIMODAL = MixtureSpec.wishart(15.0, 2.0)
BIMODAL = MixtureSpec((
    Component(0.5, 15.0, SpdMatrix.identity(2.0)),
    Component(0.5, 15.0, SpdMatrix.identity(6.0)),
))
PRESETS = {"unimodal": UNIMODAL, "bimodal": BIMODAL}


def sample_wishart(N: float, sigma: SpdMatrix, rng: np.random.Generator, size: int | None = None):
    """Draw from ``W_N(sigma)`` by the Bartlett decomposition.

    ``B = [[chi_N, z], [0, chi_{N-1}]]`` gives ``B.T @ B ~ W_N(I)``; with
    ``sigma = U.T @ U`` the draw is ``(B U).T (B U)``.  Returns a single
    ``(2, 2)`` array when ``size`` is None, else ``(size, 2, 2)``.
    """
    if not N > 1:
        raise ValueError(f"Bartlett sampling needs N > 1, got {N}")
    m = 1 if size is None else int(size)
    B = np.zeros((m, 2, 2))
    B[:, 0, 0] = np.sqrt(rng.chisquare(N, m))
    B[:, 1, 1] = np.sqrt(rng.chisquare(N - 1.0, m))
    B[:, 0, 1] = rng.standard_normal(m)
    U = cholesky_upper_batch(sigma.to_array()[None])[0]
    BU = B @ U
    out = np.transpose(BU, (0, 2, 1)) @ BU
    return out[0] if size is None else out


def sample_mixture(mixing: MixtureSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    weights = np.array([c.weight for c in mixing.components])
    labels = rng.choice(weights.size, size=size, p=weights / weights.sum())
    out = np.empty((size, 2, 2))
    for idx, comp in enumerate(mixing.components):
        sel = np.flatnonzero(labels == idx)
        if comp.is_point_mass:
            out[sel] = comp.sigma.to_array()
        elif sel.size:
            out[sel] = sample_wishart(comp.N, comp.sigma, rng, sel.size)
    return out


@dataclass(frozen=True)
class ProtocolConfig:
    n: int
    mixing: MixtureSpec = UNIMODAL
    noise_df: float = 20.0
    seed: int = 0
    stream: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be at least 1, got {self.n}")
        if not self.noise_df > 0.5:
            raise ValueError(f"noise_df must exceed 1/2, got {self.noise_df}")


def run_protocol(cfg: ProtocolConfig, return_mixing: bool = False):
    """Simulate ``Y_j = X_j^{t/2} Z_j X_j^{1/2}``, ``Z_j ~ W_{noise_df}(I)``, ``X_j ~ mixing``.

    Returns an ``(n, 2, 2)`` array (and the ``X_j`` when ``return_mixing``).
    """
    rng = make_rng(cfg.seed, cfg.stream)
    Z = sample_wishart(cfg.noise_df, SpdMatrix.identity(), rng, cfg.n)
    X = sample_mixture(cfg.mixing, rng, cfg.n)
    Y = convolve_batch(X, Z)
    return (Y, X) if return_mixing else Y


# --- reference densities -----------------------------------------------------


def _wishart_log_density(ys: np.ndarray, N: float, sigma: SpdMatrix) -> np.ndarray:
    inv = np.linalg.inv(sigma.to_array())
    scaled = inv @ ys
    det = np.linalg.det(scaled)
    tr = np.trace(scaled, axis1=-2, axis2=-1)
    return 0.5 * N * np.log(det) - 0.5 * tr - wishart_log_norm(N)


def mixture_density(mixing: MixtureSpec, a1, a2, n_angles: int = 128) -> np.ndarray:
    """K-averaged mixing density w.r.t. ``d*y`` at ``diag(a1, a2)``.

    Isotropic components use the closed form; others are averaged over
    rotations with a trapezoid rule in the angle.
    """
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    hi, lo = np.maximum(a1, a2), np.minimum(a1, a2)
    u1, u2 = polar_batch(hi, lo)
    out = np.zeros(np.broadcast(a1, a2).shape)
    for comp in mixing.components:
        if comp.is_point_mass:
            raise ValueError("a point-mass mixture has no density")
        if comp.isotropic:
            out += comp.weight * np.exp(wishart_log_density_polar(u1, u2, comp.N, comp.sigma.x11))
            continue
        thetas = np.arange(n_angles) * math.pi / n_angles
        acc = np.zeros_like(out)
        for th in thetas:
            c, s = math.cos(th), math.sin(th)
            ys = np.empty(out.shape + (2, 2))
            ys[..., 0, 0] = hi * c * c + lo * s * s
            ys[..., 1, 1] = hi * s * s + lo * c * c
            ys[..., 0, 1] = ys[..., 1, 0] = -(hi - lo) * c * s
            acc += np.exp(_wishart_log_density(ys, comp.N, comp.sigma))
        out += comp.weight * acc / n_angles
    return out


def reference_grid(mixing: MixtureSpec, a1_nodes, a2_nodes, weights) -> DensityGrid:
    A1, A2 = np.meshgrid(a1_nodes, a2_nodes, indexing="ij")
    return DensityGrid(a1_nodes, a2_nodes, mixture_density(mixing, A1, A2), weights, {"reference": "exact"})


def reference_grid_kde(mixing: MixtureSpec, a1_nodes, a2_nodes, weights, n_draws: int = 10**6, seed: int = 0) -> DensityGrid:
    """Reference density by kernel smoothing of direct mixing draws.

    Draws are embedded as ``(u1 cos 2 theta, u1 sin 2 theta, u2)``, where the
    invariant measure has the smooth Lebesgue density ``2 sinh(u1) / u1``;
    a Gaussian KDE with Scott's bandwidth is divided by it.
    """
    X = sample_mixture(mixing, make_rng(seed), n_draws)
    a1, a2, theta = eigen_sorted_batch(X)
    u1, u2 = polar_batch(a1, a2)
    pts = np.vstack([u1 * np.cos(2 * theta), u1 * np.sin(2 * theta), u2])
    kde = stats.gaussian_kde(pts, bw_method="scott")
    A1, A2 = np.meshgrid(a1_nodes, a2_nodes, indexing="ij")
    g1, g2 = polar_batch(np.maximum(A1, A2).ravel(), np.minimum(A1, A2).ravel())
    dens = kde(np.vstack([g1, np.zeros_like(g1), g2]))
    jac = np.where(g1 > 0, 2.0 * np.sinh(g1) / np.where(g1 > 0, g1, 1.0), 2.0)
    values = (dens / jac).reshape(A1.shape)
    return DensityGrid(a1_nodes, a2_nodes, values, weights, {"reference": "kde", "n_draws": n_draws})


def study_grid(mixing: MixtureSpec, n_a: int = 40, quantiles=(0.005, 0.995), seed: int = 12345, n_draws: int = 200_000) -> GridSpec:
    """Fixed grid covering the mixing eigenvalue distribution."""
    eig = eigenvalues_of(sample_mixture(mixing, make_rng(seed), n_draws))
    lo1, hi1 = np.quantile(eig[:, 0], quantiles)
    lo2, hi2 = np.quantile(eig[:, 1], quantiles)
    return GridSpec(n_a, n_a, (float(lo1), float(hi1), float(lo2), float(hi2)))


# --- replicate studies -------------------------------------------------------


@dataclass(frozen=True)
class StudyCell:
    name: str
    n: int
    mixing: MixtureSpec


@dataclass
class StudyResult:
    rows: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {}
        for name in dict.fromkeys(r["cell"] for r in self.rows):
            rows = [r for r in self.rows if r["cell"] == name]
            ise = np.array([r["ise"] for r in rows])
            modes = np.array([r["n_modes"] for r in rows])
            out[name] = {
                "n": rows[0]["n"],
                "replicates": len(rows),
                "median_ise": float(np.median(ise)),
                "q1_ise": float(np.quantile(ise, 0.25)),
                "q3_ise": float(np.quantile(ise, 0.75)),
                "frac_multimodal": float(np.mean(modes >= 2)),
                "median_T": float(np.median([r["T"] for r in rows])),
            }
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell", "replicate", "ise", "T", "n_modes"])
            for r in self.rows:
                w.writerow([r["cell"], r["replicate"], repr(r["ise"]), repr(r["T"]), r["n_modes"]])

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"cells": self.summary(), "rng": RNG_ALGORITHM}, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _replicate(task):
    cell_idx, rep, cell, cfg, noise_df, seed, reference = task
    Y = run_protocol(ProtocolConfig(cell.n, cell.mixing, noise_df, seed, (cell_idx, rep)))
    est = deconvolve(eigenvalues_of(Y), cfg)
    return {
        "cell": cell.name,
        "n": cell.n,
        "replicate": rep,
        "ise": mise_against(est, reference),
        "T": float(est.meta["T"]),
        "n_modes": len(est.local_maxima()),
    }


def default_workers() -> int:
    return int(os.environ.get("WISHART_DECONV_WORKERS", "1"))


def run_study(
    cells: list[StudyCell],
    replicates: int,
    cfg: EstimatorConfig,
    noise_df: float = 20.0,
    seed: int = 0,
    workers: int | None = None,
    reference: str = "exact",
) -> StudyResult:
    """ISE of the deconvolution estimator over replicated protocol runs.

    Each mixing spec gets one fixed evaluation grid and one reference density
    (``"exact"`` closed form or ``"kde"`` smoothing of 10^6 draws).  Rows come
    back in (cell, replicate) order whatever the worker count.
    """
    grids = {}
    tasks = []
    for ci, cell in enumerate(cells):
        key = json.dumps(cell.mixing.to_dict(), sort_keys=True)
        if key not in grids:
            gspec = study_grid(cell.mixing)
            a1, a2, w = make_grid(gspec)
            ref = reference_grid(cell.mixing, a1, a2, w) if reference == "exact" else reference_grid_kde(cell.mixing, a1, a2, w)
            grids[key] = (gspec, ref)
        gspec, ref = grids[key]
        ccfg = EstimatorConfig(cfg.N, cfg.T, cfg.T_grid, cfg.quad, cfg.amplification_cap, gspec, cfg.clip)
        tasks.extend((ci, rep, cell, ccfg, noise_df, seed, ref) for rep in range(replicates))
    workers = default_workers() if workers is None else workers
    if workers <= 1:
        rows = [_replicate(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_replicate, tasks))
    return StudyResult(rows)


def protocol_to_dict(cfg: ProtocolConfig) -> dict:
    d = asdict(cfg)
    d["mixing"] = cfg.mixing.to_dict()
    d["stream"] = list(cfg.stream)
    return d
