import math

import numpy as np
import pytest
from scipy import integrate

from wishart_deconv.estimator import (
    B2,
    DensityGrid,
    EstimationError,
    EstimatorConfig,
    GridSpec,
    SampleSpectrum,
    _argmin_T,
    deconvolve,
    make_grid,
    measure_weights,
    mise_against,
    risk_curve,
    select_cutoff,
    unbiased_risk,
)
from wishart_deconv.sampling import BIMODAL, UNIMODAL, ProtocolConfig, run_protocol
from wishart_deconv.spd import eigenvalues_of, rotation
from wishart_deconv.special import conical_table
from wishart_deconv.transform import CutoffRegion, spectral_nodes, wishart_transform_array


@pytest.fixture(scope="module")
def sample500():
    return eigenvalues_of(run_protocol(ProtocolConfig(500, UNIMODAL, seed=1)))


def small_grid():
    return GridSpec(12, 12, (5.0, 60.0, 5.0, 60.0))


def test_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(N=0.5)
    with pytest.raises(ValueError):
        EstimatorConfig(T=0.1)
    with pytest.raises(ValueError):
        EstimatorConfig(T_grid=())
    with pytest.raises(ValueError):
        EstimatorConfig(amplification_cap=0.5)
    with pytest.raises(ValueError):
        GridSpec(1, 5)
    assert EstimatorConfig().with_T(7.0).T == 7.0


def test_measure_weights_integrate_chamber_measure():
    a1, a2 = np.geomspace(1, 10, 400), np.geomspace(1, 10, 400)
    w = measure_weights(a1, a2)
    assert np.all(w[np.tril_indices(400)] >= 0)
    assert np.all(w[np.triu_indices(400)] == 0)
    exact = integrate.dblquad(
        lambda y, x: B2 * (x - y) / math.sqrt(x * y) / (x * y), 1, 10, 1, lambda x: x
    )[0]
    assert w.sum() == pytest.approx(exact, rel=1e-3)


def test_default_grid_bounds_follow_scaled_quantiles(sample500):
    a1, a2, w = make_grid(GridSpec(), sample500, 20.0)
    assert a1.size == a2.size == 40
    assert a1[0] == pytest.approx(np.quantile(sample500[:, 0], 0.01) / 20)
    assert a2[-1] == pytest.approx(np.quantile(sample500[:, 1], 0.99) / 20)
    with pytest.raises(ValueError):
        make_grid(GridSpec())


def test_density_grid_validation():
    a = np.array([1.0, 2.0])
    with pytest.raises(ValueError):
        DensityGrid(a, a, np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        DensityGrid(np.array([2.0, 1.0]), a, np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        DensityGrid(a, a, np.full((2, 2), np.nan), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        DensityGrid(a, a, np.zeros((2, 2)), -np.ones((2, 2)))


def test_serialization_round_trip(tmp_path, sample500):
    est = deconvolve(sample500, EstimatorConfig(T=10.0))
    est.to_csv(tmp_path / "g.csv")
    est.to_json(tmp_path / "g.json")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "a1,a2,value,weight"
    assert len(lines) == 1 + 40 * 40
    for back in (DensityGrid.from_csv(tmp_path / "g.csv"), DensityGrid.from_json(tmp_path / "g.json")):
        np.testing.assert_array_equal(back.a1_nodes, est.a1_nodes)
        np.testing.assert_array_equal(back.values, est.values)
        np.testing.assert_array_equal(back.weights, est.weights)
    assert DensityGrid.from_json(tmp_path / "g.json").meta["T"] == 10.0


def test_mise_trivial_cases():
    a1, a2, w = make_grid(small_grid())
    ref = DensityGrid(a1, a2, np.zeros((12, 12)), w)
    assert mise_against(ref, ref) == 0.0
    const = DensityGrid(a1, a2, np.full((12, 12), 0.3), w)
    assert mise_against(const, ref) == pytest.approx(0.09 * w.sum())
    other = DensityGrid(a1 * 2, a2, np.zeros((12, 12)), w)
    with pytest.raises(ValueError):
        mise_against(other, ref)


def test_local_maxima_and_threshold():
    a = np.geomspace(1, 100, 30)
    A1, A2 = np.meshgrid(a, a, indexing="ij")
    la1, la2 = np.log(A1), np.log(A2)
    bump = lambda c1, c2, h: h * np.exp(-((la1 - c1) ** 2 + (la2 - c2) ** 2) / 0.1)
    vals = bump(3.0, 1.0, 1.0) + bump(4.0, 2.5, 0.8) + bump(2.0, 0.5, 0.03)
    g = DensityGrid(a, a, vals, measure_weights(a, a))
    assert len(g.local_maxima(rel_height=0.0)) == 3
    assert len(g.local_maxima()) == 2


def test_total_variation_constant_is_zero():
    a1, a2, w = make_grid(small_grid())
    assert DensityGrid(a1, a2, np.ones((12, 12)), w).total_variation() == 0.0


def test_empty_sample_and_guard_exhaustion():
    with pytest.raises(EstimationError):
        deconvolve(np.empty((0, 2)), EstimatorConfig(T=5.0))
    x = np.array([[30.0, 10.0], [25.0, 20.0]])
    # |what| < 1 away from the origin and the origin itself is not a node
    with pytest.raises(EstimationError, match="excluded"):
        deconvolve(x, EstimatorConfig(T=5.0, amplification_cap=1.0, grid=small_grid()))


def test_unbiased_risk_two_points_direct_formula():
    x = np.array([[30.0, 10.0], [25.0, 20.0]])
    cfg = EstimatorConfig(T=3.0)
    nodes = spectral_nodes(CutoffRegion(3.0), cfg.quad)
    what = wishart_transform_array(nodes.b1, nodes.beta2, cfg.N)
    u1 = 0.5 * np.log(x[:, 0] / x[:, 1])
    u2 = 0.5 * np.log(x[:, 0] * x[:, 1])
    h = conical_table(nodes.b1, u1) * np.exp(1j * u2[:, None] * nodes.beta2[None, :])
    rhat = np.conj(h).mean(axis=0)
    cross = np.real(np.conj(h[0]) * h[1])
    direct = 0.5 * np.sum(nodes.weight * (np.abs(rhat) ** 2 - 2 * cross) / np.abs(what) ** 2)
    assert unbiased_risk(x, cfg) == pytest.approx(direct, rel=1e-10)
    with pytest.raises(EstimationError):
        unbiased_risk(x[:1], cfg)
    with pytest.raises(ValueError):
        unbiased_risk(x, EstimatorConfig())


def test_risk_vanishes_for_tiny_region(sample500):
    assert abs(unbiased_risk(sample500, EstimatorConfig(), T=0.1251)) < 1e-8


def test_select_cutoff_rules(sample500):
    assert select_cutoff(sample500, EstimatorConfig(T_grid=(7.0,))) == 7.0
    assert _argmin_T(np.array([10.0, 5.0, 5.0, 3.0]), np.array([1.0, 1.0, 1.0, 2.0])) == 5.0
    assert select_cutoff(sample500, EstimatorConfig(T_grid=(9.0, 9.0))) == 9.0


def test_risk_curve_parallel_matches_serial(sample500):
    cfg = EstimatorConfig(T_grid=(2.0, 8.0, 30.0))
    Ts1, r1 = risk_curve(sample500, cfg, workers=1)
    Ts2, r2 = risk_curve(sample500, cfg, workers=2)
    np.testing.assert_array_equal(r1, r2)


def test_deconvolve_linearity(sample500):
    cfg = EstimatorConfig(T=12.0, grid=small_grid())
    A, B = sample500[:200], sample500[200:]
    fa, fb = deconvolve(A, cfg), deconvolve(B, cfg)
    fab = deconvolve(sample500, cfg)
    np.testing.assert_allclose(fab.values, (200 * fa.values + 300 * fb.values) / 500, atol=1e-13)


def test_rotation_invariance():
    Y = run_protocol(ProtocolConfig(300, UNIMODAL, seed=4))
    k = rotation(0.77)
    Yr = np.einsum("ji,njk,kl->nil", k, Y, k)
    cfg = EstimatorConfig(T=15.0, grid=small_grid())
    np.testing.assert_allclose(
        deconvolve(eigenvalues_of(Yr), cfg).values, deconvolve(eigenvalues_of(Y), cfg).values, rtol=1e-9, atol=1e-14
    )


def test_smoothing_reduces_total_variation(sample500):
    flat = deconvolve(sample500, EstimatorConfig(T=0.13))
    for T in (10.0, 40.0):
        assert flat.total_variation() < deconvolve(sample500, EstimatorConfig(T=T)).total_variation()


def test_meta_and_guard_count(sample500):
    est = deconvolve(sample500, EstimatorConfig(T_grid=(2.0, 20.0, 200.0)))
    assert est.meta["excluded_nodes"] == 0
    assert est.meta["T_selected"]
    assert set(est.meta["risk_curve"]) == {"T", "risk"}
    assert est.meta["T_at_grid_edge"] == (est.meta["T"] in (2.0, 200.0))


def test_clip_preserves_integral(sample500):
    raw = deconvolve(sample500, EstimatorConfig(T=60.0))
    clipped = deconvolve(sample500, EstimatorConfig(T=60.0, clip=True))
    assert raw.values.min() < 0
    assert clipped.values.min() >= 0
    assert clipped.integral() == pytest.approx(raw.integral(), rel=1e-12)


def test_sample_spectrum_pairwise_matches_loop():
    x = eigenvalues_of(run_protocol(ProtocolConfig(6, UNIMODAL, seed=8)))
    spec = SampleSpectrum(x, 4.0, EstimatorConfig())
    u1 = 0.5 * np.log(x[:, 0] / x[:, 1])
    u2 = 0.5 * np.log(x[:, 0] * x[:, 1])
    h = conical_table(spec.nodes.b1, u1) * np.exp(1j * u2[:, None] * spec.nodes.beta2[None, :])
    loop = sum(np.conj(h[j]) * h[l] for j in range(6) for l in range(6) if j != l) / 30
    np.testing.assert_allclose(spec.pairwise(), loop.real, atol=1e-14)


@pytest.mark.slow
def test_shapes_at_n2000():
    # fixed moderate cutoff; the selected-cutoff behaviour is covered by the replicate study
    cfg = EstimatorConfig(T=30.0)
    uni = deconvolve(eigenvalues_of(run_protocol(ProtocolConfig(2000, UNIMODAL, seed=21))), cfg)
    bi = deconvolve(eigenvalues_of(run_protocol(ProtocolConfig(2000, BIMODAL, seed=21))), cfg)
    assert len(uni.local_maxima()) == 1
    assert len(bi.local_maxima()) >= 2
