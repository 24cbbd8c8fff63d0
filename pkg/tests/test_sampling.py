import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from wishart_deconv.estimator import EstimatorConfig, make_grid
from wishart_deconv.sampling import (
    BIMODAL,
    UNIMODAL,
    Component,
    MixtureSpec,
    ProtocolConfig,
    StudyCell,
    make_rng,
    mixture_density,
    reference_grid,
    reference_grid_kde,
    run_protocol,
    run_study,
    sample_mixture,
    sample_wishart,
    study_grid,
)
from wishart_deconv.spd import SpdMatrix, eigenvalues_of, from_polar_batch
from wishart_deconv.transform import SpectralPoint, empirical_transform, wishart_transform


def test_rng_streams_are_reproducible_and_distinct():
    a = make_rng(5, (1, 2)).random(4)
    np.testing.assert_array_equal(a, make_rng(5, (1, 2)).random(4))
    assert not np.array_equal(a, make_rng(5, (1, 3)).random(4))
    assert not np.array_equal(a, make_rng(6, (1, 2)).random(4))


def test_wishart_mean_within_four_sigma():
    n, N = 100_000, 20.0
    ys = sample_wishart(N, SpdMatrix.identity(), make_rng(0), n)
    mean = ys.mean(axis=0)
    # Var y11 = Var y22 = 2N, Var y12 = N for sigma = I
    sd = np.sqrt(np.array([[2 * N, N], [N, 2 * N]]) / n)
    assert np.all(np.abs(mean - N * np.eye(2)) < 4 * sd)


def test_wishart_general_sigma_and_fractional_df():
    sigma = SpdMatrix(2.0, 0.6, 1.0)
    n, N = 100_000, 4.5
    ys = sample_wishart(N, sigma, make_rng(1), n)
    s = sigma.to_array()
    var = N * (s**2 + np.outer(np.diag(s), np.diag(s)))
    assert np.all(np.abs(ys.mean(axis=0) - N * s) < 4 * np.sqrt(var / n))


def test_wishart_matches_scipy_in_distribution():
    sigma = SpdMatrix(1.5, -0.4, 0.8)
    ours = sample_wishart(7.0, sigma, make_rng(2), 10_000)
    ref = stats.wishart(df=7.0, scale=sigma.to_array()).rvs(10_000, random_state=3)
    for f in (np.linalg.det, lambda y: y[:, 0, 0], lambda y: y[:, 0, 1]):
        assert stats.ks_2samp(f(ours), f(ref)).pvalue > 0.01


def test_wishart_scaling_in_distribution():
    c = 3.0
    base = sample_wishart(20.0, SpdMatrix.identity(), make_rng(4), 10_000)
    scaled = sample_wishart(20.0, SpdMatrix.identity(c), make_rng(5), 10_000)
    assert stats.ks_2samp(np.linalg.det(scaled) / c**2, np.linalg.det(base)).pvalue > 0.01


def test_wishart_draws_positive_definite_and_validation():
    ys = sample_wishart(1.5, SpdMatrix.identity(), make_rng(6), 5000)
    assert np.all(np.linalg.det(ys) > 0)
    assert sample_wishart(3.0, SpdMatrix.identity(), make_rng(6)).shape == (2, 2)
    with pytest.raises(ValueError):
        sample_wishart(1.0, SpdMatrix.identity(), make_rng(0))


def test_mixture_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        MixtureSpec(())
    with pytest.raises(ValueError):
        MixtureSpec((Component(0.6, 10.0, SpdMatrix.identity()),))
    with pytest.raises(ValueError):
        MixtureSpec((Component(1.0, 0.8, SpdMatrix.identity()),))
    with pytest.raises(ValueError, match=r"components\[1\]"):
        MixtureSpec.from_dict({"components": [{"weight": 0.5, "N": 5, "sigma": [1, 0, 1]}, {"weight": 0.5, "sigma": [1, 2, 1]}]})
    assert MixtureSpec.from_dict(json.loads(json.dumps(BIMODAL.to_dict()))) == BIMODAL


def test_mixture_labels_follow_weights():
    spec = MixtureSpec((Component(0.3, None, SpdMatrix.identity()), Component(0.7, None, SpdMatrix.identity(5.0))))
    x = sample_mixture(spec, make_rng(7), 20_000)
    frac = np.mean(x[:, 0, 0] == 1.0)
    assert abs(frac - 0.3) < 4 * math.sqrt(0.21 / 20_000)


def test_protocol_determinism():
    cfg = ProtocolConfig(200, BIMODAL, seed=9)
    a, b = run_protocol(cfg), run_protocol(cfg)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (200, 2, 2)
    with pytest.raises(ValueError):
        ProtocolConfig(0)
    with pytest.raises(ValueError):
        ProtocolConfig(5, noise_df=0.5)


def test_protocol_returns_mixing_draws():
    Y, X = run_protocol(ProtocolConfig(50, UNIMODAL, seed=1), return_mixing=True)
    assert X.shape == Y.shape
    np.testing.assert_allclose(np.linalg.det(Y) / np.linalg.det(X) > 0, True)


def test_point_mass_reduces_to_wishart():
    n, c = 20_000, 2.0
    Y = run_protocol(ProtocolConfig(n, MixtureSpec.point_mass(SpdMatrix.identity(c)), seed=3))
    mean = Y.mean(axis=0)
    sd = c * np.sqrt(np.array([[40.0, 20.0], [20.0, 40.0]]) / n)
    assert np.all(np.abs(mean - 20 * c * np.eye(2)) < 4 * sd)
    eigs = eigenvalues_of(Y)
    for s in (SpectralPoint(1.0, 2.0), SpectralPoint(2.5, -1.0)):
        # h_s(c y) = c^{s1 + 2 s2} h_s(y)
        expected = np.conj(c ** (s.s1 + 2 * s.s2)) * wishart_transform(s, 20.0)
        assert abs(empirical_transform(eigs, s) - expected) < 4 / math.sqrt(n)


@pytest.mark.parametrize("mixing", [UNIMODAL, BIMODAL, MixtureSpec((Component(1.0, 12.0, SpdMatrix(2.0, 0.5, 1.0)),))])
def test_mixture_density_integrates_to_one(mixing):
    def f(u2, u1):
        a1, a2 = from_polar_batch(u1, u2)
        return float(mixture_density(mixing, a1, a2, n_angles=64)) * 4 * math.pi * math.sinh(u1)

    val = integrate.dblquad(f, 0, 2.5, 0.0, 6.0, epsabs=1e-8)[0]
    assert val == pytest.approx(1.0, abs=1e-5)


def test_point_mass_has_no_density():
    with pytest.raises(ValueError):
        mixture_density(MixtureSpec.point_mass(SpdMatrix.identity()), 2.0, 1.0)


def test_reference_mode_counts():
    for mixing, modes in ((UNIMODAL, 1), (BIMODAL, 2)):
        a1, a2, w = make_grid(study_grid(mixing, n_draws=50_000))
        assert len(reference_grid(mixing, a1, a2, w).local_maxima(rel_height=0.0)) == modes


def test_kde_reference_near_exact_in_bulk():
    a1 = np.array([30.0, 38.0, 45.0])
    a2 = np.array([20.0, 24.0, 28.0])
    w = np.zeros((3, 3))
    kde = reference_grid_kde(UNIMODAL, a1, a2, w, n_draws=200_000, seed=1)
    exact = reference_grid(UNIMODAL, a1, a2, w)
    np.testing.assert_allclose(kde.values, exact.values, rtol=0.1)


def test_run_study_single_replicate_and_worker_independence(tmp_path):
    cells = [StudyCell("u", 150, UNIMODAL)]
    cfg = EstimatorConfig(T_grid=(2.0, 10.0, 40.0))
    one = run_study(cells, 1, cfg, workers=1)
    assert len(one.rows) == 1
    two = run_study(cells * 2, 2, cfg, workers=2)
    serial = run_study(cells * 2, 2, cfg, workers=1)
    assert two.rows == serial.rows
    serial.to_csv(tmp_path / "s.csv")
    serial.to_json(tmp_path / "s.json")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "cell,replicate,ise,T,n_modes"
    summary = json.loads((tmp_path / "s.json").read_text())["cells"]["u"]
    assert summary["replicates"] == 4
