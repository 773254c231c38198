import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncoiv.data import Dataset
from ncoiv.errors import EstimationError, NumericalWarning
from ncoiv.iv_core import (
    MomentSet,
    check_regularity,
    cross_moments,
    gmm_asymptotic_cov,
    gmm_estimate,
    iv_asymptotic_cov,
    iv_estimate,
    omega_opt,
    optimal_gamma,
    residualize_on_x,
    sandwich_variance,
)
from ncoiv.simulation import ScenarioConfig, generate, population_moments

from conftest import make_dataset


def scalar_moments(s_zz, s_zt, s_zx=None, s_xx=None, s_xt=None):
    K = np.atleast_2d(s_zz).shape[0]
    p = 0 if s_xx is None else np.atleast_2d(s_xx).shape[0]
    return MomentSet(
        s_zz=np.atleast_2d(s_zz).astype(float),
        s_zx=np.zeros((K, 0)) if s_zx is None else np.atleast_2d(s_zx).astype(float),
        s_xx=np.zeros((0, 0)) if s_xx is None else np.atleast_2d(s_xx).astype(float),
        s_zt=np.atleast_1d(s_zt).astype(float),
        s_xt=np.zeros(0) if s_xt is None else np.atleast_1d(s_xt).astype(float),
        s_zy=np.zeros(K), s_xy=np.zeros(p), s_tt=1.0, s_ty=0.0, s_yy=1.0, n=1,
    )


def random_spd(rng, k):
    a = rng.standard_normal((k, k))
    return a @ a.T + k * np.eye(k)


# -- moments -----------------------------------------------------------------

def test_cross_moments_two_point():
    d = Dataset(y=np.array([0.0, 1.0]), t=np.array([1.0, 0.0]), x=np.zeros((2, 0)),
                z=np.array([[1.0], [-1.0]]))
    mom = cross_moments(d)
    assert mom.s_zz[0, 0] == 1.0 and mom.s_zt[0] == 0.5


def test_cross_moments_match_definition(rng):
    d = make_dataset(rng, n=37, K=3, p=2)
    mom = cross_moments(d)
    np.testing.assert_allclose(mom.s_zx, sum(np.outer(d.z[i], d.x[i]) for i in range(d.n)) / d.n, atol=1e-14)
    np.testing.assert_allclose(mom.s_xt, (d.x * d.t[:, None]).mean(0), atol=1e-14)
    np.testing.assert_array_equal(mom.s_zz, mom.s_zz.T)
    np.testing.assert_array_equal(mom.s_xx, mom.s_xx.T)
    assert mom.is_psd()


def test_cross_moments_large_sample_design():
    d, _ = generate(ScenarioConfig(n=1_000_000, reps=1), 0)
    mom = cross_moments(d)
    # (Z1, Z21) carry cov 0.4 with T; Z22 = Z22* + 0.5 U inherits 0.5 * cov(T, U) = 0.2
    np.testing.assert_allclose(mom.s_zt, [0.4, 0.4, 0.2], atol=0.01)


def test_gram_psd_on_random_data(rng):
    for _ in range(20):
        assert cross_moments(make_dataset(rng, n=15, K=4, p=3)).is_psd()


# -- residualize / optimal gamma ---------------------------------------------

def test_residualize_p0_unchanged():
    mom = scalar_moments([[2.0, 0.3], [0.3, 1.0]], [0.5, 0.1])
    schur, red = residualize_on_x(mom)
    np.testing.assert_array_equal(schur, mom.s_zz)
    np.testing.assert_array_equal(red, mom.s_zt)


def test_residualize_scalar_schur():
    schur, red = residualize_on_x(scalar_moments(1.0, 0.4, s_zx=0.5, s_xx=1.0, s_xt=0.2))
    np.testing.assert_allclose(schur, [[0.75]], atol=1e-15)
    np.testing.assert_allclose(red, [0.3], atol=1e-15)


def test_residualize_iv_equal_to_covariate(rng):
    n = 30
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    d = Dataset(y=rng.standard_normal(n), t=rng.standard_normal(n), x=x, z=x[:, [1]].copy(), intercept=True)
    schur, _ = residualize_on_x(cross_moments(d))
    np.testing.assert_allclose(schur, 0.0, atol=1e-12)


def test_residualize_collinear_covariates(rng):
    n = 20
    x1 = rng.standard_normal(n)
    d = Dataset(y=rng.standard_normal(n), t=rng.standard_normal(n), x=np.column_stack([x1, 2 * x1]),
                z=rng.standard_normal((n, 1)))
    with pytest.raises(EstimationError, match="collinear covariate"):
        residualize_on_x(cross_moments(d))


def test_optimal_gamma_scalar():
    np.testing.assert_allclose(optimal_gamma(scalar_moments(1.0, 0.4)), [0.4])


def test_optimal_gamma_population_valid_pair():
    mom = population_moments(ScenarioConfig(n=200, intercept=False)).restrict_z([0, 1])
    schur, red = residualize_on_x(mom)
    np.testing.assert_allclose(schur, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(optimal_gamma(mom), [0.4, 0.4], atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_optimal_gamma_equals_ols_block(seed):
    d = make_dataset(np.random.default_rng(seed), n=50, K=3, p=2)
    q = np.column_stack([d.z, d.x])
    coef = np.linalg.solve(q.T @ q, q.T @ d.t)
    np.testing.assert_allclose(optimal_gamma(cross_moments(d)), coef[: d.K], atol=1e-10)


def test_optimal_gamma_c1_violation(rng):
    d = make_dataset(rng, n=30, K=2, p=1)
    dup = Dataset(y=d.y, t=d.t, x=d.x, z=np.column_stack([d.z[:, 0], d.z[:, 0]]), intercept=True)
    with pytest.raises(EstimationError, match="C.1 violated"):
        optimal_gamma(cross_moments(dup))


def test_optimal_gamma_c2_warning():
    with pytest.warns(NumericalWarning, match="a linear combination of IVs does not work"):
        optimal_gamma(scalar_moments(np.eye(2), [0.0, 0.0]))


# -- IV estimate and sandwich ------------------------------------------------

def test_iv_estimate_hand_ratio():
    d = Dataset(y=np.array([1.0, 2, 3, 4]), t=np.array([0.0, 1, 1, 2]), x=np.zeros((4, 0)),
                z=np.array([[-1.0], [0], [0], [1]]))
    np.testing.assert_allclose(iv_estimate(d, np.array([1.0])), [1.5], rtol=1e-14)


def zero_noise(rng, n=40):
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    z = rng.standard_normal((n, 2))
    t = z @ [0.7, -0.4] + rng.standard_normal(n)
    y = 0.8 * t + x @ [1.0, 1.0]
    return Dataset(y=y, t=t, x=x, z=z, intercept=True)


def test_iv_estimate_zero_noise(rng):
    d = zero_noise(rng)
    for g in ([1.0, 0.0], [0.3, 2.0], optimal_gamma(cross_moments(d))):
        np.testing.assert_allclose(iv_estimate(d, np.asarray(g)), [0.8, 1.0, 1.0], atol=1e-12)


def test_sandwich_zero_residuals(rng):
    d = zero_noise(rng)
    g = optimal_gamma(cross_moments(d))
    cov, s2 = sandwich_variance(d, iv_estimate(d, g), g)
    np.testing.assert_allclose(cov, 0.0, atol=1e-20)
    assert s2 < 1e-25


@given(st.floats(0.01, 100.0), st.booleans(), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_iv_estimate_row_scaling(c, neg, seed):
    d = make_dataset(np.random.default_rng(seed), n=40, K=3, p=2)
    g = optimal_gamma(cross_moments(d))
    c = -c if neg else c
    np.testing.assert_allclose(iv_estimate(d, c * g), iv_estimate(d, g), rtol=1e-9, atol=1e-9)


def test_iv_estimating_equation_residual(rng):
    d = make_dataset(rng, n=80, K=3, p=2)
    g = optimal_gamma(cross_moments(d))
    b = iv_estimate(d, g)
    u = d.y - np.column_stack([d.t, d.x]) @ b
    w = np.column_stack([d.z @ g, d.x])
    assert np.abs(w.T @ u / d.n).max() <= 1e-8 * max(1.0, np.abs(d.y).max())


def test_iv_estimate_weak_score(rng):
    d = make_dataset(rng, n=30, K=2, p=1)
    with pytest.raises(EstimationError, match="weak or irrelevant score"):
        iv_estimate(d, np.zeros(2))


@pytest.mark.parametrize("seed", range(5))
def test_sandwich_symmetric_psd(seed):
    d = make_dataset(np.random.default_rng(seed), n=60, K=3, p=2)
    g = optimal_gamma(cross_moments(d))
    cov, s2 = sandwich_variance(d, iv_estimate(d, g), g)
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-12 * np.abs(cov).max()
    assert s2 > 0


def test_sandwich_se_matches_theory_n500():
    cfg = ScenarioConfig(n=500, reps=200)
    se = []
    for rep in range(200):
        d, _ = generate(cfg, rep)
        dv = d.select_z([0, 1])
        g = optimal_gamma(cross_moments(dv))
        cov, _ = sandwich_variance(dv, iv_estimate(dv, g), g)
        se.append(np.sqrt(cov[0, 0] / d.n))
    assert abs(np.median(se) - 1 / np.sqrt(0.32 * 500)) / 0.0791 < 0.10


# -- efficiency --------------------------------------------------------------

def test_omega_scalar():
    rep = omega_opt(scalar_moments(1.0, 0.4), 1.0)
    assert rep.omega_opt == pytest.approx(0.16)
    assert rep.avar_beta_t == pytest.approx(6.25)


def test_omega_population_valid_pair():
    mom = population_moments(ScenarioConfig(n=200)).restrict_z([0, 1])
    rep = omega_opt(mom, 1.0)
    assert rep.omega_opt == pytest.approx(0.32, abs=1e-12)
    assert rep.avar_beta_t == pytest.approx(3.125, abs=1e-10)
    assert np.sqrt(rep.avar_beta_t / 200) == pytest.approx(0.125, abs=1e-12)


def test_omega_irrelevant_flag():
    with pytest.warns(NumericalWarning, match="irrelevant"):
        rep = omega_opt(scalar_moments(np.eye(2), [0.0, 0.0]), 1.0)
    assert rep.irrelevant and rep.avar_beta_t == np.inf


@pytest.mark.parametrize("seed", range(10))
def test_omega_invariant_under_z_reparameterization(seed):
    rng = np.random.default_rng(seed)
    d = make_dataset(rng, n=60, K=3, p=2)
    A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    d2 = Dataset(y=d.y, t=d.t, x=d.x, z=d.z @ A.T, intercept=True)
    o1 = omega_opt(cross_moments(d), 1.0).omega_opt
    o2 = omega_opt(cross_moments(d2), 1.0).omega_opt
    assert o2 == pytest.approx(o1, rel=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_quadratic_ratio_inequality(seed):
    rng = np.random.default_rng(seed)
    k = rng.integers(1, 6)
    A = random_spd(rng, k)
    dvec = rng.standard_normal(k)
    bound = 1.0 / (dvec @ np.linalg.solve(A, dvec))
    for _ in range(20):
        x = rng.standard_normal(k)
        assert x @ A @ x / (dvec @ x) ** 2 >= bound * (1 - 1e-10)
    x = np.linalg.solve(A, dvec)
    assert x @ A @ x / (dvec @ x) ** 2 == pytest.approx(bound, rel=1e-10)


def random_moments(rng, K, p):
    """Population-style moments from a random SPD Gram of (Z, X, T, Y)."""
    L = rng.standard_normal((K + p + 2, K + p + 2))
    return MomentSet.from_gram(L @ L.T + 0.1 * np.eye(K + p + 2), K, p, n=1)


@pytest.mark.parametrize("seed", range(20))
def test_optimal_score_attains_gmm_bound(seed):
    rng = np.random.default_rng(seed)
    K, p = int(rng.integers(1, 5)), int(rng.integers(0, 3))
    mom = random_moments(rng, K, p)
    s2 = float(rng.uniform(0.5, 2.0))
    opt = iv_asymptotic_cov(mom, optimal_gamma(mom), s2)[0, 0]
    gmm = gmm_asymptotic_cov(mom, s2)[0, 0]
    assert opt == pytest.approx(gmm, rel=1e-8)
    assert opt == pytest.approx(s2 / omega_opt(mom, 1.0).omega_opt, rel=1e-8)
    # any other score is no better
    other = iv_asymptotic_cov(mom, rng.standard_normal(K), s2)[0, 0]
    assert other >= opt * (1 - 1e-10)


# -- GMM ---------------------------------------------------------------------

def test_gmm_just_identified_equals_iv(rng):
    d = make_dataset(rng, n=50, K=1, p=0, intercept=False)
    np.testing.assert_allclose(gmm_estimate(d).beta, iv_estimate(d, np.array([1.0])), rtol=1e-10)


def test_gmm_homoskedastic_cov_matches_omega():
    rng = np.random.default_rng(7)
    d = make_dataset(rng, n=60, K=3, p=1)
    res = gmm_estimate(d, weighting="homoskedastic")
    mom = cross_moments(d)
    target = res.sigma2 / omega_opt(mom, 1.0).omega_opt
    assert res.cov[0, 0] == pytest.approx(target, rel=0.02)


def test_gmm_robust_cov_close_to_omega(rng):
    d = make_dataset(rng, n=2000, K=3, p=1)
    res = gmm_estimate(d)
    target = res.sigma2 / omega_opt(cross_moments(d), 1.0).omega_opt
    assert res.cov[0, 0] == pytest.approx(target, rel=0.15)


def test_gmm_ridge_warns(rng):
    d = make_dataset(rng, n=50, K=2, p=1)
    with pytest.warns(NumericalWarning, match="ridge"):
        res = gmm_estimate(d, ridge=1e-6)
    assert res.ridge == 1e-6


def test_gmm_singular_moment_cov_suggests_ridge(rng):
    d = make_dataset(rng, n=40, K=2, p=1)
    dup = Dataset(y=d.y, t=d.t, x=d.x, z=np.column_stack([d.z[:, 0], d.z[:, 0]]), intercept=True)
    with pytest.raises(EstimationError, match="ridge"):
        gmm_estimate(dup)


def test_gmm_unknown_weighting(rng):
    with pytest.raises(ValueError):
        gmm_estimate(make_dataset(rng), weighting="cue")


# -- regularity --------------------------------------------------------------

def test_regularity_identity_passes():
    reg = check_regularity(scalar_moments(np.eye(2), [0.4, 0.4]))
    assert reg.c1_ok and reg.c2_ok and reg.min_eig_schur == pytest.approx(1.0)
    assert reg.messages == []


def test_regularity_c2_failure_message():
    reg = check_regularity(scalar_moments(np.eye(2), [0.0, 0.0]))
    assert not reg.c2_ok
    assert any("a linear combination of IVs does not work" in m for m in reg.messages)


def test_regularity_duplicated_column(rng):
    d = make_dataset(rng, n=30, K=2, p=1)
    dup = Dataset(y=d.y, t=d.t, x=d.x, z=np.column_stack([d.z[:, 1], d.z[:, 1]]), intercept=True)
    reg = check_regularity(cross_moments(dup))
    assert not reg.c1_ok
    assert abs(reg.min_eig_schur) < 1e-10
    assert reg.to_dict()["C1_pass"] is False


def test_no_warnings_on_regular_data(rng):
    d = make_dataset(rng, n=100)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        optimal_gamma(cross_moments(d))
