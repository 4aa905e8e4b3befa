import dataclasses

import numpy as np
import pytest
from scipy import stats

from bvcqr.design import build_design
from bvcqr.errors import ConfigError, NumericalError
from bvcqr.model import (
    TERM_NAMES,
    BVCQRModel,
    Hyperparameters,
    ModelOptions,
    ParameterState,
    constrain,
    grad_log_joint,
    log_joint,
    unconstrain,
)
from bvcqr.preprocess import ExposurePanel, QuantizedExposures, quantize

OPTION_SETS = [
    ModelOptions(),
    ModelOptions(theta_weight=1.0),
    ModelOptions(theta_weight=0.0),
    ModelOptions(centered_theta=(0, 4)),
    ModelOptions(noncentered=False),
    ModelOptions(horseshoe=False),
    ModelOptions(horseshoe=False, noncentered=False),
    ModelOptions(tau_power=1.0),
]
OPTION_IDS = ["default", "w1", "w0", "mixed", "centered", "nohs", "nohs-centered", "tau1"]
# non-default hyperparameters so every constant enters the checks
HYPER = Hyperparameters(alpha0=1.5, gamma0=0.7, alpha=2.0, gamma=1.3, nu0=4.5, C0=[[2.0, 0.3], [0.3, 1.0]],
                        df_lambda=3.0, df_tau=1.5, a0=0.7)


def random_state(model, rng):
    M, n, k = model.design.n_exposures, model.design.n_subjects, model.design.n_fixed
    A = rng.normal(size=(2, 2))
    st = ParameterState(
        beta=rng.normal(size=k),
        theta1=rng.normal(size=M),
        theta2=rng.normal(size=M),
        phi1_sq=rng.uniform(0.3, 2),
        phi2_sq=rng.uniform(0.3, 2),
        sigma_sq=rng.uniform(0.3, 2),
        D=A @ A.T + 0.5 * np.eye(2),
        h=rng.normal(size=2 * n),
        b=rng.normal(size=2 * n),
    )
    if model.options.horseshoe:
        st.lambda1, st.lambda2 = rng.uniform(0.2, 2, M), rng.uniform(0.2, 2, M)
        st.tau1, st.tau2 = rng.uniform(0.2, 2), rng.uniform(0.2, 2)
    return st


def tiny_design():
    """n=1, M=1, p=0, one observation at the baseline age with Y=0."""
    p = ExposurePanel(
        subject_ids=np.array(["a"]),
        covariates=np.zeros((1, 0)),
        exposures=np.array([[0.0]]),
        obs_subject=np.array([0]),
        ages=np.array([24.0]),
        y=np.array([0.0]),
        exposure_names=("z",),
    )
    with pytest.warns(UserWarning):
        return build_design(p, QuantizedExposures(np.array([[1]]), np.zeros((1, 3))))


# --------------------------------------------------------------------------- closed-form oracle


def test_tiny_instance_matches_textbook_densities():
    d = tiny_design()
    model = BVCQRModel(d)
    st = ParameterState(
        beta=np.zeros(2), theta1=np.zeros(1), theta2=np.zeros(1), phi1_sq=1.0, phi2_sq=1.0, sigma_sq=1.0,
        D=np.eye(2), h=np.zeros(2), b=np.zeros(2),
        lambda1=np.ones(1), lambda2=np.ones(1), tau1=1.0, tau2=1.0,
    )
    expected = (
        stats.norm.logpdf(0.0)  # likelihood
        + 2 * stats.norm.logpdf(0.0)  # h | theta, phi
        + 3 * stats.invgamma.logpdf(1.0, a=1.0, scale=1.0)  # phi1, phi2, sigma
        + stats.multivariate_normal.logpdf([0, 0], mean=[0, 0], cov=np.eye(2))  # b
        + stats.invwishart.logpdf(np.eye(2), df=3, scale=np.eye(2))  # D, from D^-1 ~ Wishart(3, I)
        + 2 * stats.norm.logpdf(0.0)  # theta
        + 4 * stats.halfcauchy.logpdf(1.0)  # lambda1, lambda2, tau1, tau2
    )
    assert model.log_joint(st, jacobian=False) == pytest.approx(expected, abs=1e-12)


def test_term_by_term_against_scipy(small_design):
    model = BVCQRModel(small_design, HYPER, ModelOptions())
    st = random_state(model, np.random.default_rng(11))
    d, hp = small_design, HYPER
    n, M = d.n_subjects, d.n_exposures
    t = model.terms(st)
    th = np.concatenate([st.theta1, st.theta2])
    mu = d.X @ st.beta + d.W @ st.h + d.U @ st.b
    h_mean = np.concatenate([d.q @ st.theta1, d.q @ st.theta2])
    lam = np.concatenate([st.lambda1, st.lambda2])
    tau = np.repeat([st.tau1, st.tau2], M)
    phi = np.repeat([st.phi1_sq, st.phi2_sq], n)
    half_t = lambda x, df, s: np.log(2) + stats.t.logpdf(x, df, scale=s)  # noqa: E731
    oracle = {
        "likelihood": stats.norm.logpdf(d.Y, mu, np.sqrt(st.sigma_sq)).sum(),
        "h_prior": stats.norm.logpdf(st.h, h_mean, np.sqrt(phi)).sum(),
        "phi_prior": stats.invgamma.logpdf([st.phi1_sq, st.phi2_sq], a=hp.alpha0, scale=hp.gamma0).sum(),
        "sigma_prior": stats.invgamma.logpdf(st.sigma_sq, a=hp.alpha, scale=hp.gamma),
        "b_prior": stats.multivariate_normal.logpdf(st.b.reshape(n, 2), cov=st.sigma_sq * st.D).sum(),
        "D_prior": stats.invwishart.logpdf(st.D, df=hp.nu0, scale=np.linalg.inv(hp.C0)),
        "beta_prior": 0.0,
        "theta_prior": stats.norm.logpdf(th, 0, lam * tau).sum(),
        "lambda_prior": half_t(lam, hp.df_lambda, 1.0).sum(),
        "tau_prior": half_t(np.array([st.tau1, st.tau2]), hp.df_tau, hp.a0 * np.array([st.phi1_sq, st.phi2_sq])).sum(),
    }
    for name in TERM_NAMES:
        assert t[name] == pytest.approx(oracle[name], rel=1e-10, abs=1e-10), name


def test_tau_power_one_reading(small_design):
    model = BVCQRModel(small_design, options=ModelOptions(tau_power=1.0))
    st = random_state(model, np.random.default_rng(2))
    th = np.concatenate([st.theta1, st.theta2])
    lam = np.concatenate([st.lambda1, st.lambda2])
    var = lam**2 * np.repeat([st.tau1, st.tau2], small_design.n_exposures)
    assert model.terms(st)["theta_prior"] == pytest.approx(stats.norm.logpdf(th, 0, np.sqrt(var)).sum())


def test_ablation_prior_is_fixed_normal(small_design):
    model = BVCQRModel(small_design, options=ModelOptions(horseshoe=False, theta_prior_sd=10.0))
    st = random_state(model, np.random.default_rng(3))
    th = np.concatenate([st.theta1, st.theta2])
    t = model.terms(st)
    assert t["theta_prior"] == pytest.approx(stats.norm.logpdf(th, 0, 10).sum())
    assert t["lambda_prior"] == 0 and t["tau_prior"] == 0
    assert model.dim == small_design.n_fixed + 2 * small_design.n_exposures + 2 + 1 + 3 + 4 * small_design.n_subjects


def test_likelihood_translation_invariance(small_design):
    model = BVCQRModel(small_design)
    st = random_state(model, np.random.default_rng(4))
    base = model.terms(st)["likelihood"]
    shifted = BVCQRModel(dataclasses.replace(small_design, Y=small_design.Y + 3.7))
    st2 = st.copy()
    st2.beta[0] += 3.7
    assert shifted.terms(st2)["likelihood"] == pytest.approx(base, abs=1e-10)


def test_doubling_sigma(small_design):
    model = BVCQRModel(small_design)
    st = random_state(model, np.random.default_rng(5))
    N = small_design.n_obs
    R = small_design.Y - small_design.X @ st.beta - small_design.W @ st.h - small_design.U @ st.b
    l1 = model.terms(st)["likelihood"]
    st2 = st.copy()
    st2.sigma_sq *= 2
    l2 = model.terms(st2)["likelihood"]
    quad = 0.5 * (R @ R) / st.sigma_sq
    assert l1 - l2 == pytest.approx(0.5 * N * np.log(2) - quad + quad / 2, abs=1e-10)


def test_terms_sum_to_total(small_design):
    for opts in OPTION_SETS:
        model = BVCQRModel(small_design, HYPER, opts)
        rng = np.random.default_rng(6)
        for _ in range(5):
            u = rng.uniform(-1.5, 1.5, model.dim)
            st = model.constrain(u)
            assert sum(model.terms(st).values()) == pytest.approx(model.log_density(u), abs=1e-10)
            assert model.log_joint(st) == pytest.approx(model.log_density(u), abs=1e-10)


# --------------------------------------------------------------------------- transforms


@pytest.mark.parametrize("opts", OPTION_SETS, ids=OPTION_IDS)
def test_round_trip(small_design, opts):
    model = BVCQRModel(small_design, HYPER, opts)
    rng = np.random.default_rng(7)
    for _ in range(10):
        u = rng.uniform(-2, 2, model.dim)
        assert np.max(np.abs(model.unconstrain(model.constrain(u)) - u)) <= 1e-12
        st = random_state(model, rng)
        back = model.constrain(model.unconstrain(st))
        np.testing.assert_allclose(back.h, st.h, atol=1e-12)
        np.testing.assert_allclose(back.b, st.b, atol=1e-12)
        np.testing.assert_allclose(back.D, st.D, atol=1e-12)


@pytest.mark.parametrize("opts", OPTION_SETS, ids=OPTION_IDS)
def test_unit_values_map_to_zero(small_design, opts):
    model = BVCQRModel(small_design, options=opts)
    st = random_state(model, np.random.default_rng(8))
    st.sigma_sq, st.D = 1.0, np.eye(2)
    u = model.unconstrain(st)
    assert u[model.layout["sigma"]][0] == 0.0
    assert np.all(u[model.layout["chol"]] == 0.0)


def test_functional_wrappers(small_design):
    model = BVCQRModel(small_design)
    st = random_state(model, np.random.default_rng(9))
    u = unconstrain(st, small_design)
    np.testing.assert_allclose(constrain(u, small_design).h, st.h)
    assert log_joint(st, small_design) == pytest.approx(model.log_joint(st))
    np.testing.assert_allclose(grad_log_joint(u, small_design), model.grad(u))


def test_constrain_non_finite_is_fault(small_design):
    model = BVCQRModel(small_design)
    u = np.zeros(model.dim)
    u[3] = np.nan
    with pytest.raises(NumericalError):
        model.constrain(u)
    with pytest.raises(NumericalError):
        model.grad(u)


def test_log_jacobian_matches_numeric_determinant(small_design):
    """The jacobian term equals log|det d(constrained)/d(unconstrained)|."""
    for opts in OPTION_SETS:
        model = BVCQRModel(small_design, HYPER, opts)
        rng = np.random.default_rng(10)
        for _ in range(3):
            u = rng.uniform(-1, 1, model.dim)
            J = np.empty((model.dim, model.dim))
            for i in range(model.dim):
                e = np.zeros(model.dim)
                e[i] = 1e-6
                J[:, i] = (model.constrained_vector(u + e) - model.constrained_vector(u - e)) / 2e-6
            logdet = np.linalg.slogdet(J)[1]
            assert model.terms(model.constrain(u))["jacobian"] == pytest.approx(logdet, abs=1e-6), opts


# --------------------------------------------------------------------------- gradient


def fd_grad(model, u, rel=1e-5):
    g = np.empty(model.dim)
    for i in range(model.dim):
        h = rel * max(1.0, abs(u[i]))
        e = np.zeros(model.dim)
        e[i] = h
        g[i] = (model.log_density(u + e) - model.log_density(u - e)) / (2 * h)
    return g


@pytest.mark.parametrize("opts", OPTION_SETS, ids=OPTION_IDS)
def test_gradient_matches_finite_differences(small_design, opts):
    model = BVCQRModel(small_design, HYPER, opts, backend="numpy")
    rng = np.random.default_rng(12)
    for _ in range(20):
        u = rng.uniform(-1.5, 1.5, model.dim)
        g = model.grad(u)
        fd = fd_grad(model, u)
        rel = np.abs(g - fd) / np.maximum(1.0, np.abs(fd))
        assert rel.max() <= 1e-5


@pytest.mark.parametrize("opts", OPTION_SETS, ids=OPTION_IDS)
def test_compiled_kernel_agrees_with_reference(small_design, opts):
    ref = BVCQRModel(small_design, HYPER, opts, backend="numpy")
    fast = BVCQRModel(small_design, HYPER, opts, backend="auto")
    if fast.backend != "numba":
        pytest.skip("numba not available")
    rng = np.random.default_rng(13)
    for _ in range(20):
        u = rng.uniform(-2, 2, ref.dim)
        lp0, g0 = ref.logp_grad(u)
        lp1, g1 = fast.logp_grad(u)
        assert lp1 == pytest.approx(lp0, rel=1e-12, abs=1e-10)
        np.testing.assert_allclose(g1, g0, rtol=1e-10, atol=1e-10)


def test_beta_gradient_is_normal_equations(small_design):
    model = BVCQRModel(small_design, options=ModelOptions(noncentered=False))
    st = random_state(model, np.random.default_rng(14))
    u = model.unconstrain(st)
    d = small_design
    R = d.Y - d.X @ st.beta - d.W @ st.h - d.U @ st.b
    np.testing.assert_allclose(model.grad(u)[model.layout["beta"]], d.X.T @ R / st.sigma_sq, rtol=1e-12)


def test_beta_stationary_point(small_design):
    model = BVCQRModel(small_design, options=ModelOptions(noncentered=False))
    st = random_state(model, np.random.default_rng(15))
    d = small_design
    partial = d.Y - d.W @ st.h - d.U @ st.b
    st.beta = np.linalg.lstsq(d.X, partial, rcond=None)[0]
    g = model.grad(model.unconstrain(st))
    assert np.max(np.abs(g[model.layout["beta"]])) <= 1e-8


def test_horseshoe_penalizes_theta_at_small_tau(small_design):
    model = BVCQRModel(small_design)
    st = random_state(model, np.random.default_rng(16))
    st.tau1 = st.tau2 = 1e-3
    values = []
    for r in (0.0, 0.01, 0.1, 1.0, 10.0):
        s = st.copy()
        s.theta1 = np.full_like(st.theta1, r)
        s.theta2 = np.full_like(st.theta2, r)
        values.append(model.terms(s)["theta_prior"])
    assert np.all(np.diff(values) < 0)


# --------------------------------------------------------------------------- conjugate sub-model


def test_beta_sigma_conditional_is_normal_inverse_gamma(small_design):
    """With everything but (beta, sigma_sq) fixed, the joint equals the NIG
    density up to a constant."""
    d, hp = small_design, HYPER
    model = BVCQRModel(d, hp, ModelOptions(noncentered=False))
    rng = np.random.default_rng(17)
    st = random_state(model, rng)
    n, k, N = d.n_subjects, d.n_fixed, d.n_obs
    partial = d.Y - d.W @ st.h - d.U @ st.b
    XtX = d.X.T @ d.X
    beta_hat = np.linalg.solve(XtX, d.X.T @ partial)
    rss = float(np.sum((partial - d.X @ beta_hat) ** 2))
    Dinv = np.linalg.inv(st.D)
    b = st.b.reshape(n, 2)
    S_b = float(np.einsum("ij,jk,ik->", b, Dinv, b))
    a_post = hp.alpha + 0.5 * (N - k) + n
    g_post = hp.gamma + 0.5 * rss + 0.5 * S_b

    diffs = []
    for _ in range(10):
        s = st.copy()
        s.beta = beta_hat + rng.normal(size=k) * 0.3
        s.sigma_sq = rng.uniform(0.3, 3.0)
        nig = stats.multivariate_normal.logpdf(s.beta, beta_hat, s.sigma_sq * np.linalg.inv(XtX))
        nig += stats.invgamma.logpdf(s.sigma_sq, a=a_post, scale=g_post)
        diffs.append(model.log_joint(s, jacobian=False) - nig)
    assert np.ptp(diffs) <= 1e-8


# --------------------------------------------------------------------------- validation


def test_hyperparameter_validation():
    with pytest.raises(ConfigError, match="alpha0"):
        Hyperparameters(alpha0=0.0)
    with pytest.raises(ConfigError, match="nu0"):
        Hyperparameters(nu0=1.0)
    with pytest.raises(ConfigError, match="positive definite"):
        Hyperparameters(C0=[[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ConfigError, match="unknown"):
        Hyperparameters.from_dict({"beta0": 1})
    assert Hyperparameters.from_dict(Hyperparameters().to_dict()).to_dict() == Hyperparameters().to_dict()


def test_option_validation(small_design):
    with pytest.raises(ConfigError):
        ModelOptions(tau_power=3.0)
    with pytest.raises(ConfigError):
        ModelOptions(theta_weight=1.5)
    with pytest.raises(ConfigError):
        ModelOptions(centered_theta=(-1,))
    with pytest.raises(ConfigError, match="out of range"):
        BVCQRModel(small_design, options=ModelOptions(centered_theta=(99,)))
    with pytest.raises(ConfigError):
        BVCQRModel(small_design, backend="cuda")


def test_dimension_and_names(small_design):
    model = BVCQRModel(small_design)
    k, M, n = small_design.n_fixed, small_design.n_exposures, small_design.n_subjects
    assert model.dim == k + 2 * M + 2 + 2 * M + 2 + 1 + 3 + 2 * n + 2 * n
    assert len(model.names) == model.dim
    assert model.names[0] == "beta[intercept]" and model.names[1] == "beta[age]"
    assert model.names[model.layout["b"].start] == "b1[s0]"


def test_log_joint_reports_offending_term(small_design):
    model = BVCQRModel(small_design)
    st = random_state(model, np.random.default_rng(18))
    st.h = st.h * 1e200
    with pytest.raises(NumericalError, match="term"):
        model.log_joint(st)
