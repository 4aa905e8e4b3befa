import numpy as np
import pytest
from scipy import stats

from bvcqr.design import build_design
from bvcqr.diagnostics import mcse_mean
from bvcqr.errors import ConfigError, NumericalError
from bvcqr.model import BVCQRModel, FixedSubsetTarget, ModelOptions
from bvcqr.preprocess import quantize
from bvcqr.sampler import (
    GaussianTarget,
    SamplerConfig,
    hamiltonian,
    leapfrog,
    nuts_transition,
    run_chain,
    sample,
    warmup_windows,
)

from conftest import make_panel


@pytest.fixture(scope="module")
def gaussian_draws():
    return sample(GaussianTarget(2), SamplerConfig(iterations=2000, warmup=1000, chains=4, seed=0))


def test_standard_normal_moments(gaussian_draws):
    x = gaussian_draws.pooled()
    assert x.shape == (4000, 2)
    for j in range(2):
        assert abs(x[:, j].mean()) <= 3 * mcse_mean(gaussian_draws.draws[:, :, j])
    cov = np.cov(x.T)
    assert np.max(np.abs(cov - np.eye(2))) <= 0.10


def test_standard_normal_ks(gaussian_draws):
    x = gaussian_draws.pooled()
    for j in range(2):
        assert stats.kstest(x[:, j], "norm").pvalue > 0.01


def test_scaled_gaussian_adapts_metric():
    target = GaussianTarget(3, mean=[1.0, -2.0, 0.0], sd=[0.1, 1.0, 10.0])
    r = run_chain(target, SamplerConfig(iterations=1500, warmup=1000, seed=5), 0)
    np.testing.assert_allclose(np.sqrt(r["inv_metric"]), target.sd, rtol=0.35)
    assert np.all(r["tree_depth"] <= 4)


def test_leapfrog_reversibility():
    p = make_panel()
    model = BVCQRModel(build_design(p, quantize(p)))
    rng = np.random.default_rng(0)
    inv_metric = rng.uniform(0.5, 2.0, model.dim)
    for _ in range(5):
        q0 = rng.uniform(-1, 1, model.dim)
        p0 = rng.normal(size=model.dim)
        lp, g = model.logp_grad(q0)
        q, pm = q0, p0
        for _ in range(25):
            q, pm, g, lp = leapfrog(model, q, pm, g, 0.01, inv_metric)
        pm = -pm
        for _ in range(25):
            q, pm, g, lp = leapfrog(model, q, pm, g, 0.01, inv_metric)
        assert np.max(np.abs(q - q0)) <= 1e-8
        assert np.max(np.abs(-pm - p0)) <= 1e-8


def _adapted_small_instance():
    p = make_panel()
    model = BVCQRModel(build_design(p, quantize(p)))
    r = run_chain(model, SamplerConfig(iterations=600, warmup=500, seed=3), 0)
    return model, r


def _max_drift(model, r, eps, scale_steps):
    rng = np.random.default_rng(0)
    im = r["inv_metric"]
    worst = 0.0
    for k in range(0, 100, 5):
        q = r["q"][k].copy()
        lp, g = model.logp_grad(q)
        pm = rng.normal(size=model.dim) / np.sqrt(im)
        H0 = hamiltonian(lp, pm, im)
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(int(r["n_leapfrog"][k]) * scale_steps):
                q, pm, g, lp = leapfrog(model, q, pm, g, eps, im)
                worst = max(worst, abs(hamiltonian(lp, pm, im) - H0))
    return worst


def test_energy_drift_quarter_step():
    """Hamiltonian drift over a trajectory at a quarter of the adapted step size."""
    model, r = _adapted_small_instance()
    eps = r["step_size"][0]
    assert _max_drift(model, r, eps / 4, 4) <= 1e-3


def test_energy_error_is_second_order():
    model, r = _adapted_small_instance()
    eps = r["step_size"][0]
    d4 = _max_drift(model, r, eps / 4, 4)
    d8 = _max_drift(model, r, eps / 8, 8)
    assert 3.0 <= d4 / d8 <= 5.0


def test_seed_determinism_and_parallel_equivalence():
    target = GaussianTarget(2)
    cfg = SamplerConfig(iterations=300, warmup=150, chains=2, seed=99)
    a = sample(target, cfg)
    b = sample(target, cfg)
    assert np.array_equal(a.draws, b.draws)
    assert np.array_equal(a.energy, b.energy)
    c = sample(target, SamplerConfig(iterations=300, warmup=150, chains=2, seed=99, n_jobs=2))
    assert np.array_equal(a.draws, c.draws)
    d = sample(target, SamplerConfig(iterations=300, warmup=150, chains=2, seed=100))
    assert not np.array_equal(a.draws, d.draws)


def test_chains_use_distinct_streams():
    draws = sample(GaussianTarget(2), SamplerConfig(iterations=200, warmup=100, chains=3, seed=1))
    assert not np.array_equal(draws.draws[:, 0], draws.draws[:, 1])


def test_conjugate_beta_sigma_posterior():
    """(beta, sigma_sq) with everything else fixed: sampled moments match the
    normal-inverse-gamma posterior within 3 Monte Carlo standard errors."""
    p = make_panel(n=20, seed=4)
    d = build_design(p, quantize(p))
    model = BVCQRModel(d, options=ModelOptions(noncentered=False))
    rng = np.random.default_rng(4)
    base = rng.uniform(-0.5, 0.5, model.dim)
    L = model.layout
    free = np.r_[np.arange(L["beta"].start, L["beta"].stop), L["sigma"].start]
    target = FixedSubsetTarget(model, base, free)
    draws = sample(target, SamplerConfig(iterations=2000, warmup=1000, chains=4, seed=7))

    st = model.constrain(base)
    n, k, N = d.n_subjects, d.n_fixed, d.n_obs
    partial = d.Y - d.W @ st.h - d.U @ st.b
    XtX_inv = np.linalg.inv(d.X.T @ d.X)
    beta_hat = XtX_inv @ d.X.T @ partial
    rss = float(np.sum((partial - d.X @ beta_hat) ** 2))
    b = st.b.reshape(n, 2)
    S_b = float(np.einsum("ij,jk,ik->", b, np.linalg.inv(st.D), b))
    a_post = model.hyper.alpha + 0.5 * (N - k) + n
    g_post = model.hyper.gamma + 0.5 * rss + 0.5 * S_b
    sigma_mean = g_post / (a_post - 1)
    beta_cov = sigma_mean * XtX_inv  # marginal of beta is multivariate t
    truth_mean = np.r_[beta_hat, sigma_mean]

    x = draws.draws  # (draws, chains, k + 1)
    assert x.shape[0] * x.shape[1] == 4000
    for j in range(k + 1):
        assert abs(x[:, :, j].mean() - truth_mean[j]) <= 3 * mcse_mean(x[:, :, j])
    xb = x[:, :, :k]
    for i in range(k):
        for j in range(i, k):
            prod = (xb[:, :, i] - beta_hat[i]) * (xb[:, :, j] - beta_hat[j])
            assert abs(prod.mean() - beta_cov[i, j]) <= 3 * mcse_mean(prod)


def test_divergence_detected_with_huge_step():
    target = GaussianTarget(2)
    rng = np.random.default_rng(0)
    q = np.array([0.5, -0.5])
    lp, g = target.logp_grad(q)
    _, _, _, info = nuts_transition(target, q, lp, g, 200.0, np.ones(2), rng, max_depth=5)
    assert info["divergent"]


def test_unreliable_flag():
    draws = sample(GaussianTarget(2), SamplerConfig(iterations=200, warmup=100, chains=1, seed=0))
    assert not draws.unreliable
    draws.divergent[:20] = True
    assert draws.unreliable


def test_init_failure_is_fatal():
    class Nowhere:
        dim = 2

        def logp_grad(self, x):
            return -np.inf, np.zeros(2)

    with pytest.raises(NumericalError, match="100"):
        sample(Nowhere(), SamplerConfig(iterations=20, warmup=10, chains=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(iterations=100, warmup=100)
    with pytest.raises(ConfigError):
        SamplerConfig(target_accept=1.0)
    with pytest.raises(ConfigError):
        SamplerConfig(chains=0)
    with pytest.raises(ConfigError, match="unknown"):
        SamplerConfig.from_dict({"thin": 2})
    assert SamplerConfig().iterations == 2000 and SamplerConfig().warmup == 1000
    assert SamplerConfig().chains == 4 and SamplerConfig().max_tree_depth == 10


def test_warmup_windows_default_schedule():
    w = warmup_windows(1000)
    assert w[0][0] == 75
    assert w[-1][1] == 950
    assert [b - a for a, b in w] == [25, 50, 100, 200, 500]
    assert all(w[i][1] == w[i + 1][0] for i in range(len(w) - 1))


def test_max_tree_depth_caps_trajectory():
    draws = sample(GaussianTarget(2), SamplerConfig(iterations=200, warmup=100, chains=1, max_tree_depth=2))
    assert draws.tree_depth.max() <= 2
    assert draws.n_leapfrog.max() <= 3
