import numpy as np
import pytest

from bvcqr.diagnostics import bulk_ess, diagnostics, max_rhat, mcse_mean, split_rhat
from bvcqr.sampler import PosteriorDraws


def make_draws(x, names=None):
    n, m, dim = x.shape
    return PosteriorDraws(
        draws=x,
        names=names or [f"p{j}" for j in range(dim)],
        energy=np.zeros((n, m)),
        tree_depth=np.ones((n, m), dtype=int),
        divergent=np.zeros((n, m), dtype=bool),
        step_size=np.full((n, m), 0.1),
        n_leapfrog=np.ones((n, m), dtype=int),
        accept_stat=np.full((n, m), 0.8),
        config={"max_tree_depth": 10},
    )


def test_rhat_same_distribution():
    x = np.random.default_rng(0).normal(size=(1000, 4, 5))
    for j in range(5):
        assert 0.99 <= split_rhat(x[:, :, j]) <= 1.02


def test_rhat_detects_shifted_chain():
    x = np.random.default_rng(1).normal(size=(1000, 4))
    x[:, 2] += 5.0
    assert split_rhat(x) > 1.2


def test_rhat_detects_within_chain_drift():
    x = np.random.default_rng(2).normal(size=(1000, 4))
    x += np.linspace(0, 4, 1000)[:, None]
    assert split_rhat(x) > 1.2


def test_ess_iid_near_draw_count():
    x = np.random.default_rng(3).normal(size=(1000, 4))
    assert abs(bulk_ess(x) - 4000) <= 0.2 * 4000


def test_ess_of_ar1_oracle():
    """AR(1) with coefficient rho has ESS ~ N (1 - rho) / (1 + rho)."""
    rng = np.random.default_rng(4)
    rho, n, m = 0.8, 5000, 4
    x = np.empty((n, m))
    x[0] = rng.normal(size=m)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + np.sqrt(1 - rho**2) * rng.normal(size=m)
    expected = n * m * (1 - rho) / (1 + rho)
    assert abs(bulk_ess(x) - expected) <= 0.2 * expected


def test_mcse_iid():
    x = np.random.default_rng(5).normal(size=(1000, 4))
    assert mcse_mean(x) == pytest.approx(1 / np.sqrt(4000), rel=0.15)


def test_report_fields():
    x = np.random.default_rng(6).normal(size=(200, 2, 3))
    d = make_draws(x, ["theta1[a]", "sigma_sq", "h1[s]"])
    d.divergent[:5, 0] = True
    rep = diagnostics(d)
    assert rep["divergent"] == 5
    assert rep["divergent_per_chain"] == [5, 0]
    assert rep["divergent_fraction"] == pytest.approx(5 / 400)
    assert set(rep["parameters"]) == {"theta1[a]", "sigma_sq", "h1[s]"}
    assert rep["tree_depth_mean"] == 1.0
    assert max_rhat(rep, ("theta1[",)) == rep["parameters"]["theta1[a]"]["rhat"]


def test_single_chain_omits_rhat():
    x = np.random.default_rng(7).normal(size=(200, 1, 2))
    with pytest.warns(UserWarning, match="single chain"):
        rep = diagnostics(make_draws(x))
    assert all(v["rhat"] is None for v in rep["parameters"].values())
    assert np.isnan(max_rhat(rep, ("p",)))
