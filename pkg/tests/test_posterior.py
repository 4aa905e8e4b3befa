import dataclasses

import numpy as np
import pytest
from scipy import stats

from bvcqr.design import build_design
from bvcqr.diagnostics import mcse_mean
from bvcqr.errors import DataError
from bvcqr.model import BVCQRModel
from bvcqr.posterior import (
    evaluate_h,
    global_trend,
    mean_null_width,
    read_effects_csv,
    regression_report,
    selection_counts,
    summarize_effects,
    write_effects_csv,
)
from bvcqr.preprocess import QuantizedExposures, quantize
from bvcqr.sampler import SamplerConfig, sample
from bvcqr.simulate import GroundTruth, Scenario, builtin_scenario, generate

from test_diagnostics import make_draws


def theta_draws(x, chems=("a", "b")):
    names = [f"theta1[{c}]" for c in chems] + [f"theta2[{c}]" for c in chems]
    return make_draws(x, names)


def truth_for(h, ids):
    return GroundTruth(np.zeros(1), np.zeros(1), np.asarray(h, float), np.zeros((len(ids), 2)), np.zeros(2),
                       np.zeros((0, 0)), tuple(ids), 0, {})


def h_draws(h_hat, ids, n_draws=100):
    n = len(ids)
    names = [f"h1[{s}]" for s in ids] + [f"h2[{s}]" for s in ids]
    x = np.broadcast_to(np.asarray(h_hat, float), (n_draws, 1, 2 * n)).copy()
    return make_draws(x, names)


# --------------------------------------------------------------------------- effects


def test_constant_draws():
    rows = summarize_effects(theta_draws(np.full((200, 2, 4), 1.5)))
    assert len(rows) == 4
    r = rows[0]
    assert r.mean == 1.5 and r.sd == 0.0 and r.significant
    assert r.q025 == r.q50 == r.q975 == 1.5


def test_symmetric_draws_not_significant():
    z = np.random.default_rng(0).normal(size=(500, 2, 4))
    x = np.concatenate([z, -z], axis=0)
    rows = summarize_effects(theta_draws(x))
    assert not any(r.significant for r in rows)


def test_significance_and_quantile_invariants():
    x = np.random.default_rng(1).normal(loc=[0.0, 3.0, -3.0, 0.2], size=(300, 2, 4))
    for r in summarize_effects(theta_draws(x)):
        assert r.q025 <= r.q50 <= r.q975
        assert r.significant == (r.q025 > 0 or r.q975 < 0)


def test_quantiles_use_linear_interpolation():
    x = np.random.default_rng(2).normal(size=(150, 2, 4))
    rows = summarize_effects(theta_draws(x))
    pooled = np.concatenate([x[:, 0], x[:, 1]])[:, 0]
    assert rows[0].q025 == pytest.approx(np.quantile(pooled, 0.025, method="linear"))
    assert rows[0].sd == pytest.approx(pooled.std(ddof=1))


def test_pooling_invariance():
    x = np.random.default_rng(3).normal(size=(120, 3, 4))
    a = summarize_effects(theta_draws(x))
    b = summarize_effects(theta_draws(x[:, [2, 0, 1]].copy()))
    for ra, rb in zip(a, b):
        assert ra.mean == pytest.approx(rb.mean, abs=1e-14)
        assert ra.q025 == rb.q025 and ra.q975 == rb.q975 and ra.significant == rb.significant


def test_too_few_draws():
    with pytest.raises(DataError):
        summarize_effects(theta_draws(np.zeros((40, 2, 4))))


def test_shrinkage_ratio_against_reference():
    rng = np.random.default_rng(4)
    hs = theta_draws(rng.normal(scale=0.5, size=(400, 2, 4)))
    flat = theta_draws(rng.normal(scale=1.0, size=(400, 2, 4)))
    rows = summarize_effects(hs, reference=flat)
    assert all(0.4 < r.shrinkage_ratio < 0.6 for r in rows)


def test_effects_csv_round_trip(tmp_path):
    rows = summarize_effects(theta_draws(np.random.default_rng(5).normal(size=(100, 2, 4))))
    path = tmp_path / "effects.csv"
    write_effects_csv(rows, path)
    back = read_effects_csv(path)
    assert back == rows
    header = path.read_text().splitlines()[0]
    assert header.startswith("chemical,level,mean,sd,q2.5,q50,q97.5,significant")


def test_selection_and_null_width():
    x = np.random.default_rng(6).normal(loc=[3.0, 0.0, 0.0, 0.0], scale=0.5, size=(300, 2, 4))
    rows = summarize_effects(theta_draws(x))
    counts = selection_counts(rows, [1.0, 0.0], [0.0, 0.0])
    assert counts == {"planted": 1, "planted_flagged": 1, "nulls": 3, "null_flagged": 0}
    assert mean_null_width(rows, [1.0, 0.0], [0.0, 0.0]) == pytest.approx(np.mean([r.width for r in rows[1:]]))


# --------------------------------------------------------------------------- h recovery


def test_evaluate_h_identity():
    h = np.random.default_rng(7).normal(size=10)
    ids = [f"s{i}" for i in range(5)]
    rep = evaluate_h(h_draws(h, ids), truth_for(h, ids))
    for lvl in ("h1", "h2"):
        assert rep[lvl]["intercept"] == pytest.approx(0, abs=1e-12)
        assert rep[lvl]["slope"] == pytest.approx(1)
        assert rep[lvl]["r2"] == pytest.approx(1)
        assert rep[lvl]["rmse"] == pytest.approx(0, abs=1e-12)


def test_evaluate_h_constant_shift():
    h = np.random.default_rng(8).normal(size=10)
    ids = [f"s{i}" for i in range(5)]
    rep = evaluate_h(h_draws(h + 0.5, ids), truth_for(h, ids))
    assert rep["h1"]["intercept"] == pytest.approx(0.5)
    assert rep["h1"]["slope"] == pytest.approx(1)
    assert rep["h1"]["rmse"] == pytest.approx(0.5)


def test_regression_report_matches_linregress():
    rng = np.random.default_rng(9)
    t = rng.normal(size=50)
    e = 0.3 + 0.9 * t + rng.normal(scale=0.4, size=50)
    rep = regression_report(e, t)
    lr = stats.linregress(t, e)
    assert rep["slope"] == pytest.approx(lr.slope)
    assert rep["intercept"] == pytest.approx(lr.intercept)
    assert rep["r2"] == pytest.approx(lr.rvalue**2)
    assert rep["rmse"] == pytest.approx(np.sqrt(np.mean((e - t) ** 2)))


def test_zero_variance_truth_flags_undefined_slope():
    ids = ["a", "b", "c"]
    h = np.r_[np.ones(3), np.random.default_rng(0).normal(size=3)]
    rep = evaluate_h(h_draws(h + 0.1, ids), truth_for(h, ids))
    assert rep["h1"]["undefined_slope"] and rep["h1"]["slope"] is None
    assert not rep["h2"]["undefined_slope"]


def test_evaluate_h_conformability():
    ids = ["a", "b"]
    with pytest.raises(DataError):
        evaluate_h(h_draws(np.zeros(4), ids), truth_for(np.zeros(6), ["a", "b", "c"]))
    with pytest.raises(DataError):
        evaluate_h(h_draws(np.zeros(4), ids), truth_for(np.zeros(4), ["a", "x"]))


# --------------------------------------------------------------------------- small end-to-end fits


def _fit(design, seed=1, iterations=800, warmup=400):
    model = BVCQRModel(design)
    return sample(model, SamplerConfig(iterations=iterations, warmup=warmup, chains=2, seed=seed))


def test_global_trend_recovers_generator_values():
    s = dataclasses.replace(builtin_scenario(1, seed=21), n=100)
    panel, truth = generate(s)
    draws = _fit(build_design(panel, quantize(panel)))
    g1, g2 = global_trend(draws)
    assert g1["name"] == "beta[intercept]" and g2["name"] == "beta[age]"
    pooled = draws.pooled()
    # covariate effects carry the generator's beta; the trend line itself is zero
    for name, true in (("beta[intercept]", 0.0), ("beta[age]", 0.0), ("beta[x_1]", truth.beta[0]),
                       ("beta[x_2]", truth.beta[1])):
        j = draws.index(name)
        est, se = pooled[:, j].mean(), pooled[:, j].std(ddof=1)
        assert abs(est - true) <= 3 * mcse_mean(draws.draws[:, :, j]) + 2 * se, name


def test_global_trend_null_data():
    M = 6
    s = Scenario(n=60, M=M, theta1_true=np.zeros(M), theta2_true=np.zeros(M), beta_true=np.zeros(2), seed=22)
    panel, _ = generate(s)
    g1, g2 = global_trend(_fit(build_design(panel, quantize(panel))))
    assert g1["q2.5"] < 0 < g1["q97.5"]
    assert g2["q2.5"] < 0 < g2["q97.5"]


def test_significance_equivariant_under_reversed_coding():
    M = 4
    th1 = np.array([1.5, 0.0, 0.0, 0.0])
    th2 = np.array([0.0, 0.9, 0.0, 0.0])
    s = Scenario(n=60, M=M, theta1_true=th1, theta2_true=th2, seed=23)
    panel, _ = generate(s)
    qz = quantize(panel)
    flipped = qz.q.copy()
    flipped[:, 0] = 3 - flipped[:, 0]
    flipped[:, 2] = 3 - flipped[:, 2]
    base = summarize_effects(_fit(build_design(panel, qz)))
    flip = summarize_effects(_fit(build_design(panel, QuantizedExposures(flipped, qz.breakpoints, qz.names))))
    for j in (0, 2):
        for level in (0, M):
            a, b = base[level + j], flip[level + j]
            assert a.significant == b.significant
            if a.significant:
                assert np.sign(a.mean) == -np.sign(b.mean)
    assert base[0].significant and flip[0].mean < 0
