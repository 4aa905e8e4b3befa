"""Posterior summaries: chemical effects, recovery of h, global trend."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .sampler import PosteriorDraws
from .simulate import GroundTruth

QUANTILES = (0.025, 0.5, 0.975)
LEVELS = ("baseline", "trajectory")


@dataclass(frozen=True)
class EffectRow:
    chemical: str
    level: str
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float
    significant: bool
    shrinkage_ratio: float | None = None

    @property
    def width(self) -> float:
        return self.q975 - self.q025


def _summ(x: np.ndarray) -> tuple[float, float, float, float, float]:
    lo, mid, hi = np.quantile(x, QUANTILES, method="linear")
    sd = float(x.std(ddof=1)) if len(x) > 1 else 0.0
    return float(x.mean()), sd, float(lo), float(mid), float(hi)


def theta_columns(draws: PosteriorDraws) -> tuple[list[str], list[int], list[int]]:
    """Chemical names and column indices of theta1/theta2 in ``draws``."""
    idx1 = [j for j, n in enumerate(draws.names) if n.startswith("theta1[")]
    idx2 = [j for j, n in enumerate(draws.names) if n.startswith("theta2[")]
    chems = [draws.names[j][len("theta1[") : -1] for j in idx1]
    return chems, idx1, idx2


def summarize_effects(
    draws: PosteriorDraws,
    reference: PosteriorDraws | None = None,
    min_draws: int = 100,
) -> list[EffectRow]:
    """Per-chemical effect summaries at baseline (theta1) and on the trajectory
    (theta2), pooled over chains.

    If ``reference`` (typically the no-horseshoe fit) is given, each row also
    carries the ratio of posterior SDs.
    """
    pooled = draws.pooled()
    if pooled.shape[0] < min_draws:
        raise DataError(f"need at least {min_draws} draws to summarize, got {pooled.shape[0]}")
    chems, idx1, idx2 = theta_columns(draws)
    ref = None
    if reference is not None:
        ref = reference.pooled()
        ref_names = reference.names
    rows = []
    for level, idx in zip(LEVELS, (idx1, idx2)):
        for chem, j in zip(chems, idx):
            mean, sd, lo, mid, hi = _summ(pooled[:, j])
            ratio = None
            if ref is not None:
                rsd = ref[:, ref_names.index(draws.names[j])].std(ddof=1)
                ratio = float(sd / rsd) if rsd > 0 else None
            rows.append(
                EffectRow(chem, level, mean, sd, lo, mid, hi, bool(lo > 0 or hi < 0), ratio)
            )
    return rows


def write_effects_csv(rows: list[EffectRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chemical", "level", "mean", "sd", "q2.5", "q50", "q97.5", "significant", "shrinkage_ratio"])
        for r in rows:
            w.writerow(
                [
                    r.chemical,
                    r.level,
                    repr(r.mean),
                    repr(r.sd),
                    repr(r.q025),
                    repr(r.q50),
                    repr(r.q975),
                    int(r.significant),
                    "" if r.shrinkage_ratio is None else repr(r.shrinkage_ratio),
                ]
            )


def read_effects_csv(path: str | Path) -> list[EffectRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                EffectRow(
                    rec["chemical"],
                    rec["level"],
                    float(rec["mean"]),
                    float(rec["sd"]),
                    float(rec["q2.5"]),
                    float(rec["q50"]),
                    float(rec["q97.5"]),
                    rec["significant"] == "1",
                    float(rec["shrinkage_ratio"]) if rec.get("shrinkage_ratio") else None,
                )
            )
    return rows


def regression_report(estimate: np.ndarray, truth: np.ndarray) -> dict:
    """OLS of ``estimate`` on ``truth``: intercept, slope, R^2 and RMSE."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    rmse = float(np.sqrt(np.mean((estimate - truth) ** 2)))
    tc = truth - truth.mean()
    sxx = float(tc @ tc)
    if sxx == 0.0:
        return {"intercept": None, "slope": None, "r2": None, "rmse": rmse, "undefined_slope": True}
    slope = float(tc @ (estimate - estimate.mean()) / sxx)
    intercept = float(estimate.mean() - slope * truth.mean())
    resid = estimate - intercept - slope * truth
    ec = estimate - estimate.mean()
    sst = float(ec @ ec)
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 1.0
    return {
        "intercept": intercept,
        "slope": slope,
        "r2": float(min(max(r2, 0.0), 1.0)),
        "rmse": rmse,
        "undefined_slope": False,
    }


def posterior_mean_h(draws: PosteriorDraws) -> np.ndarray:
    idx1 = [j for j, n in enumerate(draws.names) if n.startswith("h1[")]
    idx2 = [j for j, n in enumerate(draws.names) if n.startswith("h2[")]
    pooled = draws.pooled()
    return np.concatenate([pooled[:, idx1].mean(axis=0), pooled[:, idx2].mean(axis=0)])


def evaluate_h(draws: PosteriorDraws, truth: GroundTruth) -> dict:
    """Regress the posterior mean of h on the true h, per level."""
    h_hat = posterior_mean_h(draws)
    if h_hat.shape != truth.h.shape:
        raise DataError(
            f"ground truth has {truth.h.size // 2} subjects, fit has {h_hat.size // 2}"
        )
    if truth.subject_ids:
        fit_ids = [n[len("h1[") : -1] for n in draws.names if n.startswith("h1[")]
        if list(truth.subject_ids) != fit_ids:
            raise DataError("ground truth subjects do not match the fitted subjects")
    n = h_hat.size // 2
    return {
        "h1": regression_report(h_hat[:n], truth.h[:n]),
        "h2": regression_report(h_hat[n:], truth.h[n:]),
    }


def global_trend(draws: PosteriorDraws) -> tuple[dict, dict]:
    """Summaries of the population intercept and age slope (first two betas)."""
    idx = [j for j, n in enumerate(draws.names) if n.startswith("beta[")][:2]
    pooled = draws.pooled()
    out = []
    for j in idx:
        mean, sd, lo, mid, hi = _summ(pooled[:, j])
        out.append({"name": draws.names[j], "mean": mean, "sd": sd, "q2.5": lo, "q50": mid, "q97.5": hi})
    return out[0], out[1]


def mean_null_width(rows: list[EffectRow], theta1_true, theta2_true) -> float:
    """Average 95% interval width over chemicals whose true effect is zero."""
    truth = np.concatenate([np.asarray(theta1_true), np.asarray(theta2_true)])
    widths = np.array([r.width for r in rows])
    return float(widths[truth == 0].mean())


def selection_counts(rows: list[EffectRow], theta1_true, theta2_true) -> dict:
    truth = np.concatenate([np.asarray(theta1_true), np.asarray(theta2_true)])
    sig = np.array([r.significant for r in rows])
    return {
        "planted": int((truth != 0).sum()),
        "planted_flagged": int(sig[truth != 0].sum()),
        "nulls": int((truth == 0).sum()),
        "null_flagged": int(sig[truth == 0].sum()),
    }
