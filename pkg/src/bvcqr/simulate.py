"""Synthetic exposure/outcome panels with sparse quartile-linear mixture effects."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .preprocess import ExposurePanel, quantize_matrix

# 1-based chemical index -> weight, before the per-level multiplier
_SCENARIO_WEIGHTS = {
    1: ({1: 0.1, 12: 0.3, 24: 0.4, 35: 0.2}, {9: 0.1, 23: 0.5, 27: 0.2, 33: 0.2}),
    2: (
        {1: 0.1, 12: 0.3, 23: -0.3, 24: 0.4, 35: 0.2},
        {6: -0.2, 9: 0.1, 23: 0.5, 27: 0.2, 33: 0.2},
    ),
}
SCENARIO_IDS = tuple(_SCENARIO_WEIGHTS)


def ar1_correlation(M: int, rho: float = 0.4) -> np.ndarray:
    idx = np.arange(M)
    return rho ** np.abs(idx[:, None] - idx[None, :])


@dataclass(frozen=True)
class Scenario:
    n: int = 100
    M: int = 36
    theta1_true: np.ndarray = field(default_factory=lambda: np.zeros(36))
    theta2_true: np.ndarray = field(default_factory=lambda: np.zeros(36))
    scale1: float = 5.0
    scale2: float = 3.0
    C: np.ndarray | None = None
    rho: float = 0.4
    ages_months: tuple[float, ...] = (12.0, 24.0, 36.0)
    baseline_age: float = 24.0
    age_scale: float = 12.0
    beta_true: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.5]))
    D_true: np.ndarray = field(default_factory=lambda: np.diag([0.25, 0.04]))
    noise_sd: float = 1.0
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        for k in ("theta1_true", "theta2_true", "beta_true", "D_true"):
            object.__setattr__(self, k, np.asarray(getattr(self, k), dtype=float))
        if self.C is None:
            object.__setattr__(self, "C", ar1_correlation(self.M, self.rho))
        else:
            object.__setattr__(self, "C", np.asarray(self.C, dtype=float))
        if self.theta1_true.shape != (self.M,) or self.theta2_true.shape != (self.M,):
            raise ConfigError(f"true theta vectors must have length M={self.M}")
        if self.C.shape != (self.M, self.M):
            raise ConfigError("exposure covariance must be M x M")
        if self.beta_true.shape != (2,):
            raise ConfigError("beta_true needs one coefficient per covariate (2)")
        if self.D_true.shape != (2, 2) or not np.allclose(self.D_true, self.D_true.T):
            raise ConfigError("D_true must be a symmetric 2x2 matrix")
        if np.any(np.linalg.eigvalsh(self.D_true) < 0):
            raise ConfigError("D_true must be positive semi-definite")
        if self.n < 4:
            raise ConfigError("need at least 4 subjects to form quartiles")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
            elif isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        if "builtin" in d:
            base = builtin_scenario(int(d.pop("builtin")))
            return dataclasses.replace(base, **{k: _coerce(k, v) for k, v in d.items()})
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown scenario field(s): {', '.join(sorted(unknown))}")
        return cls(**{k: _coerce(k, v) for k, v in d.items()})


def _coerce(k, v):
    if k == "ages_months":
        return tuple(float(a) for a in v)
    return v


@dataclass(frozen=True)
class GroundTruth:
    theta1: np.ndarray
    theta2: np.ndarray
    h: np.ndarray
    b: np.ndarray
    beta: np.ndarray
    q: np.ndarray
    subject_ids: tuple[str, ...]
    seed: int
    scenario: dict

    def to_dict(self) -> dict:
        return {
            "theta1_true": self.theta1.tolist(),
            "theta2_true": self.theta2.tolist(),
            "h_true": self.h.tolist(),
            "b_true": self.b.tolist(),
            "beta_true": self.beta.tolist(),
            "subject_ids": list(self.subject_ids),
            "seed": self.seed,
            "scenario": self.scenario,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            theta1=np.asarray(d["theta1_true"], dtype=float),
            theta2=np.asarray(d["theta2_true"], dtype=float),
            h=np.asarray(d["h_true"], dtype=float),
            b=np.asarray(d["b_true"], dtype=float),
            beta=np.asarray(d["beta_true"], dtype=float),
            q=np.empty((0, 0)),
            subject_ids=tuple(d.get("subject_ids", ())),
            seed=int(d.get("seed", 0)),
            scenario=d.get("scenario", {}),
        )


def builtin_scenario(scenario_id: int, seed: int = 0, **overrides) -> Scenario:
    """The two sparse-effect scenarios (n=100, M=36)."""
    if scenario_id not in _SCENARIO_WEIGHTS:
        raise ConfigError(
            f"unknown scenario id {scenario_id!r}; valid ids: {', '.join(map(str, SCENARIO_IDS))}"
        )
    M, s1, s2 = 36, 5.0, 3.0
    w1, w2 = _SCENARIO_WEIGHTS[scenario_id]
    theta1, theta2 = np.zeros(M), np.zeros(M)
    for k, w in w1.items():
        theta1[k - 1] = s1 * w
    for k, w in w2.items():
        theta2[k - 1] = s2 * w
    sc = Scenario(
        n=100,
        M=M,
        theta1_true=theta1,
        theta2_true=theta2,
        scale1=s1,
        scale2=s2,
        seed=seed,
        name=f"scenario{scenario_id}",
    )
    return dataclasses.replace(sc, **overrides) if overrides else sc


def generate(s: Scenario) -> tuple[ExposurePanel, GroundTruth]:
    """Draw exposures, covariates, random effects and outcomes from ``s``."""
    rng = np.random.default_rng(s.seed)
    try:
        Lz = np.linalg.cholesky(s.C)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("exposure covariance is not positive definite") from exc
    n, M = s.n, s.M
    Z = rng.standard_normal((n, M)) @ Lz.T
    q = quantize_matrix(Z)
    h1 = q @ s.theta1_true
    h2 = q @ s.theta2_true
    x = np.column_stack([rng.standard_normal(n), rng.binomial(1, 0.5, n).astype(float)])
    w, V = np.linalg.eigh(s.D_true)
    b = rng.standard_normal((n, 2)) @ (V * np.sqrt(np.clip(w, 0, None))).T

    ages_m = np.asarray(s.ages_months, dtype=float)
    J = len(ages_m)
    obs_subject = np.repeat(np.arange(n), J)
    ages_raw = np.tile(ages_m, n)
    t = (ages_raw - s.baseline_age) / s.age_scale
    eps = rng.standard_normal(n * J) * s.noise_sd
    i = obs_subject
    y = h1[i] + h2[i] * t + x[i] @ s.beta_true + b[i, 0] + b[i, 1] * t + eps

    ids = tuple(f"s{k + 1:03d}" for k in range(n))
    panel = ExposurePanel(
        subject_ids=np.array(ids),
        covariates=x,
        exposures=Z,
        obs_subject=obs_subject,
        ages=ages_raw,
        y=y,
        exposure_names=tuple(f"z_{m + 1}" for m in range(M)),
        covariate_names=("x_1", "x_2"),
        detect=np.ones((n, M), dtype=bool),
    )
    truth = GroundTruth(
        theta1=s.theta1_true.copy(),
        theta2=s.theta2_true.copy(),
        h=np.concatenate([h1, h2]),
        b=b,
        beta=s.beta_true.copy(),
        q=q,
        subject_ids=ids,
        seed=s.seed,
        scenario=s.to_dict(),
    )
    return panel, truth
