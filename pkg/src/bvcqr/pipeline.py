"""End-to-end fitting: preprocess, build the design, sample, summarize."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .design import QuantizedDesign, build_design
from .diagnostics import diagnostics, max_rhat
from .errors import ConfigError
from .model import BVCQRModel, Hyperparameters, ModelOptions
from .preprocess import ExposurePanel, preprocess_panel
from .sampler import PosteriorDraws, SamplerConfig, sample

RHAT_LIMIT = 1.05
# theta, phi, sigma^2 and the global trend (first two betas) are gated
GATED_PREFIXES = ("theta1[", "theta2[", "phi1_sq", "phi2_sq", "sigma_sq", "beta[intercept]", "beta[age]")


@dataclass(frozen=True)
class PreprocessOptions:
    detect_filter: bool = True
    impute: bool = True
    scale: bool = True
    min_detect_frac: float = 0.20


@dataclass(frozen=True)
class DesignOptions:
    baseline_age: float = 24.0
    age_scale: float = 12.0


@dataclass(frozen=True)
class FitConfig:
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    model: ModelOptions = field(default_factory=ModelOptions)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    preprocess: PreprocessOptions = field(default_factory=PreprocessOptions)
    design: DesignOptions = field(default_factory=DesignOptions)

    _SECTIONS = {
        "hyper": Hyperparameters,
        "model": ModelOptions,
        "sampler": SamplerConfig,
        "preprocess": PreprocessOptions,
        "design": DesignOptions,
    }

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        unknown = set(d) - set(cls._SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kw = {}
        for name, typ in cls._SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            if hasattr(typ, "from_dict"):
                kw[name] = typ.from_dict(sec)
            else:
                allowed = {f.name for f in dataclasses.fields(typ)}
                bad = set(sec) - allowed
                if bad:
                    raise ConfigError(f"unknown {name} option(s): {', '.join(sorted(bad))}")
                kw[name] = typ(**sec)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "hyper": self.hyper.to_dict(),
            "model": self.model.to_dict(),
            "sampler": self.sampler.to_dict(),
            "preprocess": dataclasses.asdict(self.preprocess),
            "design": dataclasses.asdict(self.design),
        }

    def replace(self, **sections) -> "FitConfig":
        """Copy with per-section field overrides, e.g. ``sampler={"seed": 3}``."""
        kw = {}
        for name, updates in sections.items():
            if updates:
                kw[name] = dataclasses.replace(getattr(self, name), **updates)
        return dataclasses.replace(self, **kw)


@dataclass
class FitResult:
    draws: PosteriorDraws
    design: QuantizedDesign
    model: BVCQRModel
    preprocess_report: dict
    diagnostics: dict
    config: FitConfig
    unreliable: bool
    reasons: list[str]


def reliability(report: dict) -> tuple[bool, list[str]]:
    """Apply the divergence and R-hat gates to a diagnostics report."""
    reasons = []
    if report["unreliable"]:
        reasons.append(f"divergent fraction {report['divergent_fraction']:.3f} exceeds 0.10")
    rh = max_rhat(report, GATED_PREFIXES)
    if np.isfinite(rh) and rh > RHAT_LIMIT:
        reasons.append(f"max split R-hat {rh:.3f} exceeds {RHAT_LIMIT}")
    return bool(reasons), reasons


def fit_panel(panel: ExposurePanel, config: FitConfig | None = None) -> FitResult:
    config = config or FitConfig()
    pp = config.preprocess
    panel, qz, report = preprocess_panel(
        panel,
        detect_filter=pp.detect_filter,
        impute=pp.impute,
        scale=pp.scale,
        min_detect_frac=pp.min_detect_frac,
    )
    design = build_design(panel, qz, config.design.baseline_age, config.design.age_scale)
    model = BVCQRModel(design, config.hyper, config.model)
    draws = sample(model, config.sampler)
    diag = diagnostics(draws)
    bad, reasons = reliability(diag)
    diag["unreliable"] = bad
    diag["reasons"] = reasons
    diag["max_rhat_gated"] = max_rhat(diag, GATED_PREFIXES) if draws.n_chains > 1 else None
    return FitResult(draws, design, model, report, diag, config, bad, reasons)
