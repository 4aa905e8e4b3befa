"""Exposure preprocessing: detection filtering, LOD imputation, 2-SD scaling
and quartile indexing.

All operations are pure: they take an :class:`ExposurePanel` and return a new
one (or a :class:`QuantizedExposures`), never mutating their input.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

N_LEVELS = 4


@dataclass(frozen=True)
class ExposurePanel:
    """Per-subject exposures and covariates plus long-format repeated outcomes.

    Attributes
    ----------
    subject_ids : (n,) array of str
    covariates : (n, p) float array
    exposures : (n, M) float array. Entries flagged below LOD may be NaN
        until :func:`impute_below_lod` runs.
    obs_subject : (N_obs,) int array, index into ``subject_ids`` per visit.
    ages : (N_obs,) raw ages (months).
    y : (N_obs,) outcomes.
    exposure_names, covariate_names : column labels.
    lod : (M,) limits of detection, NaN where unknown; or None.
    detect : (n, M) bool, True where the value was detectable; or None.
    scale : (M,) cumulative divisors applied to each exposure column.
    """

    subject_ids: np.ndarray
    covariates: np.ndarray
    exposures: np.ndarray
    obs_subject: np.ndarray
    ages: np.ndarray
    y: np.ndarray
    exposure_names: tuple[str, ...]
    covariate_names: tuple[str, ...] = ()
    lod: np.ndarray | None = None
    detect: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        n, m = self.exposures.shape
        if len(self.subject_ids) != n:
            raise DataError("subject_ids length does not match exposure rows")
        if self.covariates.shape[0] != n:
            raise DataError("covariate rows do not match number of subjects")
        if len(self.exposure_names) != m:
            raise DataError("exposure_names length does not match exposure columns")
        if len(self.covariate_names) != self.covariates.shape[1]:
            raise DataError("covariate_names length does not match covariate columns")
        if not (len(self.obs_subject) == len(self.ages) == len(self.y)):
            raise DataError("obs_subject, ages and y must have equal length")
        if self.lod is not None and len(self.lod) != m:
            raise DataError("lod length does not match exposure columns")
        if self.detect is not None and self.detect.shape != (n, m):
            raise DataError("detect flags must have shape (n, M)")
        counts = np.bincount(self.obs_subject, minlength=n) if len(self.obs_subject) else np.zeros(n, int)
        if np.any(counts == 0):
            empty = [str(s) for s in np.asarray(self.subject_ids)[counts == 0]]
            raise DataError(f"subjects without observations: {', '.join(empty[:5])}")
        for i in range(n):
            a = self.ages[self.obs_subject == i]
            if np.any(np.diff(a) <= 0):
                raise DataError(f"ages not strictly increasing for subject {self.subject_ids[i]}")
        if self.scale is None:
            object.__setattr__(self, "scale", np.ones(m))

    @property
    def n_subjects(self) -> int:
        return self.exposures.shape[0]

    @property
    def n_exposures(self) -> int:
        return self.exposures.shape[1]

    @property
    def n_obs(self) -> int:
        return len(self.y)

    def select_exposures(self, keep: np.ndarray) -> "ExposurePanel":
        keep = np.asarray(keep, dtype=bool)
        return dataclasses.replace(
            self,
            exposures=self.exposures[:, keep],
            exposure_names=tuple(np.asarray(self.exposure_names, dtype=object)[keep]),
            lod=None if self.lod is None else self.lod[keep],
            detect=None if self.detect is None else self.detect[:, keep],
            scale=self.scale[keep],
        )


@dataclass(frozen=True)
class QuantizedExposures:
    """Quartile indices ``q`` (n, M) in {0,1,2,3} and cut points (M, 3)."""

    q: np.ndarray
    breakpoints: np.ndarray
    names: tuple[str, ...] = field(default=())


def detection_fraction(panel: ExposurePanel) -> np.ndarray:
    if panel.detect is None:
        raise ConfigError("detection filtering requested without flags")
    return panel.detect.mean(axis=0)


def filter_by_detection(panel: ExposurePanel, min_detect_frac: float = 0.20) -> ExposurePanel:
    """Drop chemicals detected in fewer than ``min_detect_frac`` of subjects."""
    if not 0.0 <= min_detect_frac <= 1.0:
        raise ConfigError(f"min_detect_frac must lie in [0, 1], got {min_detect_frac}")
    frac = detection_fraction(panel)
    keep = frac >= min_detect_frac
    if keep.all():
        return panel
    return panel.select_exposures(keep)


def impute_below_lod(panel: ExposurePanel) -> ExposurePanel:
    """Replace every below-LOD entry with LOD/sqrt(2) of its chemical."""
    if panel.detect is None:
        return panel
    below = ~panel.detect
    if not below.any():
        return panel
    cols = np.flatnonzero(below.any(axis=0))
    lod = panel.lod if panel.lod is not None else np.full(panel.n_exposures, np.nan)
    missing = [panel.exposure_names[j] for j in cols if not np.isfinite(lod[j])]
    if missing:
        raise DataError(f"below-LOD values but no LOD for chemical(s): {', '.join(missing)}")
    z = panel.exposures.copy()
    fill = np.broadcast_to(lod / np.sqrt(2.0), z.shape)
    z[below] = fill[below]
    return dataclasses.replace(panel, exposures=z)


def scale_by_2sd(panel: ExposurePanel) -> ExposurePanel:
    """Divide each exposure column by twice its sample SD (ddof=1).

    LODs are rescaled alongside so that imputation stays consistent if it
    is applied afterwards. Divisors accumulate in ``panel.scale``.
    """
    z = panel.exposures
    if np.isnan(z).any():
        raise DataError("cannot scale exposures containing missing values; impute first")
    sd = z.std(axis=0, ddof=1)
    bad = [panel.exposure_names[j] for j in np.flatnonzero(~(sd > 0))]
    if bad:
        raise DataError(f"zero-variance chemical(s): {', '.join(bad)}")
    div = 2.0 * sd
    return dataclasses.replace(
        panel,
        exposures=z / div,
        lod=None if panel.lod is None else panel.lod / div,
        scale=panel.scale * div,
    )


def quartile_breakpoints(z: np.ndarray) -> np.ndarray:
    """Type-7 (linear interpolation) quartiles per column, shape (M, 3)."""
    return np.quantile(z, [0.25, 0.5, 0.75], axis=0, method="linear").T


def quantize_matrix(z: np.ndarray) -> np.ndarray:
    """Quartile index of every entry relative to its own column.

    For a sample value, ``z <= Q_k`` holds exactly when ``z`` is no larger
    than the lower order statistic bracketing ``Q_k``: no sample value lies
    strictly between the two bracketing order statistics. Comparing against
    order statistics avoids rounding in the interpolated cut point.
    """
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    if n < N_LEVELS:
        raise DataError(f"quantization needs at least {N_LEVELS} subjects, got {n}")
    if np.isnan(z).any():
        raise DataError("cannot quantize exposures containing missing values")
    srt = np.sort(z, axis=0)
    lo = np.floor(np.array([1, 2, 3]) * (n - 1) / 4.0).astype(int)
    q = np.zeros(z.shape, dtype=np.int64)
    for k in lo:
        q += z > srt[k]
    return q


def quantize(panel: ExposurePanel) -> QuantizedExposures:
    z = panel.exposures
    q = quantize_matrix(z)
    return QuantizedExposures(q=q, breakpoints=quartile_breakpoints(z), names=panel.exposure_names)


def preprocess_panel(
    panel: ExposurePanel,
    *,
    detect_filter: bool = True,
    impute: bool = True,
    scale: bool = True,
    min_detect_frac: float = 0.20,
) -> tuple[ExposurePanel, QuantizedExposures, dict]:
    """Run the full pipeline and return the cleaned panel, indices and a report."""
    report: dict = {"steps": []}
    names_in = panel.exposure_names
    frac = panel.detect.mean(axis=0) if panel.detect is not None else np.ones(panel.n_exposures)
    if detect_filter:
        panel = filter_by_detection(panel, min_detect_frac)
        report["steps"].append("filter_by_detection")
    if impute:
        n_imputed = (~panel.detect).sum(axis=0) if panel.detect is not None else np.zeros(panel.n_exposures, int)
        panel = impute_below_lod(panel)
        report["steps"].append("impute_below_lod")
    else:
        n_imputed = np.zeros(panel.n_exposures, int)
    if scale:
        panel = scale_by_2sd(panel)
        report["steps"].append("scale_by_2sd")
    qz = quantize(panel)
    report["steps"].append("quantize")

    kept = set(panel.exposure_names)
    chem = []
    j_out = 0
    for j, name in enumerate(names_in):
        entry = {"chemical": name, "detect_fraction": float(frac[j]), "kept": name in kept}
        if name in kept:
            entry.update(
                imputed=int(n_imputed[j_out]),
                scale_divisor=float(panel.scale[j_out]),
                breakpoints=[float(v) for v in qz.breakpoints[j_out]],
            )
            j_out += 1
        chem.append(entry)
    report["min_detect_frac"] = min_detect_frac if detect_filter else None
    report["chemicals"] = chem
    report["n_subjects"] = panel.n_subjects
    report["n_kept"] = panel.n_exposures
    return panel, qz, report
