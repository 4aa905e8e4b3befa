"""Stacked outcome vector and design matrices for the varying-coefficient model.

Observations are stacked subject by subject. ``W`` maps the mixture-effect
vector ``h = (h1_1..h1_n, h2_1..h2_n)`` to observations and ``U`` maps the
random effects ``b = (b1_1, b2_1, ..., b1_n, b2_n)``. Both have two nonzeros
per row, so the model evaluates them through index arrays; sparse matrices
are built on demand for audit and tests.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .preprocess import ExposurePanel, QuantizedExposures


@dataclass(frozen=True)
class QuantizedDesign:
    Y: np.ndarray
    X: np.ndarray
    q: np.ndarray
    subject: np.ndarray
    ages: np.ndarray
    visit: np.ndarray
    n_subjects: int
    baseline_age: float
    age_scale: float
    x_names: tuple[str, ...]
    exposure_names: tuple[str, ...]
    subject_ids: tuple[str, ...] = ()

    @property
    def n_obs(self) -> int:
        return len(self.Y)

    @property
    def n_fixed(self) -> int:
        return self.X.shape[1]

    @property
    def n_exposures(self) -> int:
        return self.q.shape[1]

    @property
    def W(self) -> sp.csr_matrix:
        n, N = self.n_subjects, self.n_obs
        rows = np.concatenate([np.arange(N), np.arange(N)])
        cols = np.concatenate([self.subject, n + self.subject])
        vals = np.concatenate([np.ones(N), self.ages])
        return sp.csr_matrix((vals, (rows, cols)), shape=(N, 2 * n))

    @property
    def U(self) -> sp.csr_matrix:
        n, N = self.n_subjects, self.n_obs
        rows = np.concatenate([np.arange(N), np.arange(N)])
        cols = np.concatenate([2 * self.subject, 2 * self.subject + 1])
        vals = np.concatenate([np.ones(N), self.ages])
        return sp.csr_matrix((vals, (rows, cols)), shape=(N, 2 * n))

    def W_dot(self, h: np.ndarray) -> np.ndarray:
        n = self.n_subjects
        return h[:n][self.subject] + h[n:][self.subject] * self.ages

    def U_dot(self, b: np.ndarray) -> np.ndarray:
        b = b.reshape(-1, 2)
        return b[self.subject, 0] + b[self.subject, 1] * self.ages

    def W_T_dot(self, r: np.ndarray) -> np.ndarray:
        n = self.n_subjects
        return np.concatenate(
            [np.bincount(self.subject, r, n), np.bincount(self.subject, r * self.ages, n)]
        )

    def U_T_dot(self, r: np.ndarray) -> np.ndarray:
        n = self.n_subjects
        out = np.empty((n, 2))
        out[:, 0] = np.bincount(self.subject, r, n)
        out[:, 1] = np.bincount(self.subject, r * self.ages, n)
        return out.ravel()

    def write_triplets(self, path: str | Path) -> None:
        """Dump X, W, U as (matrix,row,col,value) triplets, zero-based."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["matrix", "row", "col", "value"])
            Xc = sp.coo_matrix(self.X)
            for name, m in (("X", Xc), ("W", self.W.tocoo()), ("U", self.U.tocoo())):
                for r, c, v in zip(m.row, m.col, m.data):
                    w.writerow([name, int(r), int(c), repr(float(v))])
            for r, v in enumerate(self.Y):
                w.writerow(["Y", r, 0, repr(float(v))])


def build_design(
    panel: ExposurePanel,
    q: QuantizedExposures,
    baseline_age: float = 24.0,
    age_scale: float = 12.0,
) -> QuantizedDesign:
    """Stack the panel into one regression problem.

    Ages enter as ``(age - baseline_age) / age_scale`` so that ``h1`` is the
    mixture effect at the baseline age. ``X`` holds an intercept, the scaled
    age and the subject covariates, in that order.
    """
    n = panel.n_subjects
    if q.q.shape[0] != n:
        raise DataError(f"quantized exposures have {q.q.shape[0]} rows, panel has {n} subjects")
    if q.names and tuple(q.names) != tuple(panel.exposure_names):
        raise DataError("quantized exposures and panel disagree on the chemical set")
    if age_scale <= 0:
        raise DataError("age_scale must be positive")
    counts = np.bincount(panel.obs_subject, minlength=n)
    if np.any(counts == 0):
        raise DataError("every subject needs at least one observation")

    order = np.lexsort((panel.ages, panel.obs_subject))
    subject = np.asarray(panel.obs_subject)[order].astype(np.int64)
    ages = (np.asarray(panel.ages, dtype=float)[order] - baseline_age) / age_scale
    Y = np.asarray(panel.y, dtype=float)[order]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    visit = np.arange(len(subject)) - starts[subject]

    X = np.column_stack([np.ones(len(Y)), ages, panel.covariates[subject]])
    x_names = ("intercept", "age") + tuple(panel.covariate_names)
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        warnings.warn(f"fixed-effect design is rank deficient ({rank} < {X.shape[1]})", stacklevel=2)

    return QuantizedDesign(
        Y=Y,
        X=X,
        q=np.asarray(q.q, dtype=float),
        subject=subject,
        ages=ages,
        visit=visit,
        n_subjects=n,
        baseline_age=float(baseline_age),
        age_scale=float(age_scale),
        x_names=x_names,
        exposure_names=tuple(panel.exposure_names),
        subject_ids=tuple(str(s) for s in panel.subject_ids),
    )


def mixture_mean(q: np.ndarray, theta1: np.ndarray, theta2: np.ndarray) -> np.ndarray:
    """Prior mean of ``h``: ``(q @ theta1, q @ theta2)`` stacked.

    ``q`` may be a raw index matrix or a :class:`QuantizedExposures`.
    """
    q = np.asarray(getattr(q, "q", q), dtype=float)
    return np.concatenate([q @ theta1, q @ theta2])
