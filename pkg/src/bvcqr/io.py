"""CSV/JSON readers and writers for panels, draws and configuration.

Panel CSV (long format, one row per visit)::

    subject_id, age, y, x_1..x_p, <exposure columns>

Columns named ``x_*`` are covariates; every other column beyond the first
three is an exposure. Covariates and exposures must be constant within a
subject. An empty exposure cell means "below the limit of detection"; the
value is then taken from the companion LOD CSV (``chemical, lod``) during
imputation. Rows with an empty ``y`` are dropped (unbalanced panels are
allowed).

Draws CSV: ``chain, iter, energy, divergent`` followed by the constrained
parameters in manifest order, one row per retained draw.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .preprocess import ExposurePanel
from .sampler import PosteriorDraws

REQUIRED_COLUMNS = ("subject_id", "age", "y")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


# --------------------------------------------------------------------------- panels


def read_lod_csv(path: str | Path) -> dict[str, float]:
    try:
        df = pd.read_csv(path, dtype={"chemical": str}, float_precision="round_trip")
    except FileNotFoundError:
        raise DataError(f"LOD file not found: {path}") from None
    missing = {"chemical", "lod"} - set(df.columns)
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
    return dict(zip(df["chemical"], pd.to_numeric(df["lod"], errors="coerce").astype(float)))


def read_panel_csv(path: str | Path, lod_path: str | Path | None = None) -> ExposurePanel:
    """Parse a long-format panel CSV (and optional LOD CSV) into a panel."""
    try:
        df = pd.read_csv(path, dtype={"subject_id": str}, keep_default_na=True, float_precision="round_trip")
    except FileNotFoundError:
        raise DataError(f"panel file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing required column(s) {', '.join(missing)}")
    cov_cols = [c for c in df.columns if c.startswith("x_")]
    exp_cols = [c for c in df.columns if c not in REQUIRED_COLUMNS and c not in cov_cols]
    if not exp_cols:
        raise DataError(f"{path}: no exposure columns")
    for col in ["age", "y", *cov_cols, *exp_cols]:
        conv = pd.to_numeric(df[col], errors="coerce")
        bad = conv.isna() & df[col].notna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise DataError(f"{path}: column {col!r} has a non-numeric value on line {row}")
        df[col] = conv
    if df["subject_id"].isna().any():
        raise DataError(f"{path}: column 'subject_id' has empty cells")
    if df["age"].isna().any():
        raise DataError(f"{path}: column 'age' has empty cells")
    if df[cov_cols].isna().any().any():
        col = next(c for c in cov_cols if df[c].isna().any())
        raise DataError(f"{path}: covariate column {col!r} has empty cells")

    ids = list(dict.fromkeys(df["subject_id"]))
    first = df.groupby("subject_id", sort=False).first()
    for col in [*cov_cols, *exp_cols]:
        n_unique = df.groupby("subject_id", sort=False)[col].nunique(dropna=False)
        if (n_unique > 1).any():
            sid = n_unique.index[(n_unique > 1).to_numpy()][0]
            raise DataError(f"{path}: column {col!r} varies within subject {sid}")
    Z = first.loc[ids, exp_cols].to_numpy(dtype=float)
    detect = ~np.isnan(Z)
    lod = None
    if lod_path is not None:
        table = read_lod_csv(lod_path)
        lod = np.array([table.get(c, np.nan) for c in exp_cols], dtype=float)
    elif not detect.all():
        lod = np.full(len(exp_cols), np.nan)

    obs = df[df["y"].notna()].copy()
    index = {s: i for i, s in enumerate(ids)}
    obs["_i"] = obs["subject_id"].map(index)
    obs = obs.sort_values(["_i", "age"], kind="stable")
    return ExposurePanel(
        subject_ids=np.array(ids),
        covariates=first.loc[ids, cov_cols].to_numpy(dtype=float).reshape(len(ids), len(cov_cols)),
        exposures=Z,
        obs_subject=obs["_i"].to_numpy(dtype=np.int64),
        ages=obs["age"].to_numpy(dtype=float),
        y=obs["y"].to_numpy(dtype=float),
        exposure_names=tuple(exp_cols),
        covariate_names=tuple(cov_cols),
        lod=lod,
        detect=detect,
    )


def write_panel_csv(panel: ExposurePanel, path: str | Path, lod_path: str | Path | None = None) -> None:
    """Write ``panel`` in the long format read by :func:`read_panel_csv`."""
    i = panel.obs_subject
    cols = {
        "subject_id": np.asarray(panel.subject_ids)[i],
        "age": panel.ages,
        "y": panel.y,
    }
    for j, name in enumerate(panel.covariate_names):
        cols[name] = panel.covariates[i, j]
    Z = panel.exposures.copy()
    if panel.detect is not None:
        Z[~panel.detect] = np.nan
    for j, name in enumerate(panel.exposure_names):
        cols[name] = Z[i, j]
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")
    if lod_path is not None and panel.lod is not None:
        pd.DataFrame({"chemical": panel.exposure_names, "lod": panel.lod}).to_csv(
            lod_path, index=False, float_format="%.17g"
        )


# --------------------------------------------------------------------------- draws


def write_draws(draws: PosteriorDraws, csv_path: str | Path, manifest_path: str | Path, extra: dict | None = None):
    n_draws, n_chains, dim = draws.draws.shape
    chain = np.repeat(np.arange(n_chains), n_draws)
    it = np.tile(np.arange(n_draws), n_chains)
    data = {
        "chain": chain,
        "iter": it,
        "energy": draws.energy.T.ravel(),
        "divergent": draws.divergent.T.ravel().astype(int),
    }
    body = pd.DataFrame(draws.pooled(), columns=draws.names)
    df = pd.concat([pd.DataFrame(data), body], axis=1)
    df.to_csv(csv_path, index=False, float_format="%.17g")
    manifest = {
        "columns": ["chain", "iter", "energy", "divergent"],
        "parameters": list(draws.names),
        "n_draws": n_draws,
        "n_chains": n_chains,
        "sampler": draws.config,
        "seed": draws.config.get("seed"),
        "step_size": [float(draws.step_size[-1, c]) for c in range(n_chains)] if n_draws else [],
    }
    if extra:
        manifest.update(extra)
    write_json(manifest_path, manifest)


def read_draws(csv_path: str | Path, manifest_path: str | Path | None = None) -> PosteriorDraws:
    """Rebuild :class:`PosteriorDraws` from a draws CSV (tree stats are not stored)."""
    try:
        df = pd.read_csv(csv_path, float_precision="round_trip")
    except FileNotFoundError:
        raise DataError(f"draws file not found: {csv_path}") from None
    meta = read_json(manifest_path) if manifest_path is not None else {}
    fixed = ["chain", "iter", "energy", "divergent"]
    missing = [c for c in fixed if c not in df.columns]
    if missing:
        raise DataError(f"{csv_path}: missing column(s) {', '.join(missing)}")
    names = meta.get("parameters") or [c for c in df.columns if c not in fixed]
    chains = np.unique(df["chain"].to_numpy())
    n_chains = len(chains)
    counts = df.groupby("chain").size()
    if counts.nunique() != 1:
        raise DataError(f"{csv_path}: chains have unequal draw counts")
    n_draws = int(counts.iloc[0])
    df = df.sort_values(["chain", "iter"], kind="stable")

    def grid(values):
        return values.reshape(n_chains, n_draws, *values.shape[1:]).swapaxes(0, 1)

    vals = df[names].to_numpy(dtype=float)
    sampler = meta.get("sampler", {})
    return PosteriorDraws(
        draws=np.ascontiguousarray(grid(vals)),
        names=list(names),
        energy=grid(df["energy"].to_numpy(dtype=float)),
        tree_depth=np.zeros((n_draws, n_chains), dtype=int),
        divergent=grid(df["divergent"].to_numpy().astype(bool)),
        step_size=np.zeros((n_draws, n_chains)),
        n_leapfrog=np.zeros((n_draws, n_chains), dtype=int),
        accept_stat=np.zeros((n_draws, n_chains)),
        config=sampler,
    )
