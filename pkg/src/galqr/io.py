"""Ingestion, activity-style preprocessing, posterior summaries, writers.

Input data arrive as two CSVs: a long-format functional file with columns
(subject_id, replicate_id, time, value) plus an optional ``invalid`` mask
column, and a wide scalar file with columns (subject_id, y, z_1..z_p). All
subjects must share one time grid and one replicate count; incomplete
subjects are an error, not a silent drop, since imputation is out of scope.
"""
from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .basis import BasisSystem, CoefCurve, eval_beta
from .data import FunctionalDataset
from .sampler import PosteriorDraws, waic

__all__ = [
    "IngestError",
    "PreprocessReport",
    "ingest_long_csv",
    "export_long_csv",
    "preprocess_activity",
    "downsample",
    "summarize",
    "write_table",
    "version_string",
]


class IngestError(ValueError):
    """Input validation failure; maps to CLI exit code 2."""


def version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        sha = subprocess.run(
            ["git", "-C", str(here), "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"galqr {__version__}" + (f" ({sha})" if sha else "")


def ingest_long_csv(path_functional, path_scalar) -> FunctionalDataset:
    """Read and cross-validate the functional and scalar CSVs."""
    fdf = pd.read_csv(path_functional)
    sdf = pd.read_csv(path_scalar)
    need = {"subject_id", "replicate_id", "time", "value"}
    if not need.issubset(fdf.columns):
        raise IngestError(
            f"functional file must have columns {sorted(need)}, "
            f"got {list(fdf.columns)}")
    if "subject_id" not in sdf.columns or "y" not in sdf.columns:
        raise IngestError("scalar file must have columns subject_id, y, z_1..")
    zcols = sorted([c for c in sdf.columns if c.startswith("z_")],
                   key=lambda c: int(c.split("_")[1]))
    if sdf["subject_id"].duplicated().any():
        dupes = sdf.loc[sdf["subject_id"].duplicated(), "subject_id"].tolist()
        raise IngestError(f"duplicate subjects in scalar file: {dupes[:10]}")

    dup = fdf.duplicated(["subject_id", "replicate_id", "time"])
    if dup.any():
        rows = fdf.loc[dup, ["subject_id", "replicate_id", "time"]]
        raise IngestError(
            "duplicate (subject, replicate, time) rows, e.g. "
            f"{rows.iloc[0].tolist()}")

    f_subj = set(fdf["subject_id"])
    s_subj = set(sdf["subject_id"])
    if f_subj != s_subj:
        raise IngestError(
            f"subject mismatch between files: only-functional="
            f"{sorted(f_subj - s_subj)[:10]}, only-scalar="
            f"{sorted(s_subj - f_subj)[:10]}")

    grid = np.array(sorted(fdf["time"].unique()), dtype=float)
    reps = sorted(fdf["replicate_id"].unique())
    subjects = sorted(f_subj)
    expected = grid.size * len(reps)

    has_mask = "invalid" in fdf.columns
    n, J, T = len(subjects), len(reps), grid.size
    W = np.empty((n, J, T))
    mask = np.zeros((n, J, T), dtype=bool) if has_mask else None
    sub_index = {s: i for i, s in enumerate(subjects)}
    rep_index = {r: j for j, r in enumerate(reps)}
    time_index = {t: k for k, t in enumerate(grid)}

    offenders = []
    for sid, g in fdf.groupby("subject_id", sort=True):
        if len(g) != expected:
            present = {(r, t) for r, t in zip(g["replicate_id"], g["time"])}
            missing = [(r, t) for r in reps for t in grid
                       if (r, t) not in present]
            offenders.append((sid, missing[:5], expected - len(g)))
            continue
        i = sub_index[sid]
        jj = g["replicate_id"].map(rep_index).to_numpy()
        kk = g["time"].map(time_index).to_numpy()
        W[i, jj, kk] = g["value"].to_numpy(dtype=float)
        if has_mask:
            mask[i, jj, kk] = g["invalid"].to_numpy().astype(bool)
    if offenders:
        lines = ", ".join(
            f"subject {sid}: {miss} missing cells, first replicates/times "
            f"{cells}" for sid, cells, miss in offenders[:10])
        raise IngestError(f"incomplete or ragged subjects: {lines}")

    sdf = sdf.set_index("subject_id").loc[subjects]
    Z = sdf[zcols].to_numpy(dtype=float) if zcols else np.zeros((n, 0))
    Y = sdf["y"].to_numpy(dtype=float)
    return FunctionalDataset(grid=grid, W=W, Z=Z, Y=Y, mask=mask,
                             subject_ids=list(subjects))


def export_long_csv(data: FunctionalDataset, path_functional, path_scalar):
    """Write a dataset back to the two-CSV disk format (round-trip safe)."""
    ids = data.subject_ids or list(range(data.n))
    n, J, T = data.W.shape
    rows = {
        "subject_id": np.repeat(ids, J * T),
        "replicate_id": np.tile(np.repeat(np.arange(J), T), n),
        "time": np.tile(data.grid, n * J),
        "value": data.W.ravel(),
    }
    if data.mask is not None:
        rows["invalid"] = data.mask.ravel().astype(int)
    pd.DataFrame(rows).to_csv(path_functional, index=False)
    scal = {"subject_id": ids, "y": data.Y}
    for j in range(data.p):
        scal[f"z_{j + 1}"] = data.Z[:, j]
    pd.DataFrame(scal).to_csv(path_scalar, index=False)


@dataclass
class PreprocessReport:
    """What the winsorize / valid-day filter did."""

    cap: float
    n_capped: int
    dropped_days: int
    dropped_subjects: list
    day_histogram: dict          # surviving-day count -> number of subjects
    J_common: int


def preprocess_activity(data: FunctionalDataset, winsorize_pct: float = 0.999,
                        min_valid_days: int = 3,
                        max_invalid_minutes: int = 144):
    """Winsorize at a global upper quantile and apply the valid-day rule.

    A replicate day survives when it has at most ``max_invalid_minutes``
    invalid grid cells (all days are valid when no mask is present); a
    subject survives with at least ``min_valid_days`` surviving days. Kept
    subjects are truncated to the common surviving-day count so the output
    stays rectangular. Values at invalid minutes inside kept days are left
    as-is (imputation is out of scope).
    """
    mask = data.mask if data.mask is not None \
        else np.zeros(data.W.shape, dtype=bool)
    valid_values = data.W[~mask]
    if valid_values.size == 0:
        raise IngestError("no valid values available for winsorization")
    cap = float(np.quantile(valid_values, winsorize_pct))
    W = np.minimum(data.W, cap)
    n_capped = int(np.sum(data.W > cap))

    invalid_per_day = mask.sum(axis=2)                   # n x J
    day_ok = invalid_per_day <= max_invalid_minutes
    days_per_subject = day_ok.sum(axis=1)
    keep = days_per_subject >= min_valid_days
    hist = {int(k): int(v) for k, v in
            zip(*np.unique(days_per_subject, return_counts=True))}
    ids = data.subject_ids or list(range(data.n))
    dropped_subjects = [
        (ids[i], int(days_per_subject[i])) for i in np.where(~keep)[0]]
    if not keep.any():
        raise IngestError(
            "preprocessing dropped every subject; surviving-day histogram: "
            f"{hist}")

    J_common = int(days_per_subject[keep].min())
    kept_idx = np.where(keep)[0]
    newW = np.empty((kept_idx.size, J_common, data.T))
    newmask = np.empty((kept_idx.size, J_common, data.T), dtype=bool)
    for out_i, i in enumerate(kept_idx):
        days = np.where(day_ok[i])[0][:J_common]
        newW[out_i] = W[i, days]
        newmask[out_i] = mask[i, days]
    dropped_days = int(data.n * data.J - (~keep).sum() * data.J
                       - kept_idx.size * J_common)

    out = FunctionalDataset(
        grid=data.grid, W=newW, Z=data.Z[kept_idx], Y=data.Y[kept_idx],
        mask=newmask if data.mask is not None else None,
        subject_ids=[ids[i] for i in kept_idx],
    )
    report = PreprocessReport(
        cap=cap, n_capped=n_capped, dropped_days=dropped_days,
        dropped_subjects=dropped_subjects, day_histogram=hist,
        J_common=J_common)
    return out, report


def downsample(data: FunctionalDataset, stride: int) -> FunctionalDataset:
    """Keep every ``stride``-th grid point (applied after preprocessing)."""
    if stride < 1:
        raise IngestError("downsample stride must be >= 1")
    sl = slice(None, None, stride)
    return FunctionalDataset(
        grid=data.grid[sl], W=data.W[:, :, sl], Z=data.Z, Y=data.Y,
        X_true=None if data.X_true is None else data.X_true[:, sl],
        mask=None if data.mask is None else data.mask[:, :, sl],
        subject_ids=data.subject_ids,
    )


def summarize(draws: PosteriorDraws, basis: BasisSystem, eval_grid=None,
              level: float = 0.95, z_names=None):
    """Posterior summary tables from one fit.

    Returns (scalar_df, band_df, waic_value): the scalar table carries the
    posterior mean and equal-tailed interval per coefficient; the band table
    carries the pointwise mean and interval of beta(t) on the grid.
    """
    if draws.n_draws < 100:
        raise ValueError(
            f"need at least 100 retained draws, have {draws.n_draws}")
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    p = draws.beta_z.shape[1]
    names = ["intercept"] + list(z_names or [f"z_{j + 1}" for j in range(p)])
    coefs = np.column_stack([draws.beta0, draws.beta_z])
    scalar_df = pd.DataFrame({
        "coef": names,
        "mean": coefs.mean(axis=0),
        "lo": np.quantile(coefs, lo_q, axis=0),
        "hi": np.quantile(coefs, hi_q, axis=0),
    })
    grid = basis.grid if eval_grid is None else np.asarray(eval_grid, float)
    curves = np.stack([
        eval_beta(CoefCurve(phi, basis), grid) for phi in draws.phi])
    band_df = pd.DataFrame({
        "t": grid,
        "mean": curves.mean(axis=0),
        "lo": np.quantile(curves, lo_q, axis=0),
        "hi": np.quantile(curves, hi_q, axis=0),
    })
    return scalar_df, band_df, waic(draws)


def write_table(df: pd.DataFrame, path, config: dict):
    """CSV with an embedded header comment: version plus the resolved config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"# {version_string()}\n")
        fh.write(f"# config: {json.dumps(config, sort_keys=True, default=str)}\n")
        df.to_csv(fh, index=False)


def read_table(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")
