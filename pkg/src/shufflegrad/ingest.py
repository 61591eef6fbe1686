"""Regression dataset loading and preprocessing for the robust arm.

A dataset is an immutable (features, targets) pair with a provenance
tag.  CSV loading drops named categorical columns, truncates to a row
budget, median-fills missing cells, winsorizes each column, z-scores
it, and perturbs the target with seeded unit Gaussian noise.  The
winsorization bounds are order statistics (percentile interpolation
'lower'/'higher'), which makes the whole preprocessing pipeline
idempotent apart from the noise step; a flag on the dataset guards the
noise so it is applied exactly once.  A seeded synthetic generator
stands in when no file is available, so nothing here touches the
network.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "RegressionDataset",
    "load_csv",
    "synthesize",
    "preprocess",
    "dump_csv",
    "dataset_from_config",
]


@dataclass(frozen=True)
class RegressionDataset:
    """Immutable feature matrix and target vector.

    ``noise_applied`` records whether the target noise step already
    ran.  ``planted_weights`` is the generating weight vector for
    synthetic data, None otherwise.
    """

    features: np.ndarray
    targets: np.ndarray
    provenance: str
    noise_applied: bool = False
    feature_names: tuple[str, ...] | None = None
    planted_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.targets.shape != (self.features.shape[0],):
            raise ValueError("features must be (rows, dim) with matching targets")
        if self.feature_names is not None and len(self.feature_names) != self.features.shape[1]:
            raise ValueError("feature_names length must match the feature count")

    @property
    def row_count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def names(self) -> tuple[str, ...]:
        if self.feature_names is not None:
            return self.feature_names
        return tuple(f"f{i}" for i in range(self.dim))


class DataFormatError(ValueError):
    pass


def _parse_csv(path) -> tuple[list[str], list[list[float]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh]
    line_no = 0
    while line_no < len(lines) and lines[line_no].startswith("#"):
        line_no += 1
    rows = list(csv.reader(lines[line_no:]))
    if not rows:
        raise DataFormatError(f"{path}: no header row")
    header = [h.strip() for h in rows[0]]

    def parses(cell: str) -> bool:
        try:
            float(cell)
            return True
        except ValueError:
            return False

    if header and all(parses(c) for c in header if c != ""):
        raise DataFormatError(f"{path}: first row looks numeric; header row required")
    data = []
    for r, row in enumerate(rows[1:], start=line_no + 2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"{path}: line {r} has {len(row)} cells, header has {len(header)}")
        parsed = []
        for name, cell in zip(header, row):
            cell = cell.strip()
            if cell == "":
                parsed.append(np.nan)
            elif parses(cell):
                parsed.append(float(cell))
            else:
                parsed.append(cell)
        data.append(parsed)
    if not data:
        raise DataFormatError(f"{path}: no data rows")
    return header, data


def load_csv(path, *, target_column: str = "target",
             drop_columns: tuple[str, ...] = ("country", "status"),
             max_rows: int = 2000, noise_seed: int = 0,
             clip_percentiles: tuple[float, float] = (1.0, 99.0),
             normalize: bool = True) -> RegressionDataset:
    """Load and preprocess a regression CSV.

    Comma-separated, UTF-8, header row required, empty cells are
    missing values, leading '#' lines are comments.  Columns named in
    ``drop_columns`` are removed (categorical features); the rest must
    be numeric.  Keeps the first ``max_rows`` rows, then median-fills,
    winsorizes, normalizes, and adds seeded unit noise to the target.
    """
    header, data = _parse_csv(path)
    for col in (target_column, *drop_columns):
        if col not in header:
            raise DataFormatError(f"{path}: missing column {col!r}")
    keep = [i for i, h in enumerate(header) if h not in drop_columns and h != target_column]
    target_idx = header.index(target_column)
    if len(data) > max_rows:
        data = data[:max_rows]
    for r, row in enumerate(data):
        for i in (*keep, target_idx):
            if isinstance(row[i], str):
                raise DataFormatError(
                    f"{path}: line {r + 2}, column {header[i]!r}: "
                    f"cannot parse {row[i]!r} as a number")
    features = np.array([[row[i] for i in keep] for row in data], dtype=float)
    targets = np.array([row[target_idx] for row in data], dtype=float)
    if not np.isfinite(targets[~np.isnan(targets)]).all():
        raise DataFormatError(f"{path}: non-finite target value")
    raw = RegressionDataset(features, targets, provenance=str(path),
                            feature_names=tuple(header[i] for i in keep))
    return preprocess(raw, noise_seed=noise_seed, clip_percentiles=clip_percentiles,
                      normalize=normalize)


def _winsorize_column(col: np.ndarray, lo_pct: float, hi_pct: float) -> np.ndarray:
    # Order-statistic bounds: clipping at values present in the data
    # keeps a second winsorization from moving anything.
    lo = np.percentile(col, lo_pct, method="lower")
    hi = np.percentile(col, hi_pct, method="higher")
    return np.clip(col, lo, hi)


_NOISE_STREAM = (0x1E,)


def preprocess(dataset: RegressionDataset, *, noise_seed: int = 0,
               clip_percentiles: tuple[float, float] = (1.0, 99.0),
               normalize: bool = True) -> RegressionDataset:
    """Median-fill, winsorize, normalize, and noise the target once.

    Missing target values are median-filled as well.  Zero-variance
    columns get a guarded divisor of 1 and normalize to all zero.
    Running preprocess again changes features by at most float noise
    and never re-applies the target noise.
    """
    lo_pct, hi_pct = clip_percentiles
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError(f"bad clip percentiles {clip_percentiles}")
    features = dataset.features.copy()
    targets = dataset.targets.copy()
    for j in range(features.shape[1]):
        col = features[:, j]
        missing = np.isnan(col)
        if missing.all():
            raise DataFormatError(f"column {dataset.names()[j]!r} has no values")
        if missing.any():
            col[missing] = np.median(col[~missing])
        features[:, j] = _winsorize_column(col, lo_pct, hi_pct)
    if np.isnan(targets).any():
        targets[np.isnan(targets)] = np.median(targets[~np.isnan(targets)])
    if normalize:
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std[std == 0.0] = 1.0
        features = (features - mean) / std
    noise_applied = dataset.noise_applied
    if not noise_applied:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=noise_seed, spawn_key=_NOISE_STREAM))
        targets = targets + rng.standard_normal(targets.shape)
        noise_applied = True
    return replace(dataset, features=features, targets=targets,
                   noise_applied=noise_applied)


_SYNTH_STREAM = (0x1D,)


def synthesize(seed: int, rows: int, dim: int = 34) -> RegressionDataset:
    """Seeded linear-model dataset: unit Gaussian features and noise.

    Targets are features @ planted_weights + noise; the planted vector
    is kept on the dataset so fits can be scored against it.  The noise
    flag is set, so preprocessing will not perturb the targets again.
    """
    if rows < 1 or dim < 1:
        raise ValueError(f"need rows >= 1 and dim >= 1, got ({rows}, {dim})")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=_SYNTH_STREAM))
    features = rng.standard_normal((rows, dim))
    weights = rng.standard_normal(dim)
    targets = features @ weights + rng.standard_normal(rows)
    return RegressionDataset(features, targets, provenance=f"synthetic seed {seed}",
                             noise_applied=True, planted_weights=weights)


def dump_csv(dataset: RegressionDataset, path) -> None:
    """Write the dataset with a one-line provenance comment."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# provenance: {dataset.provenance}\n")
        writer = csv.writer(fh)
        writer.writerow([*dataset.names(), "target"])
        for x, y in zip(dataset.features, dataset.targets):
            writer.writerow([f"{v:.17g}" for v in x] + [f"{y:.17g}"])


def dataset_from_config(cfg: dict) -> RegressionDataset:
    """Build a dataset from a config mapping.

    Exactly one of the keys "synthetic" ({seed, rows, dim}) or "csv"
    ({path, target_column, drop_columns, max_rows, noise_seed}) must be
    present; "normalize" (default true) applies to both paths.
    """
    known = {"synthetic", "csv", "normalize"}
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
    normalize = cfg.get("normalize", True)
    if ("synthetic" in cfg) == ("csv" in cfg):
        raise ValueError("dataset config needs exactly one of 'synthetic' or 'csv'")
    if "synthetic" in cfg:
        sub = dict(cfg["synthetic"])
        unknown = set(sub) - {"seed", "rows", "dim"}
        if unknown:
            raise ValueError(f"unknown synthetic dataset keys: {sorted(unknown)}")
        data = synthesize(sub.get("seed", 0), sub.get("rows", 2000), sub.get("dim", 34))
        return preprocess(data, normalize=normalize)
    sub = dict(cfg["csv"])
    unknown = set(sub) - {"path", "target_column", "drop_columns", "max_rows", "noise_seed"}
    if unknown:
        raise ValueError(f"unknown csv dataset keys: {sorted(unknown)}")
    if "path" not in sub:
        raise ValueError("csv dataset config needs a 'path'")
    return load_csv(
        sub["path"],
        target_column=sub.get("target_column", "target"),
        drop_columns=tuple(sub.get("drop_columns", ("country", "status"))),
        max_rows=sub.get("max_rows", 2000),
        noise_seed=sub.get("noise_seed", 0),
        normalize=normalize,
    )
