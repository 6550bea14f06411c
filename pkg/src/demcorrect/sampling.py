"""Turn aligned rasters into tabular training data.

A sample row pairs the eleven predictor values at a cell with the target
elevation error there, plus an optional integer landscape label. Only cells
where every feature and the target are valid are eligible.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .grid import GeometryMismatch, Grid
from .terrain import FeatureStack

__all__ = ["SampleTable", "EmptyTableError", "extract_samples", "split_table"]

#: Stratum value for rows without a landscape label.
NO_STRATUM = -1


class EmptyTableError(ValueError):
    """No valid cells were available for sampling."""


@dataclass(frozen=True, eq=False)
class SampleTable:
    """Rows of (cell, feature vector, target, stratum).

    ``cells`` is (n, 2) int64 of (row, col); ``features`` is (n, k) float64;
    ``targets`` is (n,) float64; ``strata`` is (n,) int64 with -1 where no
    label applies, or None when no strata raster was supplied.
    """

    feature_names: tuple[str, ...]
    cells: np.ndarray
    features: np.ndarray
    targets: np.ndarray
    strata: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "cells", np.asarray(self.cells, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=np.float64).ravel())
        if self.strata is not None:
            object.__setattr__(self, "strata", np.asarray(self.strata, dtype=np.int64).ravel())
        n = len(self.targets)
        if self.features.shape != (n, len(self.feature_names)):
            raise ValueError(
                f"features shape {self.features.shape} does not match "
                f"{n} rows x {len(self.feature_names)} names"
            )
        if self.cells.shape[0] != n or (self.strata is not None and len(self.strata) != n):
            raise ValueError("cells, targets and strata must have the same length")
        if n and not np.isfinite(self.features).all():
            raise ValueError("feature values must all be finite")
        if n and not np.isfinite(self.targets).all():
            raise ValueError("target values must all be finite")

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, indices) -> "SampleTable":
        idx = np.asarray(indices, dtype=np.int64)
        return SampleTable(
            self.feature_names,
            self.cells[idx],
            self.features[idx],
            self.targets[idx],
            None if self.strata is None else self.strata[idx],
        )

    def select_features(self, names) -> "SampleTable":
        """Same rows, restricted to the named feature columns (in that order)."""
        cols = [self.feature_names.index(n) for n in names]
        return SampleTable(tuple(names), self.cells, self.features[:, cols],
                           self.targets, self.strata)

    def to_csv(self) -> str:
        """CSV with header ``row,col,stratum,<feature names...>,target``."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["row", "col", "stratum", *self.feature_names, "target"])
        for i in range(len(self)):
            stratum = "" if self.strata is None or self.strata[i] == NO_STRATUM \
                else str(int(self.strata[i]))
            writer.writerow([
                int(self.cells[i, 0]), int(self.cells[i, 1]), stratum,
                *(repr(float(v)) for v in self.features[i]),
                repr(float(self.targets[i])),
            ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SampleTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header[:3] != ["row", "col", "stratum"] or header[-1] != "target":
            raise ValueError("unexpected sample CSV header")
        names = tuple(header[3:-1])
        cells, feats, targets, strata = [], [], [], []
        any_stratum = False
        for rec in reader:
            if not rec:
                continue
            cells.append((int(rec[0]), int(rec[1])))
            strata.append(int(rec[2]) if rec[2] != "" else NO_STRATUM)
            any_stratum = any_stratum or rec[2] != ""
            feats.append([float(v) for v in rec[3:-1]])
            targets.append(float(rec[-1]))
        return cls(
            names,
            np.array(cells, dtype=np.int64).reshape(-1, 2),
            np.array(feats, dtype=np.float64).reshape(-1, len(names)),
            np.array(targets, dtype=np.float64),
            np.array(strata, dtype=np.int64) if any_stratum else None,
        )


def extract_samples(
    stack: FeatureStack,
    target: Grid,
    strata: Grid | None = None,
    rate: float = 1.0,
    seed: int = 0,
) -> SampleTable:
    """Sample cells where every feature and the target are valid.

    Sampling is uniform without replacement at ``rate`` (rate 1.0 keeps
    every eligible cell), deterministic for a fixed seed. Row order follows
    row-major cell order after selection.

    Raises:
        GeometryMismatch: target or strata not on the stack geometry.
        EmptyTableError: no eligible cells.
    """
    if not (0 < rate <= 1):
        raise ValueError("rate must be in (0, 1]")
    geo = stack.geometry
    if not target.geometry.matches(geo):
        raise GeometryMismatch("target grid is not on the stack geometry")
    if strata is not None and not strata.geometry.matches(geo):
        raise GeometryMismatch("strata grid is not on the stack geometry")

    valid = target.valid_mask()
    for layer in stack.layers:
        valid &= layer.valid_mask()
    flat = np.flatnonzero(valid.ravel())
    if flat.size == 0:
        raise EmptyTableError("no cell has all features and the target valid")

    count = max(1, int(np.floor(rate * flat.size + 0.5)))
    if count < flat.size:
        rng = np.random.default_rng(seed)
        flat = np.sort(rng.choice(flat, size=count, replace=False))

    rows, cols = np.unravel_index(flat, valid.shape)
    features = np.column_stack([layer.values[rows, cols] for layer in stack.layers])
    targets = target.values[rows, cols]

    labels = None
    if strata is not None:
        raw = strata.values[rows, cols]
        ok = raw != strata.nodata
        rounded = np.rint(raw)
        if np.any(ok & (np.abs(raw - rounded) > 1e-9)):
            raise ValueError("strata grid must hold integer labels")
        labels = np.where(ok, rounded, NO_STRATUM).astype(np.int64)

    return SampleTable(stack.names, np.column_stack([rows, cols]), features, targets, labels)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_table(
    table: SampleTable,
    train_fraction: float = 0.8,
    seed: int = 42,
    stratified: bool = False,
) -> tuple[SampleTable, SampleTable]:
    """Disjoint, exhaustive train/test partition.

    Unstratified, the train side holds round(n * train_fraction) rows.
    Stratified, per-stratum counts are assigned by largest remainder so
    each stratum stays within one row of its proportional share; strata
    with fewer than two rows go wholly to train with a warning.
    """
    if not (0 < train_fraction < 1):
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(table)
    if n == 0:
        raise EmptyTableError("cannot split an empty table")
    rng = np.random.default_rng(seed)

    if not stratified or table.strata is None:
        if stratified and table.strata is None:
            warnings.warn("stratified split requested but table carries no strata; "
                          "falling back to a plain split")
        order = rng.permutation(n)
        n_train = _round_half_up(n * train_fraction)
        train_idx = np.sort(order[:n_train])
        test_idx = np.sort(order[n_train:])
        return table.subset(train_idx), table.subset(test_idx)

    labels = np.unique(table.strata)
    groups = {int(lab): np.flatnonzero(table.strata == lab) for lab in labels}
    eligible = [lab for lab, idx in groups.items() if len(idx) >= 2]
    forced = [lab for lab, idx in groups.items() if len(idx) < 2]
    for lab in forced:
        warnings.warn(f"stratum {lab} has fewer than 2 rows; assigning it to the train side")

    n_eligible = sum(len(groups[lab]) for lab in eligible)
    target_total = _round_half_up(n_eligible * train_fraction)
    ideals = {lab: len(groups[lab]) * train_fraction for lab in eligible}
    counts = {lab: int(np.floor(ideals[lab])) for lab in eligible}
    leftover = target_total - sum(counts.values())
    by_remainder = sorted(eligible, key=lambda lab: (-(ideals[lab] - counts[lab]), lab))
    for lab in by_remainder[:max(leftover, 0)]:
        counts[lab] += 1

    train_parts, test_parts = [], []
    for lab in sorted(groups):
        idx = groups[lab]
        if lab in forced:
            train_parts.append(idx)
            continue
        order = rng.permutation(len(idx))
        k = min(counts[lab], len(idx))
        train_parts.append(idx[order[:k]])
        test_parts.append(idx[order[k:]])

    train_idx = np.sort(np.concatenate(train_parts)) if train_parts else np.array([], dtype=np.int64)
    test_idx = np.sort(np.concatenate(test_parts)) if test_parts else np.array([], dtype=np.int64)
    return table.subset(train_idx), table.subset(test_idx)
