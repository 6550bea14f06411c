"""Apply predicted-error corrections and score them per landscape stratum.

Errors are defined as (DEM - reference), so a positive predicted error
means the DEM sits too high and the correction subtracts it:
corrected = original - predicted_error. Accuracy is summarized as mean
error, MAE, RMSE, and error standard deviation, before and after
correction, overall and per stratum, with the headline number being the
percent reduction in RMSE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .grid import GeometryMismatch, Grid
from .terrain import FeatureStack

__all__ = [
    "Metrics",
    "StratumResult",
    "EvaluationReport",
    "predict_error_grid",
    "apply_correction",
    "abs_error_grid",
    "compute_metrics",
    "pct_rmse_reduction",
    "build_report",
]


@dataclass(frozen=True)
class Metrics:
    """Standard error statistics; std uses the n-1 denominator."""

    n: int
    me: float
    mae: float
    rmse: float
    std: float

    def to_doc(self) -> dict:
        return {"n": self.n, "me": self.me, "mae": self.mae,
                "rmse": self.rmse, "std": self.std}


def compute_metrics(errors) -> Metrics:
    """Summarize an error sample with exact (fsum) accumulation.

    Summation runs in the order given, so results are bit-reproducible for
    a fixed input ordering.
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    n = len(e)
    if n == 0:
        raise ValueError("cannot compute metrics of an empty error sample")
    me = math.fsum(e) / n
    mae = math.fsum(np.abs(e)) / n
    rmse = math.sqrt(math.fsum(e * e) / n)
    var = math.fsum((e - me) ** 2) / (n - 1) if n > 1 else 0.0
    return Metrics(n, me, mae, rmse, math.sqrt(var))


def pct_rmse_reduction(before: float, after: float) -> float:
    """100 * (before - after) / before; negative when accuracy worsened."""
    if not (before > 0):
        raise ValueError("before-RMSE must be positive to compute a reduction")
    return 100.0 * (before - after) / before


def predict_error_grid(model, stack: FeatureStack) -> Grid:
    """Per-cell predicted elevation error from any model with predict_rows.

    Cells where any feature the model uses is nodata become nodata.

    Raises:
        KeyError: the stack lacks a feature layer the model names.
    """
    layers = [stack.layer(name) for name in model.feature_names]
    ref = stack.layers[0]
    valid = np.ones((ref.nrows, ref.ncols), dtype=bool)
    for layer in layers:
        valid &= layer.valid_mask()
    rows, cols = np.nonzero(valid)
    out = np.full(valid.shape, ref.nodata)
    if len(rows):
        X = np.column_stack([layer.values[rows, cols] for layer in layers])
        out[rows, cols] = model.predict_rows(X)
    return ref.with_values(out)


def apply_correction(dem: Grid, predicted_error: Grid) -> Grid:
    """corrected = dem - predicted error, nodata propagating."""
    if not dem.geometry.matches(predicted_error.geometry):
        raise GeometryMismatch("prediction grid is not on the DEM geometry")
    both = dem.valid_mask() & predicted_error.valid_mask()
    out = np.where(both, dem.values - predicted_error.values, dem.nodata)
    return dem.with_values(out)


def abs_error_grid(corrected: Grid, reference: Grid) -> Grid:
    """Per-cell |corrected - reference|, nodata propagating."""
    if not corrected.geometry.matches(reference.geometry):
        raise GeometryMismatch("reference grid is not on the corrected geometry")
    both = corrected.valid_mask() & reference.valid_mask()
    out = np.where(both, np.abs(corrected.values - reference.values), corrected.nodata)
    return corrected.with_values(out)


@dataclass(frozen=True)
class StratumResult:
    """Before/after metrics and percent RMSE reduction for one stratum."""

    before: Metrics
    after: dict[str, Metrics]
    reduction: dict[str, float | None]

    def to_doc(self) -> dict:
        return {
            "before": self.before.to_doc(),
            "after": {m: v.to_doc() for m, v in self.after.items()},
            "pct_rmse_reduction": dict(self.reduction),
        }


@dataclass(frozen=True)
class EvaluationReport:
    """Stratified before/after accuracy of one or more corrections."""

    model_names: tuple[str, ...]
    overall: StratumResult
    strata: dict[str, StratumResult]
    warnings: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "format": "evaluation-report",
            "version": 1,
            "model_names": list(self.model_names),
            "overall": self.overall.to_doc(),
            "strata": {name: res.to_doc() for name, res in self.strata.items()},
            "warnings": list(self.warnings),
            "provenance": dict(self.provenance),
        }

    def render_text(self) -> str:
        """Aligned table: one stratum per row, one model column each."""
        title = "Percent RMSE reduction after correction"
        rows = list(self.strata.items()) + [("overall", self.overall)]
        name_width = max(len("stratum"), *(len(n) for n, _ in rows))
        col_width = max(14, *(len(m) for m in self.model_names)) if self.model_names else 14

        def fmt(v: float | None) -> str:
            return "n/a" if v is None else f"{v:.1f}"

        lines = [title, ""]
        header = "stratum".ljust(name_width)
        for m in self.model_names:
            header += "  " + m.rjust(col_width)
        lines.append(header)
        for name, res in rows:
            line = name.ljust(name_width)
            for m in self.model_names:
                line += "  " + fmt(res.reduction.get(m)).rjust(col_width)
            lines.append(line)
        return "\n".join(lines) + "\n"


def _stratum_result(errs_before: np.ndarray, errs_after: dict[str, np.ndarray],
                    warnings: list[str], label: str) -> StratumResult:
    before = compute_metrics(errs_before)
    after = {m: compute_metrics(e) for m, e in errs_after.items()}
    reduction: dict[str, float | None] = {}
    for m, metrics in after.items():
        if before.rmse > 0:
            reduction[m] = pct_rmse_reduction(before.rmse, metrics.rmse)
        else:
            reduction[m] = None
            warnings.append(f"{label}: before-RMSE is zero; reduction undefined for '{m}'")
    return StratumResult(before, after, reduction)


def build_report(
    reference: Grid,
    original: Grid,
    corrected_by_model: Mapping[str, Grid],
    strata: Grid | None = None,
    stratum_names: Mapping[int, str] | None = None,
    model_digests: Mapping[str, str] | None = None,
) -> EvaluationReport:
    """Score each corrected grid against the reference, per stratum.

    Metrics run over the cells valid in the reference, the original, and
    every corrected grid simultaneously, enumerated row-major. Cells whose
    stratum label is nodata count toward "overall" only. Strata with no
    valid cells are omitted with a warning.
    """
    geo = reference.geometry
    if not original.geometry.matches(geo):
        raise GeometryMismatch("original grid is not on the reference geometry")
    if strata is not None and not strata.geometry.matches(geo):
        raise GeometryMismatch("strata grid is not on the reference geometry")
    models = sorted(corrected_by_model)
    if not models:
        raise ValueError("at least one corrected grid is required")

    valid = reference.valid_mask() & original.valid_mask()
    for m in models:
        g = corrected_by_model[m]
        if not g.geometry.matches(geo):
            raise GeometryMismatch(f"corrected grid '{m}' is not on the reference geometry")
        valid &= g.valid_mask()
    if not valid.any():
        raise ValueError("no cell is valid in every grid")

    before_all = (original.values - reference.values)[valid]
    after_all = {m: (corrected_by_model[m].values - reference.values)[valid] for m in models}

    warnings: list[str] = []
    overall = _stratum_result(before_all, after_all, warnings, "overall")

    strata_results: dict[str, StratumResult] = {}
    if strata is not None:
        labels_grid = strata.values
        label_valid = valid & (labels_grid != strata.nodata)
        present = np.unique(labels_grid[label_valid]).astype(np.int64)
        declared = sorted(stratum_names) if stratum_names else []
        for lab in sorted(set(declared) | set(int(v) for v in present)):
            name = stratum_names.get(lab, str(lab)) if stratum_names else str(lab)
            mask = label_valid & (labels_grid == lab)
            if not mask.any():
                warnings.append(f"stratum '{name}' omitted: no valid cells")
                continue
            before = (original.values - reference.values)[mask]
            after = {m: (corrected_by_model[m].values - reference.values)[mask]
                     for m in models}
            strata_results[name] = _stratum_result(before, after, warnings, name)

    provenance = {"model_digests": dict(model_digests)} if model_digests else {}
    return EvaluationReport(tuple(models), overall, strata_results,
                            tuple(warnings), provenance)
