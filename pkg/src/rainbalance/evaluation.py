"""De-normalized error metrics, extreme-event subsets and improvement percentages."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

EXTREME_THRESHOLD_MM = 8.0


def metrics(y_true, y_pred, norm_stats=(0.0, 1.0)) -> tuple[float, float]:
    """(MSE, MAE) after mapping both vectors back to physical units with (mean, std)."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("metrics need at least one value")
    mean, std = norm_stats
    err = (y_pred * std + mean) - (y_true * std + mean)
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def extreme_subset(y_true, threshold: float = EXTREME_THRESHOLD_MM,
                   resolution_minutes: int = 60) -> np.ndarray:
    """Indices whose hourly accumulation exceeds ``threshold``.

    Sub-hourly series are summed over consecutive clock hours (blocks of
    60 / resolution steps from the first value); every step of a flagged
    hour is returned.  Hourly or coarser series are thresholded directly.
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    y = np.asarray(y_true, dtype=np.float64).reshape(-1)
    per_hour = 60 // resolution_minutes if resolution_minutes < 60 else 1
    if per_hour <= 1:
        return np.flatnonzero(y > threshold)
    n_blocks = -(-y.size // per_hour)
    padded = np.zeros(n_blocks * per_hour)
    padded[:y.size] = y
    hourly = padded.reshape(n_blocks, per_hour).sum(axis=1)
    flagged = np.repeat(hourly > threshold, per_hour)[:y.size]
    return np.flatnonzero(flagged)


def improvement(base: float, ours: float) -> float:
    """Percentage reduction of ``ours`` relative to ``base``."""
    if base == 0:
        raise ZeroDivisionError("improvement is undefined for a zero baseline")
    return (base - ours) / base * 100.0


@dataclass
class ForecastReport:
    mse: float
    mae: float
    horizon_mse: list[float]
    horizon_mae: list[float]
    extreme_mse: float | None
    extreme_mae: float | None
    n_windows: int
    n_extreme: int
    seeds: list[int] = field(default_factory=list)
    imp_mse_pct: float | None = None
    imp_mae_pct: float | None = None
    baseline: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def compare_to(self, base: "ForecastReport", name: str) -> "ForecastReport":
        self.imp_mse_pct = improvement(base.mse, self.mse)
        self.imp_mae_pct = improvement(base.mae, self.mae)
        self.baseline = name
        return self


def forecast_report(y_true: np.ndarray, y_pred: np.ndarray, norm_stats, extreme_mask: np.ndarray,
                    seeds=()) -> ForecastReport:
    """Metrics over (windows, horizon) arrays in normalized units."""
    mse, mae = metrics(y_true, y_pred, norm_stats)
    h_mse, h_mae = zip(*(metrics(y_true[:, j], y_pred[:, j], norm_stats) for j in range(y_true.shape[1])))
    if extreme_mask.any():
        e_mse, e_mae = metrics(y_true[extreme_mask], y_pred[extreme_mask], norm_stats)
    else:
        e_mse = e_mae = None
    return ForecastReport(mse=mse, mae=mae, horizon_mse=list(h_mse), horizon_mae=list(h_mae),
                          extreme_mse=e_mse, extreme_mae=e_mae, n_windows=int(y_true.shape[0]),
                          n_extreme=int(extreme_mask.sum()), seeds=list(seeds))


def average_reports(reports: list[ForecastReport]) -> ForecastReport:
    def avg(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    return ForecastReport(
        mse=avg(r.mse for r in reports), mae=avg(r.mae for r in reports),
        horizon_mse=list(np.mean([r.horizon_mse for r in reports], axis=0)),
        horizon_mae=list(np.mean([r.horizon_mae for r in reports], axis=0)),
        extreme_mse=avg(r.extreme_mse for r in reports), extreme_mae=avg(r.extreme_mae for r in reports),
        n_windows=reports[0].n_windows, n_extreme=reports[0].n_extreme,
        seeds=[s for r in reports for s in r.seeds])
