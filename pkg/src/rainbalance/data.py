"""Station series ingestion with windowing, plus a synthetic zero-inflated generator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
from scipy import stats

from .config import SynthConfig
from .rng import stream

FEATURES = ("t2m", "sp", "rh", "wind_speed", "PWV")
TARGET = "tp"
CHANNELS = FEATURES + (TARGET,)
HEADER = ("timestamp",) + CHANNELS
TARGET_INDEX = len(FEATURES)


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


@dataclass
class StationSeries:
    """Equally spaced observations; ``segment`` changes value across gaps too long to fill."""

    timestamps: np.ndarray
    values: np.ndarray
    resolution_minutes: int
    segment: np.ndarray = None
    interpolated: np.ndarray = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.timestamps)
        if self.values.shape != (n, len(CHANNELS)):
            raise DataError(f"values shape {self.values.shape} does not match {n} rows x {len(CHANNELS)} channels")
        if self.segment is None:
            self.segment = np.zeros(n, dtype=np.int64)
        if self.interpolated is None:
            self.interpolated = np.zeros(n, dtype=bool)
        if np.any(self.tp < 0):
            raise DataError(f"negative precipitation at row {int(np.argmax(self.tp < 0))}")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def tp(self) -> np.ndarray:
        return self.values[:, TARGET_INDEX]


# ---------------------------------------------------------------- CSV

def _parse_time(text: str) -> datetime:
    return datetime.fromisoformat(text.strip())


def load_csv(path, schema: dict[str, str] | None = None, resolution_minutes: int | None = None,
             max_gap: int = 3) -> StationSeries:
    """Read ``timestamp,t2m,sp,rh,wind_speed,PWV,tp`` rows.

    ``schema`` maps canonical channel names to the file's column names.
    Rows that fail to parse are dropped and then treated as gaps.  Gaps of
    at most ``max_gap`` missing steps are linearly interpolated; longer
    gaps start a new segment that windows never cross.
    """
    mapping = {name: name for name in HEADER}
    mapping.update(schema or {})
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [mapping[c] for c in HEADER if mapping[c] not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}; expected "
                              f"{[mapping[c] for c in HEADER]}, found {header}")
        cols = [header.index(mapping[c]) for c in HEADER]
        times, rows, flags = [], [], []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            try:
                ts = _parse_time(record[cols[0]])
                vals = [float(record[i]) for i in cols[1:]]
            except (ValueError, IndexError):
                flags.append(f"line {lineno}: unparseable row dropped")
                continue
            if not all(math.isfinite(v) for v in vals):
                flags.append(f"line {lineno}: non-finite value, row dropped")
                continue
            if vals[TARGET_INDEX] < 0:
                raise DataError(f"{path}: negative precipitation {vals[TARGET_INDEX]} at line {lineno}")
            times.append(ts)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no usable rows")
    for i in range(1, len(times)):
        if times[i] <= times[i - 1]:
            raise DataError(f"{path}: timestamps not strictly increasing at row {i + 1} "
                            f"({times[i - 1].isoformat()} -> {times[i].isoformat()})")
    return _regularise(times, np.array(rows), resolution_minutes, max_gap, flags)


def _regularise(times: list[datetime], values: np.ndarray, resolution_minutes: int | None,
                max_gap: int, flags: list[str]) -> StationSeries:
    deltas = [(b - a).total_seconds() / 60.0 for a, b in zip(times, times[1:])]
    if resolution_minutes is None:
        resolution_minutes = int(round(min(deltas))) if deltas else 60
    res = float(resolution_minutes)
    out_t, out_v, seg, interp = [times[0]], [values[0]], [0], [False]
    segment = 0
    for i, delta in enumerate(deltas, start=1):
        steps = delta / res
        if abs(steps - round(steps)) > 1e-9:
            raise DataError(f"row {i + 1}: spacing of {delta} min is not a multiple of {resolution_minutes} min")
        missing = int(round(steps)) - 1
        if 0 < missing <= max_gap:
            for j in range(1, missing + 1):
                w = j / (missing + 1)
                out_t.append(times[i - 1] + timedelta(minutes=res * j))
                out_v.append((1 - w) * values[i - 1] + w * values[i])
                seg.append(segment)
                interp.append(True)
            flags.append(f"{times[i - 1].isoformat()}: interpolated {missing} missing step(s)")
        elif missing > max_gap:
            segment += 1
            flags.append(f"{times[i - 1].isoformat()}: gap of {missing} steps, new segment")
        out_t.append(times[i])
        out_v.append(values[i])
        seg.append(segment)
        interp.append(False)
    return StationSeries(timestamps=np.array(out_t, dtype="datetime64[s]"), values=np.array(out_v),
                         resolution_minutes=int(resolution_minutes),
                         segment=np.array(seg, dtype=np.int64), interpolated=np.array(interp),
                         flags=flags)


def write_csv(series: StationSeries, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for ts, row in zip(series.timestamps, series.values):
            writer.writerow([str(ts)] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------- windows

@dataclass
class WindowedDataset:
    inputs: np.ndarray       # (M, l, D+1), normalized
    targets: np.ndarray      # (M, h), normalized target channel
    starts: np.ndarray       # (M,) row index of each window's first input step
    l: int
    h: int
    mean: np.ndarray
    std: np.ndarray
    split: str
    resolution_minutes: int = 60

    def __len__(self) -> int:
        return len(self.starts)

    def target_rows(self) -> np.ndarray:
        """Series row index of every target element, shape (M, h)."""
        return self.starts[:, None] + self.l + np.arange(self.h)[None, :]

    def normalize(self, v, channel: int = TARGET_INDEX):
        return (np.asarray(v, dtype=np.float64) - self.mean[channel]) / self.std[channel]

    def denormalize(self, v, channel: int = TARGET_INDEX):
        return np.asarray(v, dtype=np.float64) * self.std[channel] + self.mean[channel]

    @property
    def target_stats(self) -> tuple[float, float]:
        return float(self.mean[TARGET_INDEX]), float(self.std[TARGET_INDEX])


def split_points(n: int, ratios=(7, 1, 2)) -> tuple[int, int]:
    total = sum(ratios)
    return (n * ratios[0]) // total, (n * (ratios[0] + ratios[1])) // total


def make_windows(values: np.ndarray, l: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """All stride-1 (input, target) pairs of one contiguous array; count = len - l - h + 1."""
    n = len(values)
    if n < l + h:
        return np.empty((0, l, values.shape[1])), np.empty((0, h))
    view = np.lib.stride_tricks.sliding_window_view(values, l + h, axis=0)  # (M, C, l+h)
    view = np.moveaxis(view, -1, 1)
    return view[:, :l, :].copy(), view[:, l:, TARGET_INDEX].copy()


def minimum_length(l: int, h: int, ratios=(7, 1, 2)) -> int:
    n = l + h
    while True:
        b1, b2 = split_points(n, ratios)
        if b1 >= l + h and b2 - b1 >= h and n - b2 >= h:
            return n
        n += 1


def normalize_and_window(series: StationSeries, l: int, h: int,
                         ratios=(7, 1, 2)) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Chronological train/val/test split with train-only z-score statistics.

    Train windows lie entirely inside the training rows.  Validation and
    test windows keep their targets inside their own split but may read
    inputs from the rows just before it.
    """
    n = len(series)
    need = minimum_length(l, h, ratios)
    if n < need:
        raise DataError(f"series of length {n} is too short for l={l}, h={h}: need at least {need} rows")
    b1, b2 = split_points(n, ratios)
    train_rows = series.values[:b1]
    mean = train_rows.mean(axis=0)
    std = train_rows.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    norm = (series.values - mean) / std

    span = l + h
    starts = np.arange(n - span + 1)
    same_segment = series.segment[starts] == series.segment[starts + span - 1]
    # (first row a target may occupy, end row) per split; train inputs stay inside too
    bounds = {"train": (l, b1), "val": (b1, b2), "test": (b2, n)}
    out = []
    for name, (target_lo, hi) in bounds.items():
        sel = starts[(starts + l >= target_lo) & (starts + span <= hi) & same_segment]
        idx = sel[:, None] + np.arange(span)[None, :]
        windows = norm[idx]
        out.append(WindowedDataset(inputs=windows[:, :l, :], targets=windows[:, l:, TARGET_INDEX],
                                   starts=sel, l=l, h=h, mean=mean, std=std, split=name,
                                   resolution_minutes=series.resolution_minutes))
    return tuple(out)


# ---------------------------------------------------------------- synthetic data

class SynthesisError(DataError):
    pass


def _markov_probabilities(cfg: SynthConfig) -> tuple[float, float]:
    p_wet = 1.0 - cfg.p_dry
    p_ww = cfg.wet_persistence
    if not 0.0 < p_wet < 1.0:
        raise SynthesisError(f"p_dry must lie strictly between 0 and 1, got {cfg.p_dry}")
    if cfg.dry_persistence is None:
        p_dd = 1.0 - p_wet * (1.0 - p_ww) / (1.0 - p_wet)
        if not 0.0 <= p_dd <= 1.0:
            raise SynthesisError(f"wet_persistence {p_ww} cannot reach p_dry {cfg.p_dry}")
    else:
        p_dd = cfg.dry_persistence
        denom = (1.0 - p_dd) + (1.0 - p_ww)
        stationary_dry = (1.0 - p_ww) / denom if denom > 0 else float("nan")
        if not abs(stationary_dry - cfg.p_dry) <= 0.02:
            raise SynthesisError(f"persistences ({p_ww}, {p_dd}) give stationary P(dry)="
                                 f"{stationary_dry:.4f}, incompatible with p_dry={cfg.p_dry}")
    return p_ww, p_dd


def calibrated_gamma_scale(cfg: SynthConfig) -> float:
    """Gamma scale putting exactly ``extreme_rate`` of wet-step mass above ``y_th``."""
    if cfg.gamma_scale is None:
        if not 0.0 < cfg.extreme_rate < 1.0:
            raise SynthesisError(f"extreme_rate must lie strictly between 0 and 1, got {cfg.extreme_rate}")
        return cfg.y_th / stats.gamma.isf(cfg.extreme_rate, cfg.gamma_shape)
    achieved = stats.gamma.sf(cfg.y_th / cfg.gamma_scale, cfg.gamma_shape)
    if abs(achieved - cfg.extreme_rate) > 0.03:
        raise SynthesisError(f"gamma(shape={cfg.gamma_shape}, scale={cfg.gamma_scale}) puts "
                             f"{achieved:.4f} of wet steps above {cfg.y_th}, target {cfg.extreme_rate}")
    return cfg.gamma_scale


def synthesize(cfg: SynthConfig) -> StationSeries:
    """Zero-inflated, extreme-scarce precipitation with a leading moisture channel.

    Wet/dry occupancy is a two-state Markov chain whose stationary dry share
    is ``p_dry``.  Wet-step intensity has an exact gamma marginal, made
    persistent through an AR(1) Gaussian copula.  PWV rises ahead of rain by
    ``pwv_lead`` steps; the other features are seasonal cycles plus noise.
    """
    if cfg.length < 2:
        raise SynthesisError(f"length must be at least 2, got {cfg.length}")
    p_ww, p_dd = _markov_probabilities(cfg)
    scale = calibrated_gamma_scale(cfg)
    n, lead = cfg.length, cfg.pwv_lead
    rng = stream(cfg.seed, "synth")

    total = n + lead
    u = rng.uniform(size=total)
    wet = np.empty(total, dtype=bool)
    state = u[0] < 1.0 - cfg.p_dry
    for t in range(total):
        if t:
            state = u[t] < (p_ww if state else 1.0 - p_dd)
        wet[t] = state

    phi = cfg.intensity_memory
    shocks = rng.standard_normal(total)
    g = np.empty(total)
    g[0] = shocks[0]
    innov = math.sqrt(1.0 - phi * phi)
    for t in range(1, total):
        g[t] = phi * g[t - 1] + innov * shocks[t]
    intensity = stats.gamma.ppf(stats.norm.cdf(g), cfg.gamma_shape, scale=scale)
    tp = np.where(wet, intensity, 0.0)[:n]

    per_day = 1440.0 / cfg.resolution_minutes
    t = np.arange(n)
    annual = np.sin(2 * np.pi * t / (365.0 * per_day))
    daily = np.sin(2 * np.pi * t / per_day)
    signal = (wet.astype(float) * (1.0 + 0.6 * g))[lead:lead + n]
    smooth = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = 0.6 * acc + 0.4 * signal[i]
        smooth[i] = acc
    noise = rng.standard_normal((5, n))
    values = np.column_stack([
        15.0 + 10.0 * annual + 3.0 * daily + 1.0 * noise[0],           # t2m
        1013.0 + 5.0 * annual + 1.5 * noise[1],                        # sp
        70.0 + 10.0 * annual - 8.0 * daily + 4.0 * noise[2],           # rh
        np.abs(3.0 + 1.0 * daily + 1.0 * noise[3]),                    # wind_speed
        30.0 + 8.0 * annual + 12.0 * smooth + 1.0 * noise[4],          # PWV
        tp,
    ])
    start = np.datetime64("2018-01-01T00:00:00")
    stamps = start + np.arange(n) * np.timedelta64(cfg.resolution_minutes * 60, "s")
    return StationSeries(timestamps=stamps, values=values, resolution_minutes=cfg.resolution_minutes,
                         flags=[f"gamma_scale={float(scale)!r}", f"p_ww={p_ww!r}", f"p_dd={p_dd!r}"])


# ---------------------------------------------------------------- imbalance report

@dataclass
class ImbalanceReport:
    p_zero: float
    p_light: float
    p_extreme: float
    extreme_among_wet: float
    holds: bool

    def lines(self) -> list[str]:
        return [f"P(y=0)        = {self.p_zero:.4f}",
                f"P(0<y<=th)    = {self.p_light:.4f}",
                f"P(y>th)       = {self.p_extreme:.4f}",
                f"P(y>th | y>0) = {self.extreme_among_wet:.4f}",
                f"ordering {'holds' if self.holds else 'FAILS'}"]


def verify_dual_imbalance(series, y_th: float = 8.0) -> ImbalanceReport:
    y = series.tp if isinstance(series, StationSeries) else np.asarray(series, dtype=np.float64)
    if y.size == 0:
        raise DataError("empty series")
    n = y.size
    zero = np.count_nonzero(y == 0) / n
    extreme = np.count_nonzero(y > y_th) / n
    light = np.count_nonzero((y > 0) & (y <= y_th)) / n
    wet = np.count_nonzero(y > 0)
    among = np.count_nonzero(y > y_th) / wet if wet else 0.0
    return ImbalanceReport(p_zero=zero, p_light=light, p_extreme=extreme,
                           extreme_among_wet=among, holds=bool(zero > light > extreme))
