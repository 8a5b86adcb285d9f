"""Mini-batch training, deterministic prediction and checkpoint files.

Checkpoint layout (JSON, UTF-8)::

    {
      "format": "rainbalance-checkpoint",
      "version": 1,
      "fingerprint": {...run block...},
      "seed": <int>, "epoch": <completed epochs>, "step": <optimizer steps>,
      "adam_t": <int>, "best_val": <float|null>, "best_epoch": <int>,
      "val_history": [<float>, ...],
      "tensors": {"<group>/<name>": {"shape": [...], "data": ["<float.hex>", ...]}, ...}
    }

Tensor groups are ``param`` (current weights), ``best`` (weights at the best
validation epoch), ``adam.m`` / ``adam.v`` (optimizer moments) and ``norm``
(``mean`` / ``std`` channel statistics).  Values are stored with
``float.hex`` so a reload is bit-exact.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .config import ARCHITECTURE_FIELDS, RunBlock
from .data import WindowedDataset
from .evaluation import ForecastReport, extreme_subset, forecast_report
from .model import LossBreakdown, RainBalanceModel
from .nn import Adam, clip_grad_norm
from .rng import stream

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rainbalance-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    params: dict[str, np.ndarray]
    adam_t: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    best_params: dict[str, np.ndarray] | None = None
    best_val: float | None = None
    best_epoch: int = -1
    val_history: list[float] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)


def snapshot(model) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in model.parameters()}


def load_params(model, params: dict[str, np.ndarray]) -> None:
    named = model.named_parameters()
    missing = sorted(set(named) - set(params))
    if missing:
        raise KeyError(f"checkpoint lacks parameters {missing}")
    for name, p in named.items():
        if params[name].shape != p.shape:
            raise ValueError(f"parameter {name}: checkpoint shape {params[name].shape} vs model {p.shape}")
        p.data = np.array(params[name], dtype=np.float64)


def batch_loss(model, x, y, cfg: RunBlock, noise, target_stats=(0.0, 1.0), mode: str = "train",
               zero_fusion: bool = False) -> tuple[LossBreakdown, object]:
    out = model.forward(x, mode, noise, zero_fusion=zero_fusion)
    y = tn.Tensor(y)
    y_hat = out.y_hat
    if cfg.mse_space == "raw":
        mean, std = target_stats
        y_hat = tn.add(tn.scalar_mul(y_hat, std), mean)
        y = tn.Tensor(y.data * std + mean)
    return model.loss(replace(out, y_hat=y_hat), y), out


def predict(model, ds: WindowedDataset, batch_size: int = 512, zero_fusion: bool = False) -> np.ndarray:
    """Eval-mode forecasts in normalized units, shape (M, h)."""
    preds = [model.forward(ds.inputs[i:i + batch_size], "eval", zero_fusion=zero_fusion).y_hat.data
             for i in range(0, len(ds), batch_size)]
    return np.concatenate(preds, axis=0) if preds else np.empty((0, ds.h))


def validation_mse(model, ds: WindowedDataset, zero_fusion: bool = False) -> float:
    err = predict(model, ds, zero_fusion=zero_fusion) - ds.targets
    return float(np.mean(err * err))


def train(model: RainBalanceModel, train_ds: WindowedDataset, val_ds: WindowedDataset | None,
          cfg: RunBlock, seed: int | None = None, epochs: int | None = None,
          state: TrainState | None = None, max_steps: int | None = None,
          zero_fusion: bool = False, on_step=None) -> TrainState:
    """Adam with global-norm clipping over shuffled mini-batches.

    Shuffling and noise come from streams keyed by (seed, epoch) and
    (seed, step), so a run resumed from a :class:`TrainState` replays the
    uninterrupted run exactly.  Raises :class:`TrainingDiverged` carrying the
    last finite state when a loss or gradient goes non-finite.
    """
    seed = cfg.seed if seed is None else seed
    epochs = cfg.epochs if epochs is None else epochs
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    if state is None:
        state = TrainState(params=snapshot(model))
    else:
        load_params(model, state.params)
        opt.load_state({"t": state.adam_t, "m": state.adam_m, "v": state.adam_v})
    stats_ = train_ds.target_stats
    steps_done = 0
    while state.epoch < epochs:
        order = stream(seed, "shuffle", state.epoch).permutation(len(train_ds))
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        first_batch = state.step - state.epoch * len(batches)
        for idx in batches[first_batch:]:
            if max_steps is not None and steps_done >= max_steps:
                return _capture(state, model, opt)
            noise = model.draw_noise(stream(seed, "noise", state.step), len(idx))
            try:
                lb, _ = batch_loss(model, train_ds.inputs[idx], train_ds.targets[idx], cfg, noise,
                                   stats_, zero_fusion=zero_fusion)
                if not np.isfinite(lb.total.item()):
                    raise tn.NumericalError("non-finite total loss")
                opt.zero_grad()
                lb.total.backward()
                for p in params:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise tn.NumericalError(f"non-finite gradient for {p.name}")
            except tn.NumericalError as exc:
                raise TrainingDiverged(f"diverged at epoch {state.epoch}, step {state.step}: {exc}",
                                       _capture(state, model, opt)) from exc
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            record = lb.as_floats()
            record.update(epoch=state.epoch, step=state.step)
            state.trace.append(record)
            if on_step is not None:
                on_step(record)
            state.step += 1
            steps_done += 1
        state.epoch += 1
        if val_ds is not None and len(val_ds):
            val = validation_mse(model, val_ds, zero_fusion=zero_fusion)
            state.val_history.append(val)
            if state.best_val is None or val < state.best_val:
                state.best_val, state.best_epoch = val, state.epoch
                state.best_params = snapshot(model)
            log.info("epoch %d val_mse %.6f", state.epoch, val)
    return _capture(state, model, opt)


def _capture(state: TrainState, model, opt: Adam) -> TrainState:
    state.params = snapshot(model)
    state.adam_t = opt.t
    state.adam_m = {k: v.copy() for k, v in opt.m.items()}
    state.adam_v = {k: v.copy() for k, v in opt.v.items()}
    return state


def final_params(state: TrainState, cfg: RunBlock) -> dict[str, np.ndarray]:
    if cfg.select_best and state.best_params is not None:
        return state.best_params
    return state.params


def evaluate(model, ds: WindowedDataset, tp_series: np.ndarray, threshold: float = 8.0,
             seeds=(), zero_fusion: bool = False) -> ForecastReport:
    """Eval-mode report on ``ds``; extremes are flagged on the raw series ``tp_series``."""
    y_pred = predict(model, ds, zero_fusion=zero_fusion)
    flagged = np.zeros(len(tp_series), dtype=bool)
    flagged[extreme_subset(tp_series, threshold, ds.resolution_minutes)] = True
    mask = flagged[ds.target_rows()]
    return forecast_report(ds.targets, y_pred, ds.target_stats, mask, seeds=seeds)


# ---------------------------------------------------------------- checkpoints

def _encode(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": [float(v).hex() for v in arr.reshape(-1)]}


def _decode(entry: dict) -> np.ndarray:
    return np.array([float.fromhex(v) for v in entry["data"]], dtype=np.float64).reshape(entry["shape"])


def save_checkpoint(path, state: TrainState, cfg: RunBlock, seed: int,
                    norm: tuple[np.ndarray, np.ndarray] | None = None) -> None:
    tensors = {f"param/{k}": _encode(v) for k, v in state.params.items()}
    tensors.update({f"adam.m/{k}": _encode(v) for k, v in state.adam_m.items()})
    tensors.update({f"adam.v/{k}": _encode(v) for k, v in state.adam_v.items()})
    if state.best_params is not None:
        tensors.update({f"best/{k}": _encode(v) for k, v in state.best_params.items()})
    if norm is not None:
        tensors["norm/mean"] = _encode(norm[0])
        tensors["norm/std"] = _encode(norm[1])
    doc = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "fingerprint": {k: getattr(cfg, k) for k in vars(cfg)},
        "seed": int(seed), "epoch": state.epoch, "step": state.step, "adam_t": state.adam_t,
        "best_val": state.best_val, "best_epoch": state.best_epoch,
        "val_history": state.val_history, "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


@dataclass
class Checkpoint:
    fingerprint: dict
    seed: int
    state: TrainState
    norm: tuple[np.ndarray, np.ndarray] | None


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    groups: dict[str, dict[str, np.ndarray]] = {}
    for key, entry in doc["tensors"].items():
        group, name = key.split("/", 1)
        groups.setdefault(group, {})[name] = _decode(entry)
    state = TrainState(params=groups.get("param", {}), adam_t=doc["adam_t"],
                       adam_m=groups.get("adam.m", {}), adam_v=groups.get("adam.v", {}),
                       epoch=doc["epoch"], step=doc["step"], best_params=groups.get("best"),
                       best_val=doc["best_val"], best_epoch=doc["best_epoch"],
                       val_history=list(doc["val_history"]))
    norm = None
    if "norm" in groups:
        norm = (groups["norm"]["mean"], groups["norm"]["std"])
    return Checkpoint(fingerprint=doc["fingerprint"], seed=doc["seed"], state=state, norm=norm)


def fingerprint_mismatch(saved: dict, cfg: RunBlock) -> list[str]:
    return [f"{k}: checkpoint={saved.get(k)!r} config={getattr(cfg, k)!r}"
            for k in ARCHITECTURE_FIELDS if saved.get(k) != getattr(cfg, k)]
