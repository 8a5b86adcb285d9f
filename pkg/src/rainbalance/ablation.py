"""Four-way module ablation over seed replicates, run in worker processes."""
from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import RunBlock
from .data import WindowedDataset
from .evaluation import ForecastReport, average_reports, extreme_subset, forecast_report
from .model import RainBalanceModel, build_backbone
from .nn import Adam, clip_grad_norm
from .rng import stream
from .training import TrainingDiverged, evaluate, final_params, load_params, snapshot, train

log = logging.getLogger(__name__)

# (variant, clustering module present, probability VAE present), in table order
ABLATION_GRID = (
    ("none", False, False),
    ("no_cluster", False, True),
    ("no_vae", True, False),
    ("full", True, True),
)


@dataclass
class PreparedData:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    tp: np.ndarray  # raw precipitation series, used to flag extreme hours


@dataclass
class SeedRun:
    variant: str
    seed: int
    report: ForecastReport | None
    val_history: list[float]
    trace: list[dict]
    error: str | None = None
    uniform_pi: bool | None = None  # no_cluster only: every pi row was exactly 1/K


@dataclass
class AblationRow:
    variant: str
    cluster: bool
    vae: bool
    report: ForecastReport | None
    runs: list[SeedRun] = field(default_factory=list)
    failed: bool = False
    errors: list[str] = field(default_factory=list)


@dataclass
class AblationResult:
    rows: list[AblationRow]
    seeds: list[int]
    bare_crosscheck: bool | None = None  # none row equals a directly trained backbone

    def row(self, variant: str) -> AblationRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def best(self) -> str | None:
        ok = [r for r in self.rows if r.report is not None]
        return min(ok, key=lambda r: r.report.mse).variant if ok else None


def _uniform_pi_holds(model: RainBalanceModel, ds: WindowedDataset, batch: int = 256) -> bool:
    k = model.cfg.K
    for i in range(0, len(ds), batch):
        pi = model.forward(ds.inputs[i:i + batch], "eval").pi.data
        if not np.all(pi == 1.0 / k):
            return False
    return True


def _run_one(job) -> SeedRun:
    cfg, variant, seed, data = job
    cfg = dataclasses.replace(cfg, variant=variant, seed=seed)
    model = RainBalanceModel(cfg, seed=seed)
    try:
        state = train(model, data.train, data.val, cfg, seed=seed)
    except TrainingDiverged as exc:
        return SeedRun(variant, seed, None, exc.state.val_history, exc.state.trace, error=str(exc))
    load_params(model, final_params(state, cfg))
    report = evaluate(model, data.test, data.tp, cfg.extreme_threshold, seeds=[seed])
    uniform = _uniform_pi_holds(model, data.test) if variant == "no_cluster" else None
    return SeedRun(variant, seed, report, state.val_history, state.trace, uniform_pi=uniform)


def train_bare_backbone(cfg: RunBlock, data: PreparedData, seed: int) -> ForecastReport:
    """Train ``cfg.backbone`` on its own, outside the composite model, and evaluate it.

    Shares the seed streams, optimizer and selection rule with :func:`train`
    but none of its code path, so agreement with the ``none`` variant is a
    real check that the composite adds nothing when everything is switched off.
    """
    net = build_backbone(cfg, seed)
    params = net.parameters()
    opt = Adam(params, lr=cfg.lr)

    def forecast(x):
        return net.predict(net.embed(tn.Tensor(np.asarray(x, dtype=np.float64))))

    def val_mse():
        preds = np.concatenate([forecast(data.val.inputs[i:i + 512]).data
                                for i in range(0, len(data.val), 512)])
        return float(np.mean((preds - data.val.targets) ** 2))

    best_val, best = None, None
    step = 0
    n = len(data.train)
    for epoch in range(cfg.epochs):
        order = stream(seed, "shuffle", epoch).permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            err = tn.sub(forecast(data.train.inputs[idx]), tn.Tensor(data.train.targets[idx]))
            loss = tn.mean(tn.square(err))
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            step += 1
        v = val_mse()
        if best_val is None or v < best_val:
            best_val, best = v, snapshot(net)
    if cfg.select_best and best is not None:
        load_params(net, best)
    preds = np.concatenate([forecast(data.test.inputs[i:i + 512]).data
                            for i in range(0, len(data.test), 512)])
    flagged = np.zeros(len(data.tp), dtype=bool)
    flagged[extreme_subset(data.tp, cfg.extreme_threshold, data.test.resolution_minutes)] = True
    mask = flagged[data.test.target_rows()]
    return forecast_report(data.test.targets, preds, data.test.target_stats, mask, seeds=[seed])


def _bare_job(job) -> ForecastReport:
    cfg, seed, data = job
    return train_bare_backbone(dataclasses.replace(cfg, variant="none", seed=seed), data, seed)


def run_seeds(cfg: RunBlock, data: PreparedData, variants, seeds, workers: int = 1) -> list[SeedRun]:
    jobs = [(cfg, v, s, data) for v in variants for s in seeds]
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def run_ablation(data: PreparedData, cfg: RunBlock, seeds=None, workers: int | None = None,
                 crosscheck: bool = True) -> AblationResult:
    """Train every variant of :data:`ABLATION_GRID` for each seed and average per variant.

    A variant whose training diverges on any seed is marked failed; the other
    rows are still reported.  Raises ``AssertionError`` if the ``no_cluster``
    model ever sees a non-uniform cluster distribution.
    """
    seeds = list(range(cfg.n_seeds)) if seeds is None else list(seeds)
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    workers = cfg.workers if workers is None else workers
    variants = [v for v, _, _ in ABLATION_GRID]
    runs = run_seeds(cfg, data, variants, seeds, workers)

    bare = None
    if crosscheck:
        jobs = [(cfg, s, data) for s in seeds]
        if workers <= 1:
            bare = [_bare_job(j) for j in jobs]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                bare = list(pool.map(_bare_job, jobs))

    rows = []
    for variant, has_cluster, has_vae in ABLATION_GRID:
        mine = [r for r in runs if r.variant == variant]
        if variant == "no_cluster":
            assert all(r.uniform_pi for r in mine if r.report is not None), \
                "no_cluster variant produced a non-uniform cluster distribution"
        errors = [r.error for r in mine if r.error]
        report = None if errors else average_reports([r.report for r in mine])
        rows.append(AblationRow(variant, has_cluster, has_vae, report, mine, bool(errors), errors))
        for e in errors:
            log.warning("variant %s failed: %s", variant, e)

    result = AblationResult(rows=rows, seeds=seeds)
    if bare is not None:
        none_runs = result.row("none").runs
        result.bare_crosscheck = all(
            r.report is not None and r.report.to_dict() == b.to_dict() for r, b in zip(none_runs, bare))
    return result


def render_table(result: AblationResult, decimals: int = 4) -> str:
    """Plain-text grid: one row per variant, module switches as ✓/✗, best MSE row marked."""
    best = result.best()
    h = None
    for r in result.rows:
        if r.report is not None:
            h = len(r.report.horizon_mse)
            break
    head = ["", "Cluster", "VAE", "MSE", "MAE"]
    if h:
        for j in range(h):
            head += [f"MSE@{j + 1}", f"MAE@{j + 1}"]
    lines = [head]
    for r in result.rows:
        mark = "*" if r.variant == best else " "
        cells = [f"{mark} {r.variant}", "✓" if r.cluster else "✗", "✓" if r.vae else "✗"]
        if r.report is None:
            cells += ["failed", "failed"] + ["-"] * (2 * (h or 0))
        else:
            rep = r.report
            cells += [f"{rep.mse:.{decimals}f}", f"{rep.mae:.{decimals}f}"]
            for a, b in zip(rep.horizon_mse, rep.horizon_mae):
                cells += [f"{a:.{decimals}f}", f"{b:.{decimals}f}"]
        lines.append(cells)
    widths = [max(len(row[i]) for row in lines) for i in range(len(head))]
    out = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines]
    out.insert(1, "-" * len(out[0]))
    out.append(f"* best (lowest MSE), averaged over seeds {result.seeds}")
    return "\n".join(out)
