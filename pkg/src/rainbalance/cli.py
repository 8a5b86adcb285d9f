"""Command-line entry point: ``rainbalance {synth,train,eval,ablate,gradcheck}``.

Exit codes: 0 success, 1 failed check, 2 config error, 3 numeric divergence, 4 IO error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .ablation import PreparedData, render_table, run_ablation
from .config import ConfigError, RunConfig, load_schema
from .data import DataError, SchemaError, load_csv, minimum_length, normalize_and_window, synthesize, \
    verify_dual_imbalance, write_csv
from .gradcheck import check_model
from .model import RainBalanceModel
from .training import (CheckpointError, TrainingDiverged, evaluate, final_params, fingerprint_mismatch,
                       load_checkpoint, load_params, predict, save_checkpoint, train)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("rainbalance")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- plumbing

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        cfg = cfg.replace_run(seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output=dataclasses.replace(cfg.output, dir=args.out))
    return cfg


def _out_path(cfg: RunConfig, name: str) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def load_series(cfg: RunConfig):
    if cfg.data.csv:
        return load_csv(cfg.data.csv, resolution_minutes=cfg.data.resolution_minutes,
                        max_gap=cfg.data.max_gap)
    return synthesize(cfg.data.synth)


def prepare(cfg: RunConfig) -> PreparedData:
    series = load_series(cfg)
    train_ds, val_ds, test_ds = normalize_and_window(series, cfg.run.l, cfg.run.h)
    return PreparedData(train_ds, val_ds, test_ds, series.tp)


def build_report(command: str, cfg: RunConfig, seeds, result: dict) -> dict:
    """Report document; the wall-clock timestamp lives only in ``metadata.created``."""
    return {
        "metadata": {"created": datetime.now(timezone.utc).isoformat(timespec="seconds")},
        "version": f"rainbalance {__version__}",
        "command": command,
        "config": cfg.to_dict(),
        "seeds": [int(s) for s in seeds],
        "result": result,
    }


def write_report(doc: dict, path: Path) -> Path:
    jsonschema.Draft202012Validator(load_schema("report.schema.json")).validate(doc)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig, args) -> int:
    synth = cfg.data.synth
    need = minimum_length(cfg.run.l, cfg.run.h)
    if synth.length < need:
        raise CommandError(f"synth length {synth.length} is too short for l={cfg.run.l}, "
                           f"h={cfg.run.h}: need at least {need} rows", EXIT_CONFIG)
    series = synthesize(synth)
    path = _out_path(cfg, cfg.output.data_csv)
    write_csv(series, path)
    report = verify_dual_imbalance(series, synth.y_th)
    print(f"wrote {len(series)} rows to {path}")
    for line in report.lines():
        print("  " + line)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    data = prepare(cfg)
    run = cfg.run
    model = RainBalanceModel(run)
    ckpt_path = _out_path(cfg, cfg.output.checkpoint)
    norm = (data.train.mean, data.train.std)
    state = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        _check_compatible(ckpt, cfg, data)
        if ckpt.seed != run.seed:
            raise CommandError(f"checkpoint was trained with seed {ckpt.seed}, config has {run.seed}",
                               EXIT_CONFIG)
        state = ckpt.state
    try:
        state = train(model, data.train, data.val, run, state=state,
                      on_step=lambda r: log.debug("step %(step)d total %(total).6f", r))
    except TrainingDiverged as exc:
        save_checkpoint(ckpt_path, exc.state, run, run.seed, norm)
        print(f"error: {exc}; last finite state saved to {ckpt_path}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(ckpt_path, state, run, run.seed, norm)
    load_params(model, final_params(state, run))
    test = evaluate(model, data.test, data.tp, run.extreme_threshold, seeds=[run.seed])
    result = {"test": test.to_dict(), "val_history": state.val_history, "best_epoch": state.best_epoch,
              "epochs": state.epoch, "steps": state.step, "trace": state.trace,
              "checkpoint": str(ckpt_path)}
    path = write_report(build_report("train", cfg, [run.seed], result), _out_path(cfg, cfg.output.report))
    _print_report(test)
    print(f"checkpoint {ckpt_path}\nreport {path}")
    if cfg.output.plots:
        _plots(cfg, model, data, state.trace)
    return EXIT_OK


def _check_compatible(ckpt, cfg: RunConfig, data: PreparedData) -> None:
    diff = fingerprint_mismatch(ckpt.fingerprint, cfg.run)
    if diff:
        raise CommandError("checkpoint incompatible with config:\n  " + "\n  ".join(diff), EXIT_CONFIG)
    if ckpt.norm is not None and not (np.array_equal(ckpt.norm[0], data.train.mean)
                                      and np.array_equal(ckpt.norm[1], data.train.std)):
        raise CommandError("checkpoint normalisation statistics differ from this dataset's "
                           "training split", EXIT_CONFIG)


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise CommandError("eval needs --checkpoint", EXIT_CONFIG)
    ckpt = load_checkpoint(args.checkpoint)
    data = prepare(cfg)
    _check_compatible(ckpt, cfg, data)
    model = RainBalanceModel(cfg.run, seed=ckpt.seed)
    load_params(model, final_params(ckpt.state, cfg.run))
    test = evaluate(model, data.test, data.tp, cfg.run.extreme_threshold, seeds=[ckpt.seed])
    result = {"test": test.to_dict(), "checkpoint": str(args.checkpoint)}
    path = write_report(build_report("eval", cfg, [ckpt.seed], result), _out_path(cfg, cfg.output.report))
    _print_report(test)
    print(f"report {path}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    data = prepare(cfg)
    seeds = [cfg.run.seed + i for i in range(cfg.run.n_seeds)]
    result = run_ablation(data, cfg.run, seeds=seeds)
    print(render_table(result))
    rows = [{"variant": r.variant, "cluster": r.cluster, "vae": r.vae, "failed": r.failed,
             "errors": r.errors, "report": None if r.report is None else r.report.to_dict(),
             "per_seed": [None if s.report is None else s.report.to_dict() for s in r.runs]}
            for r in result.rows]
    doc = build_report("ablate", cfg, seeds, {"rows": rows, "best": result.best(),
                                              "bare_crosscheck": result.bare_crosscheck})
    path = write_report(doc, _out_path(cfg, cfg.output.report))
    print(f"report {path}")
    if result.bare_crosscheck is False:
        print("error: the none variant differs from the directly trained backbone", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    report = check_model(cfg.run, seed=cfg.run.seed)
    for line in report.lines():
        print(line)
    print(f"{'PASS' if report.passed else 'FAIL'} max_rel_err={report.max_error:.3e} tol={report.tol:g}")
    result = {"passed": report.passed, "tol": report.tol, "step": report.step, "errors": report.errors}
    write_report(build_report("gradcheck", cfg, [cfg.run.seed], result), _out_path(cfg, cfg.output.report))
    return EXIT_OK if report.passed else EXIT_CHECK


def _print_report(rep) -> None:
    print(f"test MSE {rep.mse:.4f}  MAE {rep.mae:.4f}  ({rep.n_windows} windows)")
    if rep.extreme_mse is not None:
        print(f"extreme MSE {rep.extreme_mse:.4f}  MAE {rep.extreme_mae:.4f}  ({rep.n_extreme} targets)")


def _plots(cfg: RunConfig, model, data: PreparedData, trace) -> None:
    from . import plots

    plots.loss_trace(trace, _out_path(cfg, "loss_trace.svg"))
    y_pred = data.test.denormalize(predict(model, data.test))
    y_true = data.test.denormalize(data.test.targets)
    plots.forecast_vs_truth(y_true, y_pred, _out_path(cfg, "forecast.svg"))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rainbalance", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config; omitted keys take their defaults")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="override output.dir")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
        if name == "train":
            p.add_argument("--resume", help="continue from this checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
