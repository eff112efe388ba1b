"""Command line entry points.

Every command takes ``--config PATH`` (JSON) plus any number of
``--set key=value`` overrides.  Reports go to stdout as JSON and, with
``--out``, to a file.  Log lines are JSON objects on stderr; the level comes
from the ``ISTPOSE_LOG`` environment variable (default ``INFO``).

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (ConfigHashMismatch, checkpoint_from_model, load_checkpoint,
                         model_from_checkpoint, save_checkpoint)
from .config import ConfigError, RunConfig
from .evalbench import (GRIDS, ablation_runner, metrics_for, speed_bench, umeyama_variant_eval,
                        write_json)
from .model import ISTNet
from .prior_baseline import CASE_PRIOR, PriorNet, prior_case_study
from .synthdata import GenConfig, IoFailure, generate_dataset, read_snapshot, write_snapshot
from .training import predict, train

log = logging.getLogger("istpose")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
LOG_ENV = "ISTPOSE_LOG"
EVAL_SEED_OFFSET = 1_000_003


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        try:
            doc = json.loads(msg)
            if not isinstance(doc, dict):
                doc = {"message": doc}
        except json.JSONDecodeError:
            doc = {"message": msg}
        return json.dumps({"level": record.levelname.lower(), "logger": record.name, **doc})


def setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("istpose")
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level, logging.INFO))
    root.propagate = False


# ------------------------------------------------------------------ helpers

def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"not valid JSON: {exc}") from exc


def run_config(args) -> RunConfig:
    doc = _load_json(args.config) if args.config else {}
    return RunConfig.from_dict(doc).with_overrides(args.set or [])


def gen_config(cfg: RunConfig, evaluation: bool = False) -> GenConfig:
    doc = {"n_points": cfg.n_points, **cfg.gen}
    if evaluation:
        doc["seed"] = int(doc.get("seed", 0)) + EVAL_SEED_OFFSET
        doc["count"] = cfg.eval_count
    return GenConfig.from_json(doc)


def load_data(cfg: RunConfig, evaluation: bool = False, path: str | None = None):
    """Instances from a snapshot path, else generated from the ``gen`` settings."""
    path = path or (cfg.eval_data if evaluation else cfg.train_data)
    if path:
        return read_snapshot(path)
    return generate_dataset(gen_config(cfg, evaluation))


def emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, sort_keys=True, indent=2)
    print(text)
    if out:
        write_json(out, report)


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError("seeds", f"expected comma separated integers, got {text!r}") from exc


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    for pair in args.set or []:
        key, _, raw = pair.partition("=")
        try:
            doc[key] = json.loads(raw)
        except json.JSONDecodeError:
            doc[key] = raw
    cfg = GenConfig.from_json(doc)
    data = generate_dataset(cfg)
    crc = write_snapshot(data, args.out)
    emit({"path": str(args.out), "count": len(data), "n_points": cfg.n_points,
          "crc32": crc, "gen": cfg.to_json()}, None)
    return EXIT_OK


def _make_model(cfg: RunConfig):
    return PriorNet(cfg) if cfg.variant == "prior-case" else ISTNet(cfg)


def cmd_train(args) -> int:
    cfg = run_config(args)
    data = load_data(cfg, path=args.data)
    model = opt = None
    start = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume, expect=cfg)
        model, opt, start = model_from_checkpoint(ckpt), ckpt.optimizer, ckpt.epoch
        model.cfg = cfg
    else:
        model = _make_model(cfg)
    out = Path(args.out)
    log_path = out.with_name(out.name + ".log.jsonl")
    best = {"loss": np.inf}
    mode = "a" if args.resume else "w"
    with open(log_path, mode) as log_fh:
        def on_epoch(epoch, m, o, rec):
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()
            save_checkpoint(checkpoint_from_model(m, epoch + 1, o), out)
            if rec["total"] < best["loss"]:
                best["loss"] = rec["total"]
                save_checkpoint(checkpoint_from_model(m, epoch + 1, o, {"best_loss": rec["total"]}),
                                out.with_name(out.stem + ".best" + out.suffix))

        model, opt, history = train(cfg, data, model=model, opt=opt, start_epoch=start,
                                    on_epoch=on_epoch)
    save_checkpoint(checkpoint_from_model(model, cfg.epochs, opt), out)
    emit({"checkpoint": str(out), "log": str(log_path), "config_hash": cfg.config_hash,
          "epochs": len(history), "final": history[-1] if history else None}, None)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if args.config or args.set:
        want = run_config(args)
        if want.arch_hash != ckpt.arch_hash:
            raise ConfigHashMismatch("checkpoint was trained with a different architecture")
        cfg = want
    model = model_from_checkpoint(ckpt)
    data = load_data(cfg, evaluation=True, path=args.data)
    if args.mode == "umeyama":
        if cfg.variant == "prior-case":
            raise ConfigError("mode", "the prior baseline already solves poses by Umeyama")
        report = umeyama_variant_eval(model, data)
    else:
        report = metrics_for(predict(model, data), data)
    report.config_hash = cfg.config_hash
    report.seeds = [cfg.seed]
    doc = {"mode": args.mode, **report.to_dict()}
    emit(doc, args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = run_config(args)
    if args.grid in GRIDS:
        grid = GRIDS[args.grid]
    else:
        grid = _load_json(args.grid)
        for name, ov in grid.items():
            cfg.with_overrides(ov)  # validate before any training starts
    train_data = load_data(cfg)
    eval_data = load_data(cfg, evaluation=True)
    report = ablation_runner(grid, cfg, train_data, eval_data, _seeds(args.seeds),
                             out_path=args.out)
    emit(report, args.out)
    return EXIT_OK


def cmd_prior_study(args) -> int:
    cfg = run_config(args)
    cases = [c.strip() for c in args.cases.split(",")]
    for c in cases:
        if c not in CASE_PRIOR:
            raise ConfigError("cases", f"unknown case {c!r}")
    if cfg.train_data:
        raise ConfigError("train_data", "the prior study needs canonical models; "
                                        "leave train_data empty to generate data")
    train_data = load_data(cfg)
    eval_data = load_data(cfg, evaluation=True)
    report = prior_case_study(cases, cfg, _seeds(args.seeds), train_data, eval_data,
                              out_path=args.out)
    emit(report, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = run_config(args)
    data = load_data(cfg, evaluation=True, path=args.data)[:args.instances]
    models = {v: ISTNet(cfg.with_overrides({"variant": v})) for v in ("implicit", "explicit")}
    res = speed_bench(models, data, warmup=args.warmup, iters=args.iters)
    emit({"config_hash": cfg.config_hash, "instances": len(data), "models": res,
          "throughput_ratio": res["implicit"]["throughput"] / res["explicit"]["throughput"]},
         args.out)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="istpose", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")

    sp = sub.add_parser("gen-data", help="generate a synthetic snapshot")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model and write checkpoints")
    common(sp)
    sp.add_argument("--data", help="training snapshot (overrides train_data)")
    sp.add_argument("--out", required=True, help="final checkpoint path")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="evaluation snapshot (overrides eval_data)")
    sp.add_argument("--mode", choices=("direct", "umeyama"), default="direct")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and compare a configuration grid")
    common(sp)
    sp.add_argument("--grid", default="modules",
                    help=f"one of {sorted(GRIDS)} or a JSON file of name -> overrides")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("prior-study", help="compare prior variants of the deformation baseline")
    common(sp)
    sp.add_argument("--cases", default="case1,case2,case3,case4")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_prior_study)

    sp = sub.add_parser("bench", help="parameter counts and inference throughput")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--instances", type=int, default=64)
    sp.add_argument("--warmup", type=int, default=1)
    sp.add_argument("--iters", type=int, default=5)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


def _fail(code: int, exc: Exception) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        doc["field"] = exc.field
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv=None) -> int:
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_INVALID, exc)
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("traceback", exc_info=True)
        return _fail(EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
