"""Benchmark metrics, the Umeyama matching variant, ablation and speed harnesses."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .geometry import (DegenerateConfiguration, Pose, closest_axis_rotation, iou3d,
                       rotation_error_deg, umeyama_solve)
from .model import count_params
from .synthdata import CATEGORIES, Instance, snapshot_bytes, symmetry_for
from .training import predict, train

log = logging.getLogger(__name__)

IOU_THRESHOLDS = (0.25, 0.50, 0.75)
POSE_THRESHOLDS = ((5, 2), (5, 5), (10, 2), (10, 5), (10, 10))  # (degrees, cm)


class LengthMismatch(ValueError):
    pass


def iou_key(th: float) -> str:
    return f"3D{int(round(th * 100))}"


def pose_key(deg: int, cm: int) -> str:
    return f"{deg}deg{cm}cm"


METRIC_KEYS = tuple(iou_key(t) for t in IOU_THRESHOLDS) + tuple(pose_key(*p) for p in POSE_THRESHOLDS)


@dataclass
class MetricsReport:
    per_category: dict  # category name -> {metric -> percent}
    mean: dict  # mean over categories
    instance_mean: dict  # mean over instances
    count: int
    config_hash: str = ""
    seeds: list = field(default_factory=list)

    def check_invariants(self) -> None:
        for vals in [self.mean, self.instance_mean, *self.per_category.values()]:
            for k, v in vals.items():
                if not 0.0 <= v <= 100.0:
                    raise AssertionError(f"{k}={v} outside [0, 100]")
            a = [vals[pose_key(*p)] for p in POSE_THRESHOLDS]
            p52, p55, p102, p105, p1010 = a
            eps = 1e-9
            if not (p52 <= p55 + eps and p55 <= p105 + eps and p105 <= p1010 + eps
                    and p52 <= p102 + eps):
                raise AssertionError(f"pose accuracies not monotone: {a}")
            i25, i50, i75 = (vals[iou_key(t)] for t in IOU_THRESHOLDS)
            if not (i75 <= i50 + eps and i50 <= i25 + eps):
                raise AssertionError("IoU precisions not monotone")

    def to_dict(self) -> dict:
        return {"count": self.count, "config_hash": self.config_hash, "seeds": list(self.seeds),
                "mean": self.mean, "instance_mean": self.instance_mean,
                "per_category": self.per_category}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow([self.config_hash, self.count] + [self.mean[k] for k in METRIC_KEYS])
        return buf.getvalue()


def instance_errors(pred: Pose, gt: Pose, category: int, iou_resolution: int = 40):
    """(rotation error deg, translation error m, IoU) with symmetry handling."""
    sym = symmetry_for(category)
    r_err = rotation_error_deg(pred.R, gt.R, sym)
    t_err = float(np.linalg.norm(pred.t - gt.t))
    gt_box = gt
    if sym.symmetric:
        # turn the gt box about its axis to best match the prediction
        gt_box = Pose(closest_axis_rotation(pred.R, gt.R, sym.axis), gt.t, gt.s)
    iou = iou3d(pred, gt_box, resolution=iou_resolution)
    return r_err, t_err, iou


def _hits(r_err, t_err, iou) -> dict:
    out = {iou_key(th): float(iou >= th) for th in IOU_THRESHOLDS}
    for deg, cm in POSE_THRESHOLDS:
        out[pose_key(deg, cm)] = float(r_err <= deg and t_err <= cm / 100.0)
    return out


def _aggregate(cats: np.ndarray, hits: list[dict]) -> tuple[dict, dict, dict]:
    per_cat = {}
    for cid in sorted(set(cats.tolist())):
        rows = [h for c, h in zip(cats, hits) if c == cid]
        per_cat[CATEGORIES[cid]] = {k: 100.0 * float(np.mean([r[k] for r in rows]))
                                    for k in METRIC_KEYS}
    mean = {k: float(np.mean([v[k] for v in per_cat.values()])) for k in METRIC_KEYS}
    inst = {k: 100.0 * float(np.mean([h[k] for h in hits])) for k in METRIC_KEYS}
    return per_cat, mean, inst


def compute_metrics(preds: list, gts: list, config_hash: str = "", seeds=(),
                    iou_resolution: int = 40, failures=None) -> MetricsReport:
    """Precision at IoU and (degree, cm) thresholds, per category and averaged.

    ``gts`` holds ``(Pose, category)`` pairs.  A ``None`` prediction, or an
    index listed in ``failures``, counts as a miss everywhere.
    """
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions for {len(gts)} ground truths")
    failures = set(failures or ())
    hits = []
    for i, (pred, (gt, cat)) in enumerate(zip(preds, gts)):
        if pred is None or i in failures:
            hits.append({k: 0.0 for k in METRIC_KEYS})
        else:
            hits.append(_hits(*instance_errors(pred, gt, cat, iou_resolution)))
    cats = np.array([int(c) for _, c in gts])
    per_cat, mean, inst = _aggregate(cats, hits)
    rep = MetricsReport(per_cat, mean, inst, len(gts), config_hash, list(seeds))
    rep.check_invariants()
    return rep


def metrics_for(preds, data: list[Instance], **kw) -> MetricsReport:
    return compute_metrics(preds, [(d.pose, d.category) for d in data], **kw)


# ------------------------------------------------------------------ umeyama variant

def poses_from_world_coords(Q_pred: np.ndarray, P: np.ndarray):
    """Similarity fit P ~ scale R Q + t per instance; ``None`` marks a degenerate fit."""
    out = []
    for Q, Pc in zip(Q_pred, P):
        Q = np.asarray(Q, np.float64)
        try:
            R, t, scale = umeyama_solve(Q, np.asarray(Pc, np.float64))
        except (DegenerateConfiguration, np.linalg.LinAlgError):
            out.append(None)
            continue
        extents = Q.max(0) - Q.min(0)
        out.append(Pose(R, t, np.maximum(scale * extents, 1e-9)))
    return out


def umeyama_variant_eval(model, data: list[Instance], batch_size: int = 32, dtype=np.float32,
                         **kw) -> MetricsReport:
    """Score poses solved from predicted world coordinates instead of the pose heads."""
    preds = []
    with tc.precision(dtype):
        for i in range(0, len(data), batch_size):
            chunk = data[i:i + batch_size]
            P = np.stack([d.P for d in chunk]).astype(dtype)
            C = np.stack([d.C for d in chunk]).astype(dtype)
            preds.extend(poses_from_world_coords(model.predict_world_coords(P, C), P))
    failures = [i for i, p in enumerate(preds) if p is None]
    if failures:
        log.warning("umeyama fit degenerate for %d of %d instances", len(failures), len(preds))
    return metrics_for(preds, data, **kw)


# ------------------------------------------------------------------ ablations

MODULE_GRID = {
    "E1": {"ist": False, "ce": False, "we": False},
    "E2": {"ist": True, "ce": False, "we": False},
    "E3": {"ist": True, "ce": True, "we": False},
    "E4": {"ist": True, "ce": False, "we": True},
    "E5": {"ist": True, "ce": True, "we": True},
}
LAMBDA_F_GRID = {f"lambda_f={v}": {"lambda_f": float(v)} for v in (1, 3, 5, 10, 20, 50, 100)}
LOSS_TYPE_GRID = {"mse": {"feat_loss": "mse"}, "l1": {"feat_loss": "l1"}}
PE_GRID = {"pe_on": {"pe": True}, "pe_off": {"pe": False}}
GRIDS = {"modules": MODULE_GRID, "lambda_f": LAMBDA_F_GRID, "loss_type": LOSS_TYPE_GRID,
         "pe": PE_GRID}


def _mean_reports(reports: list[MetricsReport]) -> dict:
    return {k: float(np.mean([r.mean[k] for r in reports])) for k in METRIC_KEYS}


def ablation_runner(grid: dict, base_cfg, train_data: list[Instance], eval_data: list[Instance],
                    seeds=(0,), out_path=None, model_factory=None, evaluate=None) -> dict:
    """Train every grid entry on the same data with the same seeds.

    ``grid`` maps a configuration name to overrides of ``base_cfg``.  The
    returned report holds per-seed metrics, their mean and the pairwise
    deltas of those means.  When ``out_path`` is given the report is
    rewritten after each configuration finishes.
    """
    def data_crc(d):
        return zlib.crc32(snapshot_bytes(d))

    crc_train, crc_eval = data_crc(train_data), data_crc(eval_data)
    report = {"base_config_hash": base_cfg.config_hash, "seeds": list(seeds),
              "train_crc32": crc_train, "eval_crc32": crc_eval, "configs": {}, "deltas": {}}
    for name, overrides in grid.items():
        runs, hashes = {}, []
        for seed in seeds:
            cfg = base_cfg.with_overrides({**overrides, "seed": int(seed)})
            model = model_factory(cfg) if model_factory else None
            model, _, history = train(cfg, train_data, model=model)
            if data_crc(train_data) != crc_train:
                raise RuntimeError("training data changed during the ablation")
            if evaluate is not None:
                rep = evaluate(model, eval_data)
            else:
                rep = metrics_for(predict(model, eval_data), eval_data)
            rep.config_hash, rep.seeds = cfg.config_hash, [int(seed)]
            runs[int(seed)] = rep
            hashes.append(cfg.config_hash)
            log.info(json.dumps({"config": name, "seed": int(seed), "final_loss": history[-1],
                                 "mean": rep.mean}))
        report["configs"][name] = {"overrides": overrides, "config_hashes": hashes,
                                   "per_seed": {s: r.to_dict() for s, r in runs.items()},
                                   "mean": _mean_reports(list(runs.values()))}
        if out_path is not None:
            write_json(out_path, report)
    names = list(report["configs"])
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            ma, mb = report["configs"][a]["mean"], report["configs"][b]["mean"]
            report["deltas"][f"{b}-{a}"] = {k: mb[k] - ma[k] for k in METRIC_KEYS}
    if out_path is not None:
        write_json(out_path, report)
    return report


def write_json(path, doc) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
    os.replace(tmp, path)


# ------------------------------------------------------------------ speed

def _time_inference(model, P: np.ndarray, C: np.ndarray, batch_size: int) -> float:
    t0 = time.perf_counter()
    for i in range(0, len(P), batch_size):
        model.inference(P[i:i + batch_size], C[i:i + batch_size])
    return time.perf_counter() - t0


def speed_bench(models: dict, data: list[Instance], warmup: int = 1, iters: int = 5,
                batch_size: int = 16, dtype=np.float32) -> dict:
    """Inference throughput (instances/s, median of ``iters`` runs) and parameter counts.

    Runs of the different models are interleaved so slow drift of the
    machine affects all of them alike.
    """
    P = np.stack([d.P for d in data]).astype(dtype)
    C = np.stack([d.C for d in data]).astype(dtype)
    times = {name: [] for name in models}
    with tc.precision(dtype):
        for m in models.values():
            m.params.astype(dtype)
        for _ in range(warmup):
            for m in models.values():
                _time_inference(m, P, C, batch_size)
        for _ in range(iters):
            for name, m in models.items():
                times[name].append(_time_inference(m, P, C, batch_size))
    out = {}
    for name, m in models.items():
        tput = len(data) / np.asarray(times[name])
        out[name] = {"throughput": float(np.median(tput)),
                     "cv": float(np.std(tput) / np.mean(tput)),
                     "runs": tput.tolist(),
                     "params": count_params(m.cfg),
                     "config_hash": m.cfg.config_hash}
    return out
