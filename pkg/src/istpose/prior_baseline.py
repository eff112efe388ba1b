"""Compact shape-prior deformation baseline and the prior-replacement study.

A prior cloud is deformed by a predicted field ``D``; a soft matching matrix
``A`` maps every observed point onto the deformed prior, which yields
canonical coordinates for the observation.  Poses then come from a
similarity fit between those coordinates and the camera-space points.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .config import RunConfig
from .training import train
from .evalbench import write_json, metrics_for
from .geometry import DegenerateConfiguration, Pose, umeyama_solve
from .model import collate, init_estimator, pose_estimator, pose_loss
from .pointfeat import extract_features, init_feature_params, init_mlp, mlp
from .synthdata import CATEGORIES, Instance, category_id, generate_shape
from .tensor_core import ModelParams, Value

log = logging.getLogger(__name__)

PRIOR_MODES = ("category", "shared", "noise")
CASE_PRIOR = {"case1": "category", "case2": "shared", "case3": "noise", "case4": None}
SHARED_CATEGORY = "cylinder"  # the "can" analogue
LIBRARY_SEEDS = range(32)


@dataclass
class ShapePrior:
    points: np.ndarray  # (M, 3)
    provenance: str


@dataclass
class DeformOutputs:
    D: Value  # (B, M, 3)
    A: Value  # (B, N, M)
    recon: Value  # (B, M, 3) prior + D
    world: Value  # (B, N, 3) A @ recon


def build_prior(mode: str, category=None, shapes: list | None = None, n_points: int = 256,
                seed: int = 0) -> ShapePrior:
    """Category mean, a single shared category mean, or unit-cube noise."""
    if mode not in PRIOR_MODES:
        raise ValueError(f"unknown prior mode {mode!r}")
    if mode == "noise":
        rng = np.random.default_rng([seed, 4242])
        return ShapePrior(rng.uniform(-0.5, 0.5, (n_points, 3)), "unit-cube-noise")
    cid = category_id(SHARED_CATEGORY if mode == "shared" else category)
    if shapes is None:
        shapes = [generate_shape(cid, s, n_points) for s in LIBRARY_SEEDS]
    pts = np.mean([s.points for s in shapes if s.category == cid], axis=0)
    return ShapePrior(pts, "shared-category" if mode == "shared" else "category-mean")


def chamfer(X, Y: np.ndarray) -> Value:
    """Symmetric mean squared nearest-neighbour distance, batched (B, M, 3) vs (B, K, 3).

    Neighbour assignments are constants; gradients flow into ``X``.
    """
    X = tc.as_value(X)
    Y = np.asarray(Y)
    d = ((X.data[:, :, None, :] - Y[:, None, :, :]) ** 2).sum(-1)
    nn_xy = d.argmin(axis=2)  # (B, M)
    nn_yx = d.argmin(axis=1)  # (B, K)
    Y_near = np.take_along_axis(Y, nn_xy[..., None], axis=1)
    term1 = tc.mean(tc.sum_(tc.square(tc.sub(X, Y_near)), axis=-1))
    X_near = tc.reshape(tc.gather_rows(X, nn_yx[..., None]), Y.shape)
    term2 = tc.mean(tc.sum_(tc.square(tc.sub(X_near, Y)), axis=-1))
    return tc.add(term1, term2)


@dataclass
class DeformLosses:
    L_cd: Value
    L_corr: Value
    L_pose: Value
    total: Value

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).data) for k in ("L_cd", "L_corr", "L_pose", "total")}

    def identity_gap(self) -> float:
        want = (self.L_cd.data + self.L_corr.data) + self.L_pose.data
        return float(np.abs(np.float64(self.total.data) - np.float64(want)))


def deform_losses(out: DeformOutputs, canonical_model: np.ndarray, Q_gt: np.ndarray) -> Value:
    return tc.add(chamfer(out.recon, canonical_model), tc.smooth_l1(out.world, Q_gt))


class PriorNet:
    """Deformation pipeline for Cases 1-3, direct regression head for Case 4."""

    def __init__(self, cfg: RunConfig, params: ModelParams | None = None):
        self.cfg = cfg
        self.case = cfg.prior_case
        self.mode = CASE_PRIOR[self.case]
        self.m = cfg.n_prior or cfg.n_points
        if self.mode is not None:
            self.priors = {cid: build_prior(self.mode, cid, n_points=self.m, seed=cfg.seed).points
                           for cid in range(len(CATEGORIES))}
        if params is None:
            params = ModelParams(config_hash=cfg.arch_hash)
            self._init_params(params, np.random.default_rng(cfg.seed))
        self.params = params

    def _init_params(self, params, rng) -> None:
        c = self.cfg
        d, h = c.d, c.hidden
        init_feature_params(params, rng, d, d, use_pe=c.pe)
        cam = d * (3 if c.pe else 2)
        if self.mode is None:
            init_estimator(params, rng, "head", cam, h)
            return
        init_mlp(params, rng, "obs", [cam, h, d])
        init_mlp(params, rng, "prior_enc", [3, d, d])
        init_mlp(params, rng, "deform", [2 * d, h, 3], zero_last=True)
        init_mlp(params, rng, "match", [2 * d, h, d])

    # ---------------------------------------------------------------- paths

    def collate(self, instances: list[Instance], dtype=None) -> dict:
        b = collate(instances, dtype)
        if self.mode is not None:
            b["prior"] = np.stack([self.priors[i.category] for i in instances]).astype(b["P"].dtype)
            b["model"] = np.stack([generate_shape(i.category, i.shape_seed, self.m).points
                                   for i in instances]).astype(b["P"].dtype) \
                if all(i.shape_seed >= 0 for i in instances) else None
        return b

    def deform_forward(self, feats, prior: np.ndarray) -> DeformOutputs:
        obs = mlp(self.params, "obs", tc.concat(feats.camera_inputs()), 2)  # (B, N, d)
        B, N, d = obs.shape
        M = prior.shape[1]
        glob = tc.broadcast_rows(tc.mean_rows(obs), M)
        enc = mlp(self.params, "prior_enc", prior, 2, final_relu=True)  # (B, M, d)
        both = tc.concat([enc, glob])
        D = mlp(self.params, "deform", both, 2)
        key = mlp(self.params, "match", both, 2)  # (B, M, d)
        logits = tc.scale(tc.matmul(obs, tc.transpose(key)), 1.0 / np.sqrt(d))
        A = tc.softmax(logits)
        recon = tc.add(D, prior)
        return DeformOutputs(D, A, recon, tc.matmul(A, recon))

    def features(self, batch):
        return extract_features(batch["P"], batch["C"], self.params, k=self.cfg.k, use_pe=self.cfg.pe)

    def losses(self, batch) -> DeformLosses:
        feats = self.features(batch)
        zero = tc.Value(0.0)
        args = (batch["R"], batch["t"], batch["s"], batch["category"])
        if self.mode is None:
            L_pose = pose_loss(pose_estimator(self.params, "head", feats.camera_inputs(),
                                              feats.centroid), *args)
            return DeformLosses(zero, zero, L_pose, L_pose)
        out = self.deform_forward(feats, batch["prior"])
        if batch.get("model") is None:
            raise ValueError("the deformation baseline needs canonical models for supervision")
        L_cd = chamfer(out.recon, batch["model"])
        L_corr = tc.smooth_l1(out.world, batch["Q"])
        return DeformLosses(L_cd, L_corr, zero, tc.add(L_cd, L_corr))

    def predict(self, instances: list[Instance], batch_size: int = 32, dtype=np.float32):
        """Poses (None for degenerate fits) for every instance, in order."""
        preds = []
        with tc.precision(dtype):
            for i in range(0, len(instances), batch_size):
                chunk = instances[i:i + batch_size]
                b = self.collate(chunk, dtype)
                feats = self.features(b)
                if self.mode is None:
                    est = pose_estimator(self.params, "head", feats.camera_inputs(), feats.centroid)
                    preds.extend(est.poses())
                    continue
                out = self.deform_forward(feats, b["prior"])
                for j in range(len(chunk)):
                    preds.append(pose_from_correspondences(out.world.data[j], b["P"][j],
                                                           out.recon.data[j]))
        return preds


def pose_from_correspondences(world: np.ndarray, P: np.ndarray, model: np.ndarray | None = None):
    """Similarity fit camera = scale R world + t; size from the model's tight box."""
    try:
        R, t, scale = umeyama_solve(np.asarray(world, np.float64), np.asarray(P, np.float64))
    except (DegenerateConfiguration, np.linalg.LinAlgError):
        return None
    ref = np.asarray(model if model is not None else world, np.float64)
    extents = ref.max(0) - ref.min(0)
    return Pose(R, t, np.maximum(scale * extents, 1e-6))


CASE_LABELS = {"case1": "category prior", "case2": "shared prior", "case3": "unit-cube noise prior",
               "case4": "no deformation (direct pose head on camera features)"}


def prior_case_study(cases, train_cfg: RunConfig, seeds, train_data: list[Instance],
                     eval_data: list[Instance], out_path=None) -> dict:
    """Train each case with identical data, seeds and schedule; report metrics per case.

    The report maps case -> metric -> {"per_seed": {seed: value}, "mean": value},
    with the run bookkeeping kept under "meta".
    """
    report = {"meta": {"seeds": [int(s) for s in seeds], "labels": {}, "config_hashes": {}}}
    for case in cases:
        if case not in CASE_PRIOR:
            raise ValueError(f"unknown case {case!r}")
        reps = {}
        hashes = []
        for seed in seeds:
            cfg = train_cfg.with_overrides({"variant": "prior-case", "prior_case": case,
                                            "seed": int(seed)})
            model, _, _ = train(cfg, train_data, model=PriorNet(cfg))
            reps[int(seed)] = metrics_for(model.predict(eval_data), eval_data,
                                          config_hash=cfg.config_hash, seeds=[int(seed)])
            hashes.append(cfg.config_hash)
            log.info(json.dumps({"case": case, "seed": int(seed), "mean": reps[int(seed)].mean}))
        report[case] = {k: {"per_seed": {s: r.mean[k] for s, r in reps.items()},
                            "mean": float(np.mean([r.mean[k] for r in reps.values()]))}
                        for k in reps[int(seeds[0])].mean}
        report["meta"]["labels"][case] = CASE_LABELS[case]
        report["meta"]["config_hashes"][case] = hashes
        if out_path is not None:
            write_json(out_path, report)
    return report
