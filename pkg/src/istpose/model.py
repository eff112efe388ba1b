"""Implicit space transformation network, its enhancers and the explicit variant.

Batches are dicts of numpy arrays with a leading batch axis:
``P``, ``C``, ``Q`` (B, N, 3), ``R`` (B, 3, 3), ``t``, ``s`` (B, 3) and
``category`` (B,).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .config import RunConfig
from .geometry import Pose, closest_axis_rotation
from .pointfeat import (FeatureSet, center_points, extract_features, extract_geom_features,
                        init_feature_params, init_geom_extractor, init_mlp, init_point_encoder,
                        mlp, positional_encoding)
from .synthdata import Instance, symmetry_for
from .tensor_core import ModelParams, Value


class TrainingOnly(RuntimeError):
    pass


@dataclass
class IstOutputs:
    F_L: Value  # (B, N, d)
    F_G: Value  # (B, 1, d)
    F_world: Value  # (B, N, d)
    Q_pred: Value  # (B, N, 3)


@dataclass
class PoseEstimate:
    R: Value  # (B, 3, 3)
    t: Value  # (B, 3)
    s: Value  # (B, 3)

    def poses(self) -> list[Pose]:
        return [Pose(R, t, s) for R, t, s in zip(self.R.data, self.t.data, self.s.data)]


@dataclass
class LossBreakdown:
    L_main: Value
    L_aux1: Value
    L_aux2: Value
    L_feat: Value
    L_rec: Value
    total: Value
    lambda_f: float
    lambda_r: float

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).data) for k in
                ("L_main", "L_aux1", "L_aux2", "L_feat", "L_rec", "total")}

    def identity_gap(self) -> float:
        """|total - weighted sum|, with the sum redone outside the graph.

        The arithmetic repeats the graph's dtype and order of operations, so
        a correct graph gives exactly zero even in float32.
        """
        v = [getattr(self, k).data for k in ("L_main", "L_aux1", "L_aux2", "L_feat", "L_rec")]
        want = ((v[0] + v[1]) + v[2]) + (v[3] * self.lambda_f + v[4] * self.lambda_r)
        return float(np.abs(np.float64(self.total.data) - np.float64(want)))


# ------------------------------------------------------------------ batches

def collate(instances: list[Instance], dtype=None) -> dict:
    dtype = dtype or tc.get_dtype()
    return {
        "P": np.stack([i.P for i in instances]).astype(dtype),
        "C": np.stack([i.C for i in instances]).astype(dtype),
        "Q": np.stack([i.Q for i in instances]).astype(dtype),
        "R": np.stack([i.pose.R for i in instances]).astype(np.float64),
        "t": np.stack([i.pose.t for i in instances]).astype(dtype),
        "s": np.stack([i.pose.s for i in instances]).astype(dtype),
        "category": np.array([i.category for i in instances]),
    }


# ------------------------------------------------------------------ building blocks

def rotation_from_sixd(v: Value) -> Value:
    """Differentiable Gram-Schmidt, (B, 6) -> (B, 3, 3) with the vectors as columns."""
    B = v.shape[0]
    a, b = v[:, 0:3], v[:, 3:6]
    c1 = tc.div(a, tc.reshape(tc.norm(a), (B, 1)))
    proj = tc.sum_(tc.mul(c1, b), axis=-1, keepdims=True)
    r = tc.sub(b, tc.mul(proj, c1))
    c2 = tc.div(r, tc.reshape(tc.norm(r), (B, 1)))
    c3 = _cross(c1, c2)
    cols = [tc.reshape(c, (B, 3, 1)) for c in (c1, c2, c3)]
    return tc.concat(cols, axis=-1)


def _cross(a: Value, b: Value) -> Value:
    ax, ay, az = a[:, 0:1], a[:, 1:2], a[:, 2:3]
    bx, by, bz = b[:, 0:1], b[:, 1:2], b[:, 2:3]
    return tc.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx])


def init_estimator(params, rng, name, in_dim: int, hidden: int) -> None:
    init_mlp(params, rng, f"{name}.fuse", [in_dim, hidden, hidden])
    init_mlp(params, rng, f"{name}.compress", [2 * hidden, hidden, hidden])
    half = max(hidden // 2, 4)
    init_mlp(params, rng, f"{name}.R", [hidden, half, 6])
    init_mlp(params, rng, f"{name}.t", [hidden, half, 3])
    init_mlp(params, rng, f"{name}.s", [hidden, half, 3])
    # bias the 6D head towards the identity so Gram-Schmidt starts well conditioned
    params[f"{name}.R.1.b"].data[:] = [1, 0, 0, 0, 1, 0]


def pose_estimator(params, name, inputs: list[Value], centroid: np.ndarray) -> PoseEstimate:
    """Concat -> MLP -> avg pool -> [local, global] -> MLP + pool -> R/t/s heads."""
    x = tc.concat(inputs) if len(inputs) > 1 else inputs[0]
    B, N, _ = x.shape
    local = mlp(params, f"{name}.fuse", x, 2, final_relu=True)
    glob = tc.broadcast_rows(tc.mean_rows(local), N)
    comp = mlp(params, f"{name}.compress", tc.concat([local, glob]), 2, final_relu=True)
    pooled = tc.reshape(tc.mean_rows(comp), (B, comp.shape[-1]))
    R = rotation_from_sixd(mlp(params, f"{name}.R", pooled, 2))
    t = tc.add(mlp(params, f"{name}.t", pooled, 2), centroid.reshape(B, 3))
    s = tc.softplus(mlp(params, f"{name}.s", pooled, 2))
    return PoseEstimate(R, t, s)


# ------------------------------------------------------------------ IST

def init_ist(params, rng, in_dim: int, d: int, hidden: int) -> None:
    init_mlp(params, rng, "ist.local", [in_dim, hidden, d])
    init_mlp(params, rng, "ist.world", [2 * d, hidden, d])
    init_mlp(params, rng, "ist.rec", [d, d, 3])


def ist_forward(feats: FeatureSet, params: ModelParams) -> IstOutputs:
    """F_L = MLP([F_geom, F_app, F_pos]); F_G = avgpool(F_L); F_world = MLP([F_L, F_G])."""
    inputs = feats.camera_inputs()
    n = inputs[0].shape[-2]
    for f in inputs[1:]:
        if f.shape[:-1] != inputs[0].shape[:-1]:
            raise tc.ShapeMismatch(f"feature rows differ: {f.shape} vs {inputs[0].shape}")
    F_L = mlp(params, "ist.local", tc.concat(inputs), 2, final_relu=True)
    F_G = tc.mean_rows(F_L)
    F_world = mlp(params, "ist.world", tc.concat([F_L, tc.broadcast_rows(F_G, n)]), 2)
    Q_pred = mlp(params, "ist.rec", F_world, 2)
    return IstOutputs(F_L, F_G, F_world, Q_pred)


def rec_loss(Q_pred, Q_gt) -> Value:
    return tc.smooth_l1(Q_pred, Q_gt)


# ------------------------------------------------------------------ losses

def pose_loss(est: PoseEstimate, R_gt: np.ndarray, t_gt: np.ndarray, s_gt: np.ndarray,
              categories) -> Value:
    """Mean over the batch of |R - R*|_F + |t - t*| + |s - s*|.

    For continuously symmetric categories R* is the ground-truth rotation
    turned about its symmetry axis to be closest to the prediction.
    """
    R_pred = est.R.data
    R_tgt = np.array(R_gt, dtype=np.float64, copy=True)
    for i, cat in enumerate(np.asarray(categories).reshape(-1)):
        sym = symmetry_for(int(cat))
        if sym.symmetric:
            R_tgt[i] = closest_axis_rotation(R_pred[i], R_tgt[i], sym.axis)
    r_term = tc.sqrt(tc.sum_(tc.square(tc.sub(est.R, R_tgt)), axis=(-2, -1)))
    t_term = tc.norm(tc.sub(est.t, t_gt))
    s_term = tc.norm(tc.sub(est.s, s_gt))
    return tc.mean(tc.add(tc.add(r_term, t_term), s_term))


def total_loss(L_main, L_aux1, L_aux2, L_feat, L_rec, lambda_f: float = 10.0,
               lambda_r: float = 1.0) -> LossBreakdown:
    parts = [tc.as_value(x) for x in (L_main, L_aux1, L_aux2, L_feat, L_rec)]
    total = tc.add(tc.add(tc.add(parts[0], parts[1]), parts[2]),
                   tc.add(tc.scale(parts[3], lambda_f), tc.scale(parts[4], lambda_r)))
    return LossBreakdown(*parts, total=total, lambda_f=lambda_f, lambda_r=lambda_r)


# ------------------------------------------------------------------ model

class ISTNet:
    """Parameters plus the forward paths selected by a RunConfig."""

    def __init__(self, cfg: RunConfig, params: ModelParams | None = None):
        self.cfg = cfg
        if params is None:
            params = ModelParams(config_hash=cfg.arch_hash)
            self._init_params(params, np.random.default_rng(cfg.seed))
        self.params = params

    # widths of the camera-side inputs
    @property
    def _cam_dim(self) -> int:
        return self.cfg.d * (3 if self.cfg.pe else 2)

    def _init_params(self, params, rng) -> None:
        c = self.cfg
        d, h = c.d, c.hidden
        init_feature_params(params, rng, d, d, use_pe=c.pe)
        if c.variant == "explicit":
            init_estimator(params, rng, "inter", self._cam_dim, h)
            init_geom_extractor(params, rng, "xgeom", d, d)
            init_point_encoder(params, rng, "wpos", d)
            init_estimator(params, rng, "main", self._cam_dim + 2 * d, h)
            return
        if c.ist:
            init_ist(params, rng, self._cam_dim, d, h)
            init_point_encoder(params, rng, "wpos", d)
            init_estimator(params, rng, "main", self._cam_dim + 2 * d, h)
        else:
            init_estimator(params, rng, "main", self._cam_dim, h)
        if c.ce:
            init_estimator(params, rng, "aux1", self._cam_dim, h)
        if c.we and c.ist:
            init_geom_extractor(params, rng, "wgeom", d, d)
            init_point_encoder(params, rng, "wpos2", d)
            init_estimator(params, rng, "aux2", self._cam_dim + 2 * d, h)

    # -------------------------------------------------------------- paths

    def collate(self, instances: list[Instance], dtype=None) -> dict:
        return collate(instances, dtype)

    def features(self, batch) -> FeatureSet:
        return extract_features(batch["P"], batch["C"], self.params, k=self.cfg.k,
                                use_pe=self.cfg.pe)

    def main_estimator(self, feats: FeatureSet, ist: IstOutputs | None) -> PoseEstimate:
        inputs = feats.camera_inputs()
        if ist is not None:
            inputs = inputs + [ist.F_world, positional_encoding(ist.Q_pred, self.params, "wpos")]
        return pose_estimator(self.params, "main", inputs, feats.centroid)

    def camera_enhancer(self, feats: FeatureSet, training: bool = True) -> PoseEstimate:
        if not training:
            raise TrainingOnly("camera enhancer runs only during training")
        return pose_estimator(self.params, "aux1", feats.camera_inputs(), feats.centroid)

    def world_enhancer(self, Q_gt: np.ndarray, feats: FeatureSet, ist: IstOutputs,
                       training: bool = True):
        """Returns (F_Qo, L_feat, aux2 estimate); F_Qo is a stop-gradient target for L_feat."""
        if not training:
            raise TrainingOnly("world enhancer runs only during training")
        Qc, _ = center_points(Q_gt)
        F_Qo = extract_geom_features(Qc, self.params, "wgeom", k=self.cfg.k)
        target = F_Qo.detach()
        if self.cfg.feat_loss == "mse":
            L_feat = tc.mse(ist.F_world, target)
        else:
            L_feat = tc.l1(ist.F_world, target)
        # camera features enter as constants so this head trains only its own extractor
        cam = [f.detach() for f in feats.camera_inputs()]
        inputs = cam + [F_Qo, positional_encoding(Q_gt, self.params, "wpos2")]
        est = pose_estimator(self.params, "aux2", inputs, feats.centroid)
        return F_Qo, L_feat, est

    def explicit_forward(self, feats: FeatureSet, P: np.ndarray):
        """Returns (final estimate, intermediate estimate, explicit world coordinates)."""
        inter = pose_estimator(self.params, "inter", feats.camera_inputs(), feats.centroid)
        Q_tilde = explicit_world_coords(P, inter)
        Qc = tc.sub(Q_tilde, tc.mean_rows(Q_tilde))
        F_Q = extract_geom_features(Qc, self.params, "xgeom", k=self.cfg.k)
        inputs = feats.camera_inputs() + [F_Q, positional_encoding(Q_tilde, self.params, "wpos")]
        est = pose_estimator(self.params, "main", inputs, feats.centroid)
        return est, inter, Q_tilde

    def forward_main(self, batch) -> tuple[PoseEstimate, IstOutputs | None, FeatureSet]:
        feats = self.features(batch)
        if self.cfg.variant == "explicit":
            est, _, _ = self.explicit_forward(feats, batch["P"])
            return est, None, feats
        ist = ist_forward(feats, self.params) if self.cfg.ist else None
        return self.main_estimator(feats, ist), ist, feats

    def inference(self, P: np.ndarray, C: np.ndarray) -> PoseEstimate:
        """Pose from observations only; enhancers are never evaluated."""
        est, _, _ = self.forward_main({"P": P, "C": C})
        return est

    def predict_world_coords(self, P: np.ndarray, C: np.ndarray) -> np.ndarray:
        feats = extract_features(P, C, self.params, k=self.cfg.k, use_pe=self.cfg.pe)
        if self.cfg.variant == "explicit":
            return self.explicit_forward(feats, P)[2].data
        if not self.cfg.ist:
            raise ValueError("model has no world-coordinate head (IST disabled)")
        return ist_forward(feats, self.params).Q_pred.data

    def losses(self, batch) -> LossBreakdown:
        c = self.cfg
        zero = tc.Value(0.0)
        feats = self.features(batch)
        args = (batch["R"], batch["t"], batch["s"], batch["category"])
        if c.variant == "explicit":
            est, inter, _ = self.explicit_forward(feats, batch["P"])
            return total_loss(pose_loss(est, *args), pose_loss(inter, *args), zero, zero, zero,
                              0.0, 0.0)
        ist = ist_forward(feats, self.params) if c.ist else None
        L_main = pose_loss(self.main_estimator(feats, ist), *args)
        L_aux1 = pose_loss(self.camera_enhancer(feats), *args) if c.ce else zero
        L_aux2 = L_feat = L_rec = zero
        if ist is not None:
            L_rec = rec_loss(ist.Q_pred, batch["Q"])
            if c.we:
                _, L_feat, est2 = self.world_enhancer(batch["Q"], feats, ist)
                L_aux2 = pose_loss(est2, *args)
        lf = c.lambda_f if (ist is not None and c.we) else 0.0
        lr = c.lambda_r if ist is not None else 0.0
        return total_loss(L_main, L_aux1, L_aux2, L_feat, L_rec, lf, lr)


def explicit_world_coords(P: np.ndarray, est: PoseEstimate) -> Value:
    """Differentiable Gamma with a predicted pose: R^T (P - t) / |s|."""
    B = P.shape[0]
    diff = tc.sub(P, tc.reshape(est.t, (B, 1, 3)))
    rotated = tc.matmul(diff, est.R)
    return tc.div(rotated, tc.reshape(tc.norm(est.s), (B, 1, 1)))


def count_params(cfg: RunConfig, inference_only: bool = True) -> int:
    """Learnable parameters; with ``inference_only`` training-only heads are excluded."""
    net = ISTNet(cfg)
    skip = ("aux1.", "aux2.", "wgeom.", "wpos2.") if inference_only else ()
    return sum(v.data.size for k, v in net.params if not k.startswith(skip))
