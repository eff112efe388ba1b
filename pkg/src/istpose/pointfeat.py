"""Camera-space point features: local geometry, position and appearance.

The geometric extractor is a single-scale kNN aggregation: a shared per-point
MLP, neighbour grouping with relative offsets, a local max-pool and a fusing
MLP.  It is applied to centred clouds, so it sees shape but not location.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import ModelParams, Value


class TooFewPoints(ValueError):
    pass


# ------------------------------------------------------------------ layers

def init_linear(params: ModelParams, rng: np.random.Generator, name: str,
                fan_in: int, fan_out: int, zero: bool = False) -> None:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = np.zeros((fan_in, fan_out)) if zero else rng.uniform(-limit, limit, (fan_in, fan_out))
    params.add(f"{name}.W", w)
    params.add(f"{name}.b", np.zeros(fan_out))


def linear(params: ModelParams, name: str, x) -> Value:
    return tc.add(tc.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def init_mlp(params, rng, name, sizes, zero_last: bool = False) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_linear(params, rng, f"{name}.{i}", a, b,
                    zero=zero_last and i == len(sizes) - 2)


def mlp(params, name, x, n_layers: int, final_relu: bool = False) -> Value:
    for i in range(n_layers):
        x = linear(params, f"{name}.{i}", x)
        if i < n_layers - 1 or final_relu:
            x = tc.relu(x)
    return x


# ------------------------------------------------------------------ features

@dataclass
class FeatureSet:
    F_geom: Value | None  # (B, N, d)
    F_app: Value | None
    F_pos: Value | None
    centroid: np.ndarray  # (B, 1, 3)

    def camera_inputs(self) -> list[Value]:
        return [f for f in (self.F_geom, self.F_app, self.F_pos) if f is not None]


def center_points(P: np.ndarray):
    """Subtract the per-cloud mean; works on (N, 3) or (B, N, 3)."""
    P = np.asarray(P)
    centroid = P.mean(axis=-2, keepdims=True)
    return P - centroid, centroid


def knn_indices(P: np.ndarray, k: int) -> np.ndarray:
    """(B, N, 3) -> (B, N, k) indices of the k nearest points (self included)."""
    sq = (P * P).sum(-1)
    d = sq[:, :, None] + sq[:, None, :] - 2.0 * P @ np.swapaxes(P, 1, 2)
    k = min(k, P.shape[1])
    return np.argpartition(d, k - 1, axis=-1)[..., :k]


def init_geom_extractor(params, rng, name, d: int, hidden: int) -> None:
    init_mlp(params, rng, f"{name}.point", [3, hidden, hidden])
    init_linear(params, rng, f"{name}.local", hidden + 3, hidden)
    init_mlp(params, rng, f"{name}.fuse", [2 * hidden, d, d])


def extract_geom_features(P_centered, params: ModelParams, name: str = "geom",
                          k: int = 8, min_points: int = 16) -> Value:
    """Per-point local-geometry features, (B, N, 3) -> (B, N, d).

    ``P_centered`` may be a Value so gradients reach the coordinates.
    """
    Pv = tc.as_value(P_centered)
    squeeze = Pv.ndim == 2
    if squeeze:
        Pv = tc.reshape(Pv, (1,) + Pv.shape)
    B, N, _ = Pv.shape
    if N < min_points:
        raise TooFewPoints(f"need at least {min_points} points, got {N}")
    idx = knn_indices(Pv.data, k)
    h = mlp(params, f"{name}.point", Pv, 2, final_relu=True)
    offsets = tc.sub(tc.gather_rows(Pv, idx), tc.reshape(Pv, (B, N, 1, 3)))
    grouped = tc.concat([tc.gather_rows(h, idx), offsets])
    local = tc.relu(linear(params, f"{name}.local", grouped))
    local = tc.reshape(tc.max_rows(local), (B, N, local.shape[-1]))
    out = mlp(params, f"{name}.fuse", tc.concat([h, local]), 2)
    return tc.reshape(out, (N, out.shape[-1])) if squeeze else out


def init_point_encoder(params, rng, name, d: int, zero_last: bool = False) -> None:
    init_mlp(params, rng, name, [3, d, d], zero_last=zero_last)


def positional_encoding(P, params: ModelParams, name: str = "pos") -> Value:
    """Row-wise MLP 3 -> d -> d on raw coordinates."""
    return mlp(params, name, P, 2)


def appearance_features(C, params: ModelParams, name: str = "app") -> Value:
    return mlp(params, name, C, 2)


def init_feature_params(params, rng, d: int, hidden: int, use_pe: bool = True) -> None:
    init_geom_extractor(params, rng, "geom", d, hidden)
    init_point_encoder(params, rng, "app", d)
    if use_pe:
        init_point_encoder(params, rng, "pos", d)


def extract_features(P: np.ndarray, C: np.ndarray, params: ModelParams, k: int = 8,
                     use_pe: bool = True) -> FeatureSet:
    """Camera-space FeatureSet for a batch (B, N, 3)."""
    Pc, centroid = center_points(P)
    return FeatureSet(
        F_geom=extract_geom_features(Pc, params, "geom", k=k),
        F_app=appearance_features(C, params, "app"),
        F_pos=positional_encoding(P, params, "pos") if use_pe else None,
        centroid=centroid,
    )
