"""Procedural category shapes, posed partial observations and augmentations.

Shapes are sampled from a fixed per-category parameter set, so point ``i`` of
any two shapes of one category refers to the same surface parameter.  Only
the proportions depend on ``shape_seed``.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError
from .geometry import Pose, axis_angle, camera_from_canonical, gamma_world_coords, random_rotation

CATEGORIES = ("box", "cylinder", "bowl", "mug")
CATEGORY_IDS = {name: i for i, name in enumerate(CATEGORIES)}
SYMMETRIC_CATEGORIES = ("cylinder", "bowl")


class UnknownCategory(ValueError):
    pass


class InsufficientVisiblePoints(RuntimeError):
    pass


class IoFailure(OSError):
    pass


class FormatVersionMismatch(ValueError):
    pass


class ChecksumMismatch(ValueError):
    pass


def category_id(category) -> int:
    if isinstance(category, (int, np.integer)):
        if 0 <= int(category) < len(CATEGORIES):
            return int(category)
    elif category in CATEGORY_IDS:
        return CATEGORY_IDS[category]
    raise UnknownCategory(f"unknown category {category!r}")


def symmetry_for(category):
    from .geometry import SymmetrySpec

    cid = category_id(category)
    if CATEGORIES[cid] in SYMMETRIC_CATEGORIES:
        return SymmetrySpec(cid, "continuous-axis", (0.0, 1.0, 0.0))
    return SymmetrySpec(cid)


@dataclass
class CanonicalShape:
    category: int
    shape_seed: int
    points: np.ndarray  # (M, 3), unit tight-box diagonal, centred
    extents: np.ndarray  # (3,) tight box side lengths, norm 1


# ------------------------------------------------------------------ shapes

def _surface_params(cid: int, m: int) -> dict:
    """Seed-independent sampling parameters for category ``cid``."""
    rng = np.random.default_rng(7919 + cid)
    u, v, w = rng.random(m), rng.random(m), rng.random(m)
    return {"u": u, "v": v, "w": w, "part": rng.random(m)}


def _box(dims, p):
    m = len(p["u"])
    face = np.arange(m) % 6
    axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
    pts = np.empty((m, 3))
    uv = np.stack([p["u"], p["v"]], 1) - 0.5
    for ax in range(3):
        sel = axis == ax
        others = [a for a in range(3) if a != ax]
        pts[sel, ax] = sign[sel] * 0.5
        pts[np.ix_(sel, others)] = uv[sel]
    return pts * dims


def _cylinder(r, h, p, theta_fix=True):
    m = len(p["u"])
    theta = 2 * np.pi * p["u"]
    if theta_fix:
        theta[:4] = np.arange(4) * np.pi / 2
    side = p["part"] < 0.7
    side[:4] = True
    rho = np.where(side, r, r * np.sqrt(p["v"]))
    y = np.where(side, h * p["v"], np.where(p["w"] < 0.5, 0.0, h))
    y[:2] = (0.0, h)
    return np.stack([rho * np.cos(theta), y, rho * np.sin(theta)], 1)


def _bowl(r, h, p):
    theta = 2 * np.pi * p["u"]
    phi = np.arccos(1 - p["v"])  # area-ish uniform on the lower half shell
    inner = p["part"] < 0.35
    k = np.where(inner, 0.88, 1.0)
    theta[:4] = np.arange(4) * np.pi / 2
    phi[:4] = np.pi / 2
    phi[4] = 0.0
    inner[:5] = False
    k[:5] = 1.0
    x = k * r * np.sin(phi) * np.cos(theta)
    z = k * r * np.sin(phi) * np.sin(theta)
    y = h - k * h * np.cos(phi)
    return np.stack([x, y, z], 1)


def _mug(r, h, hr, p):
    m = len(p["u"])
    body = p["part"] < 0.8
    body[:8] = True
    pts = _cylinder(r, h, p)
    tube = 0.06 * h
    alpha = np.pi * (p["u"] - 0.5)  # handle arc on the +x side
    beta = 2 * np.pi * p["v"]
    alpha[8], beta[8] = 0.0, 0.0  # outermost handle point for a tight box
    ring = hr + tube * np.cos(beta)
    handle = np.stack([r + ring * np.cos(alpha), h / 2 + ring * np.sin(alpha), tube * np.sin(beta)], 1)
    pts = np.where(body[:, None], pts, handle)
    pts[8] = handle[8]
    return pts


def generate_shape(category, shape_seed: int, n_points: int = 1024) -> CanonicalShape:
    """Deterministic canonical cloud for ``(category, shape_seed)``."""
    cid = category_id(category)
    rng = np.random.default_rng([cid, int(shape_seed)])
    p = _surface_params(cid, n_points)
    name = CATEGORIES[cid]
    if name == "box":
        pts = _box(rng.uniform(0.5, 1.5, 3), p)
    elif name == "cylinder":
        pts = _cylinder(rng.uniform(0.15, 0.35), rng.uniform(0.5, 1.2), p)
    elif name == "bowl":
        pts = _bowl(rng.uniform(0.4, 0.6), rng.uniform(0.2, 0.45), p)
    else:
        h = rng.uniform(0.6, 1.0)
        pts = _mug(rng.uniform(0.25, 0.4), h, rng.uniform(0.25, 0.4) * h, p)
    lo, hi = pts.min(0), pts.max(0)
    diag = np.linalg.norm(hi - lo)
    pts = (pts - (lo + hi) / 2) / diag
    return CanonicalShape(cid, int(shape_seed), pts, (hi - lo) / diag)


def appearance(Q: np.ndarray) -> np.ndarray:
    """Pose-free per-point colour in [0, 1] from canonical position."""
    mix = np.array([[1.0, 0.35, -0.25], [-0.3, 1.0, 0.3], [0.25, -0.3, 1.0]])
    return 0.5 + 0.5 * np.sin(np.pi * np.asarray(Q) @ mix)


# ------------------------------------------------------------------ instances

@dataclass
class GenConfig:
    categories: list = field(default_factory=lambda: list(CATEGORIES))
    n_points: int = 256
    noise_sigma: float = 0.002
    partial: bool = True
    count: int = 2000
    seed: int = 0
    n_model_points: int = 1024
    size_range: tuple = (0.1, 0.5)
    workspace: tuple = ((-0.25, 0.25), (-0.25, 0.25), (0.6, 1.2))
    # largest rotation angle from the canonical frame; 180 spans all of SO(3)
    max_rotation_deg: float = 180.0
    n_shapes: int = 0  # 0: a fresh shape per instance, else a fixed pool per category

    def __post_init__(self):
        for c in self.categories:
            try:
                category_id(c)
            except UnknownCategory as exc:
                raise ConfigError("categories", str(exc)) from exc
        if self.n_points < 1:
            raise ConfigError("n_points", "must be positive")
        if self.count < 0:
            raise ConfigError("count", "must be non-negative")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma", "must be non-negative")
        if not 0 <= self.max_rotation_deg <= 180:
            raise ConfigError("max_rotation_deg", "must lie in [0, 180]")

    @classmethod
    def from_json(cls, doc: dict | str) -> "GenConfig":
        if isinstance(doc, str):
            doc = json.loads(doc)
        extra = set(doc) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown generation config key")
        return cls(**doc)

    def to_json(self) -> dict:
        d = asdict(self)
        d["size_range"] = list(self.size_range)
        d["workspace"] = [list(w) for w in self.workspace]
        return d


@dataclass
class Instance:
    P: np.ndarray  # (N, 3) camera-space observation
    C: np.ndarray  # (N, 3) appearance
    pose: Pose
    category: int
    Q: np.ndarray  # (N, 3) ground-truth canonical coordinates of P
    shape_seed: int = -1

    @property
    def n_points(self) -> int:
        return self.P.shape[0]

    def copy(self) -> "Instance":
        return Instance(self.P.copy(), self.C.copy(), self.pose.copy(), self.category,
                        self.Q.copy(), self.shape_seed)


def visible_mask(points: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Points whose radial direction faces ``view_dir`` (half-space culling)."""
    return np.asarray(points) @ np.asarray(view_dir) >= 0.0


def _restricted_rotation(rng, max_deg: float) -> np.ndarray:
    if max_deg >= 180.0:
        return random_rotation(rng)
    axis = rng.standard_normal(3)
    # uniform-in-angle draw within the cap; enough for a benchmark knob
    return axis_angle(axis, np.radians(max_deg) * rng.random())


def sample_instance(shape: CanonicalShape, rng: np.random.Generator, cfg: GenConfig) -> Instance:
    R = _restricted_rotation(rng, cfg.max_rotation_deg)
    norm_s = rng.uniform(*cfg.size_range)
    t = np.array([rng.uniform(*w) for w in cfg.workspace])
    pose = Pose(R, t, norm_s * shape.extents)
    model = shape.points
    if cfg.partial:
        view = R.T @ (-t) / np.linalg.norm(t)
        keep = np.flatnonzero(visible_mask(model, view))
        if len(keep) < cfg.n_points / 4:
            raise InsufficientVisiblePoints(f"{len(keep)} visible points for N_o={cfg.n_points}")
    else:
        keep = np.arange(len(model))
    idx = rng.choice(keep, cfg.n_points, replace=len(keep) < cfg.n_points)
    Q_clean = model[idx]
    P = camera_from_canonical(Q_clean, pose)
    if cfg.noise_sigma > 0:
        # isotropic noise with its length capped at 3 sigma, so every canonical
        # coordinate stays within 3 sigma / |s| of the clean shape
        n = rng.standard_normal(P.shape)
        n *= np.minimum(1.0, 3.0 / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12))
        P = P + n * cfg.noise_sigma
    return Instance(P, appearance(Q_clean), pose, shape.category, gamma_world_coords(P, pose),
                    shape.shape_seed)


def generate_dataset(cfg: GenConfig) -> list[Instance]:
    """Pure function of ``cfg``; categories are interleaved round-robin."""
    cats = [category_id(c) for c in cfg.categories]
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.count)
    shapes: dict = {}
    out = []
    for i, ss in enumerate(seeds):
        cid = cats[i % len(cats)]
        rng = np.random.default_rng(ss)
        if cfg.n_shapes:
            shape_seed = int(rng.integers(cfg.n_shapes))
        else:
            shape_seed = int(rng.integers(2**31))
        key = (cid, shape_seed)
        if key not in shapes:
            shapes[key] = generate_shape(cid, shape_seed, cfg.n_model_points)
        out.append(sample_instance(shapes[key], rng, cfg))
        if not cfg.n_shapes and len(shapes) > 64:
            shapes.clear()
    return out


# ------------------------------------------------------------------ augmentation

@dataclass
class AugmentConfig:
    noise_amp: float = 0.0  # uniform noise half-width, metres
    rot_deg: float = 0.0
    trans: float = 0.0  # per-axis translation half-width, metres
    scale_jitter: float = 0.0  # per-axis factor in [1 - g, 1 + g]


def augment(inst: Instance, rng: np.random.Generator, cfg: AugmentConfig,
            *, rot_delta: np.ndarray | None = None, scale_factors: np.ndarray | None = None) -> Instance:
    """Perturb observation and label together so they stay consistent."""
    out = inst.copy()
    pose = out.pose
    P = out.P
    if rot_delta is None and cfg.rot_deg > 0:
        rot_delta = axis_angle(rng.standard_normal(3), np.radians(cfg.rot_deg) * rng.uniform(-1, 1))
    if rot_delta is not None:
        P = (P - pose.t) @ rot_delta.T + pose.t
        pose.R = rot_delta @ pose.R
    if cfg.trans > 0:
        dt = rng.uniform(-cfg.trans, cfg.trans, 3)
        P = P + dt
        pose.t = pose.t + dt
    if scale_factors is None and cfg.scale_jitter > 0:
        scale_factors = rng.uniform(1 - cfg.scale_jitter, 1 + cfg.scale_jitter, 3)
    if scale_factors is not None:
        f = np.asarray(scale_factors, dtype=np.float64)
        P = ((P - pose.t) @ pose.R * f) @ pose.R.T + pose.t
        pose.s = pose.s * f
    if cfg.noise_amp > 0:
        P = P + rng.uniform(-cfg.noise_amp, cfg.noise_amp, P.shape)
    if P is not out.P:
        out.P = P
        out.Q = gamma_world_coords(P, pose)
    return out


# ------------------------------------------------------------------ snapshots

SNAPSHOT_MAGIC = b"ISTD"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def _record_dtype(n: int) -> np.dtype:
    return np.dtype([("P", "<f4", (n, 3)), ("C", "<f4", (n, 3)), ("R", "<f4", (9,)),
                     ("t", "<f4", (3,)), ("s", "<f4", (3,)), ("category", "<u4"),
                     ("Q", "<f4", (n, 3))])


def snapshot_bytes(instances: list[Instance]) -> bytes:
    n = instances[0].n_points if instances else 0
    rec = np.zeros(len(instances), dtype=_record_dtype(n))
    for i, inst in enumerate(instances):
        if inst.n_points != n:
            raise ValueError("all instances in a snapshot must share N_o")
        rec[i] = (inst.P, inst.C, inst.pose.R.reshape(9), inst.pose.t, inst.pose.s,
                  inst.category, inst.Q)
    body = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, len(instances), n) + rec.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def write_snapshot(instances: list[Instance], path) -> int:
    """Write atomically; returns the CRC32 of the payload."""
    blob = snapshot_bytes(instances)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return struct.unpack("<I", blob[-4:])[0]


def parse_snapshot(blob: bytes) -> list[Instance]:
    if len(blob) < _HEADER.size or blob[:4] != SNAPSHOT_MAGIC:
        raise FormatVersionMismatch("not an ISTD snapshot")
    magic, version, count, n = _HEADER.unpack_from(blob)
    if version != SNAPSHOT_VERSION:
        raise FormatVersionMismatch(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
    dt = _record_dtype(n)
    expected = _HEADER.size + count * dt.itemsize + 4
    if len(blob) != expected:
        raise ChecksumMismatch(f"size {len(blob)} != expected {expected}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise ChecksumMismatch("CRC32 mismatch")
    rec = np.frombuffer(blob, dtype=dt, count=count, offset=_HEADER.size)
    out = []
    for r in rec:
        pose = Pose.__new__(Pose)
        pose.R, pose.t, pose.s = r["R"].reshape(3, 3).copy(), r["t"].copy(), r["s"].copy()
        out.append(Instance(r["P"].copy(), r["C"].copy(), pose, int(r["category"]), r["Q"].copy()))
    return out


def read_snapshot(path) -> list[Instance]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return parse_snapshot(blob)


def snapshot_checksum(path) -> int:
    blob = Path(path).read_bytes()
    return struct.unpack("<I", blob[-4:])[0]
