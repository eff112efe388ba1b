"""Single-process training loop with deterministic shuffling and augmentation."""
from __future__ import annotations

import json
import logging
import time
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .config import RunConfig
from .model import ISTNet
from .synthdata import AugmentConfig, Instance, augment

log = logging.getLogger(__name__)

IDENTITY_TOL = 1e-9


class LossIdentityError(AssertionError):
    pass


def augment_config(cfg: RunConfig) -> AugmentConfig:
    return AugmentConfig(cfg.aug_noise, cfg.aug_rot_deg, cfg.aug_trans, cfg.aug_scale)


def make_optimizer(cfg: RunConfig, steps_per_epoch: int) -> tc.Adam:
    interval = cfg.decay_every * steps_per_epoch if cfg.decay_every else 0
    return tc.Adam(learning_rate=cfg.lr, decay_interval=interval, decay_gamma=cfg.decay_gamma)


def epoch_batches(n: int, cfg: RunConfig, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([cfg.seed, epoch, 17]).permutation(n)
    bs = cfg.batch_size
    return [order[i:i + bs] for i in range(0, n - bs + 1, bs)] or [order]


def train(cfg: RunConfig, data: list[Instance], model: ISTNet | None = None,
          opt: tc.Adam | None = None, start_epoch: int = 0,
          on_step: Callable | None = None, on_epoch: Callable | None = None,
          dtype=np.float32):
    """Train ``model`` (fresh from ``cfg`` when None); returns (model, opt, history).

    ``history`` holds one dict of mean losses per epoch.  The total loss is
    checked against the weighted sum of its parts on every step.
    """
    with tc.precision(dtype):
        if model is None:
            model = ISTNet(cfg)
        model.params.astype(dtype)
        steps_per_epoch = len(epoch_batches(len(data), cfg, 0))
        opt = opt or make_optimizer(cfg, steps_per_epoch)
        aug = augment_config(cfg)
        history = []
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            sums: dict = {}
            batches = epoch_batches(len(data), cfg, epoch)
            for step, idx in enumerate(batches):
                rng = np.random.default_rng([cfg.seed, epoch, step, 29])
                insts = [augment(data[i], rng, aug) for i in idx]
                batch = model.collate(insts, dtype)
                parts = model.losses(batch)
                gap = parts.identity_gap()
                if not gap <= IDENTITY_TOL:
                    raise LossIdentityError(f"total loss deviates from weighted sum by {gap}")
                tc.backprop(parts.total)
                opt.step(model.params, skip_missing=True)
                vals = parts.as_floats()
                for k, v in vals.items():
                    sums[k] = sums.get(k, 0.0) + v
                if on_step is not None:
                    on_step(epoch, step, parts)
            rec = {k: v / len(batches) for k, v in sums.items()}
            rec.update(epoch=epoch, lr=opt.learning_rate, seconds=time.perf_counter() - t0,
                       config_hash=cfg.config_hash)
            if hasattr(parts, "lambda_f"):
                rec.update(lambda_f=parts.lambda_f, lambda_r=parts.lambda_r)
            history.append(rec)
            log.info(json.dumps(rec))
            if on_epoch is not None:
                on_epoch(epoch, model, opt, rec)
    return model, opt, history


def predict(model: ISTNet, data: list[Instance], batch_size: int = 32, dtype=np.float32):
    """Inference-path pose estimates for every instance, in order."""
    if hasattr(model, "predict"):
        return model.predict(data, batch_size=batch_size, dtype=dtype)
    out = []
    with tc.precision(dtype):
        for i in range(0, len(data), batch_size):
            b = model.collate(data[i:i + batch_size], dtype)
            out.extend(model.inference(b["P"], b["C"]).poses())
    return out
