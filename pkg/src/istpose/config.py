"""Run configuration shared by training, evaluation and the command line."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

VARIANTS = ("implicit", "explicit", "prior-case")
FEAT_LOSSES = ("mse", "l1")
PRIOR_CASES = ("case1", "case2", "case3", "case4")

# fields that change the parameter layout; the checkpoint hash covers only these
ARCH_FIELDS = ("d", "hidden", "k", "ist", "ce", "we", "pe", "variant", "prior_case",
               "n_prior")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    # widths
    d: int = 64
    hidden: int = 128
    k: int = 8
    n_points: int = 256
    # module switches (IST, camera enhancer, world enhancer, position encoding)
    ist: bool = True
    ce: bool = True
    we: bool = True
    pe: bool = True
    lambda_f: float = 10.0
    lambda_r: float = 1.0
    feat_loss: str = "mse"
    variant: str = "implicit"
    prior_case: str = "case1"
    n_prior: int = 0  # 0 means n_points
    # optimisation
    lr: float = 1e-3
    decay_every: int = 0  # epochs between decays; 0 disables
    decay_gamma: float = 0.5
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    # augmentation
    aug_noise: float = 0.002
    aug_rot_deg: float = 5.0
    aug_trans: float = 0.01
    aug_scale: float = 0.1
    # data: snapshot paths, or generation settings when a path is empty
    train_data: str = ""
    eval_data: str = ""
    gen: dict = field(default_factory=dict)
    eval_count: int = 400

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        for name in ("d", "hidden", "k", "n_points", "epochs", "batch_size", "eval_count"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(name, "must be positive")
        for name in ("lambda_f", "lambda_r", "n_prior", "decay_every"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")
        if not self.decay_gamma > 0:
            raise ConfigError("decay_gamma", "must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"unknown variant {self.variant!r}")
        if self.feat_loss not in FEAT_LOSSES:
            raise ConfigError("feat_loss", f"unknown loss type {self.feat_loss!r}")
        if self.prior_case not in PRIOR_CASES:
            raise ConfigError("prior_case", f"unknown case {self.prior_case!r}")
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            name = sorted(unknown)[0]
            raise ConfigError(name, "unknown configuration key")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, pairs: list[str] | dict) -> "RunConfig":
        """Apply ``key=value`` overrides; values are parsed as JSON when possible."""
        if isinstance(pairs, dict):
            return replace(self, **pairs)
        changes = {}
        names = {f.name: f for f in fields(self)}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(pair, "override must look like key=value")
            key, raw = pair.split("=", 1)
            if key not in names:
                raise ConfigError(key, "unknown configuration key")
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            changes[key] = val
        return replace(self, **changes)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @property
    def arch_hash(self) -> str:
        arch = {k: getattr(self, k) for k in ARCH_FIELDS}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()
