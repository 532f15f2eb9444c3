from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..geometry import MatchWeights
from ..losses import AslConfig, FocalConfig

MATCHING_MODES = ("group", "standard_merged")
REF_POLICIES = ("grid", "jitter")
OPTIMIZERS = ("sgd", "adam")


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    seed: int = 0
    n_datasets: int = 2
    classes_per_dataset: int = 8
    alias_fraction: float = 0.25
    images_per_dataset: int = 300
    eval_images_per_dataset: int = 100
    grid: int = 8
    d: int = 16
    top_k: int = 6
    n_per_class: int = 4
    max_objects: int = 0  # 0 means top_k
    epochs: int = 26
    max_steps: int = 0  # 0 means no cap
    batch_size: int = 8
    lr: float = 0.003
    momentum: float = 0.9
    optimizer: str = "adam"
    clip_norm: float = 5.0
    mu_asl: float = 1.0
    mu_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    asl_gamma_pos: float = 0.0
    asl_gamma_neg: float = 4.0
    asl_clip: float = 0.05
    matching_mode: str = "group"
    supervise_negatives: bool = True
    learnable_embeddings: bool = True
    teacher_forcing: bool = True
    ref_policy: str = "grid"
    noise_sigma: float = 0.05
    distractor_prob: float = 0.5
    score_threshold: float = 0.0

    def validate(self) -> "BenchConfig":
        counts = ("n_datasets", "classes_per_dataset", "images_per_dataset", "grid", "top_k",
                  "n_per_class", "batch_size")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0 or self.max_steps < 0 or self.eval_images_per_dataset < 0:
            raise ConfigError("epochs, max_steps and eval_images_per_dataset must be >= 0")
        if not 0.0 <= self.alias_fraction <= 1.0:
            raise ConfigError("alias_fraction must lie in [0, 1]")
        if self.alias_fraction > 0 and self.n_datasets < 2:
            raise ConfigError("aliases need at least two datasets")
        if self.d < 4:
            raise ConfigError("d must be >= 4 for the positional encoding")
        if self.matching_mode not in MATCHING_MODES:
            raise ConfigError(f"matching_mode must be one of {MATCHING_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.ref_policy not in REF_POLICIES:
            raise ConfigError(f"ref_policy must be one of {REF_POLICIES}")
        if self.max_objects_eff > self.top_k:
            raise ConfigError("max_objects cannot exceed top_k")
        if self.lr < 0 or self.mu_asl < 0:
            raise ConfigError("lr and mu_asl must be >= 0")
        try:
            self.weights, self.focal, self.asl
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def max_objects_eff(self) -> int:
        return self.max_objects or self.top_k

    @property
    def weights(self) -> MatchWeights:
        return MatchWeights(self.mu_cls, self.lambda_l1, self.lambda_giou)

    @property
    def focal(self) -> FocalConfig:
        return FocalConfig(self.focal_alpha, self.focal_gamma)

    @property
    def asl(self) -> AslConfig:
        return AslConfig(self.asl_gamma_pos, self.asl_gamma_neg, self.asl_clip)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)
