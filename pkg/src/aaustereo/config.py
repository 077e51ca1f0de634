"""Model and run configuration, JSON (de)serialisation and ablation presets."""

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class ModelConfig:
    embed_dim: int = 48
    window: int = 7
    attention_stride: int = 3
    swin_blocks_per_rstb: int = 2
    num_scales: int = 4
    heads_per_scale: list = None
    skip_count: int = 3
    skip_placement: str = "before_cross"
    max_interp_window: int = 3
    mlp_ratio: int = 4
    use_ape: bool = True
    use_rpe: bool = True
    max_image_hw: tuple = (540, 960)
    sinkhorn_iters: int = 10
    temperature: float = 1.0
    occlusion_threshold: float = 0.3
    context_channels: int = 16
    context_blocks: int = 2
    context_occ_input: bool = True

    def __post_init__(self):
        self.max_image_hw = tuple(self.max_image_hw)
        if self.heads_per_scale is None:
            base = max(1, self.embed_dim // 16)
            self.heads_per_scale = [base * 2**i for i in range(self.num_scales)]
        self.heads_per_scale = list(self.heads_per_scale)

    def validate(self, for_forward=True):
        if self.embed_dim <= 0 or self.window <= 0 or self.attention_stride <= 0:
            raise ConfigError("bad-config", "embed_dim, window and attention_stride must be positive")
        if self.swin_blocks_per_rstb % 2:
            raise ConfigError("bad-depth", f"swin_blocks_per_rstb must be even, got {self.swin_blocks_per_rstb}")
        if self.num_scales < 0:
            raise ConfigError("bad-config", "num_scales must be >= 0")
        if len(self.heads_per_scale) != self.num_scales:
            raise ConfigError("bad-config", "heads_per_scale needs one entry per scale")
        for i, heads in enumerate(self.heads_per_scale):
            if (2**i * self.embed_dim) % heads:
                raise ConfigError("bad-config", f"scale {i}: {2**i * self.embed_dim} channels not divisible by {heads} heads")
        if self.skip_count > max(0, self.num_scales - 1):
            raise ConfigError("bad-config", "skip_count must be <= num_scales - 1")
        if self.skip_placement not in ("before_cross", "after_cross"):
            raise ConfigError("bad-config", f"unknown skip_placement {self.skip_placement!r}")
        if self.max_interp_window < 1 or self.max_interp_window % 2 == 0:
            raise ConfigError("bad-config", "max_interp_window must be odd and positive")
        if for_forward and (self.num_scales < 1 or self.swin_blocks_per_rstb < 2):
            raise ConfigError("bad-config", "a runnable model needs at least one scale and two swin blocks")
        return self

    def dims(self):
        return [2**i * self.embed_dim for i in range(self.num_scales)]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["max_image_hw"] = list(self.max_image_hw)
        return d

    @classmethod
    def from_dict(cls, d):
        return _strict(cls, d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _strict(cls, d):
    if not isinstance(d, dict):
        raise ConfigError("bad-config", f"{cls.__name__} expects a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError("unknown-key", f"{cls.__name__}: {', '.join(unknown)}")
    return cls(**d)


PRESETS = {
    "base": dict(swin_blocks_per_rstb=2),
    "middle": dict(swin_blocks_per_rstb=4),
    "large": dict(swin_blocks_per_rstb=6),
    "toy": dict(embed_dim=16, window=4, attention_stride=2, swin_blocks_per_rstb=2, num_scales=2,
                skip_count=1, max_image_hw=(48, 96), context_channels=16, context_blocks=2),
    "tiny": dict(embed_dim=16, window=4, attention_stride=2, swin_blocks_per_rstb=2, num_scales=2,
                 skip_count=1, max_image_hw=(16, 32), context_channels=4, context_blocks=1),
}
for _n in range(4):
    for _place in ("before", "after"):
        PRESETS[f"skip{_n}_{_place}"] = dict(skip_count=_n, skip_placement=f"{_place}_cross")
PRESETS["pe_none"] = dict(use_ape=False, use_rpe=False)
PRESETS["pe_ape"] = dict(use_ape=True, use_rpe=False)
PRESETS["pe_rpe"] = dict(use_ape=False, use_rpe=True)
PRESETS["pe_both"] = dict(use_ape=True, use_rpe=True)


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError("unknown-preset", name)
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return ModelConfig(**kw)


@dataclass
class RdsSpec:
    height: int = 48
    width: int = 96
    d_background: int = 2
    d_foreground: int = 8
    rect: tuple = (32, 12, 64, 36)
    seed: int = 0

    def __post_init__(self):
        self.rect = tuple(self.rect)


@dataclass
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3, self.w4) < 0:
            raise ConfigError("bad-config", "loss weights must be non-negative")


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    lr_context: float = 2e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    log_every: int = 50

    def __post_init__(self):
        self.betas = tuple(self.betas)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: preset("toy"))
    seed: int = 0
    rds: RdsSpec = field(default_factory=RdsSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("bad-config", "run config must be a JSON object")
        d = dict(d)
        unknown = sorted(set(d) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError("unknown-key", f"RunConfig: {', '.join(unknown)}")
        model = d.pop("model", None)
        if isinstance(model, str):
            model = preset(model)
        elif isinstance(model, dict) and "preset" in model:
            model = dict(model)
            model = preset(model.pop("preset"), **model)
        elif model is not None:
            model = ModelConfig.from_dict(model)
        out = cls(
            model=model or preset("toy"),
            seed=int(d.pop("seed", 0)),
            rds=_strict(RdsSpec, d.pop("rds", {})),
            train=_strict(TrainConfig, d.pop("train", {})),
            loss_weights=_strict(LossWeights, d.pop("loss_weights", {})),
            paths=dict(d.pop("paths", {})),
        )
        return out

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as exc:
            raise ConfigError("bad-config", f"{path}: {exc}") from exc

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "seed": self.seed,
            "rds": dataclasses.asdict(self.rds),
            "train": dataclasses.asdict(self.train),
            "loss_weights": dataclasses.asdict(self.loss_weights),
            "paths": dict(self.paths),
        }
