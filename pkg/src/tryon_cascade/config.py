"""Stage and pipeline configuration, plus the flat ``key = value`` config file format.

A config file holds one assignment per line; ``#`` starts a comment. Keys are
``<stage>.<section>.<field>`` with stage in {base, sr1, sr2}, for example::

    base.unet.channels = 32, 64, 96, 128
    base.train.iterations = 3000
    base.sampler.steps = 64
    sr1.inference_t_na.low_res = 0.1

Unspecified keys keep the desk defaults below; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .diffcore import NoiseSchedule, SamplerSpec
from .parallel_unet import UNetConfig, noise_aug_keys

STAGES = ("base", "sr1", "sr2")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    iterations: int = 3000
    warmup_iters: int = 300
    peak_lr: float = 1e-4
    dropout_p: float = 0.1
    ema_decay: float = 0.0  # 0 disables weight averaging
    grad_clip: float = 0.0  # 0 disables clipping

    def lr_at(self, it: int) -> float:
        if self.warmup_iters <= 0:
            return self.peak_lr
        return self.peak_lr * min(1.0, it / self.warmup_iters)


@dataclass(frozen=True)
class StageConfig:
    name: str
    target_resolution: int
    input_resolution: int  # 0 for the base stage
    unet: UNetConfig
    sampler: SamplerSpec
    train: TrainConfig
    inference_t_na: dict = field(default_factory=dict)
    crop_resolution: int = 0  # train on random crops of this size (0 = full frame)
    schedule: NoiseSchedule = NoiseSchedule()

    def __post_init__(self):
        problems = []
        if self.name not in STAGES:
            problems.append(f"stage name must be one of {STAGES}")
        if self.name != "base":
            if self.input_resolution <= 0 or self.target_resolution % self.input_resolution:
                problems.append("input_resolution must divide target_resolution")
            if not self.unet.low_res:
                problems.append("super-resolution stages need unet.low_res = true")
        if not 0.0 <= self.train.dropout_p <= 1.0:
            problems.append("train.dropout_p must lie in [0, 1]")
        if self.crop_resolution and self.target_resolution % self.crop_resolution:
            problems.append("crop_resolution must divide target_resolution")
        for k, v in self.inference_t_na.items():
            if k not in noise_aug_keys(self.unet):
                problems.append(f"inference_t_na.{k} is not an input of this model")
            elif not 0.0 <= v <= 1.0:
                problems.append(f"inference_t_na.{k} outside [0, 1]")
        if problems:
            raise ConfigError(f"{self.name}: " + "; ".join(problems))

    @property
    def train_resolution(self) -> int:
        return self.crop_resolution or self.target_resolution

    def t_na(self) -> dict:
        """Inference noise-augmentation levels for every conditioning image (missing keys are 0)."""
        return {k: float(self.inference_t_na.get(k, 0.0)) for k in noise_aug_keys(self.unet)}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "target_resolution": self.target_resolution,
            "input_resolution": self.input_resolution,
            "crop_resolution": self.crop_resolution,
            "unet": self.unet.to_dict(),
            "sampler": dataclasses.asdict(self.sampler),
            "train": dataclasses.asdict(self.train),
            "inference_t_na": {k: float(v) for k, v in sorted(self.inference_t_na.items())},
            "schedule": dataclasses.asdict(self.schedule),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(
            name=d["name"],
            target_resolution=d["target_resolution"],
            input_resolution=d["input_resolution"],
            crop_resolution=d.get("crop_resolution", 0),
            unet=UNetConfig.from_dict(d["unet"]),
            sampler=SamplerSpec(**d["sampler"]),
            train=TrainConfig(**d["train"]),
            inference_t_na=dict(d.get("inference_t_na", {})),
            schedule=NoiseSchedule(**d.get("schedule", {})),
        )

    def replace(self, **changes) -> "StageConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class PipelineConfig:
    base: StageConfig
    sr1: StageConfig
    sr2: StageConfig

    def __post_init__(self):
        if self.sr1.input_resolution != self.base.target_resolution:
            raise ConfigError("resolution chain mismatch: sr1 input != base target")
        if self.sr2.input_resolution != self.sr1.target_resolution:
            raise ConfigError("resolution chain mismatch: sr2 input != sr1 target")

    def stage(self, name: str) -> StageConfig:
        if name not in STAGES:
            raise ConfigError(f"unknown stage {name!r}")
        return getattr(self, name)

    def stages(self) -> list[StageConfig]:
        return [self.base, self.sr1, self.sr2]

    def to_dict(self) -> dict:
        return {s.name: s.to_dict() for s in self.stages()}

    @property
    def pipeline_hash(self) -> str:
        return pipeline_hash([s.to_dict() for s in self.stages()])

    def replace_stage(self, stage: StageConfig) -> "PipelineConfig":
        return dataclasses.replace(self, **{stage.name: stage})


def pipeline_hash(stage_dicts: list) -> str:
    blob = json.dumps(sorted(stage_dicts, key=lambda d: d["name"]), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# built-in configurations


def desk_config() -> PipelineConfig:
    """32 -> 64 -> 256 cascade at the documented desk widths."""
    base = StageConfig(
        name="base",
        target_resolution=32,
        input_resolution=0,
        unet=UNetConfig(
            resolutions=(32, 16, 8, 4),
            channels=(64, 128, 256, 512),
            block_repeats=(2, 2, 2, 2),
            attention_resolutions=(8, 4),
            garment_unet_stop_resolution=8,
        ),
        sampler=SamplerSpec("ddpm", 64, 2.0),
        train=TrainConfig(iterations=3000),
        inference_t_na={"agnostic_rgb": 0.0, "garment": 0.0},
    )
    sr1 = StageConfig(
        name="sr1",
        target_resolution=64,
        input_resolution=32,
        unet=UNetConfig(
            resolutions=(64, 32, 16, 8, 4),
            channels=(64, 64, 128, 256, 512),
            block_repeats=(2, 2, 2, 2, 2),
            attention_resolutions=(4,),
            garment_unet_stop_resolution=4,
            low_res=True,
        ),
        sampler=SamplerSpec("ddpm", 32, 2.0),
        train=TrainConfig(iterations=1500),
        inference_t_na={"agnostic_rgb": 0.0, "garment": 0.0, "low_res": 0.1},
    )
    sr2 = StageConfig(
        name="sr2",
        target_resolution=256,
        input_resolution=64,
        crop_resolution=64,
        unet=UNetConfig(
            resolutions=(256, 128, 64, 32),
            channels=(32, 64, 128, 256),
            block_repeats=(1, 2, 2, 4),
            attention_resolutions=(),
            variant="efficient",
            low_res=True,
        ),
        sampler=SamplerSpec("ddim", 16, 2.0),
        train=TrainConfig(iterations=1500),
        inference_t_na={"low_res": 0.1},
    )
    return PipelineConfig(base, sr1, sr2)


def paper_config() -> PipelineConfig:
    """Paper-scale widths (for parameter counting); 128 -> 256 -> 1024 chain."""
    small = dict(pose_embed_dim=512, emb_dim=1024, time_encoding_dim=256)
    base = StageConfig(
        name="base",
        target_resolution=128,
        input_resolution=0,
        unet=UNetConfig(
            resolutions=(128, 64, 32, 16),
            channels=(128, 256, 512, 1024),
            block_repeats=(3, 4, 6, 7),
            attention_resolutions=(32, 16),
            garment_unet_stop_resolution=32,
            num_heads=8,
            **small,
        ),
        sampler=SamplerSpec("ddpm", 256, 2.0),
        train=TrainConfig(batch_size=256, iterations=500_000, warmup_iters=10_000),
        inference_t_na={"agnostic_rgb": 0.0, "garment": 0.0},
    )
    sr1 = StageConfig(
        name="sr1",
        target_resolution=256,
        input_resolution=128,
        unet=UNetConfig(
            resolutions=(256, 128, 64, 32, 16),
            channels=(128, 128, 256, 512, 1024),
            block_repeats=(2, 3, 4, 7, 7),
            attention_resolutions=(16,),
            garment_unet_stop_resolution=16,
            num_heads=8,
            low_res=True,
            **small,
        ),
        sampler=SamplerSpec("ddpm", 128, 2.0),
        train=TrainConfig(batch_size=256, iterations=500_000, warmup_iters=10_000),
        inference_t_na={"agnostic_rgb": 0.0, "garment": 0.0, "low_res": 0.1},
    )
    sr2 = StageConfig(
        name="sr2",
        target_resolution=1024,
        input_resolution=256,
        crop_resolution=256,
        unet=UNetConfig(
            resolutions=(1024, 512, 256, 128, 64),
            channels=(128, 256, 512, 1024, 1024),
            block_repeats=(2, 2, 4, 8, 8),
            attention_resolutions=(),
            variant="efficient",
            low_res=True,
            emb_dim=1024,
            time_encoding_dim=256,
        ),
        sampler=SamplerSpec("ddim", 32, 2.0),
        train=TrainConfig(batch_size=256, iterations=500_000, warmup_iters=10_000),
        inference_t_na={"low_res": 0.1},
    )
    return PipelineConfig(base, sr1, sr2)


# ---------------------------------------------------------------------------
# flat key = value files


def _flatten(prefix: str, obj) -> dict:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict) and k != "inference_t_na":
            out.update(_flatten(key, v))
        elif k == "inference_t_na":
            for kk, vv in v.items():
                out[f"{key}.{kk}"] = vv
        else:
            out[key] = v
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _parse_like(raw: str, like, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, list):
            return [int(x) for x in raw.split(",") if x.strip()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def config_to_text(cfg: PipelineConfig) -> str:
    lines = []
    for stage in cfg.stages():
        d = stage.to_dict()
        name = d.pop("name")
        for k, v in _flatten("", d).items():
            lines.append(f"{name}.{k} = {_format(v)}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, defaults: PipelineConfig | None = None) -> PipelineConfig:
    """Parse ``key = value`` lines on top of ``defaults`` (desk config if omitted)."""
    defaults = defaults or desk_config()
    dicts = {s.name: s.to_dict() for s in defaults.stages()}
    known = {name: _flatten("", {k: v for k, v in d.items() if k != "name"}) for name, d in dicts.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        stage, _, rest = key.partition(".")
        if stage not in dicts or not rest:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        path = rest.split(".")
        if path[0] == "inference_t_na" and len(path) == 2:
            dicts[stage]["inference_t_na"][path[1]] = _parse_like(raw, 0.0, key)
            continue
        if rest not in known[stage]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        node = dicts[stage]
        for p in path[:-1]:
            node = node[p]
        node[path[-1]] = _parse_like(raw, node[path[-1]], key)
    try:
        return PipelineConfig(*(StageConfig.from_dict(dicts[s]) for s in STAGES))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Union[str, Path]) -> PipelineConfig:
    return parse_config(Path(path).read_text())
