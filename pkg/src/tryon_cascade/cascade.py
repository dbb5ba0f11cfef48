"""Three-stage try-on cascade: data tensors, stage training, sampling, pipeline archives.

A pipeline is base (try-on at low resolution) -> sr1 (try-on super-resolution,
conditioned on the base output) -> sr2 (attention-free super-resolution trained
on random crops). Every stage is an epsilon-prediction diffusion model.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import synthpairs
from .checkpoint import CheckpointError, CheckpointManifest, load_checkpoint, save_checkpoint
from .config import PipelineConfig, StageConfig, pipeline_hash
from .datamodel import ConditioningBundle, TryOnExample
from .diffcore import (
    DiffusionError,
    SamplerSpec,
    augment_bundle,
    conditioning_dropout,
    denoising_loss,
    sample,
)
from .parallel_unet import build_model, noise_aug_keys
from .preprocess import clothing_agnostic_rgb, segment_garment

log = logging.getLogger(__name__)

STAGE_FILES = {"base": "base.ckpt", "sr1": "sr1.ckpt", "sr2": "sr2.ckpt"}
PIPELINE_FILE = "pipeline.json"


class TrainingError(RuntimeError):
    pass


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data


def to_chw(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1)))


def to_hwc(img: torch.Tensor) -> np.ndarray:
    return img.detach().to(torch.float32).permute(1, 2, 0).numpy()


def downsample(x: torch.Tensor, res: int) -> torch.Tensor:
    """Area-average (N, C, H, W) images down to res x res."""
    if x.shape[-1] == res and x.shape[-2] == res:
        return x
    if x.shape[-1] < res or x.shape[-1] % res:
        raise PipelineError(f"cannot downsample {x.shape[-1]} px images to {res} px")
    return F.interpolate(x, size=(res, res), mode="area")


class PairDataset:
    """Preprocessed tensors of a list of examples at a set of resolutions.

    For every resolution ``r``, ``at(r)`` holds (N, 3, r, r) tensors ``target``,
    ``agnostic_rgb``, ``garment`` (segmented), optional ``warped`` (oracle warped
    garment), ``garment_mask`` (N, 1, r, r) of the target's garment region, and
    (N, 17, 3) poses. Preprocessing happens once at the examples' native resolution.
    """

    def __init__(self, examples: Sequence[TryOnExample], resolutions: Sequence[int], with_warped: bool = False):
        if not examples:
            raise PipelineError("empty dataset")
        native = examples[0].resolution
        self.native_resolution = native
        self.resolutions = tuple(sorted(set(int(r) for r in resolutions)))
        if any(r > native for r in self.resolutions):
            raise PipelineError(f"dataset resolution {native} is below a requested stage resolution {self.resolutions}")
        self.n = len(examples)
        self.meta = [e.meta for e in examples]
        keys = ("target", "agnostic_rgb", "garment") + (("warped",) if with_warped else ())
        levels = {r: {k: [] for k in keys + ("garment_mask",)} for r in self.resolutions}
        poses = {"person_pose": [], "garment_pose": []}
        for e in examples:
            if e.resolution != native:
                raise PipelineError("examples of mixed resolution")
            arrays = {
                "target": e.ground_truth if e.ground_truth is not None else e.person_image,
                "agnostic_rgb": clothing_agnostic_rgb(e.person_image, e.person_parsing, e.person_pose),
                "garment": segment_garment(e.garment_image, e.garment_parsing),
            }
            if with_warped:
                arrays["warped"] = synthpairs.warped_garment_oracle(e)
            full = {k: to_chw(v)[None] for k, v in arrays.items()}
            full["garment_mask"] = torch.from_numpy(self._garment_mask(e))[None, None]
            for r in self.resolutions:
                for k, v in full.items():
                    levels[r][k].append(downsample(v, r))
            poses["person_pose"].append(torch.as_tensor(e.person_pose, dtype=torch.float32))
            poses["garment_pose"].append(torch.as_tensor(e.garment_pose, dtype=torch.float32))
        self._levels = {}
        for r in self.resolutions:
            d = {k: torch.cat(v) for k, v in levels[r].items()}
            d.update({k: torch.stack(v) for k, v in poses.items()})
            self._levels[r] = d

    @staticmethod
    def _garment_mask(e: TryOnExample) -> np.ndarray:
        if e.meta.get("person_figure") and e.meta.get("garment"):
            parsing = synthpairs.target_layers(e).parsing
        else:
            parsing = e.person_parsing
        return (parsing == 3).astype(np.float32)

    def at(self, res: int) -> dict:
        if res not in self._levels:
            raise PipelineError(f"dataset has no tensors at resolution {res}")
        return self._levels[res]

    def subset(self, idx) -> "PairDataset":
        out = object.__new__(PairDataset)
        idx = torch.as_tensor(idx, dtype=torch.long)
        out.native_resolution, out.resolutions = self.native_resolution, self.resolutions
        out.n = len(idx)
        out.meta = [self.meta[i] for i in idx.tolist()]
        out._levels = {r: {k: v[idx] for k, v in d.items()} for r, d in self._levels.items()}
        return out

    @classmethod
    def concat(cls, parts: Sequence["PairDataset"]) -> "PairDataset":
        """Join datasets built with the same resolutions (e.g. chunks of a large set)."""
        if not parts:
            raise PipelineError("empty dataset")
        first = parts[0]
        if any(p.resolutions != first.resolutions or p._levels[first.resolutions[0]].keys() != first._levels[first.resolutions[0]].keys() for p in parts):
            raise PipelineError("cannot join datasets with different resolutions or keys")
        out = object.__new__(cls)
        out.native_resolution, out.resolutions = first.native_resolution, first.resolutions
        out.n = sum(p.n for p in parts)
        out.meta = [m for p in parts for m in p.meta]
        out._levels = {r: {k: torch.cat([p._levels[r][k] for p in parts]) for k in first._levels[r]} for r in first.resolutions}
        return out

    def __len__(self) -> int:
        return self.n


def validation_indices(n: int, seed: int) -> tuple[list, list]:
    """Stable 1-in-16 split by hashing (seed, index); returns (train, val)."""
    train, val = [], []
    for i in range(n):
        h = int(hashlib.sha256(f"{seed}:{i}".encode()).hexdigest(), 16)
        (val if h % 16 == 0 else train).append(i)
    return train, val


def stage_resolutions(cfg: PipelineConfig) -> tuple:
    return tuple(sorted({cfg.base.target_resolution, cfg.sr1.target_resolution, cfg.sr2.target_resolution}))


def make_condition(
    stage: StageConfig,
    data: dict,
    idx=None,
    low_res: Optional[torch.Tensor] = None,
    garment_key: str = "garment",
) -> ConditioningBundle:
    """Conditioning bundle for ``stage`` from dataset tensors at the stage resolution."""
    pick = (lambda v: v) if idx is None else (lambda v: v[idx])
    if stage.unet.variant == "efficient":
        return ConditioningBundle(None, None, None, None, low_res=low_res)
    return ConditioningBundle(
        agnostic_rgb=pick(data["agnostic_rgb"]) if stage.unet.use_agnostic else None,
        person_pose=pick(data["person_pose"]),
        garment=pick(data[garment_key]),
        garment_pose=pick(data["garment_pose"]),
        low_res=low_res,
    )


# ---------------------------------------------------------------------------
# model state


def new_model(stage: StageConfig, seed: int) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build_model(stage.unet)


def _state_arrays(prefix: str, module: nn.Module) -> dict:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _optim_arrays(opt: torch.optim.Optimizer, names: dict) -> dict:
    out = {}
    for p, st in opt.state.items():
        for k, v in st.items():
            out[f"optim/{names[p]}/{k}"] = torch.as_tensor(v).detach().cpu().numpy().copy()
    return out


def load_model(ckpt: CheckpointManifest, use_ema: bool = True) -> nn.Module:
    stage = StageConfig.from_dict(ckpt.config)
    model = build_model(stage.unet)
    arrays = ckpt.group("ema") if use_ema and ckpt.group("ema") else ckpt.group("param")
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# training


def _random_crops(x: torch.Tensor, size: int, gen: torch.Generator) -> torch.Tensor:
    n, _, h, w = x.shape
    ys = torch.randint(0, h - size + 1, (n,), generator=gen)
    xs = torch.randint(0, w - size + 1, (n,), generator=gen)
    return torch.stack([x[i, :, ys[i]:ys[i] + size, xs[i]:xs[i] + size] for i in range(n)])


def _epoch_batches(n: int, batch: int, gen: torch.Generator):
    # consecutive slices of a stream of random permutations
    buf = torch.empty(0, dtype=torch.long)
    while True:
        while len(buf) < batch:
            buf = torch.cat([buf, torch.randperm(n, generator=gen)])
        yield buf[:batch]
        buf = buf[batch:]


def train_stage(
    stage: StageConfig,
    dataset: PairDataset,
    seed: int,
    *,
    pipeline_hash: str = "",
    target_key: str = "target",
    garment_key: str = "garment",
    progress: Optional[Callable[[int, float], None]] = None,
) -> CheckpointManifest:
    """Train one stage from scratch and return its checkpoint.

    Each iteration draws a batch, a timestep t ~ U(0, 1), one noise-augmentation
    level ~ U(0, 1) per conditioning image, drops the whole conditioning with
    probability ``dropout_p`` and takes one Adam step on the epsilon MSE.
    """
    tc = stage.train
    res = stage.target_resolution
    data = dataset.at(res)
    low_data = dataset.at(stage.input_resolution)["target"] if stage.name == "sr1" else None
    n = len(dataset)
    model = new_model(stage, seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr_at(0), betas=(0.9, 0.999), eps=1e-8)
    ema = None
    if tc.ema_decay > 0:
        ema = new_model(stage, seed)
        ema.load_state_dict(model.state_dict())
    gen = torch.Generator().manual_seed(int(seed))
    keys = noise_aug_keys(stage.unet)
    losses = []
    batches = _epoch_batches(n, tc.batch_size, gen)
    for it in range(tc.iterations):
        idx = next(batches)
        x = data[target_key][idx]
        low = None
        if stage.name == "sr1":
            low = low_data[idx]
        elif stage.name == "sr2":
            if stage.crop_resolution:
                x = _random_crops(x, stage.crop_resolution, gen)
            factor = stage.target_resolution // stage.input_resolution
            low = downsample(x, x.shape[-1] // factor)
        cond = make_condition(stage, data, idx, low_res=low, garment_key=garment_key)
        t = torch.rand(tc.batch_size, generator=gen)
        cond = augment_bundle(cond, {k: torch.rand(tc.batch_size, generator=gen) for k in keys}, gen, stage.schedule)
        cond = conditioning_dropout(cond, tc.dropout_p, gen)
        eps = torch.randn(x.shape, generator=gen)

        for group in opt.param_groups:
            group["lr"] = tc.lr_at(it)
        try:
            loss = denoising_loss(x, cond, model, t, eps, stage.schedule)
        except DiffusionError as exc:
            raise TrainingError(f"{stage.name}: {exc} at iteration {it}") from exc
        if not torch.isfinite(loss):
            raise TrainingError(f"{stage.name}: non-finite loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if tc.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for pe, pm in zip(ema.parameters(), model.parameters()):
                    pe.lerp_(pm, 1.0 - tc.ema_decay)
        losses.append(loss.item())
        if progress is not None:
            progress(it, losses[-1])

    names = {p: k for k, p in model.named_parameters()}
    arrays = _state_arrays("param", model)
    arrays.update(_optim_arrays(opt, names))
    arrays["rng/torch"] = gen.get_state().numpy().copy()
    if ema is not None:
        arrays.update(_state_arrays("ema", ema))
    return CheckpointManifest(
        stage_name=stage.name,
        config=stage.to_dict(),
        arrays=arrays,
        iteration=tc.iterations,
        loss_trace=losses,
        pipeline_hash=pipeline_hash,
        extra={"seed": int(seed), "examples": n, "target": target_key, "garment_input": garment_key},
    )


# ---------------------------------------------------------------------------
# sampling


@torch.no_grad()
def sample_stage(
    model: nn.Module,
    stage: StageConfig,
    cond: ConditioningBundle,
    rng: torch.Generator,
    t_na: Optional[dict] = None,
    sampler: Optional[SamplerSpec] = None,
    chunk: int = 64,
) -> torch.Tensor:
    """Sample one stage for every row of ``cond`` at the stage's target resolution."""
    levels = stage.t_na() if t_na is None else {k: float(t_na.get(k, 0.0)) for k in noise_aug_keys(stage.unet)}
    spec = sampler or stage.sampler
    b = cond.batch_size()
    res = stage.target_resolution
    outs = []
    for s in range(0, b, chunk):
        part = cond.map(lambda v: v[s:s + chunk]).replace(noise_aug_levels={})
        part = augment_bundle(part, levels, rng, stage.schedule)
        outs.append(sample(model, part, stage.schedule, spec, (part.batch_size(), 3, res, res), rng))
    return torch.cat(outs)


@dataclass
class PipelineCheckpointSet:
    base: CheckpointManifest
    sr1: CheckpointManifest
    sr2: CheckpointManifest

    def __post_init__(self):
        check_consistent(self)

    @property
    def config(self) -> PipelineConfig:
        return PipelineConfig(*(StageConfig.from_dict(getattr(self, s).config) for s in STAGE_FILES))

    @property
    def pipeline_hash(self) -> str:
        return self.base.pipeline_hash


def check_consistent(ckpts: PipelineCheckpointSet) -> None:
    stages = [ckpts.base, ckpts.sr1, ckpts.sr2]
    for name, c in zip(STAGE_FILES, stages):
        if c.stage_name != name:
            raise PipelineError(f"expected a {name} checkpoint, got {c.stage_name}")
    hashes = {c.pipeline_hash for c in stages}
    if len(hashes) != 1:
        raise PipelineError("pipeline hash mismatch: stages come from different pipeline configs")
    expected = pipeline_hash([c.config for c in stages])
    if hashes.pop() != expected:
        raise PipelineError("pipeline hash mismatch: recorded hash does not match the stage configs")


def save_pipeline(ckpts: PipelineCheckpointSet, directory: Union[str, Path]) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = [save_checkpoint(getattr(ckpts, s), d / f) for s, f in STAGE_FILES.items()]
    meta = {"pipeline_hash": ckpts.pipeline_hash, "stages": {s: getattr(ckpts, s).config_hash for s in STAGE_FILES}}
    tmp = d / (PIPELINE_FILE + ".tmp")
    tmp.write_text(json.dumps(meta, sort_keys=True, indent=1))
    tmp.replace(d / PIPELINE_FILE)
    return paths + [d / PIPELINE_FILE]


def load_pipeline(directory: Union[str, Path]) -> PipelineCheckpointSet:
    d = Path(directory)
    meta_path = d / PIPELINE_FILE
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
    loaded = {}
    for s, f in STAGE_FILES.items():
        expected = meta["stages"].get(s) if meta else None
        try:
            loaded[s] = load_checkpoint(d / f, expected_hash=expected)
        except FileNotFoundError as exc:
            raise PipelineError(f"missing {s} checkpoint {d / f}") from exc
    ckpts = PipelineCheckpointSet(**loaded)
    if meta and meta["pipeline_hash"] != ckpts.pipeline_hash:
        raise PipelineError("pipeline hash mismatch between pipeline.json and the stage archives")
    return ckpts


def assemble_pipeline(base, sr1, sr2) -> PipelineCheckpointSet:
    return PipelineCheckpointSet(base=base, sr1=sr1, sr2=sr2)


class LoadedPipeline:
    """Stage models built once from a checkpoint set."""

    def __init__(self, ckpts: PipelineCheckpointSet):
        self.ckpts = ckpts
        self.config = ckpts.config
        self.models = {s: load_model(getattr(ckpts, s)) for s in STAGE_FILES}


def sample_pipeline(
    pipeline: Union[PipelineCheckpointSet, LoadedPipeline],
    examples: Union[TryOnExample, Sequence[TryOnExample], PairDataset],
    seed: int,
    *,
    t_na: Optional[dict] = None,
    upto: str = "sr2",
    return_stages: bool = False,
):
    """Run base -> sr1 -> sr2 for every example.

    Args:
        pipeline: checkpoints or already-loaded models.
        examples: one example, a list, or a prepared PairDataset.
        seed: seeds every random draw of the run.
        t_na: optional per-stage overrides ``{stage: {image: level}}``.
        upto: last stage to run.
        return_stages: return ``{stage: images}`` instead of the final images.

    Returns:
        (N, 3, R, R) tensor in [-1, 1] (or the per-stage dict).
    """
    loaded = pipeline if isinstance(pipeline, LoadedPipeline) else LoadedPipeline(pipeline)
    cfg = loaded.config
    single = isinstance(examples, TryOnExample)
    if isinstance(examples, PairDataset):
        data = examples
    else:
        data = PairDataset([examples] if single else list(examples), (cfg.base.target_resolution, cfg.sr1.target_resolution))
    rng = torch.Generator().manual_seed(int(seed))
    t_na = t_na or {}
    out = {}
    low = None
    for stage in cfg.stages():
        if stage.name == "sr2":
            cond = ConditioningBundle(None, None, None, None, low_res=low)
        else:
            if stage.name == "sr1" and low.shape[-1] != stage.input_resolution:
                raise PipelineError("resolution chain mismatch")
            cond = make_condition(stage, data.at(stage.target_resolution), low_res=low)
        low = sample_stage(loaded.models[stage.name], stage, cond, rng, t_na.get(stage.name))
        out[stage.name] = low
        if stage.name == upto:
            break
    if return_stages:
        return out
    return out[upto][0] if single else out[upto]


def grid_search_tna(
    pipeline: Union[PipelineCheckpointSet, LoadedPipeline],
    val_set: Union[Sequence[TryOnExample], PairDataset],
    candidate_levels: Sequence[float],
    seed: int = 0,
    metric: Optional[Callable[[torch.Tensor, torch.Tensor], float]] = None,
    stages: Sequence[str] = ("base", "sr1", "sr2"),
) -> dict:
    """Pick one inference noise-augmentation level per stage by validation FID.

    Stages are searched in cascade order; a stage's chosen level is fixed
    before the next stage is searched. Every conditioning image of a stage
    shares the stage's level. Ties go to the smaller level.
    """
    cands = sorted(float(c) for c in candidate_levels)
    if not cands:
        raise ValueError("empty candidate set")
    if any(not np.isfinite(c) or c < 0 or c > 1 for c in cands):
        raise ValueError("candidate levels must be finite and inside [0, 1]")
    loaded = pipeline if isinstance(pipeline, LoadedPipeline) else LoadedPipeline(pipeline)
    cfg = loaded.config
    if metric is None:
        from .evalmetrics import image_fid

        metric = image_fid
    if isinstance(val_set, PairDataset):
        data = val_set
    else:
        data = PairDataset(list(val_set), stage_resolutions(cfg))
    chosen = {s.name: s.t_na() for s in cfg.stages()}
    result = {}
    for name in stages:
        stage = cfg.stage(name)
        real = data.at(stage.target_resolution)["target"]
        best, best_score = None, None
        for c in cands:
            trial = dict(chosen)
            trial[name] = {k: c for k in noise_aug_keys(stage.unet)}
            fake = sample_pipeline(loaded, data, seed, t_na=trial, upto=name)
            score = float(metric(fake, real))
            if best_score is None or score < best_score:
                best, best_score = c, score
        chosen[name] = {k: best for k in noise_aug_keys(stage.unet)}
        result[name] = best
    return result


# ---------------------------------------------------------------------------
# sequenced warp-then-blend ablation


def sequenced_stages(base: StageConfig) -> tuple[StageConfig, StageConfig]:
    """Model A predicts the warped garment without I_a; model B is the unified model fed I_wc."""
    import dataclasses

    warp = base.replace(
        unet=dataclasses.replace(base.unet, use_agnostic=False),
        inference_t_na={k: v for k, v in base.inference_t_na.items() if k != "agnostic_rgb"},
    )
    return warp, base


def train_sequenced_ablation(dataset: PairDataset, seed: int, base: StageConfig, progress=None):
    """Train (warp model A, blend model B) at base resolution; B trains on the oracle I_wc."""
    warp, blend = sequenced_stages(base)
    a = train_stage(warp, dataset, seed, target_key="warped", garment_key="garment", progress=progress)
    b = train_stage(blend, dataset, seed, target_key="target", garment_key="warped", progress=progress)
    a.extra["role"], b.extra["role"] = "warp", "blend"
    return a, b


@torch.no_grad()
def sample_sequenced(a: CheckpointManifest, b: CheckpointManifest, data: PairDataset, seed: int) -> torch.Tensor:
    """Warp with A, then blend with B using A's warped garment as the garment input."""
    sa, sb = StageConfig.from_dict(a.config), StageConfig.from_dict(b.config)
    d = data.at(sb.target_resolution)
    rng = torch.Generator().manual_seed(int(seed))
    warped = sample_stage(load_model(a), sa, make_condition(sa, d), rng)
    cond = make_condition(sb, {**d, "garment": warped})
    return sample_stage(load_model(b), sb, cond, rng)


@torch.no_grad()
def sample_base(ckpt: CheckpointManifest, data: PairDataset, seed: int, garment_key: str = "garment") -> torch.Tensor:
    stage = StageConfig.from_dict(ckpt.config)
    rng = torch.Generator().manual_seed(int(seed))
    return sample_stage(load_model(ckpt), stage, make_condition(stage, data.at(stage.target_resolution), garment_key=garment_key), rng)


def train_pipeline(cfg: PipelineConfig, dataset: PairDataset, seed: int, progress=None) -> PipelineCheckpointSet:
    h = cfg.pipeline_hash
    ck = {s.name: train_stage(s, dataset, seed, pipeline_hash=h, progress=progress) for s in cfg.stages()}
    return PipelineCheckpointSet(**ck)


__all__ = [
    "CheckpointError",
    "LoadedPipeline",
    "PairDataset",
    "PipelineCheckpointSet",
    "PipelineError",
    "TrainingError",
    "grid_search_tna",
    "load_pipeline",
    "sample_pipeline",
    "save_pipeline",
    "train_sequenced_ablation",
    "train_stage",
]
