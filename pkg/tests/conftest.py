import dataclasses
from pathlib import Path

import numpy as np
import pytest
import torch

from tryon_cascade import synthpairs
from tryon_cascade.config import load_config
from tryon_cascade.datamodel import ConditioningBundle
from tryon_cascade.parallel_unet import UNetConfig

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def toy_unet(**kw) -> UNetConfig:
    """8x8, 2-level parallel config small enough for float64 finite differences."""
    base = dict(
        resolutions=(8, 4),
        channels=(4, 8),
        block_repeats=(1, 1),
        attention_resolutions=(4,),
        garment_unet_stop_resolution=4,
        num_heads=2,
        pose_embed_dim=4,
        emb_dim=8,
        time_encoding_dim=4,
    )
    base.update(kw)
    return UNetConfig(**base)


def random_bundle(b, res, gen, low_res=None, agnostic=True, dtype=torch.float32, levels=None):
    pose = lambda: torch.cat(  # noqa: E731
        [torch.rand(b, 17, 2, generator=gen, dtype=dtype), torch.ones(b, 17, 1, dtype=dtype)], dim=-1
    )
    img = lambda r: torch.rand(b, 3, r, r, generator=gen, dtype=dtype) * 2 - 1  # noqa: E731
    return ConditioningBundle(
        agnostic_rgb=img(res) if agnostic else None,
        person_pose=pose(),
        garment=img(res),
        garment_pose=pose(),
        noise_aug_levels=levels or {},
        low_res=img(low_res) if low_res else None,
    )


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def smoke_config():
    return load_config(CONFIGS / "smoke.cfg")


@pytest.fixture(scope="session")
def examples64():
    return synthpairs.generate_examples(8, 0, 64)


@pytest.fixture(scope="session")
def smoke_pipeline(smoke_config, examples64):
    from tryon_cascade import cascade

    data = cascade.PairDataset(examples64, cascade.stage_resolutions(smoke_config))
    return cascade.train_pipeline(smoke_config, data, seed=0), data


def randomize_(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.3) -> torch.nn.Module:
    """Overwrite every parameter (zero-initialized ones included) with seeded noise."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


def replace_unet(stage, **kw):
    return stage.replace(unet=dataclasses.replace(stage.unet, **kw))


np_rng = np.random.default_rng


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion, echoed in the terminal summary

CRITERIA_LINES = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    CRITERIA_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
