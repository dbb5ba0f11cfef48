"""Diffusion mathematics: schedule, corruption, loss, noise augmentation, guidance, samplers.

Time runs over t in [0, 1] (0 = clean, 1 = pure noise). Tensors are batched
as (B, C, H, W); a timestep may be a Python float or a (B,) tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch

from .datamodel import ConditioningBundle

Timestep = Union[float, torch.Tensor]

# DDIM's starting latent comes from this fixed stream so that eta = 0 never touches the caller's rng.
DDIM_LATENT_SEED = 0


class DiffusionError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine schedule alpha(t) = cos(pi/2 * (t + s) / (1 + s)), floored at ``alpha_min``.

    sigma(t) = sqrt(1 - alpha(t)^2) and the loss weight is 1 (epsilon-prediction).
    """

    s: float = 0.008
    alpha_min: float = 1e-3

    def alpha(self, t: Timestep) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float64)
        a = torch.cos(0.5 * math.pi * (t + self.s) / (1.0 + self.s))
        return a.clamp(min=self.alpha_min, max=1.0)

    def sigma(self, t: Timestep) -> torch.Tensor:
        a = self.alpha(t)
        return torch.sqrt(1.0 - a * a)

    def weight(self, t: Timestep) -> torch.Tensor:
        return torch.ones_like(torch.as_tensor(t, dtype=torch.float64))


def cosine_schedule(s: float = 0.008, alpha_min: float = 1e-3) -> NoiseSchedule:
    return NoiseSchedule(s=s, alpha_min=alpha_min)


def _per_sample(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape a scalar or (B,) coefficient to broadcast against ``like``."""
    v = v.to(like.dtype)
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (like.ndim - 1)))


def forward_corrupt(x: torch.Tensor, eps: torch.Tensor, t: Timestep, sched: NoiseSchedule) -> torch.Tensor:
    if x.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match data shape {tuple(x.shape)}")
    return _per_sample(sched.alpha(t), x) * x + _per_sample(sched.sigma(t), x) * eps


def eps_to_x(z_t: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, sched: NoiseSchedule) -> torch.Tensor:
    alpha = sched.alpha(t)
    if torch.any(alpha < 1e-8):
        raise DiffusionError("timestep too noisy for x-recovery")
    return (z_t - _per_sample(sched.sigma(t), z_t) * eps_hat) / _per_sample(alpha, z_t)


def denoising_loss(
    x: torch.Tensor,
    cond: Optional[ConditioningBundle],
    model: Callable,
    t: Timestep,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Weighted mean squared error between predicted and true noise."""
    z_t = forward_corrupt(x, eps, t, sched)
    t_in = torch.as_tensor(t, dtype=x.dtype)
    if t_in.ndim == 0:
        t_in = t_in.expand(x.shape[0])
    eps_hat = model(z_t, t_in, cond)
    if not torch.all(torch.isfinite(eps_hat)):
        raise DiffusionError("non-finite model output")
    per_sample = ((eps_hat - eps) ** 2).flatten(1).mean(dim=1)
    w = sched.weight(t).to(x.dtype)
    return (w * per_sample).mean()


# ---------------------------------------------------------------------------
# conditioning


def apply_noise_aug(img: torch.Tensor, t_na: Timestep, rng: torch.Generator, sched: NoiseSchedule) -> torch.Tensor:
    noise = torch.randn(img.shape, generator=rng, dtype=img.dtype)
    return forward_corrupt(img, noise, t_na, sched)


def augment_bundle(cond: ConditioningBundle, levels: dict, rng: torch.Generator, sched: NoiseSchedule):
    """Noise every conditioning image named in ``levels`` and record the levels in the bundle."""
    changes, recorded = {}, dict(cond.noise_aug_levels)
    b = cond.batch_size()
    for name in sorted(levels):
        img = getattr(cond, name)
        if img is None:
            continue
        lvl = torch.as_tensor(levels[name], dtype=img.dtype)
        if lvl.ndim == 0:
            lvl = lvl.expand(b).clone()
        if torch.any((lvl < 0) | (lvl > 1)):
            raise ValueError(f"noise augmentation level for {name} outside [0, 1]")
        changes[name] = apply_noise_aug(img, lvl, rng, sched)
        recorded[name] = lvl
    return cond.replace(noise_aug_levels=recorded, **changes)


def null_condition(cond: ConditioningBundle, mask: Optional[torch.Tensor] = None) -> ConditioningBundle:
    """Zero images and poses (all of them, or only the batch rows where ``mask`` is True)."""

    def zero(v):
        if v is None:
            return None
        if mask is None:
            return torch.zeros_like(v)
        keep = (~mask).to(v.dtype).reshape(-1, *([1] * (v.ndim - 1)))
        return v * keep

    return cond.replace(
        agnostic_rgb=zero(cond.agnostic_rgb),
        person_pose=zero(cond.person_pose),
        garment=zero(cond.garment),
        garment_pose=zero(cond.garment_pose),
        low_res=zero(cond.low_res),
    )


def conditioning_dropout(
    cond: ConditioningBundle, p: float, rng: torch.Generator, per_input: bool = False
) -> ConditioningBundle:
    """Zero the whole bundle of each batch row with probability ``p``.

    With ``per_input`` each conditioning input gets its own coin instead.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    if p == 0.0:
        return cond
    b = cond.batch_size()
    if not per_input:
        return null_condition(cond, torch.rand(b, generator=rng) < p)
    out = cond
    for names in (("agnostic_rgb",), ("garment",), ("person_pose", "garment_pose"), ("low_res",)):
        mask = torch.rand(b, generator=rng) < p
        dropped = null_condition(cond, mask)
        out = out.replace(**{n: getattr(dropped, n) for n in names})
    return out


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """eps_uncond + w * (eps_cond - eps_uncond); exact at w = 0 and w = 1."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional and unconditional predictions differ in shape")
    return torch.lerp(eps_uncond, eps_cond, float(w))


# ---------------------------------------------------------------------------
# samplers


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "ddpm"
    steps: int = 64
    guidance_weight: float = 2.0
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")
        if self.guidance_weight < 0 or not 0.0 <= self.eta <= 1.0:
            raise ValueError("guidance weight must be >= 0 and eta in [0, 1]")


def guided_eps(model: Callable, z: torch.Tensor, t: torch.Tensor, cond, w: float) -> torch.Tensor:
    if cond is None or w == 1.0:
        return model(z, t, cond)
    both = model(
        torch.cat([z, z]),
        torch.cat([t, t]),
        ConditioningBundle.cat([cond, null_condition(cond)]),
    )
    eps_c, eps_u = both.chunk(2)
    return cfg_combine(eps_c, eps_u, w)


def ddpm_moments(z_t, x_hat, t: float, s: float, sched: NoiseSchedule):
    """Mean and variance of the Gaussian posterior q(z_s | z_t, x = x_hat), s < t."""
    a_t, a_s = sched.alpha(t).item(), sched.alpha(s).item()
    v_t, v_s = sched.sigma(t).item() ** 2, sched.sigma(s).item() ** 2
    a_ts = a_t / a_s
    v_ts = v_t - a_ts**2 * v_s
    mean = (a_ts * v_s / v_t) * z_t + (a_s * v_ts / v_t) * x_hat
    return mean, v_ts * v_s / v_t


def ddim_moments(z_t, x_hat, t: float, s: float, sched: NoiseSchedule, eta: float):
    """Mean and variance of the DDIM update z_t -> z_s with stochasticity ``eta``."""
    a_t, a_s = sched.alpha(t).item(), sched.alpha(s).item()
    v_t, v_s = sched.sigma(t).item() ** 2, sched.sigma(s).item() ** 2
    eps = (z_t - a_t * x_hat) / math.sqrt(v_t)
    var = eta**2 * (v_s / v_t) * (1.0 - a_t**2 / a_s**2)
    mean = a_s * x_hat + math.sqrt(max(v_s - var, 0.0)) * eps
    return mean, var


def _run_sampler(model, cond, sched, spec: SamplerSpec, z, rng, moments):
    grid = torch.linspace(1.0, 0.0, spec.steps + 1, dtype=torch.float64)
    for i in range(spec.steps):
        t, s = grid[i].item(), grid[i + 1].item()
        t_batch = torch.full((z.shape[0],), t, dtype=z.dtype)
        eps = guided_eps(model, z, t_batch, cond, spec.guidance_weight)
        if not torch.all(torch.isfinite(eps)):
            raise DiffusionError(f"non-finite model output at sampler step {i}")
        x_hat = eps_to_x(z, eps, t, sched).clamp(-1.0, 1.0)
        if i == spec.steps - 1:
            return x_hat
        mean, var = moments(z, x_hat, t, s)
        if var > 0:
            z = mean + math.sqrt(var) * torch.randn(z.shape, generator=rng, dtype=z.dtype)
        else:
            z = mean
        if not torch.all(torch.isfinite(z)):
            raise DiffusionError(f"non-finite latent at sampler step {i}")
    return z


@torch.no_grad()
def ddpm_sample(model, cond, sched: NoiseSchedule, spec: SamplerSpec, shape, rng: torch.Generator, dtype=torch.float32):
    """Ancestral sampling from pure noise over a uniform grid of ``spec.steps`` steps."""
    if spec.kind != "ddpm":
        raise ValueError("ddpm_sample needs a ddpm SamplerSpec")
    z = torch.randn(tuple(shape), generator=rng, dtype=dtype)
    return _run_sampler(model, cond, sched, spec, z, rng, lambda z, x, t, s: ddpm_moments(z, x, t, s, sched))


@torch.no_grad()
def ddim_sample(model, cond, sched: NoiseSchedule, spec: SamplerSpec, shape, rng: Optional[torch.Generator], dtype=torch.float32):
    """DDIM sampling; with eta = 0 the result does not depend on ``rng`` at all."""
    if spec.kind != "ddim":
        raise ValueError("ddim_sample needs a ddim SamplerSpec")
    latent_rng = torch.Generator().manual_seed(DDIM_LATENT_SEED)
    z = torch.randn(tuple(shape), generator=latent_rng, dtype=dtype)
    return _run_sampler(
        model, cond, sched, spec, z, rng, lambda z, x, t, s: ddim_moments(z, x, t, s, sched, spec.eta)
    )


def sample(model, cond, sched, spec: SamplerSpec, shape, rng, dtype=torch.float32):
    fn = ddpm_sample if spec.kind == "ddpm" else ddim_sample
    return fn(model, cond, sched, spec, shape, rng, dtype=dtype)
