import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tryon_cascade import diffcore as dc
from tryon_cascade.datamodel import ConditioningBundle

from conftest import random_bundle

SCHED = dc.cosine_schedule()
GRID = torch.linspace(0, 1, 1001, dtype=torch.float64)


def test_schedule_identity_and_shape():
    a, s = SCHED.alpha(GRID), SCHED.sigma(GRID)
    assert torch.max(torch.abs(a**2 + s**2 - 1)) < 1e-12
    assert torch.all(a[1:] <= a[:-1])
    assert SCHED.alpha(0.0) >= 1 - 1e-3 and SCHED.alpha(1.0) <= 1e-2
    assert SCHED.alpha(0.0).item() == pytest.approx(0.999922292480975, abs=1e-12)
    assert torch.all(SCHED.weight(GRID) == 1)


def _bisect_half_snr():
    # independent root of alpha(t) = sqrt(0.5) using the closed form
    f = lambda t: math.cos(math.pi / 2 * (t + 0.008) / 1.008) - math.sqrt(0.5)  # noqa: E731
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if f(mid) > 0 else (lo, mid)
    return 0.5 * (lo + hi)


def test_forward_corrupt_examples():
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64) * 2 - 1
    e = torch.randn_like(x)
    a0, s0 = SCHED.alpha(0.0).item(), SCHED.sigma(0.0).item()
    assert torch.all((dc.forward_corrupt(x, e, 0.0, SCHED) - x).abs() <= (1 - a0) * x.abs() + s0 * e.abs() + 1e-12)
    assert torch.equal(dc.forward_corrupt(torch.zeros_like(x), e, 0.4, SCHED), SCHED.sigma(0.4).item() * e)
    t = _bisect_half_snr()
    z = dc.forward_corrupt(torch.ones(1), torch.ones(1), t, SCHED)
    assert z.item() == pytest.approx(1.414214, abs=1e-6)
    with pytest.raises(ValueError):
        dc.forward_corrupt(x, e[:1], 0.3, SCHED)


def test_per_sample_timesteps_broadcast():
    x = torch.ones(3, 1, 2, 2, dtype=torch.float64)
    t = torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64)
    z = dc.forward_corrupt(x, torch.zeros_like(x), t, SCHED)
    assert torch.allclose(z[:, 0, 0, 0], SCHED.alpha(t))


@given(st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_round_trip_property(t, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 5, 5, generator=g, dtype=torch.float64) * 2 - 1
    e = torch.randn(x.shape, generator=g, dtype=torch.float64)
    back = dc.eps_to_x(dc.forward_corrupt(x, e, t, SCHED), e, t, SCHED)
    assert torch.max(torch.abs(back - x)) < 1e-6


def test_eps_to_x_examples():
    e = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    assert torch.allclose(dc.eps_to_x(SCHED.sigma(0.6).item() * e, e, 0.6, SCHED), torch.zeros_like(e), atol=1e-15)
    g = torch.Generator().manual_seed(3)
    x = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    back = dc.eps_to_x(dc.forward_corrupt(x, e.repeat(1, 1, 4, 4), 0.3, SCHED), e.repeat(1, 1, 4, 4), 0.3, SCHED)
    assert torch.max(torch.abs(back - x)) < 1e-6
    with pytest.raises(dc.DiffusionError, match="timestep too noisy for x-recovery"):
        dc.eps_to_x(e, e, 1.0, dc.cosine_schedule(alpha_min=0.0))


def test_variance_preservation():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(200_000, generator=g, dtype=torch.float64)
    e = torch.randn(200_000, generator=g, dtype=torch.float64)
    for t in np.linspace(0, 1, 11):
        assert abs(dc.forward_corrupt(x, e, float(t), SCHED).var().item() - 1) < 0.02


class EpsOracle:
    """Returns the true noise (or a constant offset of it) for known x, eps."""

    def __init__(self, x, eps, offset=0.0):
        self.x, self.eps, self.offset = x, eps, offset

    def __call__(self, z, t, cond):
        return self.eps + self.offset


def test_loss_examples():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 3, 8, 8, generator=g) * 2 - 1
    e = torch.randn(x.shape, generator=g)
    assert dc.denoising_loss(x, None, EpsOracle(x, e), 0.4, e, SCHED).item() == 0.0
    assert dc.denoising_loss(x, None, EpsOracle(x, e, 0.3), 0.4, e, SCHED).item() == pytest.approx(0.09, rel=1e-5)
    with pytest.raises(dc.DiffusionError):
        dc.denoising_loss(x, None, lambda z, t, c: z * float("nan"), 0.4, e, SCHED)


def test_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3, padding=1), torch.nn.SiLU(), torch.nn.Conv2d(4, 3, 1)).double()
    model = lambda z, t, c: net(z) * (1 + t[:, None, None, None])  # noqa: E731
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 5, 5, generator=g, dtype=torch.float64) * 2 - 1
    e = torch.randn(x.shape, generator=g, dtype=torch.float64)
    t = torch.tensor([0.2, 0.8], dtype=torch.float64)
    loss = dc.denoising_loss(x, None, model, t, e, SCHED)
    params = list(net.parameters())
    grads = torch.autograd.grad(loss, params)
    h = 1e-5
    worst = 0.0
    with torch.no_grad():
        for p, gp in zip(params, grads):
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                lp = dc.denoising_loss(x, None, model, t, e, SCHED).item()
                flat[i] = old - h
                lm = dc.denoising_loss(x, None, model, t, e, SCHED).item()
                flat[i] = old
                fd = (lp - lm) / (2 * h)
                a = gp.view(-1)[i].item()
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    assert worst < 1e-4


def test_noise_aug():
    g = torch.Generator().manual_seed(0)
    img = torch.rand(1, 3, 64, 64, generator=g) * 2 - 1
    # at t_na = 0 only sigma(0) ~ 0.0125 of noise remains
    assert (dc.apply_noise_aug(img, 0.0, torch.Generator().manual_seed(1), SCHED) - img).std() < 0.02
    out = dc.apply_noise_aug(img, 1.0, torch.Generator().manual_seed(1), SCHED)
    corr = np.corrcoef(out.flatten().numpy(), img.flatten().numpy())[0, 1]
    assert abs(corr) < 0.05
    again = dc.apply_noise_aug(img, 1.0, torch.Generator().manual_seed(1), SCHED)
    assert torch.equal(out, again)


def test_augment_bundle_records_levels(gen):
    cond = random_bundle(3, 8, gen)
    out = dc.augment_bundle(cond, {"garment": 0.25, "agnostic_rgb": torch.tensor([0.0, 0.5, 1.0])}, gen, SCHED)
    assert torch.allclose(out.noise_aug_levels["garment"], torch.full((3,), 0.25))
    assert torch.equal(out.noise_aug_levels["agnostic_rgb"], torch.tensor([0.0, 0.5, 1.0]))
    assert not torch.equal(out.garment, cond.garment)
    assert torch.equal(out.person_pose, cond.person_pose)
    with pytest.raises(ValueError):
        dc.augment_bundle(cond, {"garment": 1.5}, gen, SCHED)


def _is_zero(c: ConditioningBundle, row):
    return all(not v[row].any() for v in (c.agnostic_rgb, c.person_pose, c.garment, c.garment_pose))


def test_dropout_endpoints(gen):
    cond = random_bundle(4, 4, gen, levels={"garment": torch.full((4,), 0.3)})
    assert dc.conditioning_dropout(cond, 0.0, gen) is cond
    z = dc.conditioning_dropout(cond, 1.0, gen)
    assert all(_is_zero(z, r) for r in range(4))
    assert torch.equal(z.noise_aug_levels["garment"], cond.noise_aug_levels["garment"])


def test_dropout_rate_and_single_coin():
    g = torch.Generator().manual_seed(0)
    cond = random_bundle(10_000, 1, g)
    out = dc.conditioning_dropout(cond, 0.1, torch.Generator().manual_seed(1))
    zeroed = torch.stack([(v.flatten(1) == 0).all(1) for v in (out.agnostic_rgb, out.person_pose, out.garment, out.garment_pose)])
    # one coin per bundle: every input of a row is dropped together
    assert torch.all(zeroed.all(0) == zeroed.any(0))
    assert 0.08 <= zeroed[0].double().mean().item() <= 0.12


def test_per_input_dropout_is_independent():
    g = torch.Generator().manual_seed(0)
    cond = random_bundle(4000, 1, g)
    out = dc.conditioning_dropout(cond, 0.5, torch.Generator().manual_seed(2), per_input=True)
    a = (out.agnostic_rgb.flatten(1) == 0).all(1)
    b = (out.garment.flatten(1) == 0).all(1)
    assert 0.4 < a.double().mean() < 0.6 and 0.2 < (a & b).double().mean() < 0.3


def test_cfg_combine_examples():
    a, b = torch.randn(5), torch.randn(5)
    assert torch.equal(dc.cfg_combine(a, b, 1.0), a)
    assert torch.equal(dc.cfg_combine(a, b, 0.0), b)
    assert dc.cfg_combine(torch.tensor(0.5), torch.tensor(0.1), 2.0).item() == pytest.approx(0.9, abs=1e-7)
    with pytest.raises(ValueError):
        dc.cfg_combine(a, b[:3], 2.0)


@given(st.floats(-10, 10), st.integers(0, 1000))
@settings(max_examples=100, deadline=None)
def test_cfg_of_equal_predictions_is_identity(w, seed):
    a = torch.randn(7, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    assert torch.equal(dc.cfg_combine(a, a, w), a)


def test_sampler_spec_validation():
    with pytest.raises(ValueError):
        dc.SamplerSpec(steps=0)
    with pytest.raises(ValueError):
        dc.SamplerSpec(kind="euler")
    with pytest.raises(ValueError):
        dc.SamplerSpec(kind="ddim", eta=1.5)


class MixtureDenoiser:
    """Exact eps-prediction for data uniformly distributed over a few fixed images."""

    def __init__(self, xs, sched):
        self.xs, self.sched = xs, sched
        self.calls = []

    def __call__(self, z, t, cond):
        self.calls.append(cond)
        a = self.sched.alpha(t).to(z.dtype)[:, None, None, None]
        s = self.sched.sigma(t).to(z.dtype)[:, None, None, None]
        d2 = torch.stack([((z - a * x) ** 2).flatten(1).sum(1) for x in self.xs], dim=1)
        w = torch.softmax(-d2 / (2 * s.flatten()[:, None] ** 2), dim=1)
        x_hat = torch.einsum("bk,kchw->bchw", w, torch.stack([x[0] for x in self.xs]))
        return (z - a * x_hat) / s


def _targets(res=32, k=1):
    g = torch.Generator().manual_seed(7)
    return [torch.rand(1, 3, res, res, generator=g, dtype=torch.float64) * 1.6 - 0.8 for _ in range(k)]


def test_ddpm_reproducible_and_recovers_single_example():
    (x,) = _targets()
    model = MixtureDenoiser([x], SCHED)
    spec = dc.SamplerSpec("ddpm", steps=32, guidance_weight=1.0)
    a = dc.ddpm_sample(model, None, SCHED, spec, (2, 3, 32, 32), torch.Generator().manual_seed(0), torch.float64)
    b = dc.ddpm_sample(model, None, SCHED, spec, (2, 3, 32, 32), torch.Generator().manual_seed(0), torch.float64)
    assert torch.equal(a, b)
    mse = ((a - x) ** 2).mean().item()
    assert 10 * math.log10(4 / max(mse, 1e-30)) > 25


def test_one_step_sampler_is_clipped_projection():
    model = lambda z, t, c: -z  # noqa: E731 - drives x_hat far outside [-1, 1]
    for kind in ("ddpm", "ddim"):
        out = dc.sample(model, None, SCHED, dc.SamplerSpec(kind, steps=1), (1, 3, 8, 8), torch.Generator().manual_seed(0))
        assert out.min() >= -1 and out.max() <= 1
        z = torch.randn((1, 3, 8, 8), generator=torch.Generator().manual_seed(0 if kind == "ddpm" else dc.DDIM_LATENT_SEED))
        assert torch.allclose(out, dc.eps_to_x(z, -z, 1.0, SCHED).clamp(-1, 1))


def test_ddim_eta0_ignores_seed():
    xs = _targets(k=2)
    model = MixtureDenoiser(xs, SCHED)
    spec = dc.SamplerSpec("ddim", steps=16, guidance_weight=1.0)
    a = dc.ddim_sample(model, None, SCHED, spec, (1, 3, 32, 32), torch.Generator().manual_seed(0), torch.float64)
    b = dc.ddim_sample(model, None, SCHED, spec, (1, 3, 32, 32), torch.Generator().manual_seed(99), torch.float64)
    c = dc.ddim_sample(model, None, SCHED, spec, (1, 3, 32, 32), None, torch.float64)
    assert torch.equal(a, b) and torch.equal(a, c)


def test_ddim_dense_vs_250_steps_converge():
    xs = _targets(k=3)
    model = MixtureDenoiser(xs, SCHED)
    run = lambda n: dc.ddim_sample(  # noqa: E731
        model, None, SCHED, dc.SamplerSpec("ddim", steps=n, guidance_weight=1.0), (4, 3, 32, 32), None, torch.float64
    )
    assert (run(1000) - run(250)).abs().mean().item() < 0.05


def test_ddim_eta1_moments_equal_ddpm():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    lin = lambda z: 0.3 * z + 0.1  # noqa: E731 - fixed linear x-predictor
    grid = torch.linspace(1, 0, 65, dtype=torch.float64)
    for i in range(64):
        t, s = grid[i].item(), grid[i + 1].item()
        m1, v1 = dc.ddpm_moments(z, lin(z), t, s, SCHED)
        m2, v2 = dc.ddim_moments(z, lin(z), t, s, SCHED, eta=1.0)
        assert torch.max(torch.abs(m1 - m2)) < 1e-10
        assert abs(v1 - v2) < 1e-10


def test_guidance_uses_zeroed_condition(gen):
    cond = random_bundle(2, 8, gen, levels={"garment": torch.full((2,), 0.2)})
    seen = []

    def model(z, t, c):
        seen.append(c)
        return c.garment[:, :3] * 0 + (c.garment.abs().sum() > 0).to(z.dtype)

    out = dc.guided_eps(model, torch.zeros(2, 3, 8, 8), torch.full((2,), 0.5), cond, 2.0)
    c = seen[0]
    assert c.batch_size() == 4 and not c.garment[2:].any() and not c.person_pose[2:].any()
    assert torch.equal(c.noise_aug_levels["garment"], torch.full((4,), 0.2))
    assert out.shape == (2, 3, 8, 8)
    seen.clear()
    dc.guided_eps(model, torch.zeros(2, 3, 8, 8), torch.full((2,), 0.5), cond, 1.0)
    assert seen[0] is cond


def test_non_finite_reports_step():
    calls = {"n": 0}

    def model(z, t, c):
        calls["n"] += 1
        return z * (float("nan") if calls["n"] == 3 else 0.0)

    with pytest.raises(dc.DiffusionError, match="step 2"):
        dc.ddpm_sample(model, None, SCHED, dc.SamplerSpec("ddpm", 8, 1.0), (1, 3, 4, 4), torch.Generator().manual_seed(0))


@pytest.mark.parametrize("kind", ["ddpm", "ddim"])
def test_samplers_stay_in_range(kind):
    xs = _targets(res=8, k=2)
    model = MixtureDenoiser(xs, SCHED)
    spec = dc.SamplerSpec(kind, 12, 1.0, eta=0.5 if kind == "ddim" else 0.0)
    out = dc.sample(model, None, SCHED, spec, (3, 3, 8, 8), torch.Generator().manual_seed(4), torch.float64)
    assert out.min() >= -1 and out.max() <= 1
    again = dc.sample(model, None, SCHED, spec, (3, 3, 8, 8), torch.Generator().manual_seed(4), torch.float64)
    assert torch.equal(out, again)
