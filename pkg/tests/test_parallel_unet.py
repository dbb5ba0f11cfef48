import dataclasses

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tryon_cascade.config import desk_config
from tryon_cascade.diffcore import null_condition
from tryon_cascade.layers import CrossAttention, PoseSelfAttention
from tryon_cascade.parallel_unet import (
    EfficientSRUNet,
    TryOnUNet,
    UNetConfig,
    build_model,
    built_param_count,
    noise_aug_keys,
    param_count,
)

from conftest import random_bundle, randomize_, toy_unet


def _levels(b, cfg, value=0.3):
    return {k: torch.full((b,), value) for k in noise_aug_keys(cfg)}


def test_config_invariants():
    with pytest.raises(ValueError, match="subset"):
        toy_unet(attention_resolutions=(2,))
    with pytest.raises(ValueError, match="garment_unet_stop_resolution"):
        toy_unet(garment_unet_stop_resolution=2)
    with pytest.raises(ValueError, match="num_heads"):
        toy_unet(channels=(4, 6), num_heads=4)
    with pytest.raises(ValueError, match="descending"):
        toy_unet(resolutions=(4, 8))
    with pytest.raises(ValueError, match="efficient"):
        toy_unet(variant="efficient")
    cfg = desk_config().base.unet
    assert UNetConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_shape_and_zero_init(gen):
    cfg = toy_unet()
    model = build_model(cfg)
    z = torch.randn(2, 3, 8, 8, generator=gen)
    cond = random_bundle(2, 8, gen, levels=_levels(2, cfg))
    out = model(z, torch.tensor([0.2, 0.9]), cond)
    assert out.shape == z.shape
    # zero-initialized output head: the untrained model predicts zero noise
    assert not out.any()
    for m in model.modules():
        if isinstance(m, (PoseSelfAttention, CrossAttention)):
            assert not m.out.weight.any()


def test_unconditional_pass_is_finite(gen):
    cfg = toy_unet()
    model = randomize_(build_model(cfg), gen, 0.2)
    cond = null_condition(random_bundle(2, 8, gen, levels=_levels(2, cfg)))
    out = model(torch.randn(2, 3, 8, 8, generator=gen), torch.tensor([0.5, 0.5]), cond)
    assert torch.all(torch.isfinite(out))


def test_batch_permutation_equivariance(gen):
    cfg = toy_unet()
    model = randomize_(build_model(cfg).double(), gen, 0.2)
    cond = random_bundle(4, 8, gen, dtype=torch.float64, levels={k: torch.rand(4, dtype=torch.float64) for k in noise_aug_keys(cfg)})
    z = torch.randn(4, 3, 8, 8, generator=gen, dtype=torch.float64)
    t = torch.rand(4, generator=gen, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    out = model(z, t, cond)
    out_p = model(z[perm], t[perm], cond.map(lambda v: v[perm]))
    assert torch.allclose(out[perm], out_p, atol=1e-12)


def test_garment_content_changes_output(gen):
    cfg = toy_unet()
    model = randomize_(build_model(cfg), gen, 0.2)
    cond = random_bundle(1, 8, gen, levels=_levels(1, cfg))
    z, t = torch.randn(1, 3, 8, 8, generator=gen), torch.tensor([0.5])
    other = cond.replace(garment=cond.garment + 0.5 * torch.randn(cond.garment.shape, generator=gen))
    assert (model(z, t, cond) - model(z, t, other)).abs().max() > 1e-4


def test_attention_rows_sum_to_one(gen):
    cfg = toy_unet()
    model = randomize_(build_model(cfg), gen, 0.2)
    weights = []
    for m in model.modules():
        if isinstance(m, (PoseSelfAttention, CrossAttention)):
            orig = m.forward
            m.forward = lambda *a, _orig=orig, **k: (lambda r: (weights.append(r[1]), r[0])[1])(_orig(*a, return_weights=True))
    model(torch.randn(2, 3, 8, 8, generator=gen), torch.tensor([0.3, 0.6]), random_bundle(2, 8, gen, levels=_levels(2, cfg)))
    assert len(weights) == 4  # self + cross attention, encoder and decoder block at 4x4
    for w in weights:
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_garment_unet_emits_attention_levels_and_stops_early():
    cfg = desk_config().base.unet
    model = TryOnUNet(cfg)
    gen = torch.Generator().manual_seed(0)
    cond = random_bundle(1, 32, gen, levels=_levels(1, cfg))
    emb, _, _ = model.embed(torch.tensor([0.5]), cond, 1, torch.float32)
    feats = model.garment_features(cond.garment, emb)
    assert {r for _, r, _ in feats} == set(cfg.attention_resolutions) == {8, 4}
    assert {(p, r) for p, r, _ in feats} == {("down", 8), ("down", 4), ("up", 4), ("up", 8)}
    g = model.garment_unet
    # decoder ends with the 8x8 blocks: no 16x16 or 32x32 up blocks, no output head
    assert [cfg.resolutions[i] for i in g.up_levels] == [4, 8]
    assert len(g.upsample) == 1 and g.head is None
    again = model.garment_features(cond.garment, emb)
    assert all(torch.equal(feats[k], again[k]) for k in feats)


def test_desk_geometry():
    cfg = desk_config()
    assert cfg.base.unet.channels == (64, 128, 256, 512) and cfg.base.unet.attention_resolutions == (8, 4)
    sr1 = cfg.sr1.unet
    assert sr1.attention_resolutions == (min(sr1.resolutions),)
    assert cfg.sr2.unet.variant == "efficient" and not cfg.sr2.unet.attention_resolutions


def test_sr_variant_needs_low_res(gen):
    cfg = toy_unet(low_res=True)
    model = build_model(cfg)
    z = torch.randn(2, 3, 8, 8, generator=gen)
    cond = random_bundle(2, 8, gen, low_res=4, levels=_levels(2, cfg))
    assert model(z, torch.tensor([0.1, 0.2]), cond).shape == z.shape
    assert model.in_channels == 9
    with pytest.raises(ValueError, match="low_res"):
        model(z, torch.tensor([0.1, 0.2]), cond.replace(low_res=None))


def test_resolution_must_divide(gen):
    model = build_model(toy_unet(resolutions=(8, 4), channels=(4, 8)))
    cond = random_bundle(1, 7, gen)
    with pytest.raises(ValueError, match="divide"):
        model(torch.randn(1, 3, 7, 7), torch.tensor([0.5]), cond)


def test_efficient_is_fully_convolutional(gen):
    cfg = UNetConfig(resolutions=(64, 32, 16), channels=(8, 8, 16), block_repeats=(1, 1, 1), attention_resolutions=(),
                     variant="efficient", low_res=True)
    model = randomize_(build_model(cfg), gen, 0.1)
    assert isinstance(model, EfficientSRUNet)
    assert not any(isinstance(m, (PoseSelfAttention, CrossAttention)) for m in model.modules())
    for res in (64, 128):
        cond = random_bundle(1, res, gen, low_res=res // 4, levels={"low_res": torch.tensor([0.1])})
        out = model(torch.randn(1, 3, res, res, generator=gen), torch.tensor([0.5]), cond)
        assert out.shape == (1, 3, res, res) and torch.all(torch.isfinite(out))


def test_concat_variant():
    par = desk_config().base.unet
    cat = dataclasses.replace(par, variant="concat")
    model = build_model(cat)
    assert model.in_channels == 9 and model.garment_unet is None
    assert not any(isinstance(m, CrossAttention) for m in model.modules())
    assert any(isinstance(m, PoseSelfAttention) for m in model.modules())
    assert param_count(cat) < param_count(par)
    gen = torch.Generator().manual_seed(0)
    out = model(torch.randn(2, 3, 32, 32), torch.tensor([0.3, 0.4]), random_bundle(2, 32, gen, levels=_levels(2, cat)))
    assert out.shape == (2, 3, 32, 32)


def test_embedding_depends_on_each_level(gen):
    cfg = toy_unet()
    model = randomize_(build_model(cfg), gen, 0.3)
    cond = random_bundle(1, 8, gen, levels=_levels(1, cfg, 0.2))
    t = torch.tensor([0.4])
    e1, _, _ = model.embed(t, cond, 1, torch.float32)
    e2, _, _ = model.embed(t, cond, 1, torch.float32)
    assert torch.equal(e1, e2) and e1.shape == (1, cfg.emb_dim)
    lv = dict(cond.noise_aug_levels, garment=torch.tensor([0.7]))
    e3, _, _ = model.embed(t, cond.replace(noise_aug_levels=lv), 1, torch.float32)
    assert (e1 - e3).abs().max() > 0


@given(
    st.integers(1, 3).flatmap(lambda n: st.tuples(
        st.just(n), st.lists(st.sampled_from([4, 8, 12]), min_size=n + 1, max_size=n + 1),
        st.lists(st.integers(1, 2), min_size=n + 1, max_size=n + 1))),
    st.sampled_from(["parallel", "concat", "efficient"]),
    st.booleans(),
)
@settings(max_examples=40, deadline=None)
def test_analytic_count_matches_built_model(shape, variant, agnostic):
    n, ch, rep = shape
    res = tuple(32 // 2**i for i in range(n + 1))
    kw = dict(resolutions=res, channels=tuple(ch), block_repeats=tuple(rep), variant=variant, num_heads=2,
              pose_embed_dim=6, emb_dim=10, time_encoding_dim=6, use_agnostic=agnostic)
    if variant == "efficient":
        kw.update(attention_resolutions=(), low_res=True)
    else:
        kw.update(attention_resolutions=res[-1:], garment_unet_stop_resolution=res[-1])
    cfg = UNetConfig(**kw)
    assert param_count(cfg) == built_param_count(cfg)
    assert param_count(cfg, conv_only=True) == built_param_count(cfg, conv_only=True)


def test_desk_configs_count_exactly():
    for stage in desk_config().stages():
        assert param_count(stage.unet) == built_param_count(stage.unet)
        model = build_model(stage.unet)
        assert param_count(stage.unet) == sum(p.numel() for p in model.parameters())


def test_doubling_width_quadruples_conv_params():
    cfg = desk_config().base.unet
    ratio = param_count(cfg.scaled(2), conv_only=True) / param_count(cfg, conv_only=True)
    assert ratio == pytest.approx(4.0, abs=0.02)
