import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from tryon_cascade import datamodel as dm
from tryon_cascade import synthpairs


@pytest.fixture(scope="module")
def example():
    return synthpairs.paired_example(0, 0, 32)


def _png(arr, mode):
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def test_well_formed_example_has_no_violations(example):
    assert dm.validate_example(example) == []


def test_keypoint_out_of_range_names_person_pose(example):
    pose = example.person_pose.copy()
    pose[3] = (1.5, 0.2, 1)
    bad = dm.validate_example(dm.TryOnExample(**{**example.__dict__, "person_pose": pose}))
    assert len(bad) == 1
    assert "person_pose" in bad[0] and "range" in bad[0]


def test_parsing_shape_mismatch_is_one_violation():
    img = np.zeros((64, 64, 3), np.float32)
    pose = np.zeros((17, 3))
    e = dm.TryOnExample(img, np.zeros((32, 32), np.int64), pose, img, np.zeros((64, 64), np.int64), pose)
    bad = dm.validate_example(e)
    assert len(bad) == 1 and "person_parsing" in bad[0]


def test_other_rules_are_reported(example):
    img = example.person_image.copy()
    img[0, 0, 0] = 1.5
    parsing = example.garment_parsing.copy()
    parsing[0, 0] = 9
    pose = example.garment_pose.copy()
    pose[0] = (0.0, 0.3, 0)
    e = dm.TryOnExample(img, example.person_parsing, example.person_pose, example.garment_image, parsing, pose)
    bad = dm.validate_example(e)
    assert any("person_image" in b for b in bad)
    assert any("garment_parsing" in b for b in bad)
    assert any("invisible" in b for b in bad)


@given(st.one_of(st.none(), st.integers(), st.text(), arrays(np.float64, st.integers(0, 4))))
@settings(max_examples=50, deadline=None)
def test_validate_is_total(junk):
    e = dm.TryOnExample(junk, junk, junk, junk, junk, junk, ground_truth=junk)
    out = dm.validate_example(e)
    assert isinstance(out, list) and out


def test_decode_endpoints_and_midpoint():
    b = np.array([[[0, 255, 128]]], dtype=np.uint8)
    img = dm.decode_image(_png(b, "RGB"))
    assert img[0, 0, 0] == -1.0
    assert img[0, 0, 1] == 1.0
    assert img[0, 0, 2] == pytest.approx(0.00392156862745098, abs=1e-7)


def test_encode_decode_png_is_bitwise_identity():
    rng = np.random.default_rng(0)
    raw = _png(rng.integers(0, 256, (9, 7, 3), dtype=np.uint8), "RGB")
    once = dm.encode_image(dm.decode_image(raw))
    assert np.array_equal(np.asarray(Image.open(io.BytesIO(once))), np.asarray(Image.open(io.BytesIO(raw))))
    assert dm.encode_image(dm.decode_image(once)) == once


@given(arrays(np.float32, (5, 6, 3), elements=st.floats(-1, 1, width=32)))
@settings(max_examples=50, deadline=None)
def test_image_round_trip_within_quantization(img):
    back = dm.decode_image(dm.encode_image(img))
    assert np.max(np.abs(back - img)) <= 1.0 / 255 + 1e-6


def test_round_half_up():
    # x = 0 maps to 127.5 exactly, which rounds up
    assert dm.quantize_image(np.zeros((1, 1, 3)))[0, 0, 0] == 128
    assert dm.quantize_image(np.full((1, 1, 3), -1.0))[0, 0, 0] == 0


def test_decode_rejects_non_png_and_wrong_channels():
    buf = io.BytesIO()
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(buf, format="JPEG")
    with pytest.raises(dm.FormatError):
        dm.decode_image(buf.getvalue())
    with pytest.raises(dm.FormatError):
        dm.decode_image(_png(np.zeros((4, 4), np.uint8), "L"))
    with pytest.raises(dm.FormatError):
        dm.decode_image(b"not an image")


def test_parsing_and_pose_round_trip(example, tmp_path):
    assert np.array_equal(dm.decode_parsing(dm.encode_parsing(example.person_parsing)), example.person_parsing)
    dm.encode_pose(example.person_pose, tmp_path / "p.json")
    assert np.array_equal(dm.decode_pose(tmp_path / "p.json"), example.person_pose)
    with pytest.raises(dm.FormatError):
        dm.decode_pose('{"keypoints": [[0, 0, 1]]}')


def test_example_round_trip(example, tmp_path):
    dm.save_example(example, tmp_path / "ex")
    back = dm.load_example(tmp_path / "ex")
    assert dm.validate_example(back) == []
    assert np.array_equal(back.person_parsing, example.person_parsing)
    assert np.array_equal(back.garment_pose, example.garment_pose)
    assert np.max(np.abs(back.person_image - example.person_image)) <= 1 / 255 + 1e-6
    assert back.meta == example.meta
    # saving the decoded example again is byte-stable
    dm.save_example(back, tmp_path / "ex2")
    for name in dm.EXAMPLE_FILES.values():
        assert (tmp_path / "ex" / name).read_bytes() == (tmp_path / "ex2" / name).read_bytes()


def test_bundle_cat_and_map():
    g = torch.Generator().manual_seed(0)
    b = dm.ConditioningBundle(
        torch.randn(2, 3, 4, 4, generator=g), torch.rand(2, 17, 3, generator=g), torch.randn(2, 3, 4, 4, generator=g),
        torch.rand(2, 17, 3, generator=g), {"garment": torch.tensor([0.1, 0.2])},
    )
    both = dm.ConditioningBundle.cat([b, b])
    assert both.batch_size() == 4
    assert torch.equal(both.noise_aug_levels["garment"], torch.tensor([0.1, 0.2, 0.1, 0.2]))
    head = both.map(lambda v: v[:2])
    assert torch.equal(head.garment, b.garment) and head.low_res is None
    assert set(b.images()) == {"agnostic_rgb", "garment"}
