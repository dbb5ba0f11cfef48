"""Shared domain types and their on-disk formats.

Images are float32 arrays of shape (H, W, 3) in [-1, 1]. Parsing maps are
integer (H, W) arrays over a six-label set, and poses are (17, 3) arrays of
normalized (x, y, visibility) rows in COCO keypoint order.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image

NUM_KEYPOINTS = 17

COCO_KEYPOINTS = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

BACKGROUND, HEAD, HANDS, UPPER_GARMENT, LOWER_BODY, OTHER_SKIN = range(6)
LABELS = {
    BACKGROUND: "background",
    HEAD: "head",
    HANDS: "hands",
    UPPER_GARMENT: "upper-garment",
    LOWER_BODY: "lower-body",
    OTHER_SKIN: "other-skin",
}

# Palette for parsing PNGs; index i is label i.
PARSING_PALETTE = (
    (0, 0, 0),
    (255, 220, 0),
    (0, 200, 255),
    (220, 30, 30),
    (30, 60, 200),
    (255, 150, 120),
)


class FormatError(ValueError):
    """Raised when a file does not match the expected on-disk format."""


@dataclass(frozen=True)
class TryOnExample:
    person_image: np.ndarray
    person_parsing: np.ndarray
    person_pose: np.ndarray
    garment_image: np.ndarray
    garment_parsing: np.ndarray
    garment_pose: np.ndarray
    ground_truth: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def resolution(self) -> int:
        return self.person_image.shape[0]


NOISE_AUG_KEYS = ("agnostic_rgb", "garment", "low_res")


@dataclass(frozen=True)
class ConditioningBundle:
    """Batched try-on conditioning for one denoiser call.

    Images are (B, 3, H, W) tensors, poses (B, 17, 3). ``noise_aug_levels``
    maps each augmented image name to a (B,) tensor of levels in [0, 1].
    ``agnostic_rgb`` is None for models that do not consume it, ``low_res``
    is only present for super-resolution stages.
    """

    agnostic_rgb: Optional[torch.Tensor]
    person_pose: Optional[torch.Tensor]
    garment: Optional[torch.Tensor]
    garment_pose: Optional[torch.Tensor]
    noise_aug_levels: dict = field(default_factory=dict)
    low_res: Optional[torch.Tensor] = None

    def images(self) -> dict:
        return {
            k: v
            for k, v in (("agnostic_rgb", self.agnostic_rgb), ("garment", self.garment), ("low_res", self.low_res))
            if v is not None
        }

    def batch_size(self) -> int:
        for v in (self.agnostic_rgb, self.garment, self.low_res, self.person_pose, self.garment_pose):
            if v is not None:
                return v.shape[0]
        raise ValueError("empty conditioning bundle")

    def replace(self, **changes) -> "ConditioningBundle":
        return dataclasses.replace(self, **changes)

    def map(self, fn) -> "ConditioningBundle":
        """Apply ``fn`` to every tensor field, including the level tensors."""
        m = lambda v: None if v is None else fn(v)  # noqa: E731
        return ConditioningBundle(
            agnostic_rgb=m(self.agnostic_rgb),
            person_pose=m(self.person_pose),
            garment=m(self.garment),
            garment_pose=m(self.garment_pose),
            noise_aug_levels={k: fn(v) for k, v in self.noise_aug_levels.items()},
            low_res=m(self.low_res),
        )

    @staticmethod
    def cat(bundles: list) -> "ConditioningBundle":
        first = bundles[0]
        c = lambda name: None if getattr(first, name) is None else torch.cat([getattr(b, name) for b in bundles])  # noqa: E731
        return ConditioningBundle(
            agnostic_rgb=c("agnostic_rgb"),
            person_pose=c("person_pose"),
            garment=c("garment"),
            garment_pose=c("garment_pose"),
            noise_aug_levels={k: torch.cat([b.noise_aug_levels[k] for b in bundles]) for k in first.noise_aug_levels},
            low_res=c("low_res"),
        )


# ---------------------------------------------------------------------------
# validation


def image_violations(name: str, img) -> list[str]:
    out = []
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        return [f"{name}: expected shape HxWx3, got {img.shape}"]
    if not np.all(np.isfinite(img)):
        out.append(f"{name}: non-finite values")
    elif img.min() < -1.0 or img.max() > 1.0:
        out.append(f"{name}: values outside [-1, 1]")
    return out


def parsing_violations(name: str, parsing, hw: Optional[tuple] = None) -> list[str]:
    parsing = np.asarray(parsing)
    if parsing.ndim != 2:
        return [f"{name}: expected shape HxW, got {parsing.shape}"]
    out = []
    if not np.issubdtype(parsing.dtype, np.integer):
        out.append(f"{name}: labels must be integers")
    elif parsing.size and (parsing.min() < 0 or parsing.max() >= len(LABELS)):
        out.append(f"{name}: label outside {{0..{len(LABELS) - 1}}}")
    if hw is not None and parsing.shape != tuple(hw):
        out.append(f"{name}: shape {parsing.shape} inconsistent with paired image {tuple(hw)}")
    return out


def pose_violations(name: str, pose) -> list[str]:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (NUM_KEYPOINTS, 3):
        return [f"{name}: expected shape ({NUM_KEYPOINTS}, 3), got {pose.shape}"]
    out = []
    if not np.all(np.isfinite(pose)):
        return [f"{name}: non-finite values"]
    vis = pose[:, 2]
    if not np.all((vis == 0) | (vis == 1)):
        out.append(f"{name}: visibility must be 0 or 1")
    shown = vis == 1
    xy = pose[shown, :2]
    if xy.size and (xy.min() < 0 or xy.max() > 1):
        out.append(f"{name}: visible keypoint coordinates outside range [0, 1]")
    hidden = pose[vis == 0, :2]
    if hidden.size and np.any(hidden != 0):
        out.append(f"{name}: invisible keypoints must carry x = y = 0")
    return out


def validate_example(e: TryOnExample) -> list[str]:
    """Return every invariant violation in ``e``; an empty list means valid.

    Never raises: malformed fields are reported as violations.
    """
    try:
        out = []
        out += image_violations("person_image", e.person_image)
        out += image_violations("garment_image", e.garment_image)
        p_hw = np.shape(e.person_image)[:2]
        g_hw = np.shape(e.garment_image)[:2]
        out += parsing_violations("person_parsing", e.person_parsing, p_hw)
        out += parsing_violations("garment_parsing", e.garment_parsing, g_hw)
        out += pose_violations("person_pose", e.person_pose)
        out += pose_violations("garment_pose", e.garment_pose)
        if e.ground_truth is not None:
            out += image_violations("ground_truth", e.ground_truth)
            if np.shape(e.ground_truth)[:2] != p_hw:
                out.append("ground_truth: shape inconsistent with person_image")
        return out
    except Exception as exc:  # noqa: BLE001 - validation is total by contract
        return [f"example: unvalidatable ({type(exc).__name__}: {exc})"]


# ---------------------------------------------------------------------------
# codecs


def decode_image(src: Union[str, Path, bytes]) -> np.ndarray:
    """Decode an 8-bit RGB PNG into a float32 (H, W, 3) array in [-1, 1]."""
    data = src if isinstance(src, (bytes, bytearray)) else Path(src).read_bytes()
    try:
        im = Image.open(io.BytesIO(data))
        im.load()
    except Exception as exc:
        raise FormatError(f"not a decodable image: {exc}") from exc
    if im.format != "PNG":
        raise FormatError(f"expected PNG, got {im.format}")
    if im.mode != "RGB":
        raise FormatError(f"expected 8-bit 3-channel RGB PNG, got mode {im.mode}")
    b = np.asarray(im, dtype=np.float64)
    return (2.0 * (b / 255.0) - 1.0).astype(np.float32)


def quantize_image(img: np.ndarray) -> np.ndarray:
    # round-half-up of (x+1)/2*255
    v = (np.asarray(img, dtype=np.float64) + 1.0) * 0.5 * 255.0
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def encode_image(img: np.ndarray, path: Union[str, Path, None] = None) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"expected HxWx3 image, got shape {img.shape}")
    buf = io.BytesIO()
    Image.fromarray(quantize_image(img), mode="RGB").save(buf, format="PNG", compress_level=6)
    data = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def encode_parsing(parsing: np.ndarray, path: Union[str, Path, None] = None) -> bytes:
    bad = parsing_violations("parsing", parsing)
    if bad:
        raise FormatError("; ".join(bad))
    im = Image.fromarray(np.asarray(parsing, dtype=np.uint8), mode="P")
    im.putpalette([c for rgb in PARSING_PALETTE for c in rgb])
    buf = io.BytesIO()
    im.save(buf, format="PNG", compress_level=6)
    data = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def decode_parsing(src: Union[str, Path, bytes]) -> np.ndarray:
    data = src if isinstance(src, (bytes, bytearray)) else Path(src).read_bytes()
    try:
        im = Image.open(io.BytesIO(data))
        im.load()
    except Exception as exc:
        raise FormatError(f"not a decodable image: {exc}") from exc
    if im.format != "PNG" or im.mode not in ("P", "L"):
        raise FormatError(f"expected single-channel PNG, got {im.format}/{im.mode}")
    labels = np.asarray(im, dtype=np.int64)
    bad = parsing_violations("parsing", labels)
    if bad:
        raise FormatError("; ".join(bad))
    return labels


def encode_pose(pose: np.ndarray, path: Union[str, Path, None] = None) -> str:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (NUM_KEYPOINTS, 3):
        raise FormatError(f"expected ({NUM_KEYPOINTS}, 3) keypoints, got {pose.shape}")
    text = json.dumps({"keypoints": [[float(x), float(y), int(v)] for x, y, v in pose]})
    if path is not None:
        Path(path).write_text(text)
    return text


def decode_pose(src: Union[str, Path]) -> np.ndarray:
    text = Path(src).read_text() if not str(src).lstrip().startswith("{") else str(src)
    try:
        obj = json.loads(text)
        pose = np.asarray(obj["keypoints"], dtype=np.float64)
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad pose JSON: {exc}") from exc
    if pose.shape != (NUM_KEYPOINTS, 3):
        raise FormatError(f"expected {NUM_KEYPOINTS} keypoints of [x, y, v], got {pose.shape}")
    return pose


EXAMPLE_FILES = {
    "person_image": "person.png",
    "person_parsing": "person_parsing.png",
    "person_pose": "person_pose.json",
    "garment_image": "garment.png",
    "garment_parsing": "garment_parsing.png",
    "garment_pose": "garment_pose.json",
    "ground_truth": "ground_truth.png",
}


def save_example(e: TryOnExample, directory: Union[str, Path]) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for key, fname in EXAMPLE_FILES.items():
        value = getattr(e, key)
        if value is None:
            continue
        path = d / fname
        if key.endswith("_image") or key == "ground_truth":
            encode_image(value, path)
        elif key.endswith("_parsing"):
            encode_parsing(value, path)
        else:
            encode_pose(value, path)
        written.append(path)
    if e.meta:
        path = d / "meta.json"
        path.write_text(json.dumps(e.meta, sort_keys=True, indent=1))
        written.append(path)
    return written


def load_example(directory: Union[str, Path]) -> TryOnExample:
    d = Path(directory)
    gt_path = d / EXAMPLE_FILES["ground_truth"]
    meta_path = d / "meta.json"
    return TryOnExample(
        person_image=decode_image(d / EXAMPLE_FILES["person_image"]),
        person_parsing=decode_parsing(d / EXAMPLE_FILES["person_parsing"]),
        person_pose=decode_pose(d / EXAMPLE_FILES["person_pose"]),
        garment_image=decode_image(d / EXAMPLE_FILES["garment_image"]),
        garment_parsing=decode_parsing(d / EXAMPLE_FILES["garment_parsing"]),
        garment_pose=decode_pose(d / EXAMPLE_FILES["garment_pose"]),
        ground_truth=decode_image(gt_path) if gt_path.exists() else None,
        meta=json.loads(meta_path.read_text()) if meta_path.exists() else {},
    )
