"""Input preparation: garment segmentation, clothing-agnostic RGB, keypoint normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import HANDS, HEAD, LOWER_BODY, NUM_KEYPOINTS, UPPER_GARMENT

NEUTRAL = 0.0
KEEP_LABELS = (HEAD, HANDS, LOWER_BODY)


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive-exclusive pixel box."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1 and self.x0 >= 0 and self.y0 >= 0):
            raise PreprocessError(f"degenerate box {self}")


def _check_aligned(image: np.ndarray, parsing: np.ndarray) -> None:
    if image.shape[:2] != parsing.shape:
        raise PreprocessError(f"parsing {parsing.shape} not aligned with image {image.shape[:2]}")


def segment_garment(image: np.ndarray, parsing: np.ndarray) -> np.ndarray:
    """Keep upper-garment pixels; everything else becomes the neutral value."""
    image = np.asarray(image)
    parsing = np.asarray(parsing)
    _check_aligned(image, parsing)
    return np.where((parsing == UPPER_GARMENT)[..., None], image, np.asarray(NEUTRAL, image.dtype))


def person_bbox(parsing: np.ndarray) -> BoundingBox:
    ys, xs = np.nonzero(np.asarray(parsing) != 0)
    if ys.size == 0:
        raise PreprocessError("no foreground")
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def clothing_agnostic_rgb(image: np.ndarray, parsing: np.ndarray, pose: np.ndarray | None = None) -> np.ndarray:
    """Blank the person's bounding box, then paste back head, hands and lower body.

    ``pose`` is accepted for interface parity but unused: the kept regions
    come from the parsing labels alone.
    """
    image = np.asarray(image)
    parsing = np.asarray(parsing)
    _check_aligned(image, parsing)
    box = person_bbox(parsing)
    out = image.copy()
    out[box.y0:box.y1, box.x0:box.x1] = NEUTRAL
    keep = np.isin(parsing, KEEP_LABELS)
    out[keep] = image[keep]
    return out


def normalize_keypoints(raw: np.ndarray, height: int, width: int) -> np.ndarray:
    """Map pixel-space (x, y, v) rows to [0, 1] coordinates; invisible rows become zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (NUM_KEYPOINTS, 3):
        raise PreprocessError(f"expected ({NUM_KEYPOINTS}, 3) keypoints, got {raw.shape}")
    out = np.zeros_like(raw)
    vis = raw[:, 2] > 0
    xs, ys = raw[vis, 0], raw[vis, 1]
    if np.any((xs < 0) | (xs >= width) | (ys < 0) | (ys >= height)):
        bad = np.nonzero(vis)[0][(xs < 0) | (xs >= width) | (ys < 0) | (ys >= height)]
        raise PreprocessError(f"visible keypoints {bad.tolist()} outside the {width}x{height} frame")
    out[vis, 0] = xs / width
    out[vis, 1] = ys / height
    out[vis, 2] = 1.0
    return out
