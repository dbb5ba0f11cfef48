"""Procedural paired-pose try-on data with an exact oracle.

Figures are flat-shaded articulated stick figures on a uniform background.
Every rendered pixel comes from exactly one primitive, so parsing maps,
garment layers and keypoints are exact. Because the renderer can dress any
figure in any garment, the true try-on result for an unpaired (person,
garment) combination is just another render.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import datamodel as dm
from .preprocess import NEUTRAL, segment_garment

RESOLUTIONS = (32, 64, 128, 256)
TEXTURES = ("solid", "stripes", "checker", "glyph")
BACKGROUND_RGB = (0.93, 0.93, 0.9)

# pose angle layout (radians)
TORSO_LEAN, HEAD_TILT = 0, 1
L_UPPER_ARM, L_FOREARM, R_UPPER_ARM, R_FOREARM = 2, 3, 4, 5
L_THIGH, L_SHIN, R_THIGH, R_SHIN = 6, 7, 8, 9
NUM_ANGLES = 10
JOINT_LIMITS = np.array(
    [
        (-0.15, 0.15),  # torso lean
        (-0.3, 0.3),  # head tilt
        (0.1, 2.0),  # left upper arm, from hanging down, outward positive
        (-0.4, 1.6),  # left elbow bend
        (0.1, 2.0),
        (-0.4, 1.6),
        (-0.1, 0.4),  # left thigh
        (-0.3, 0.3),  # left knee
        (-0.1, 0.4),
        (-0.3, 0.3),
    ]
)

# lengths in fractions of the image side, before the global figure scale
_S = 1.3
PELVIS = np.array([0.5, 0.54])
TORSO_LEN = 0.2 * _S
SHOULDER_HALF_W = 0.08 * _S
HIP_HALF_W = 0.06 * _S
NECK_TO_HEAD = 0.07 * _S
HEAD_RADIUS = 0.05 * _S
UPPER_ARM, FOREARM = 0.12 * _S, 0.11 * _S
THIGH, SHIN = 0.15 * _S, 0.14 * _S
ARM_RADIUS, LEG_RADIUS = 0.02 * _S, 0.028 * _S
HAND_RADIUS = 0.022 * _S
SLEEVE_SCALE = 1.2

# 5x5 glyph tile (an "R"-like letter form) used by the text-glyph texture
GLYPH = np.array(
    [
        [1, 1, 1, 1, 0],
        [1, 0, 0, 0, 1],
        [1, 1, 1, 1, 0],
        [1, 0, 1, 0, 0],
        [1, 0, 0, 1, 1],
    ],
    dtype=bool,
)


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class FigureSpec:
    body_shape: tuple  # (torso width scale, torso height scale, limb thickness scale)
    skin_tone: tuple  # RGB in [0, 1]
    pose_angles: tuple  # NUM_ANGLES radians
    pants_color: tuple = (0.2, 0.25, 0.45)

    def with_pose(self, pose_angles) -> "FigureSpec":
        return FigureSpec(self.body_shape, self.skin_tone, tuple(float(a) for a in pose_angles), self.pants_color)


@dataclass(frozen=True)
class GarmentSpec:
    base_color: tuple
    texture: str = "solid"
    texture_params: tuple = (0.1, 0.0)  # (period as a fraction of image side, phase in periods)
    sleeve_length: float = 0.3
    accent_color: tuple = (1.0, 1.0, 1.0)


def figure_violations(f: FigureSpec) -> list[str]:
    out = []
    if len(f.body_shape) != 3 or not all(0.6 <= s <= 1.4 for s in f.body_shape):
        out.append("body_shape scales must be three values in [0.6, 1.4]")
    angles = np.asarray(f.pose_angles, dtype=np.float64)
    if angles.shape != (NUM_ANGLES,):
        out.append(f"pose_angles must have {NUM_ANGLES} entries")
    elif np.any(angles < JOINT_LIMITS[:, 0] - 1e-12) or np.any(angles > JOINT_LIMITS[:, 1] + 1e-12):
        out.append("pose_angles outside joint limits")
    return out


# ---------------------------------------------------------------------------
# geometry


def _rot(v, a):
    c, s = np.cos(a), np.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def skeleton(f: FigureSpec) -> dict:
    """Joint positions in normalized image coordinates (y down)."""
    tw, th, _ = f.body_shape
    a = np.asarray(f.pose_angles, dtype=np.float64)
    up = np.array([np.sin(a[TORSO_LEAN]), -np.cos(a[TORSO_LEAN])])
    right = np.array([-up[1], up[0]])  # image-right when upright
    neck = PELVIS + TORSO_LEN * th * up
    j = {"pelvis": PELVIS.copy(), "neck": neck, "up": up, "right": right}
    j["left_shoulder"] = neck + SHOULDER_HALF_W * tw * right
    j["right_shoulder"] = neck - SHOULDER_HALF_W * tw * right
    j["left_hip"] = PELVIS + HIP_HALF_W * tw * right
    j["right_hip"] = PELVIS - HIP_HALF_W * tw * right

    head_up = _rot(up, a[HEAD_TILT])
    head_right = np.array([-head_up[1], head_up[0]])
    head = neck + NECK_TO_HEAD * head_up
    j["head"] = head
    j["nose"] = head - 0.01 * head_up
    j["left_eye"] = head + 0.018 * head_right + 0.012 * head_up
    j["right_eye"] = head - 0.018 * head_right + 0.012 * head_up
    j["left_ear"] = head + 0.04 * head_right
    j["right_ear"] = head - 0.04 * head_right

    down = -up
    for side, sgn, ua, fa in (("left", 1.0, L_UPPER_ARM, L_FOREARM), ("right", -1.0, R_UPPER_ARM, R_FOREARM)):
        d1 = _rot(down, -sgn * a[ua])
        d2 = _rot(d1, sgn * a[fa])
        elbow = j[f"{side}_shoulder"] + UPPER_ARM * d1
        j[f"{side}_elbow"] = elbow
        j[f"{side}_wrist"] = elbow + FOREARM * d2
    for side, sgn, ta, sa in (("left", 1.0, L_THIGH, L_SHIN), ("right", -1.0, R_THIGH, R_SHIN)):
        d1 = _rot(down, -sgn * a[ta])
        d2 = _rot(d1, sgn * a[sa])
        knee = j[f"{side}_hip"] + THIGH * d1
        j[f"{side}_knee"] = knee
        j[f"{side}_ankle"] = knee + SHIN * d2
    return j


def _grid(res: int):
    c = (np.arange(res) + 0.5) / res
    return np.meshgrid(c, c)  # x, y


def _capsule(px, py, a, b, r):
    ab = b - a
    denom = float(ab @ ab) or 1e-12
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dx = px - (a[0] + t * ab[0])
    dy = py - (a[1] + t * ab[1])
    return dx * dx + dy * dy <= r * r


def _disk(px, py, c, r):
    return (px - c[0]) ** 2 + (py - c[1]) ** 2 <= r * r


def _convex_polygon(px, py, pts):
    # vertices in consistent winding; inside = same side of every edge
    inside_pos = np.ones_like(px, dtype=bool)
    inside_neg = np.ones_like(px, dtype=bool)
    n = len(pts)
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        inside_pos &= cross >= 0
        inside_neg &= cross <= 0
    return inside_pos | inside_neg


def texture_field(g: GarmentSpec, u: np.ndarray, v: np.ndarray, res: int) -> np.ndarray:
    """Boolean accent mask for a texture sampled at local pixel coordinates (u across, v along)."""
    period = g.texture_params[0] * res
    phase = g.texture_params[1] * period
    if g.texture == "solid":
        return np.zeros_like(u, dtype=bool)
    if g.texture == "stripes":
        return np.floor((v + phase) / (period / 2)).astype(np.int64) % 2 == 1
    if g.texture == "checker":
        cu = np.floor((u + phase) / (period / 2)).astype(np.int64)
        cv = np.floor((v + phase) / (period / 2)).astype(np.int64)
        return (cu + cv) % 2 == 1
    if g.texture == "glyph":
        cu = (np.floor(np.mod(u + phase, period) / period * 5).astype(np.int64)).clip(0, 4)
        cv = (np.floor(np.mod(-v + phase, period) / period * 5).astype(np.int64)).clip(0, 4)
        return GLYPH[cv, cu]
    raise RenderError(f"unknown texture {g.texture!r}")


def _to_signed(rgb) -> np.ndarray:
    return (2.0 * np.asarray(rgb, dtype=np.float32) - 1.0).astype(np.float32)


@dataclass
class Layers:
    image: np.ndarray
    parsing: np.ndarray
    pose: np.ndarray
    garment_layer: np.ndarray
    coverage: np.ndarray
    extents: tuple  # (x0, y0, x1, y1), inclusive-exclusive
    shapes: list = field(default_factory=list)  # (label, mask) in paint order


def _shapes(f: FigureSpec, g: Optional[GarmentSpec], res: int, j: dict):
    """Primitives in paint order as (label, mask, paint-kind)."""
    px, py = _grid(res)
    _, _, thick = f.body_shape
    ar, lr = ARM_RADIUS * thick, LEG_RADIUS * thick
    out = []
    for side in ("left", "right"):
        leg = _capsule(px, py, j[f"{side}_hip"], j[f"{side}_knee"], lr) | _capsule(
            px, py, j[f"{side}_knee"], j[f"{side}_ankle"], lr
        )
        out.append((dm.LOWER_BODY, leg, "pants"))
    torso = _convex_polygon(px, py, [j["left_shoulder"], j["right_shoulder"], j["right_hip"], j["left_hip"]])
    torso |= _capsule(px, py, j["left_hip"], j["right_hip"], 0.012)
    out.append((dm.UPPER_GARMENT if g else dm.OTHER_SKIN, torso, "torso"))
    out.append((dm.OTHER_SKIN, _capsule(px, py, j["neck"], j["head"], 0.022), "skin"))
    for side in ("left", "right"):
        s, e, w = j[f"{side}_shoulder"], j[f"{side}_elbow"], j[f"{side}_wrist"]
        arm = _capsule(px, py, s, e, ar) | _capsule(px, py, e, w, ar)
        out.append((dm.OTHER_SKIN, arm, "skin"))
        if g is not None and g.sleeve_length > 0:
            total = UPPER_ARM + FOREARM
            reach = g.sleeve_length * total
            sr = ar * SLEEVE_SCALE
            if reach <= UPPER_ARM:
                sleeve = _capsule(px, py, s, s + (e - s) * (reach / UPPER_ARM), sr)
            else:
                frac = (reach - UPPER_ARM) / FOREARM
                sleeve = _capsule(px, py, s, e, sr) | _capsule(px, py, e, e + (w - e) * frac, sr)
            out.append((dm.UPPER_GARMENT, sleeve, f"sleeve_{side}"))
        out.append((dm.HANDS, _disk(px, py, w + 0.01 * (w - e) / (np.linalg.norm(w - e) + 1e-12), HAND_RADIUS), "hand"))
    out.append((dm.HEAD, _disk(px, py, j["head"], HEAD_RADIUS), "head"))
    return out


def _garment_colors(g: GarmentSpec, res: int, j: dict, kind: str, px, py) -> np.ndarray:
    if kind == "torso":
        origin, across, along = j["pelvis"], j["right"], j["up"]
    else:
        side = kind.split("_")[1]
        origin = j[f"{side}_shoulder"]
        along = j[f"{side}_shoulder"] - j[f"{side}_elbow"]
        along = along / (np.linalg.norm(along) + 1e-12)
        across = np.array([-along[1], along[0]])
    dx, dy = px - origin[0], py - origin[1]
    u = (dx * across[0] + dy * across[1]) * res
    v = (dx * along[0] + dy * along[1]) * res
    accent = texture_field(g, u, v, res)
    return np.where(accent[..., None], _to_signed(g.accent_color), _to_signed(g.base_color))


def render_layers(figure: FigureSpec, garment: Optional[GarmentSpec], res: int) -> Layers:
    if res not in RESOLUTIONS:
        raise RenderError(f"resolution {res} not in {RESOLUTIONS}")
    bad = figure_violations(figure)
    if bad:
        raise RenderError("; ".join(bad))
    if garment is not None:
        if garment.texture not in TEXTURES:
            raise RenderError(f"unknown texture {garment.texture!r}")
        if garment.texture != "solid" and garment.texture_params[0] * res < 2:
            raise RenderError("texture period below 2 px at this resolution")
    j = skeleton(figure)
    px, py = _grid(res)
    shapes = _shapes(figure, garment, res, j)

    image = np.empty((res, res, 3), dtype=np.float32)
    image[:] = _to_signed(BACKGROUND_RGB)
    parsing = np.zeros((res, res), dtype=np.int64)
    garment_layer = np.full((res, res, 3), NEUTRAL, dtype=np.float32)
    coverage = np.zeros((res, res), dtype=bool)
    skin, pants = _to_signed(figure.skin_tone), _to_signed(figure.pants_color)
    for label, mask, kind in shapes:
        if kind == "pants":
            color = np.broadcast_to(pants, image.shape)
        elif label == dm.UPPER_GARMENT:
            color = _garment_colors(garment, res, j, kind, px, py)
        else:
            color = np.broadcast_to(skin, image.shape)
        image[mask] = color[mask]
        parsing[mask] = label
        coverage |= mask
        # the garment layer shows garment paint wherever it is the top-most primitive
        if label == dm.UPPER_GARMENT:
            garment_layer[mask] = color[mask]
        else:
            garment_layer[mask] = NEUTRAL

    # every primitive must lie strictly inside the frame
    edge = np.zeros_like(coverage)
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
    if np.any(coverage & edge):
        raise RenderError("figure out of frame")
    ys, xs = np.nonzero(coverage)
    extents = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)

    pose = np.zeros((dm.NUM_KEYPOINTS, 3))
    for k, name in enumerate(dm.COCO_KEYPOINTS):
        x, y = j[name]
        if not (0.0 <= x < 1.0 and 0.0 <= y < 1.0):
            raise RenderError(f"keypoint {name} out of frame")
        pose[k] = (x, y, 1.0)
    return Layers(image, parsing, pose, garment_layer, coverage, extents, [(lab, m) for lab, m, _ in shapes])


def render(figure: FigureSpec, garment: Optional[GarmentSpec], res: int):
    """Render a figure; returns ``(image, parsing, pose)``."""
    layers = render_layers(figure, garment, res)
    return layers.image, layers.parsing, layers.pose


def render_agnostic_oracle(figure: FigureSpec, garment: Optional[GarmentSpec], res: int) -> np.ndarray:
    """Independent clothing-agnostic render: repaint with only head/hands/legs in color.

    Non-kept primitives are painted neutral, and the rendered extent box is
    neutral wherever no primitive lands.
    """
    layers = render_layers(figure, garment, res)
    out = np.empty((res, res, 3), dtype=np.float32)
    out[:] = _to_signed(BACKGROUND_RGB)
    x0, y0, x1, y1 = layers.extents
    out[y0:y1, x0:x1] = NEUTRAL
    skin, pants = _to_signed(figure.skin_tone), _to_signed(figure.pants_color)
    for label, mask in layers.shapes:
        if label == dm.LOWER_BODY:
            out[mask] = pants
        elif label in (dm.HEAD, dm.HANDS):
            out[mask] = skin
        else:
            out[mask] = NEUTRAL
    return out


# ---------------------------------------------------------------------------
# sampling


def sample_pose(rng: np.random.Generator) -> tuple:
    lo, hi = JOINT_LIMITS[:, 0], JOINT_LIMITS[:, 1]
    return tuple(float(a) for a in rng.uniform(lo, hi))


def sample_figure(rng: np.random.Generator) -> FigureSpec:
    return FigureSpec(
        body_shape=tuple(float(s) for s in rng.uniform(0.75, 1.25, size=3)),
        skin_tone=tuple(float(c) for c in rng.uniform([0.45, 0.3, 0.2], [0.95, 0.8, 0.7])),
        pose_angles=sample_pose(rng),
        pants_color=tuple(float(c) for c in rng.uniform(0.05, 0.5, size=3)),
    )


def sample_garment(rng: np.random.Generator) -> GarmentSpec:
    texture = TEXTURES[int(rng.integers(len(TEXTURES)))]
    return GarmentSpec(
        base_color=tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3)),
        texture=texture,
        texture_params=(float(rng.uniform(0.07, 0.15)), float(rng.uniform(0.0, 1.0))),
        sleeve_length=float(rng.uniform(0.0, 1.0)),
        accent_color=tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3)),
    )


def example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _meta(**specs) -> dict:
    # JSON-normalized so that a saved and reloaded example compares equal
    d = {k: (asdict(v) if v is not None and not isinstance(v, (int, float, str)) else v) for k, v in specs.items()}
    return json.loads(json.dumps(d))


def make_pair(figure: FigureSpec, garment: GarmentSpec, pose_a, pose_b, res: int):
    """Same figure and garment in two poses; the person image is its own target."""
    fa, fb = figure.with_pose(pose_a), figure.with_pose(pose_b)
    la = render_layers(fa, garment, res)
    lb = render_layers(fb, garment, res)
    ex = dm.TryOnExample(
        person_image=la.image,
        person_parsing=la.parsing,
        person_pose=la.pose,
        garment_image=lb.image,
        garment_parsing=lb.parsing,
        garment_pose=lb.pose,
        ground_truth=la.image.copy(),
        meta=_meta(person_figure=fa, garment_figure=fb, garment=garment, person_garment=garment),
    )
    return ex, ex.ground_truth


def make_unpaired(person: FigureSpec, person_garment: GarmentSpec, wearer: FigureSpec, garment: GarmentSpec, res: int):
    """Person in their own garment plus a garment worn by someone else; target is the counterfactual render."""
    lp = render_layers(person, person_garment, res)
    lg = render_layers(wearer, garment, res)
    oracle = render_layers(person, garment, res)
    return dm.TryOnExample(
        person_image=lp.image,
        person_parsing=lp.parsing,
        person_pose=lp.pose,
        garment_image=lg.image,
        garment_parsing=lg.parsing,
        garment_pose=lg.pose,
        ground_truth=oracle.image,
        meta=_meta(person_figure=person, garment_figure=wearer, garment=garment, person_garment=person_garment),
    )


def _in_frame_pose(rng: np.random.Generator, figure: FigureSpec) -> tuple:
    # rejection step keeps rare extreme draws from failing; deterministic given rng
    for _ in range(100):
        pose = sample_pose(rng)
        try:
            render_layers(figure.with_pose(pose), None, 32)
            return pose
        except RenderError:
            continue
    raise RenderError("could not sample an in-frame pose")


def paired_example(seed: int, index: int, res: int) -> dm.TryOnExample:
    rng = example_rng(seed, index)
    figure, garment = sample_figure(rng), sample_garment(rng)
    ex, _ = make_pair(figure, garment, _in_frame_pose(rng, figure), _in_frame_pose(rng, figure), res)
    return ex


def unpaired_example(seed: int, index: int, res: int) -> dm.TryOnExample:
    rng = example_rng(seed, index)
    person, own = sample_figure(rng), sample_garment(rng)
    wearer, garment = sample_figure(rng), sample_garment(rng)
    person = person.with_pose(_in_frame_pose(rng, person))
    wearer = wearer.with_pose(_in_frame_pose(rng, wearer))
    return make_unpaired(person, own, wearer, garment, res)


def generate_examples(n: int, seed: int, res: int, unpaired: bool = False) -> list:
    if n < 1:
        raise ValueError("n must be >= 1")
    make = unpaired_example if unpaired else paired_example
    return [make(seed, i, res) for i in range(n)]


def generate_dataset(n: int, seed: int, res: int, out: str | Path, unpaired: bool = False) -> list[Path]:
    """Write ``n`` examples as ``out/<index:05d>/`` directories; returns written files."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    written = []
    for i, ex in enumerate(generate_examples(n, seed, res, unpaired)):
        written += dm.save_example(ex, out / f"{i:05d}")
    return written


def load_dataset(directory: str | Path) -> list:
    d = Path(directory)
    dirs = sorted(p for p in d.iterdir() if p.is_dir() and (p / "person.png").exists())
    if not dirs:
        raise FileNotFoundError(f"no examples under {d}")
    return [dm.load_example(p) for p in dirs]


def _spec(cls, d: dict):
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def target_layers(example: dm.TryOnExample, res: Optional[int] = None) -> Layers:
    """Re-render the try-on target (person figure in the target garment) from the example's specs."""
    meta = example.meta
    if not (meta.get("person_figure") and meta.get("garment")):
        raise ValueError("example carries no renderer specs")
    return render_layers(
        _spec(FigureSpec, meta["person_figure"]), _spec(GarmentSpec, meta["garment"]), res or example.resolution
    )


def warped_garment_oracle(example: dm.TryOnExample) -> np.ndarray:
    """The target garment as it appears on the person: the garment layer of the target image."""
    if example.meta.get("person_figure") and example.meta.get("garment"):
        return target_layers(example).garment_layer
    return segment_garment(example.ground_truth, example.person_parsing)


def image_digest(img: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(img).tobytes()).hexdigest()
