"""Image-set and per-image metrics: FID, KID (x1000), PSNR, SSIM, boundary-band error.

FID and KID are computed on features from a small convolutional encoder with
frozen random weights (seeded), so no pretrained model is downloaded. Values
are only comparable between feature sets from the same extractor.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

FEATURE_DIM = 64
DEFAULT_EXTRACTOR = "randcnn64-s0"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray  # (N, D) float64
    extractor_id: str

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 2 or not np.all(np.isfinite(f)):
            raise MetricError("features must be a finite N x D matrix")

    def __len__(self) -> int:
        return self.features.shape[0]


class RandomConvEncoder(nn.Module):
    """Three strided conv layers with ReLU, then global average pooling to 64 features."""

    def __init__(self, seed: int = 0, dim: int = FEATURE_DIM):
        super().__init__()
        self.convs = nn.ModuleList(
            [nn.Conv2d(3, 32, 3, padding=1), nn.Conv2d(32, 48, 3, stride=2, padding=1), nn.Conv2d(48, dim, 3, stride=2, padding=1)]
        )
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for c in self.convs:
                fan_in = c.in_channels * 9
                c.weight.copy_(torch.randn(c.weight.shape, generator=g, dtype=torch.float64).float() * np.sqrt(2.0 / fan_in))
                c.bias.copy_(torch.randn(c.bias.shape, generator=g, dtype=torch.float64).float() * 0.1)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for c in self.convs:
            x = F.relu(c(x))
        return x.mean(dim=(2, 3))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(v.numpy().tobytes())
        return h.hexdigest()[:12]


_EXTRACTORS: dict = {}


def get_extractor(extractor_id: str = DEFAULT_EXTRACTOR) -> RandomConvEncoder:
    if extractor_id not in _EXTRACTORS:
        if not extractor_id.startswith("randcnn64-s"):
            raise MetricError(f"unknown feature extractor {extractor_id!r}")
        _EXTRACTORS[extractor_id] = RandomConvEncoder(seed=int(extractor_id.rsplit("-s", 1)[1]))
    return _EXTRACTORS[extractor_id]


def _as_nchw(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        x = images.detach().to(torch.float32)
    else:
        arrs = [np.asarray(a, dtype=np.float32) for a in images] if isinstance(images, (list, tuple)) else None
        if arrs is not None:
            if len({a.shape for a in arrs}) > 1:
                raise MetricError("images of mixed resolution")
            x = torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2)
        else:
            x = torch.from_numpy(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
    if x.ndim != 4 or x.shape[1] != 3:
        raise MetricError(f"expected a batch of RGB images, got shape {tuple(x.shape)}")
    return x


@torch.no_grad()
def extract_features(images, extractor_id: str = DEFAULT_EXTRACTOR, batch: int = 256) -> FeatureSet:
    """Features of (N, 3, H, W) tensors or a list / array of (H, W, 3) images."""
    x = _as_nchw(images)
    enc = get_extractor(extractor_id)
    feats = torch.cat([enc(x[i:i + batch]) for i in range(0, x.shape[0], batch)])
    return FeatureSet(feats.double().numpy(), extractor_id)


def _check_pair(a: FeatureSet, b: FeatureSet, min_rows: int) -> None:
    if a.extractor_id != b.extractor_id:
        raise MetricError(f"extractor mismatch: {a.extractor_id} vs {b.extractor_id}")
    if a.features.shape[1] != b.features.shape[1]:
        raise MetricError("feature dimensions differ")
    if len(a) < min_rows or len(b) < min_rows:
        raise MetricError(f"need at least {min_rows} rows per feature set")


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _trace_sqrt_product(ca: np.ndarray, cb: np.ndarray) -> float:
    # Tr (ca cb)^(1/2) = Tr (ca^(1/2) cb ca^(1/2))^(1/2), a symmetric PSD matrix
    ra = _sqrtm_psd(ca)
    m = ra @ cb @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    _check_pair(a, b, 2)
    d = a.features.shape[1]
    if min(len(a), len(b)) < d + 1:
        warnings.warn(f"FID with fewer than D+1={d + 1} samples has a singular covariance", RuntimeWarning, stacklevel=2)
    xa, xb = a.features, b.features
    mu_a, mu_b = xa.mean(0), xb.mean(0)
    ca, cb = np.atleast_2d(np.cov(xa, rowvar=False)), np.atleast_2d(np.cov(xb, rowvar=False))
    # both orderings averaged so the result is exactly symmetric even for singular covariances
    tr_cross = 0.5 * (_trace_sqrt_product(ca, cb) + _trace_sqrt_product(cb, ca))
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_cross
    return float(max(value, 0.0))


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_matched(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased MMD^2 for two equal-size samples; every sum skips the i = j terms."""
    m = x.shape[0]
    if y.shape[0] != m or m < 2:
        raise MetricError("matched MMD needs two samples of equal size >= 2")
    kxx, kyy = polynomial_kernel(x, x), polynomial_kernel(y, y)
    kxy, kyx = polynomial_kernel(x, y), polynomial_kernel(y, x)

    def off(k):
        return k.sum() - np.trace(k)

    return float((off(kxx) + off(kyy) - (off(kxy) + off(kyx))) / (m * (m - 1)))


def _subset_indices(n: int, m: int, seed: int, s: int) -> np.ndarray:
    # depends only on (n, seed, subset), so equal-size sets share indices and kid is symmetric
    return np.random.default_rng([seed, s, n]).permutation(n)[:m]


def kid(a: FeatureSet, b: FeatureSet, n_subsets: int = 100, subset_size: int = 1000, seed: int = 0) -> float:
    """Kernel inception distance x 1000, averaged over seed-fixed equal-size subsets."""
    _check_pair(a, b, 2)
    m = min(subset_size, len(a), len(b))
    vals = []
    for s in range(n_subsets):
        ia = _subset_indices(len(a), m, seed, s)
        ib = _subset_indices(len(b), m, seed, s)
        vals.append(mmd2_matched(a.features[ia], b.features[ib]))
    return 1000.0 * float(np.mean(vals))


# ---------------------------------------------------------------------------
# per-image metrics


def _np(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().to(torch.float64).numpy()
        if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
            img = img.transpose(1, 2, 0)
    return np.asarray(img, dtype=np.float64)


def psnr(x, y, peak: float = 2.0) -> float:
    """PSNR in dB over [-1, 1] images; +inf for identical inputs."""
    x, y = _np(x), _np(y)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def ssim_map(x, y, data_range: float = 2.0, sigma: float = 1.5, window: int = 11) -> np.ndarray:
    """Per-pixel SSIM (averaged over channels) with a Gaussian window, reflect-padded."""
    x, y = _np(x), _np(y)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    truncate = (window // 2) / sigma

    def blur(z):
        return ndimage.gaussian_filter(z, sigma=(sigma, sigma, 0), mode="reflect", truncate=truncate)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return s.mean(axis=-1)


def ssim(x, y, mask: Optional[np.ndarray] = None, **kw) -> float:
    """Mean SSIM, optionally averaged only over pixels where ``mask`` is set."""
    s = ssim_map(x, y, **kw)
    if mask is None:
        return float(s.mean())
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != s.shape:
        raise MetricError("mask shape does not match the images")
    if not mask.any():
        raise MetricError("empty mask")
    return float(s[mask].mean())


def boundary_band(mask: np.ndarray, width: int = 2) -> np.ndarray:
    """Pixels within ``width`` of the mask edge, on either side."""
    mask = np.asarray(mask, dtype=bool)
    st = ndimage.generate_binary_structure(2, 1)
    grown = ndimage.binary_dilation(mask, st, iterations=width)
    shrunk = ndimage.binary_erosion(mask, st, iterations=width, border_value=1)
    return grown & ~shrunk


def band_mae(x, y, band: np.ndarray) -> float:
    x, y = _np(x), _np(y)
    band = np.asarray(band, dtype=bool)
    if not band.any():
        raise MetricError("empty band")
    return float(np.abs(x - y).mean(axis=-1)[band].mean())


# ---------------------------------------------------------------------------
# convenience for image batches


def image_fid(fake, real, extractor_id: str = DEFAULT_EXTRACTOR) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fid(extract_features(fake, extractor_id), extract_features(real, extractor_id))


def image_kid(fake, real, extractor_id: str = DEFAULT_EXTRACTOR, seed: int = 0) -> float:
    return kid(extract_features(fake, extractor_id), extract_features(real, extractor_id), seed=seed)


def evaluate_sets(real: Sequence, fake: Sequence, metrics: Sequence[str], seed: int = 0) -> dict:
    """Report of the requested metrics between two aligned image lists of (H, W, 3) arrays."""
    unknown = set(metrics) - {"fid", "kid", "psnr", "ssim"}
    if unknown:
        raise MetricError(f"unknown metrics {sorted(unknown)}")
    if len(real) != len(fake) and ({"psnr", "ssim"} & set(metrics)):
        raise MetricError("psnr / ssim need equally many real and fake images")
    out = {"n_real": len(real), "n_fake": len(fake)}
    if "fid" in metrics or "kid" in metrics:
        fr, ff = extract_features(list(real)), extract_features(list(fake))
        if "fid" in metrics:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                out["fid"] = fid(fr, ff)
        if "kid" in metrics:
            out["kid_x1000"] = kid(fr, ff, seed=seed)
    if "psnr" in metrics:
        vals = [psnr(f, r) for r, f in zip(real, fake)]
        out["psnr"] = float(np.mean(vals))
    if "ssim" in metrics:
        out["ssim"] = float(np.mean([ssim(f, r) for r, f in zip(real, fake)]))
    return out


def to_numpy_images(batch: Union[torch.Tensor, np.ndarray]) -> list:
    if isinstance(batch, torch.Tensor):
        batch = batch.detach().permute(0, 2, 3, 1).numpy()
    return [np.asarray(b) for b in batch]
