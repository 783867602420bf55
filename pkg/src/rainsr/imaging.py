"""Core image container conventions and resampling primitives.

An image is a ``numpy.ndarray`` of shape ``(H, W, 3)``, dtype float64,
values in ``[0, 1]``.  Every public operation validates its input, never
mutates it, and is safe to call concurrently.

Resampling uses the separable Catmull-Rom cubic (a = -0.5) evaluated at
half-pixel-centre source coordinates with edge-clamp boundary handling.
Each 1-D resample is materialised as a small dense matrix (cached per
(in_len, out_len) pair), so the 2-D resize is two matrix products and its
adjoint is exactly the transposed matrices.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DimensionError, RangeError
from .rng import Stream, derive_seed

_matrix_cache: dict[tuple[int, int], np.ndarray] = {}


def require_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate the (H, W, 3) float [0, 1] image contract; returns img."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"{name}: expected (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name}: degenerate size {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise RangeError(f"{name}: expected float dtype, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise RangeError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise RangeError(f"{name}: values outside [0, 1]")
    return arr


def catmull_rom(d: np.ndarray) -> np.ndarray:
    """Catmull-Rom kernel (cubic convolution with a = -0.5) at distances d."""
    d = np.abs(np.asarray(d, dtype=np.float64))
    out = np.zeros_like(d)
    near = d <= 1.0
    far = (d > 1.0) & (d < 2.0)
    dn, df = d[near], d[far]
    out[near] = 1.5 * dn**3 - 2.5 * dn**2 + 1.0
    out[far] = -0.5 * df**3 + 2.5 * df**2 - 4.0 * df + 2.0
    return out


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) Catmull-Rom resampling matrix, edge-clamped.

    Output sample ``i`` reads source coordinate ``(i + 0.5) * n_in/n_out - 0.5``
    and takes the four integer taps around it; out-of-range taps clamp to the
    border pixel, which accumulates their weight.
    """
    key = (n_in, n_out)
    cached = _matrix_cache.get(key)
    if cached is not None:
        return cached
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * ratio - 0.5
        k = int(np.floor(src))
        for tap in range(k - 1, k + 3):
            w = catmull_rom(np.float64(src - tap))
            m[i, min(max(tap, 0), n_in - 1)] += float(w)
    _matrix_cache[key] = m
    return m


def _scaled_len(length: int, scale: Fraction) -> int:
    out = scale * length
    if out.denominator != 1 or out.numerator < 1:
        raise DimensionError(
            f"scale {scale} applied to extent {length} gives non-integral or "
            f"non-positive output; crop_to_multiple first"
        )
    return out.numerator


def resize_bicubic(img: np.ndarray, scale: float | Fraction) -> np.ndarray:
    """Resample an image by a positive rational factor.

    Output dims are exactly ``scale * (H, W)`` (raises DimensionError when
    those are not positive integers).  Values are clamped back to [0, 1]
    because the Catmull-Rom kernel overshoots near edges.
    """
    img = require_image(img)
    frac = Fraction(scale).limit_denominator(1_000_000)
    if frac <= 0:
        raise DimensionError(f"scale must be positive, got {scale}")
    h, w = img.shape[0], img.shape[1]
    oh, ow = _scaled_len(h, frac), _scaled_len(w, frac)
    if (oh, ow) == (h, w):
        return img.copy()
    rh = resample_matrix(h, oh)
    rw = resample_matrix(w, ow)
    out = np.tensordot(rh, img, axes=(1, 0))        # (oh, w, 3)
    out = np.tensordot(out, rw, axes=(1, 1))        # (oh, 3, ow) -> fix order
    out = out.transpose(0, 2, 1)
    return np.clip(out, 0.0, 1.0)


def crop_to_multiple(img: np.ndarray, m: int) -> np.ndarray:
    """Top-left crop to the largest dims that are multiples of ``m``."""
    img = require_image(img)
    if m < 1:
        raise DimensionError(f"multiple must be >= 1, got {m}")
    h, w = img.shape[0], img.shape[1]
    if h < m or w < m:
        raise DimensionError(f"image {h}x{w} smaller than multiple {m}")
    return img[: (h // m) * m, : (w // m) * m].copy()


@dataclass(frozen=True)
class PatchSampleSpec:
    """How to draw square patches: size, how many, and the draw seed."""

    patch_size: int
    count: int
    seed: int

    def __post_init__(self):
        if self.patch_size < 1:
            raise DimensionError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.count < 1:
            raise DimensionError(f"count must be >= 1, got {self.count}")


def sample_patch_coords(height: int, width: int, spec: PatchSampleSpec) -> np.ndarray:
    """Deterministic (count, 2) array of top-left corners, with replacement."""
    if spec.patch_size > height or spec.patch_size > width:
        raise DimensionError(
            f"patch_size {spec.patch_size} exceeds image {height}x{width}"
        )
    stream = Stream(derive_seed(spec.seed, "patch-coords"))
    tops = stream.integers(height - spec.patch_size + 1, spec.count)
    lefts = stream.integers(width - spec.patch_size + 1, spec.count)
    return np.stack([tops, lefts], axis=1)


def extract_patches(img: np.ndarray, spec: PatchSampleSpec) -> list[np.ndarray]:
    """Draw ``spec.count`` square patches at seed-determined positions."""
    img = require_image(img)
    coords = sample_patch_coords(img.shape[0], img.shape[1], spec)
    ps = spec.patch_size
    return [img[t : t + ps, l : l + ps].copy() for t, l in coords]


def to_model_range(img: np.ndarray) -> np.ndarray:
    """Map an image in [0, 1] to a (3, H, W) tensor in [-1, 1]."""
    img = require_image(img)
    return (2.0 * img - 1.0).transpose(2, 0, 1)


def from_model_range(t: np.ndarray) -> np.ndarray:
    """Map a (3, H, W) model-range tensor back to a [0, 1] image, clamping."""
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[0] != 3:
        raise DimensionError(f"expected (3, H, W), got {t.shape}")
    img = (t.astype(np.float64, copy=False) + 1.0) / 2.0
    return np.clip(img.transpose(1, 2, 0), 0.0, 1.0)
