"""Style augmentation: appearance-only transforms of source images.

Three interchangeable branches produce the style-shifted counterpart of a
source image while leaving the segmentation masks untouched:

  BA  gamma correction, Gaussian noise, Gaussian blur (per-sample params)
  SL  monotone intensity remapping through a random cubic Bezier curve,
      inverted with probability 0.5
  FR  within-batch low-frequency Fourier amplitude replacement, pairing
      sample n with sample N_B + 1 - n (1-indexed)

Spatial augmentation (flip / rotate / scale) moves structure and is applied
identically to image and masks, once per sample, before the style branches.
All randomness comes from per-sample Generators supplied by the caller, so
results are independent of iteration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fourier import low_freq_swap

MODES = ("BA", "SL", "FR")


@dataclass
class AugConfig:
    """Parameter ranges for the augmentation branches."""

    enable_ba: bool = True
    enable_sl: bool = True
    enable_fr: bool = True
    enable_spatial: bool = True
    gamma_range: tuple[float, float] = (0.5, 2.0)
    noise_sigma_range: tuple[float, float] = (0.0, 0.1)
    blur_sigma_range: tuple[float, float] = (0.0, 1.5)
    beta_range: tuple[float, float] = (0.05, 0.15)  # half-open on the left
    bezier_lut_size: int = 1000
    rotation_range_deg: tuple[float, float] = (-15.0, 15.0)
    scale_range: tuple[float, float] = (0.9, 1.1)
    flip_prob: float = 0.5

    def validate(self) -> None:
        lo, hi = self.beta_range
        if not (0.0 < lo < hi <= 0.5):
            raise ValueError(f"beta_range must satisfy 0 < lo < hi <= 0.5, got {self.beta_range}")
        for name in ("gamma_range", "noise_sigma_range", "blur_sigma_range",
                     "rotation_range_deg", "scale_range"):
            a, b = getattr(self, name)
            if a > b:
                raise ValueError(f"{name} is empty: {a} > {b}")
        if self.gamma_range[0] <= 0:
            raise ValueError("gamma_range must be positive")
        if self.noise_sigma_range[0] < 0 or self.blur_sigma_range[0] < 0:
            raise ValueError("sigma ranges must be non-negative")
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive")
        if self.bezier_lut_size < 2:
            raise ValueError("bezier_lut_size must be at least 2")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")

    def modes(self) -> tuple[str, ...]:
        out = []
        if self.enable_ba:
            out.append("BA")
        if self.enable_sl:
            out.append("SL")
        if self.enable_fr:
            out.append("FR")
        return tuple(out)


def _check_unit_range(img: np.ndarray, what: str) -> None:
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"{what} values must lie in [0, 1]")


def gamma_correct(img: np.ndarray, gamma) -> np.ndarray:
    """Elementwise power transform; gamma is a scalar or one value per channel."""
    img = np.asarray(img, dtype=np.float64)
    _check_unit_range(img, "gamma_correct input")
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g <= 0.0):
        raise ValueError(f"gamma must be positive, got {gamma}")
    if g.ndim == 0:
        return np.power(img, g)
    if img.ndim != 3 or g.shape != (img.shape[0],):
        raise ValueError(f"per-channel gamma needs shape ({img.shape[0]},), got {g.shape}")
    return np.power(img, g[:, None, None])


def add_gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Gaussian pixel noise, clamped back to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0.0:
        return img.copy()
    return np.clip(img + sigma * rng.standard_normal(img.shape), 0.0, 1.0)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = (len(kernel) - 1) // 2
    moved = np.moveaxis(a, axis, -1)
    pad = [(0, 0)] * (moved.ndim - 1) + [(r, r)]
    # edge-mirrored (half-sample) reflection: preserves the image mean under
    # a normalized kernel, unlike whole-sample reflection
    padded = np.pad(moved, pad, mode="symmetric")
    n = moved.shape[-1]
    out = np.zeros_like(moved)
    for i, kv in enumerate(kernel):
        out += kv * padded[..., i : i + n]
    return np.moveaxis(out, -1, axis)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3*sigma), reflect padding."""
    if sigma < 0:
        raise ValueError(f"blur sigma must be non-negative, got {sigma}")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0.0:
        return img.copy()
    k = _gaussian_kernel(sigma)
    return _blur_axis(_blur_axis(img, k, -1), k, -2)


def bezier_curve(p1, p2, invert: bool, lut_size: int = 1000):
    """Sampled cubic Bezier intensity curve through (0,0) and (1,1).

    ``invert`` flips the curve vertically (endpoints (0,1) and (1,0), interior
    control y-coordinates mirrored), i.e. the inverted curve maps v to
    1 - curve(v). x(t) is made non-decreasing by keeping the first sample of
    any tied run, so the lookup is well defined.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    for p in (p1, p2):
        if p.shape != (2,) or p.min() < 0.0 or p.max() > 1.0:
            raise ValueError(f"Bezier controls must lie in the unit square, got {p}")
    t = np.linspace(0.0, 1.0, lut_size)
    b0 = (1 - t) ** 3
    b1 = 3 * (1 - t) ** 2 * t
    b2 = 3 * (1 - t) * t**2
    b3 = t**3
    xs = b1 * p1[0] + b2 * p2[0] + b3
    ys = b1 * p1[1] + b2 * p2[1] + b3
    if invert:
        ys = 1.0 - ys
    keep = np.concatenate([[True], np.diff(xs) > 0])
    return xs[keep], ys[keep]


def bezier_transform(img: np.ndarray, p1, p2, invert: bool = False,
                     lut_size: int = 1000) -> np.ndarray:
    """Remap intensities through a cubic Bezier curve, per pixel per channel."""
    img = np.asarray(img, dtype=np.float64)
    _check_unit_range(img, "bezier_transform input")
    xs, ys = bezier_curve(p1, p2, invert, lut_size)
    return np.interp(img, xs, ys)


# ---------------------------------------------------------------------------
# spatial augmentation (structure-moving, shared by image and masks)
# ---------------------------------------------------------------------------

def apply_spatial(image: np.ndarray, masks, flip: bool, angle_deg: float,
                  scale: float):
    """Flip / rotate / scale an image (bilinear) and its masks (nearest).

    The same geometric map is applied to all inputs; out-of-range samples
    read as 0. Masks stay exactly {0, 1}-valued.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"apply_spatial expects a (C, H, W) image, got shape {image.shape}")
    h, w = image.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map of (flip then rotate+scale about the center)
    th = math.radians(angle_deg)
    ca, sa = math.cos(th), math.sin(th)
    inv = 1.0 / scale
    y0, x0 = ys - cy, xs - cx
    yi = (ca * y0 + sa * x0) * inv + cy
    xi = (-sa * y0 + ca * x0) * inv + cx
    if flip:
        xi = (w - 1) - xi

    identity = not flip and angle_deg == 0.0 and scale == 1.0
    if identity:
        return image.copy(), [np.asarray(m).copy() for m in masks]

    out_img = _sample_bilinear(image, yi, xi)
    out_masks = [_sample_nearest(np.asarray(m), yi, xi) for m in masks]
    return out_img, out_masks


def _sample_bilinear(img: np.ndarray, yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    y0 = np.floor(yi).astype(np.int64)
    x0 = np.floor(xi).astype(np.int64)
    wy = yi - y0
    wx = xi - x0
    out = np.zeros(img.shape[:-2] + yi.shape, dtype=np.float64)
    for dy, dx, wgt in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                        (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        out += (wgt * valid) * img[..., yc, xc]
    return out


def _sample_nearest(mask: np.ndarray, yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
    h, w = mask.shape[-2:]
    yy = np.floor(yi + 0.5).astype(np.int64)
    xx = np.floor(xi + 0.5).astype(np.int64)
    valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    yc = np.clip(yy, 0, h - 1)
    xc = np.clip(xx, 0, w - 1)
    return np.where(valid, mask[..., yc, xc], 0).astype(mask.dtype)


def spatial_augment(image: np.ndarray, masks, rng: np.random.Generator,
                    cfg: AugConfig | None = None):
    """Draw flip/rotation/scale from ``rng`` and apply them to image + masks."""
    cfg = cfg or AugConfig()
    flip = rng.random() < cfg.flip_prob
    angle = float(rng.uniform(*cfg.rotation_range_deg))
    scl = float(rng.uniform(*cfg.scale_range))
    return apply_spatial(image, masks, flip, angle, scl)


# ---------------------------------------------------------------------------
# batch-level style branches
# ---------------------------------------------------------------------------

def _draw_beta(rng: np.random.Generator, beta_range) -> float:
    lo, hi = beta_range
    # uniform draw on the half-open interval (lo, hi]
    return float(hi + lo - rng.uniform(lo, hi))


def _fr_pow2_swap(img_a: np.ndarray, img_b: np.ndarray, beta: float) -> np.ndarray:
    """Low-frequency swap, center-cropping to the largest power-of-two box
    when the inputs are not power-of-two sized."""
    h, w = img_a.shape[-2:]
    hp = 1 << (h.bit_length() - 1)
    wp = 1 << (w.bit_length() - 1)
    if hp == h and wp == w:
        return low_freq_swap(img_a, img_b, beta)
    if hp < 8 or wp < 8:
        raise ValueError(f"image {h}x{w} too small for frequency replacement")
    r0, c0 = (h - hp) // 2, (w - wp) // 2
    box = np.s_[..., r0 : r0 + hp, c0 : c0 + wp]
    out = img_a.astype(np.float64).copy()
    out[box] = low_freq_swap(img_a[box], img_b[box], beta)
    return out


def make_style_batch(images, mode: str, rngs, cfg: AugConfig | None = None):
    """Apply one style branch to a batch of (C, H, W) images in [0, 1].

    ``rngs`` holds one Generator per sample (derived from the global seed,
    epoch, and sample index by the caller). Returns the list of augmented
    images; masks are untouched by construction and are not passed here.
    """
    cfg = cfg or AugConfig()
    cfg.validate()
    n = len(images)
    if n == 0:
        raise ValueError("make_style_batch needs a non-empty batch")
    if len(rngs) != n:
        raise ValueError(f"need one rng per sample: {len(rngs)} rngs for {n} images")
    if mode not in MODES:
        raise ValueError(f"unknown style mode {mode!r}, expected one of {MODES}")

    if mode == "BA":
        out = []
        for img, rng in zip(images, rngs):
            gammas = rng.uniform(*cfg.gamma_range, size=img.shape[0])
            sigma_n = float(rng.uniform(*cfg.noise_sigma_range))
            sigma_b = float(rng.uniform(*cfg.blur_sigma_range))
            x = gaussian_blur(img, sigma_b)
            x = add_gaussian_noise(x, sigma_n, rng)
            out.append(gamma_correct(np.clip(x, 0.0, 1.0), gammas))
        return out

    if mode == "SL":
        out = []
        for img, rng in zip(images, rngs):
            p1 = rng.uniform(0.0, 1.0, size=2)
            p2 = rng.uniform(0.0, 1.0, size=2)
            invert = rng.random() < 0.5
            out.append(bezier_transform(img, p1, p2, invert, cfg.bezier_lut_size))
        return out

    # FR: pair sample n with r = N + 1 - n (1-indexed); one beta per pair,
    # drawn from the stream of the lower-indexed partner
    shape = images[0].shape
    for img in images[1:]:
        if img.shape != shape:
            raise ValueError("FR mode needs consistent image dims across the batch")
    betas = {}
    for n1 in range(1, n + 1):
        r1 = n + 1 - n1
        key = min(n1, r1)
        if key not in betas:
            betas[key] = _draw_beta(rngs[key - 1], cfg.beta_range)
    out = []
    for n1 in range(1, n + 1):
        r1 = n + 1 - n1
        beta = betas[min(n1, r1)]
        out.append(_fr_pow2_swap(images[n1 - 1], images[r1 - 1], beta))
    return out
