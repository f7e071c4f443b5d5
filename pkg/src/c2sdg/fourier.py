"""Radix-2 Cooley-Tukey 2-D FFT and low-frequency amplitude swapping.

Conventions: the forward transform is unnormalized (a constant image of
value c on an H x W grid puts H*W*c into the zero-frequency bin) and the
inverse carries the 1/(H*W) factor, so Parseval reads
sum|x|^2 == sum|X|^2 / (H*W).

Only power-of-two side lengths are supported; the butterflies are iterative
and vectorized across rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


@lru_cache(maxsize=None)
def _twiddles(m: int, inverse: bool) -> np.ndarray:
    sign = 2j if inverse else -2j
    return np.exp(sign * np.pi * np.arange(m // 2) / m)


def _fft_last_axis(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Iterative radix-2 DIT FFT along the last axis of a complex array."""
    n = a.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    x = np.ascontiguousarray(a[..., _bit_reverse_indices(n)], dtype=np.complex128)
    m = 2
    while m <= n:
        w = _twiddles(m, inverse)
        v = x.reshape(x.shape[:-1] + (n // m, m))
        even = v[..., : m // 2]
        odd = v[..., m // 2 :] * w
        v[..., : m // 2], v[..., m // 2 :] = even + odd, even - odd
        m *= 2
    return x


def _fft2_raw(a: np.ndarray, inverse: bool) -> np.ndarray:
    out = _fft_last_axis(np.asarray(a, dtype=np.complex128), inverse)
    out = _fft_last_axis(out.swapaxes(-1, -2), inverse).swapaxes(-1, -2)
    if inverse:
        out = out / (a.shape[-1] * a.shape[-2])
    return out


@dataclass
class ComplexPlane:
    """Frequency-domain view of one image channel (real/imag float64 parts)."""

    real: np.ndarray
    imag: np.ndarray

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexPlane":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    def amplitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)

    def phase(self) -> np.ndarray:
        return np.arctan2(self.imag, self.real)


def fft2(channel: np.ndarray) -> ComplexPlane:
    """Forward 2-D DFT of an H x W channel; H and W must be powers of two."""
    arr = np.asarray(channel, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"fft2 expects a 2-D channel, got shape {arr.shape}")
    h, w = arr.shape
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"fft2 needs power-of-two dims, got {h}x{w}")
    return ComplexPlane.from_complex(_fft2_raw(arr, inverse=False))


def ifft2(plane: ComplexPlane) -> np.ndarray:
    """Inverse 2-D DFT; returns the complex spatial-domain array."""
    return _fft2_raw(plane.to_complex(), inverse=True)


def _fftshift2(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2], a.shape[-1]
    return np.roll(a, (h // 2, w // 2), axis=(-2, -1))


def _ifftshift2(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2], a.shape[-1]
    return np.roll(a, (-(h // 2), -(w // 2)), axis=(-2, -1))


def swap_region_side(beta: float, h: int, w: int) -> int:
    """Side length of the centered low-frequency square for a cut-off ratio.

    Nominal side is round(beta * min(H, W)) (half-up). An even nominal side
    is widened by one so the region is symmetric about the zero-frequency
    bin; without that the swapped spectrum loses conjugate symmetry and the
    real part of the inverse transform no longer carries the replaced
    amplitudes exactly.
    """
    nominal = int(np.floor(beta * min(h, w) + 0.5))
    if nominal <= 0:
        return 0
    side = nominal if nominal % 2 == 1 else nominal + 1
    return min(side, min(h, w) - 1)


def low_freq_swap(img_a: np.ndarray, img_b: np.ndarray, beta: float) -> np.ndarray:
    """Replace img_a's low-frequency amplitudes with img_b's, keep its phase.

    Works per channel on (C, H, W) or on a single (H, W) channel; H and W
    must be powers of two and both images must share dims. beta in (0, 0.5]
    controls the size of the centered swap square. The result is the real
    part of the inverse transform clamped to [0, 1].
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"low_freq_swap dim mismatch: {a.shape} vs {b.shape}")
    if not 0.0 < beta <= 0.5:
        raise ValueError(f"beta must lie in (0, 0.5], got {beta}")
    squeeze = a.ndim == 2
    if squeeze:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"low_freq_swap expects (C, H, W) images, got shape {a.shape}")
    h, w = a.shape[-2:]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"low_freq_swap needs power-of-two dims, got {h}x{w}")

    side = swap_region_side(beta, h, w)
    if side == 0:
        out = a.copy()
    else:
        r0 = h // 2 - side // 2
        c0 = w // 2 - side // 2
        fa = _fft2_raw(a, inverse=False)
        fb = _fft2_raw(b, inverse=False)
        amp = np.abs(fa)
        amp_s = _fftshift2(amp)
        amp_b_s = _fftshift2(np.abs(fb))
        amp_s[:, r0 : r0 + side, c0 : c0 + side] = amp_b_s[:, r0 : r0 + side, c0 : c0 + side]
        amp_new = _ifftshift2(amp_s)
        phase = np.exp(1j * np.angle(fa))
        out = _fft2_raw(amp_new * phase, inverse=True).real
    out = np.clip(out, 0.0, 1.0)
    return out[0] if squeeze else out
