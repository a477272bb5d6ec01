"""The six label-preserving augmentations applied once at corpus build time.

All transforms take and return float64 (C, H, W) images in [0, 1] and clamp
their outputs to that range.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .exceptions import ChannelError, ParameterError, RangeError
from .tensor import RngStream, rng_normal, rng_uniform

# suffixes in the order augment_all returns the variants (after the original)
VARIANTS = ("blur", "noise", "jitter", "bright", "contrast", "sharp")
MULTIPLIER = 1 + len(VARIANTS)


@dataclass(frozen=True)
class AugmentSpec:
    brightness_factor: float = 1.25
    contrast_factor: float = 1.25
    sharpness_amount: float = 1.0
    noise_sigma: float = 0.05
    blur_sigma: float = 1.0
    blur_ksize: int = 5
    jitter_scale_range: tuple[float, float] = (0.9, 1.1)
    jitter_shift_range: tuple[float, float] = (-0.05, 0.05)
    seed: int = 42

    def __post_init__(self):
        if self.brightness_factor <= 0 or self.contrast_factor <= 0:
            raise RangeError("brightness and contrast factors must be > 0")
        if min(self.sharpness_amount, self.noise_sigma, self.blur_sigma) < 0:
            raise RangeError("sharpness amount and sigmas must be >= 0")
        if self.blur_ksize < 1 or self.blur_ksize % 2 == 0:
            raise ParameterError(f"blur kernel size must be odd, got {self.blur_ksize}")
        for name in ("jitter_scale_range", "jitter_shift_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise RangeError(f"{name} must be ordered, got ({lo}, {hi})")

    def to_dict(self):
        return asdict(self)


def _clamp(x):
    return np.clip(x, 0.0, 1.0)


def brightness(img, factor: float):
    if factor <= 0:
        raise RangeError(f"brightness factor must be > 0, got {factor}")
    if factor == 1:
        return img.copy()
    return _clamp(factor * img)


def _gray_mean(img):
    if img.shape[0] == 3:
        return float(np.tensordot([0.299, 0.587, 0.114], img, axes=1).mean())
    return float(img.mean())


def contrast(img, factor: float):
    if factor <= 0:
        raise RangeError(f"contrast factor must be > 0, got {factor}")
    if factor == 1:
        return img.copy()
    mean = _gray_mean(img)
    return _clamp(mean + factor * (img - mean))


def gaussian_kernel1d(sigma: float, ksize: int = 5) -> np.ndarray:
    if ksize < 1 or ksize % 2 == 0:
        raise ParameterError(f"kernel size must be odd, got {ksize}")
    if sigma < 0:
        raise RangeError(f"sigma must be >= 0, got {sigma}")
    k = np.zeros(ksize)
    if sigma == 0:
        k[ksize // 2] = 1.0
        return k
    r = np.arange(ksize) - ksize // 2
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_kernel2d(sigma: float, ksize: int = 5) -> np.ndarray:
    k = gaussian_kernel1d(sigma, ksize)
    return np.outer(k, k)


def gaussian_blur(img, sigma: float, ksize: int = 5):
    """Separable normalized Gaussian blur with edge-clamped borders."""
    k = gaussian_kernel1d(sigma, ksize)
    out = correlate1d(img, k, axis=-2, mode="nearest")
    out = correlate1d(out, k, axis=-1, mode="nearest")
    return _clamp(out)


def sharpen(img, amount: float, sigma: float = 1.0, ksize: int = 5):
    """Unsharp mask: ``img + amount * (img - blur(img))``."""
    if amount < 0:
        raise RangeError(f"sharpness amount must be >= 0, got {amount}")
    if amount == 0:
        return img.copy()
    return _clamp(img + amount * (img - gaussian_blur(img, sigma, ksize)))


def gaussian_noise(img, sigma: float, stream: RngStream):
    if sigma == 0:
        return img.copy()
    return _clamp(img + rng_normal(stream, img.shape, 0.0, sigma))


def _draw(stream, n, lo, hi):
    if lo == hi:
        return np.full(n, float(lo))
    return rng_uniform(stream, [n], lo, hi)


def draw_jitter(spec: AugmentSpec, stream: RngStream, channels: int = 3):
    """Per-channel (scales, shifts) drawn from the AugmentSpec jitter ranges."""
    scales = _draw(stream, channels, *spec.jitter_scale_range)
    shifts = _draw(stream, channels, *spec.jitter_shift_range)
    return scales, shifts


def color_jitter(img, spec: AugmentSpec, stream: RngStream):
    if img.shape[0] != 3:
        raise ChannelError(f"color jitter needs 3 channels, got {img.shape[0]}")
    scales, shifts = draw_jitter(spec, stream, 3)
    if np.all(scales == 1) and np.all(shifts == 0):
        return img.copy()
    return _clamp(scales[:, None, None] * img + shifts[:, None, None])


def augment_all(img, spec: AugmentSpec, stream: RngStream) -> list[np.ndarray]:
    """[original, blur, noise, jitter, brightness, contrast, sharpness].

    ``stream`` should be the per-image stream (see :func:`image_stream`);
    noise and jitter draw from sub-streams of it, so results do not depend
    on the order images are processed in.
    """
    jitter = (color_jitter(img, spec, stream.derive("jitter")) if img.shape[0] == 3
              else img.copy())
    return [
        img,
        gaussian_blur(img, spec.blur_sigma, spec.blur_ksize),
        gaussian_noise(img, spec.noise_sigma, stream.derive("noise")),
        jitter,
        brightness(img, spec.brightness_factor),
        contrast(img, spec.contrast_factor),
        sharpen(img, spec.sharpness_amount, 1.0, spec.blur_ksize),
    ]


def image_stream(spec: AugmentSpec, index: int) -> RngStream:
    return RngStream(spec.seed, "augment").derive("image", index)
