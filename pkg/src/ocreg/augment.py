"""Seeded image transforms for the original (weak) and augmented (strong) views.

Images are ``[3, h, w]`` float arrays in [0, 1]; batches are ``[n, 3, h, w]``.
All randomness comes from the ``numpy.random.Generator`` passed in, and the
number of draws per call is fixed regardless of outcomes, so a seed pins the
whole pipeline.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentConfig:
    crop_padding: int = 2
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    blur_sigma: tuple[float, float] = (0.1, 1.5)
    blur_kernel: int = 5
    blur_prob: float = 1.0

    def __post_init__(self):
        self.blur_sigma = tuple(float(s) for s in self.blur_sigma)
        self.validate()

    def validate(self) -> None:
        if self.crop_padding < 0:
            raise ConfigError("crop_padding must be >= 0")
        if self.jitter_strength < 0 or self.jitter_strength >= 1:
            raise ConfigError("jitter_strength must be in [0, 1)")
        for name in ("grayscale_prob", "blur_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        lo, hi = self.blur_sigma
        if not 0 < lo <= hi:
            raise ConfigError(f"blur_sigma range must satisfy 0 < lo <= hi, got {self.blur_sigma}")
        if self.blur_kernel < 3 or self.blur_kernel % 2 == 0:
            raise ConfigError(f"blur_kernel must be odd and >= 3, got {self.blur_kernel}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blur_sigma"] = list(self.blur_sigma)
        return d


def gaussian_kernel(sigma: float, ksize: int) -> np.ndarray:
    """Normalized 1-D Gaussian taps at offsets -r..r."""
    if ksize < 1 or ksize % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {ksize}")
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    r = ksize // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _blur_batch(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Separable blur with one kernel per image and reflect padding."""
    k = kernels.shape[1]
    r = k // 2
    h, w = x.shape[-2:]
    kk = kernels[:, :, None, None, None]
    p = np.pad(x, ((0, 0), (0, 0), (0, 0), (r, r)), mode="reflect")
    tmp = sum(kk[:, i] * p[..., i:i + w] for i in range(k))
    p = np.pad(tmp, ((0, 0), (0, 0), (r, r), (0, 0)), mode="reflect")
    return sum(kk[:, i] * p[..., i:i + h, :] for i in range(k))


def gaussian_blur(x: np.ndarray, sigma: float, ksize: int) -> np.ndarray:
    kernel = gaussian_kernel(sigma, ksize)
    return _blur_batch(np.asarray(x, dtype=np.float64)[None], kernel[None])[0]


def weak_augment_batch(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random crop back to size, random horizontal flip."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    pad = cfg.crop_padding
    if pad >= min(h, w):
        raise ConfigError(f"crop_padding {pad} must be smaller than the image side {min(h, w)}")
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    if pad:
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        rows = oy[:, None] + np.arange(h)
        cols = ox[:, None] + np.arange(w)
        out = padded[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                     rows[:, None, :, None], cols[:, None, None, :]]
    else:
        out = x.copy()
    out[flip] = out[flip][..., ::-1]
    return out


def photometric_batch(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-channel affine jitter, random grayscale, Gaussian blur, clamp."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    s = cfg.jitter_strength
    scale = rng.uniform(1.0 - s, 1.0 + s, size=(n, 3))
    shift = rng.uniform(-s, s, size=(n, 3))
    gray = rng.random(n) < cfg.grayscale_prob
    sigma = rng.uniform(*cfg.blur_sigma, size=n)
    blur = rng.random(n) < cfg.blur_prob

    out = np.clip(x * scale[:, :, None, None] + shift[:, :, None, None], 0.0, 1.0)
    if gray.any():
        lum = np.einsum("c,nchw->nhw", LUMA, out[gray])
        out[gray] = lum[:, None]
    if blur.any():
        kernels = np.stack([gaussian_kernel(sg, cfg.blur_kernel) for sg in sigma[blur]])
        out[blur] = _blur_batch(out[blur], kernels)
    return np.clip(out, 0.0, 1.0)


def strong_augment_batch(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return photometric_batch(weak_augment_batch(x, cfg, rng), cfg, rng)


def weak_augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return weak_augment_batch(np.asarray(x)[None], cfg, rng)[0]


def strong_augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return strong_augment_batch(np.asarray(x)[None], cfg, rng)[0]
