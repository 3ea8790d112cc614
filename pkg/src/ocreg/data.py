"""Synthetic multi-domain shape datasets, corruptions, and the OCRDATA1 file format.

The class of an image is the shape it shows; the domain decides the colour
palette, background level and sensor noise. Shape geometry for sample ``i``
is drawn from a stream keyed on ``(spec.seed, i)`` only, so two domains that
share a seed render the same masks and differ purely in domain attributes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augment import _blur_batch, gaussian_kernel
from .errors import ConfigError, FormatError

DATA_MAGIC = b"OCRDATA1"
DATA_VERSION = 1

SHAPES = ("disk", "square", "triangle", "cross", "ring", "bar", "L", "diamond",
          "frame", "T", "X", "semicircle", "hbar", "dots", "chevron", "hourglass")

CORRUPTIONS = ("gaussian-noise", "gaussian-blur", "brightness", "contrast", "pixelate")

# magnitude per severity 1..5
SEVERITY = {
    "gaussian-noise": (0.04, 0.06, 0.08, 0.10, 0.14),   # noise sigma
    "gaussian-blur": (0.6, 0.9, 1.2, 1.6, 2.0),          # blur sigma
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),             # additive shift
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.15),            # contrast factor
    "pixelate": (2, 3, 4, 5, 6),                          # block side in pixels
}


@dataclass
class DomainSpec:
    palette: tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_level: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.palette = tuple(float(g) for g in self.palette)
        if len(self.palette) != 3 or not all(0.2 <= g <= 1.0 for g in self.palette):
            raise ConfigError(f"palette needs 3 gains in [0.2, 1], got {self.palette}")
        if not 0.0 <= self.background_level <= 1.0:
            raise ConfigError("background_level must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["palette"] = list(self.palette)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(**d)


@dataclass
class CorruptionSpec:
    kind: str
    severity: int = 5

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTIONS}")
        if not 1 <= int(self.severity) <= 5:
            raise ConfigError("severity must be in 1..5")
        self.severity = int(self.severity)


@dataclass
class DomainDataset:
    images: np.ndarray          # [n, 3, h, w] float32 in [0, 1]
    labels: np.ndarray          # [n] int64
    num_classes: int
    domain_id: int = 0
    spec: DomainSpec = field(default_factory=DomainSpec)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "DomainDataset":
        return DomainDataset(self.images[idx], self.labels[idx], self.num_classes, self.domain_id, self.spec)

    def equals(self, other: "DomainDataset") -> bool:
        return (self.num_classes == other.num_classes and self.domain_id == other.domain_id
                and self.spec == other.spec and self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes()
                and np.array_equal(self.labels, other.labels))


def concat(datasets: list[DomainDataset]) -> DomainDataset:
    first = datasets[0]
    return DomainDataset(np.concatenate([d.images for d in datasets]),
                         np.concatenate([d.labels for d in datasets]),
                         first.num_classes, first.domain_id, first.spec)


def shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Boolean mask for a shape in normalized coordinates (roughly [-1, 1]^2, v down)."""
    au, av = np.abs(u), np.abs(v)
    r = np.sqrt(u * u + v * v)
    if kind == "disk":
        return r <= 1.0
    if kind == "square":
        return (au <= 0.8) & (av <= 0.8)
    if kind == "triangle":
        return (v >= -0.8) & (v <= 0.8) & (au <= 0.9 * (v + 0.8) / 1.6)
    if kind == "cross":
        return ((au <= 0.3) & (av <= 0.95)) | ((av <= 0.3) & (au <= 0.95))
    if kind == "ring":
        return (r >= 0.55) & (r <= 1.0)
    if kind == "bar":
        return (au <= 0.25) & (av <= 0.95)
    if kind == "L":
        return (((u >= -0.8) & (u <= -0.3) & (av <= 0.9))
                | ((v >= 0.4) & (v <= 0.9) & (au <= 0.8)))
    if kind == "diamond":
        return au + av <= 1.0
    if kind == "frame":
        m = np.maximum(au, av)
        return (m >= 0.5) & (m <= 0.9)
    if kind == "T":
        return ((v >= -0.9) & (v <= -0.45) & (au <= 0.9)) | ((au <= 0.25) & (av <= 0.9))
    if kind == "X":
        return ((np.abs(u - v) <= 0.35) | (np.abs(u + v) <= 0.35)) & (au <= 0.9) & (av <= 0.9)
    if kind == "semicircle":
        return (r <= 1.0) & (v >= -0.1)
    if kind == "hbar":
        return (av <= 0.25) & (au <= 0.95)
    if kind == "dots":
        return ((u - 0.5) ** 2 + v * v <= 0.14) | ((u + 0.5) ** 2 + v * v <= 0.14)
    if kind == "chevron":
        return (np.abs(v - (0.9 * au - 0.45)) <= 0.25) & (au <= 0.9)
    if kind == "hourglass":
        return (au <= 0.9 * av) & (av <= 0.9)
    raise ConfigError(f"unknown shape {kind!r}")


def _geometry_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, 0x5AA])


def render_mask(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    cx, cy = rng.uniform(0.35 * size, 0.65 * size, size=2)
    scale = rng.uniform(0.22, 0.32) * size
    coords = np.arange(size) + 0.5
    u = (coords[None, :] - cx) / scale
    v = (coords[:, None] - cy) / scale
    return shape_mask(SHAPES[label], u, v).astype(np.float64)


def gen_domain(num_classes: int, n_per_class: int, spec: DomainSpec, domain_id: int = 0,
               size: int = 32) -> DomainDataset:
    """Render ``num_classes * n_per_class`` images; label of sample i is ``i % C``."""
    if not 2 <= num_classes <= len(SHAPES):
        raise ConfigError(f"number of classes must be in [2, {len(SHAPES)}], got {num_classes}")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    if size < 8:
        raise ConfigError("image size must be >= 8")
    n = num_classes * n_per_class
    labels = np.arange(n, dtype=np.int64) % num_classes
    gains = np.asarray(spec.palette)[:, None, None]
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        mask = render_mask(int(labels[i]), size, _geometry_rng(spec.seed, i))
        img = spec.background_level * (1.0 - mask) + gains * mask
        if spec.noise_sigma > 0:
            noise_rng = np.random.default_rng([spec.seed, domain_id, i, 0xD0])
            img = img + noise_rng.normal(0.0, spec.noise_sigma, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return DomainDataset(images, labels, num_classes, domain_id, spec)


def _pixelate(x: np.ndarray, block: int) -> np.ndarray:
    out = np.empty_like(x)
    h, w = x.shape[-2:]
    for r0 in range(0, h, block):
        for c0 in range(0, w, block):
            tile = x[..., r0:r0 + block, c0:c0 + block]
            out[..., r0:r0 + block, c0:c0 + block] = tile.mean(axis=(-2, -1), keepdims=True)
    return out


def apply_corruption(images: np.ndarray, c: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    mag = SEVERITY[c.kind][c.severity - 1]
    if c.kind == "gaussian-noise":
        out = x + rng.normal(0.0, mag, size=x.shape)
    elif c.kind == "gaussian-blur":
        ksize = min(2 * math.ceil(3 * mag) + 1, 2 * (min(x.shape[-2:]) // 2) - 1)
        k = gaussian_kernel(mag, ksize)
        out = _blur_batch(x, np.repeat(k[None], len(x), axis=0))
    elif c.kind == "brightness":
        out = x + mag
    elif c.kind == "contrast":
        m = x.mean(axis=(1, 2, 3), keepdims=True)
        out = (x - m) * mag + m
    else:
        out = _pixelate(x, int(mag))
    return np.clip(out, 0.0, 1.0)


def corrupt(d: DomainDataset, c: CorruptionSpec, seed: int = 0) -> DomainDataset:
    rng = np.random.default_rng([seed, CORRUPTIONS.index(c.kind), c.severity])
    images = apply_corruption(d.images, c, rng).astype(np.float32)
    return DomainDataset(images, d.labels.copy(), d.num_classes, d.domain_id, d.spec)


# -- file format ----------------------------------------------------------

_HEADER = struct.Struct("<8s6I")


def save_dataset(d: DomainDataset, path) -> None:
    """Write the OCRDATA1 layout; pixels are stored channel-major per record."""
    n, _, h, w = d.images.shape
    parts = [_HEADER.pack(DATA_MAGIC, DATA_VERSION, d.num_classes, n, h, w, d.domain_id)]
    pix = np.ascontiguousarray(d.images, dtype="<f4").reshape(n, -1)
    rec = np.zeros(n, dtype=[("label", "<u2"), ("pix", "<f4", (3 * h * w,))])
    rec["label"] = d.labels
    rec["pix"] = pix
    parts.append(rec.tobytes())
    meta = json.dumps(d.spec.to_dict(), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> DomainDataset:
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:8] != DATA_MAGIC:
        raise FormatError(f"bad magic: expected {DATA_MAGIC!r}, found {buf[:8]!r}", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, num_classes, n, h, w, domain_id = _HEADER.unpack_from(buf)
    if version != DATA_VERSION:
        raise FormatError(f"unsupported version {version}, expected {DATA_VERSION}", 8)
    if num_classes < 2 or h == 0 or w == 0:
        raise FormatError("invalid header fields", 12)
    rec_size = 2 + 4 * 3 * h * w
    pos = _HEADER.size
    end = pos + n * rec_size
    if end + 4 > len(buf):
        raise FormatError(f"truncated records: need {end + 4} bytes, have {len(buf)}", len(buf))
    rec = np.frombuffer(buf, dtype=[("label", "<u2"), ("pix", "<f4", (3 * h * w,))], count=n, offset=pos)
    (meta_len,) = struct.unpack_from("<I", buf, end)
    if end + 4 + meta_len != len(buf):
        raise FormatError(f"metadata length {meta_len} does not match file size", end)
    try:
        spec = DomainSpec.from_dict(json.loads(buf[end + 4:].decode("utf-8")))
    except (ValueError, TypeError, ConfigError) as exc:
        raise FormatError(f"invalid domain metadata: {exc}", end + 4) from None
    labels = rec["label"].astype(np.int64)
    if n and labels.max() >= num_classes:
        raise FormatError("label out of range", pos)
    images = rec["pix"].reshape(n, 3, h, w).astype(np.float32)
    return DomainDataset(images, labels, num_classes, domain_id, spec)
