"""Synthetic complementary RGB-thermal scenes and binary PNM image I/O.

Each scene has a smooth background and 2-5 shapes. A shape is visible in
RGB only, in thermal only, or in both, and its class is determined by
that visibility tag, so no single modality can label every shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

NOISE_SIGMA = 0.02
# visibility tag of class k (k >= 1) is TAGS[(k - 1) % 3]
TAGS = ("rgb", "thermal", "both")
_OBJECT_RGB = np.array([0.85, 0.25, 0.20])
_THERMAL_CONTRAST = 0.45


class PnmError(ValueError):
    pass


@dataclass
class SegSample:
    rgb: np.ndarray       # [3, H, W] in [0, 1]
    thermal: np.ndarray   # [1, H, W] in [0, 1]
    labels: np.ndarray    # [H, W] ints in [0, K)

    def __post_init__(self):
        h, w = self.labels.shape
        if self.rgb.shape != (3, h, w) or self.thermal.shape != (1, h, w):
            raise ValueError(f"inconsistent sample shapes {self.rgb.shape}, {self.thermal.shape}, {self.labels.shape}")


def _quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _shape_mask(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    size = rng.integers(max(4, h // 8), max(6, h // 3) + 1)
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    if rng.random() < 0.5:
        ry = size // 2
        rx = rng.integers(max(2, size // 3), size + 1)
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    r = size / 2.0
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def generate_sample(rng: np.random.Generator, h: int, w: int, k: int, return_layers: bool = False):
    """One scene; with ``return_layers`` also the clean backgrounds and per-shape tags and masks."""
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    base = rng.uniform(0.3, 0.55, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=(3, 2))
    bg_rgb = base[:, None, None] + tilt[:, 0, None, None] * yy + tilt[:, 1, None, None] * xx
    bg_th = rng.uniform(0.15, 0.3) + rng.uniform(-0.08, 0.08) * yy + rng.uniform(-0.08, 0.08) * xx

    rgb = bg_rgb.copy()
    th = bg_th.copy()
    labels = np.zeros((h, w), dtype=np.int64)
    shapes = []
    for _ in range(rng.integers(2, 6)):
        cls = int(rng.integers(1, k))
        tag = TAGS[(cls - 1) % 3]
        tier = (cls - 1) // 3
        mask = _shape_mask(rng, h, w)
        if tag in ("rgb", "both"):
            color = _OBJECT_RGB + rng.uniform(-0.05, 0.05, size=3) - 0.2 * tier
            rgb[:, mask] = color[:, None]
        else:
            rgb[:, mask] = bg_rgb[:, mask]
        if tag in ("thermal", "both"):
            th[mask] = bg_th[mask] + _THERMAL_CONTRAST + rng.uniform(-0.05, 0.05) - 0.15 * tier
        else:
            th[mask] = bg_th[mask]
        labels[mask] = cls
        shapes.append((tag, cls, mask))

    rgb = _quantize(rgb + rng.normal(0.0, NOISE_SIGMA, size=rgb.shape))
    th = _quantize(th + rng.normal(0.0, NOISE_SIGMA, size=th.shape))[None]
    sample = SegSample(rgb, th, labels)
    if return_layers:
        return sample, {"bg_rgb": bg_rgb, "bg_thermal": bg_th, "shapes": shapes}
    return sample


def gen_dataset(n: int, h: int, w: int, k: int, seed: int) -> list[SegSample]:
    """``n`` scenes; scene ``i`` depends only on ``(seed, i)`` so prefixes are stable."""
    if h % 16 or w % 16 or h <= 0 or w <= 0:
        raise ValueError(f"H and W must be positive multiples of 16, got {h}x{w}")
    if k < 4:
        raise ValueError(f"need at least 4 classes, got {k}")
    return [generate_sample(np.random.default_rng([seed, i]), h, w, k) for i in range(n)]


def edge_mask(region: np.ndarray) -> np.ndarray:
    """Pixels of a boolean region that touch a 4-neighbour of the other value."""
    edge = np.zeros_like(region, dtype=bool)
    dv = region[1:, :] != region[:-1, :]
    dh = region[:, 1:] != region[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return edge


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Euclidean dilation of a boolean mask by ``radius`` pixels."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx > radius * radius:
                continue
            src = mask[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
            out[max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)] |= src
    return out


def generate_edge_image(rng: np.random.Generator, h: int = 96, w: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Grayscale test image in ``[0, 1]``: sharp shapes over a smooth blob and ramp.

    Returns the image and the boolean map of true shape edges.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = 0.2 + 0.15 * xx / w
    cy, cx, s = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w, rng.uniform(0.15, 0.25) * min(h, w)
    img += 0.3 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    edges = np.zeros((h, w), dtype=bool)
    for _ in range(4):
        region = _shape_mask(rng, h, w)
        img[region] += rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.35)
        edges |= edge_mask(region)
    return np.clip(img, 0.0, 1.0), edges


# ---------------------------------------------------------------------------
# PNM


def _read_header(buf: bytes, magic: bytes):
    if buf[:2] != magic:
        raise PnmError(f"expected {magic.decode()} header, got {buf[:2]!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PnmError("malformed header")
        try:
            fields.append(int(buf[start:pos]))
        except ValueError:
            raise PnmError(f"malformed header field {buf[start:pos]!r}") from None
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PnmError("malformed header")
    width, height, maxval = fields
    if maxval != 255:
        raise PnmError(f"only maxval 255 is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise PnmError(f"bad dimensions {width}x{height}")
    return width, height, pos + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, offset = _read_header(buf, magic)
    count = width * height * channels
    if len(buf) - offset < count:
        raise PnmError(f"truncated payload: need {count} bytes, have {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype=np.uint8, count=count, offset=offset)
    return arr.reshape((height, width, channels) if channels > 1 else (height, width)).copy()


def _write(path, magic: bytes, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise PnmError(f"expected uint8 pixels, got {arr.dtype}")
    height, width = arr.shape[:2]
    Path(path).write_bytes(magic + f"\n{width} {height}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """8-bit grayscale ``[H, W]``."""
    return _read(path, b"P5", 1)


def write_pgm(path, arr: np.ndarray) -> None:
    if np.asarray(arr).ndim != 2:
        raise PnmError("PGM data must be [H, W]")
    _write(path, b"P5", arr)


def read_ppm(path) -> np.ndarray:
    """8-bit color ``[H, W, 3]``."""
    return _read(path, b"P6", 3)


def write_ppm(path, arr: np.ndarray) -> None:
    if np.asarray(arr).ndim != 3 or np.asarray(arr).shape[2] != 3:
        raise PnmError("PPM data must be [H, W, 3]")
    _write(path, b"P6", arr)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(directory, samples: list[SegSample], meta: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_ppm(d / f"{i:04d}_rgb.ppm", to_uint8(s.rgb.transpose(1, 2, 0)))
        write_pgm(d / f"{i:04d}_th.pgm", to_uint8(s.thermal[0]))
        write_pgm(d / f"{i:04d}_lbl.pgm", s.labels.astype(np.uint8))
    (d / "meta.txt").write_text("".join(f"{key}={meta[key]}\n" for key in ("n", "h", "w", "k", "seed")))


def read_meta(directory) -> dict[str, int]:
    meta = {}
    for line in (Path(directory) / "meta.txt").read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = int(value)
    return meta


def load_image_pair(rgb_path, thermal_path) -> tuple[np.ndarray, np.ndarray]:
    rgb = read_ppm(rgb_path).transpose(2, 0, 1).astype(np.float32) / 255.0
    th = read_pgm(thermal_path)[None].astype(np.float32) / 255.0
    if rgb.shape[1:] != th.shape[1:]:
        raise PnmError(f"RGB {rgb.shape[1:]} and thermal {th.shape[1:]} sizes differ")
    return rgb, th


def load_dataset(directory) -> tuple[list[SegSample], dict[str, int]]:
    d = Path(directory)
    meta = read_meta(d)
    samples = []
    for i in range(meta["n"]):
        rgb, th = load_image_pair(d / f"{i:04d}_rgb.ppm", d / f"{i:04d}_th.pgm")
        labels = read_pgm(d / f"{i:04d}_lbl.pgm").astype(np.int64)
        if labels.max(initial=0) >= meta["k"]:
            raise PnmError(f"label {labels.max()} out of range in sample {i}")
        samples.append(SegSample(rgb, th, labels))
    return samples, meta
