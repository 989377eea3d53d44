"""Images in, tensors out.

Binary PGM/PPM reading and writing, half-pixel bilinear resizing,
per-channel normalization, a deterministic phantom generator that stands in
for private medical scans, and the MPFT tensor container.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

PHANTOM_CLASSES = ("ellipse", "two_ellipses", "ring", "ring_blob")


class ImageFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TensorFormatError(ValueError):
    pass


@dataclass
class ImageSample:
    image: np.ndarray  # C x H x W in [0, 1]
    label: int
    source_id: str

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[0] not in (1, 3):
            raise ValueError(f"image must be C x H x W with C in (1, 3), got {list(img.shape)}")
        self.image = np.clip(img, 0.0, 1.0).astype(ad.working_dtype(), copy=False)


@dataclass
class DatasetManifest:
    name: str
    samples: list[ImageSample]
    class_names: list[str]
    normalization: tuple[list[float], list[float]] | None = None

    def __post_init__(self):
        if self.normalization is not None and min(self.normalization[1]) <= 0:
            raise ValueError("normalization std entries must be > 0")


# ---------------------------------------------------------------- PGM / PPM


def _header_tokens(buf: bytes, count: int, i: int = 0) -> tuple[list[tuple[bytes, int]], int]:
    """Read ``count`` whitespace separated header tokens from offset ``i``, skipping comments."""
    tokens, n = [], len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise ImageFormatError("truncated header", i)
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        tokens.append((buf[start:i], start))
    if i >= n or not buf[i:i + 1].isspace():
        raise ImageFormatError("expected a single whitespace byte before the raster", i)
    return tokens, i + 1


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Parse a binary P5/P6 file with maxval 255 into C x H x W values in [0, 1]."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"bad magic {magic!r}, expected P5 or P6", 0)
    tokens, start = _header_tokens(buf, 3, 2)
    values = []
    for tok, off in tokens:
        if not tok.isdigit():
            raise ImageFormatError(f"expected a decimal integer, got {tok!r}", off)
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise ImageFormatError(f"maxval {maxval} unsupported, expected 255", tokens[2][1])
    if width <= 0 or height <= 0:
        raise ImageFormatError("image dims must be positive", tokens[0][1])
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raster = buf[start:start + need]
    if len(raster) < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(raster)}",
                               start + len(raster))
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return (pixels.transpose(2, 0, 1).astype(np.float64) / 255.0).astype(ad.working_dtype())


def encode_netpbm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"image must be C x H x W with C in (1, 3), got {list(img.shape)}")
    c, h, w = img.shape
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes()


def load_image(path, label: int = -1) -> ImageSample:
    path = Path(path)
    return ImageSample(decode_netpbm(path.read_bytes()), label, path.stem)


def save_image(sample, path) -> None:
    image = sample.image if isinstance(sample, ImageSample) else sample
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_netpbm(image))


# ---------------------------------------------------------------- preprocessing


def _axis_weights(n_in: int, n_out: int):
    d = np.arange(n_out, dtype=np.float64)
    s = np.clip((d + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, s - i0


def resize_bilinear(image, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("target dims must be positive")
    img = np.asarray(image)
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(ad.working_dtype(), copy=True)
    x = img.astype(np.float64)
    r0, r1, fr = _axis_weights(h, out_h)
    x = x[:, r0, :] * (1 - fr)[None, :, None] + x[:, r1, :] * fr[None, :, None]
    c0, c1, fc = _axis_weights(w, out_w)
    x = x[:, :, c0] * (1 - fc)[None, None, :] + x[:, :, c1] * fc[None, None, :]
    return x.astype(ad.working_dtype())


def _channel_vec(v, c):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 1:
        v = np.repeat(v, c)
    if v.size != c:
        raise ValueError(f"expected {c} per-channel values, got {v.size}")
    return v[:, None, None]


def normalize(image, mean, std) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    m, s = _channel_vec(mean, img.shape[0]), _channel_vec(std, img.shape[0])
    if np.any(s <= 0):
        raise ValueError("std must be > 0 for every channel")
    return ((img - m) / s).astype(ad.working_dtype())


def denormalize(image, mean, std) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    m, s = _channel_vec(mean, img.shape[0]), _channel_vec(std, img.shape[0])
    if np.any(s <= 0):
        raise ValueError("std must be > 0 for every channel")
    return (img * s + m).astype(ad.working_dtype())


def channel_stats(images: Sequence[np.ndarray]) -> tuple[list[float], list[float]]:
    """Per-channel mean and population std over a set of C x H x W images."""
    stack = np.stack([np.asarray(x, dtype=np.float64) for x in images])
    mean = stack.mean(axis=(0, 2, 3))
    std = np.sqrt(((stack - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3)))
    return mean.tolist(), std.tolist()


# ---------------------------------------------------------------- phantoms

_GRID_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _grid(size):
    if size not in _GRID_CACHE:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        _GRID_CACHE[size] = (yy + 0.5, xx + 0.5)
    return _GRID_CACHE[size]


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    """Anti-aliased coverage of a rotated ellipse (about one pixel of soft edge)."""
    ct, st = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * ct + dy * st) / rx
    v = (-dx * st + dy * ct) / ry
    r = np.sqrt(u * u + v * v)
    return np.clip((1.0 - r) * min(rx, ry) + 0.5, 0.0, 1.0)


def generate_phantom(class_id: int, seed: int, size: int = 32) -> ImageSample:
    """Deterministic synthetic scan of one of four geometric classes.

    Smooth low-frequency background plus bright structures: one ellipse (0),
    two ellipses (1), a ring (2), or a ring around a blob (3).  Centers, radii
    and intensities are jittered from ``seed``.
    """
    if class_id not in range(len(PHANTOM_CLASSES)):
        raise ValueError(f"unknown phantom class {class_id}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, class_id])))
    yy, xx = _grid(size)
    k = size / 32.0

    fy, fx = rng.uniform(0.5, 1.5, size=2)
    phase = rng.uniform(0, 2 * math.pi)
    wave = np.cos(2 * math.pi * (fy * yy + fx * xx) / size + phase)
    bg_level = rng.uniform(0.12, 0.3)
    bg = bg_level + rng.uniform(0.03, 0.08) * wave

    def jit(scale):
        return rng.uniform(-scale, scale) * k

    c = size / 2.0
    if class_id == 0:
        shape = _ellipse(yy, xx, c + jit(3), c + jit(3), rng.uniform(5, 7) * k,
                         rng.uniform(5, 7) * k, rng.uniform(0, math.pi))
    elif class_id == 1:
        a = _ellipse(yy, xx, c + jit(2), 9 * k + jit(1.5), rng.uniform(5, 6.5) * k,
                     rng.uniform(5, 6.5) * k, rng.uniform(0, math.pi))
        b = _ellipse(yy, xx, c + jit(2), 23 * k + jit(1.5), rng.uniform(5, 6.5) * k,
                     rng.uniform(5, 6.5) * k, rng.uniform(0, math.pi))
        shape = np.maximum(a, b)
    else:
        cy, cx = c + jit(2), c + jit(2)
        r_out = rng.uniform(9, 11) * k
        width = rng.uniform(2.5, 3.5) * k
        ring = np.clip(_ellipse(yy, xx, cy, cx, r_out, r_out, 0.0)
                       - _ellipse(yy, xx, cy, cx, r_out - width, r_out - width, 0.0), 0.0, 1.0)
        shape = ring
        if class_id == 3:
            blob_r = rng.uniform(2.5, 4) * k
            shape = np.maximum(ring, _ellipse(yy, xx, cy + jit(1.5), cx + jit(1.5), blob_r,
                                              blob_r, 0.0))
    tint = rng.uniform(0.75, 1.0, size=3)
    brightness = rng.uniform(0.75, 0.95)
    img = np.stack([bg * (0.8 + 0.2 * t) + shape * (brightness * t - bg * (0.8 + 0.2 * t))
                    for t in tint])
    return ImageSample(np.clip(img, 0.0, 1.0), class_id, f"phantom-c{class_id}-s{seed}")


def phantom_dataset(n: int, num_classes: int = 2, seed: int = 0, size: int = 32,
                    out_size: int | None = None) -> list[ImageSample]:
    """``n`` phantoms cycling through the first ``num_classes`` classes."""
    if not 1 <= num_classes <= len(PHANTOM_CLASSES):
        raise ValueError(f"num_classes must be in 1..{len(PHANTOM_CLASSES)}")
    out = []
    for i in range(n):
        s = generate_phantom(i % num_classes, seed * 1_000_003 + i, size)
        if out_size is not None and out_size != size:
            s = ImageSample(resize_bilinear(s.image, out_size, out_size), s.label, s.source_id)
        out.append(s)
    return out


# ---------------------------------------------------------------- dataset directories


def write_dataset(root, manifest: DatasetManifest) -> Path:
    """Lay out ``root/<class_name>/<id>.ppm`` plus ``root/manifest.json``."""
    root = Path(root)
    entries = []
    for s in manifest.samples:
        ext = ".pgm" if s.image.shape[0] == 1 else ".ppm"
        rel = Path(manifest.class_names[s.label]) / f"{s.source_id}{ext}"
        save_image(s, root / rel)
        entries.append({"path": rel.as_posix(), "label": s.label, "source_id": s.source_id})
    doc = {"name": manifest.name, "class_names": manifest.class_names, "samples": entries}
    if manifest.normalization is not None:
        doc["normalization"] = {"mean": list(manifest.normalization[0]),
                                "std": list(manifest.normalization[1])}
    (root / "manifest.json").write_text(json.dumps(doc, indent=2))
    return root


def load_dataset(root) -> DatasetManifest:
    """Read a directory written by :func:`write_dataset`, or any
    ``root/<class_name>/*.p[gp]m`` tree without a manifest."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    mpath = root / "manifest.json"
    if mpath.exists():
        doc = json.loads(mpath.read_text())
        samples = [ImageSample(load_image(root / e["path"]).image, int(e["label"]), e["source_id"])
                   for e in doc["samples"]]
        norm = doc.get("normalization")
        return DatasetManifest(doc.get("name", root.name), samples, list(doc["class_names"]),
                               (norm["mean"], norm["std"]) if norm else None)
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    samples = []
    for label, name in enumerate(class_names):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() in (".pgm", ".ppm"):
                samples.append(load_image(f, label))
    return DatasetManifest(root.name, samples, class_names)


# ---------------------------------------------------------------- MPFT container

MPFT_MAGIC = b"MPFT"
MPFT_VERSION = 1
MPFT_FLOAT32 = 0
_HEAD = struct.Struct("<4sBBHI")


def encode_tensor(t) -> bytes:
    arr = np.asarray(t)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError("refusing to serialize non-finite values")
    dims = arr.shape
    head = _HEAD.pack(MPFT_MAGIC, MPFT_VERSION, MPFT_FLOAT32, 0, len(dims))
    return head + struct.pack(f"<{len(dims)}I", *dims) + arr.astype("<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise TensorFormatError(f"header needs {_HEAD.size} bytes, got {len(buf)}")
    magic, version, dtype, _, ndim = _HEAD.unpack_from(buf)
    if magic != MPFT_MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != MPFT_VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if dtype != MPFT_FLOAT32:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    off = _HEAD.size + 4 * ndim
    if len(buf) < off:
        raise TensorFormatError(f"truncated dims: expected {off} bytes, got {len(buf)}")
    dims = struct.unpack_from(f"<{ndim}I", buf, _HEAD.size)
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    actual = len(buf) - off
    if actual != expected:
        raise TensorFormatError(f"payload length mismatch: expected {expected} bytes, got {actual}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(dims).astype(np.float32)


def write_tensor(t, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_tensor(t))
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_named_tensors(root, entries, meta: dict | None = None) -> Path:
    """One MPFT file per (name, tensor) plus an ``index.json`` keeping order."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (name, t) in enumerate(entries):
        fname = f"{i:03d}_{name}.mpft"
        write_tensor(t, root / fname)
        files.append({"name": name, "file": fname})
    (root / "index.json").write_text(json.dumps({"tensors": files, **(meta or {})}, indent=2))
    return root


def read_named_tensors(root) -> tuple[list[tuple[str, np.ndarray]], dict]:
    root = Path(root)
    doc = json.loads((root / "index.json").read_text())
    entries = [(e["name"], read_tensor(root / e["file"])) for e in doc.pop("tensors")]
    return entries, doc
