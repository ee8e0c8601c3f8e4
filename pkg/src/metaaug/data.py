"""Datasets: the MAUG binary container, netpbm ingestion, synthetic glyphs and splits."""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metaaug.augment import ImageSample

MAGIC = b"MAUG"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHBH")


class DatasetError(ValueError):
    pass


def make_rng(seed, stream) -> np.random.Generator:
    """Philox (counter-based) generator keyed by ``(seed, stream)``.

    ``stream`` is a name or integer; each name gets an independent, replayable
    sequence, e.g. ``"init"``, ``"data"``, ``"augment"``, ``"sampler"``.
    """
    sid = zlib.crc32(stream.encode()) if isinstance(stream, str) else int(stream)
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, sid])
    return np.random.Generator(np.random.Philox(seq))


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = ""
    splits: dict = field(default_factory=dict)
    class_names: tuple = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DatasetError("images must be (N, H, W, C) with one label each")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("label outside the class range")
        seen = set()
        for name, idx in self.splits.items():
            s = set(np.asarray(idx).tolist())
            if seen & s:
                raise DatasetError(f"split {name!r} overlaps another split")
            seen |= s

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> ImageSample:
        return ImageSample(self.images[i], int(self.labels[i]))

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def input_dim(self):
        return int(np.prod(self.image_shape))

    def subset(self, split):
        idx = self.splits[split]
        return self.images[idx], self.labels[idx]


def save_dataset(ds: Dataset, path):
    n, h, w, c = ds.images.shape
    pix = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8).reshape(n, h * w * c)
    rec = np.zeros(n, dtype=[("pixels", np.uint8, (h * w * c,)), ("label", "<u2")])
    rec["pixels"] = pix
    rec["label"] = ds.labels
    blob = _HEADER.pack(MAGIC, VERSION, n, h, w, c, ds.num_classes) + rec.tobytes()
    atomic_write(path, blob)


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    return parse_dataset(data, name=Path(path).stem)


def parse_dataset(data: bytes, name="") -> Dataset:
    if len(data) < _HEADER.size:
        raise DatasetError(f"truncated header: {len(data)} bytes, need {_HEADER.size} (offset 0)")
    magic, version, n, h, w, c, classes = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise DatasetError(f"unsupported version {version} at offset 4")
    if h == 0 or w == 0 or c == 0 or classes == 0:
        raise DatasetError(f"zero image dimension or class count at offset 12")
    rec_size = h * w * c + 2
    need = _HEADER.size + n * rec_size
    if len(data) != need:
        raise DatasetError(
            f"record section length mismatch: header promises {n} records ({need} bytes total), "
            f"file has {len(data)} bytes (first bad offset {min(len(data), need)})"
        )
    rec = np.frombuffer(data, dtype=[("pixels", np.uint8, (h * w * c,)), ("label", "<u2")],
                        count=n, offset=_HEADER.size)
    labels = rec["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        off = _HEADER.size + int(bad[0]) * rec_size + h * w * c
        raise DatasetError(f"label {labels[bad[0]]} >= class count {classes} at offset {off}")
    images = rec["pixels"].reshape(n, h, w, c).astype(np.float64) / 255.0
    return Dataset(images, labels, classes, name=name)


def atomic_write(path, blob):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(blob, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(blob)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# netpbm ingestion


def _pnm_tokens(data, count, pos):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"truncated netpbm header at offset {pos}")
        out.append(data[start:pos])
    return out, pos


def read_pnm(path) -> np.ndarray:
    """Read a P2/P3/P5/P6 file into an ``(H, W, C)`` array in [0, 1]."""
    data = Path(path).read_bytes()
    (magic,), pos = _pnm_tokens(data, 1, 0)
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DatasetError(f"{path}: unsupported netpbm magic {magic!r}")
    (w, h, maxval), pos = _pnm_tokens(data, 3, pos)
    w, h, maxval = int(w), int(h), int(maxval)
    c = 3 if magic in (b"P3", b"P6") else 1
    if magic in (b"P2", b"P3"):
        vals, _ = _pnm_tokens(data, w * h * c, pos)
        arr = np.array([int(v) for v in vals], dtype=np.float64)
    else:
        pos += 1
        dtype = np.uint8 if maxval < 256 else ">u2"
        arr = np.frombuffer(data, dtype=dtype, count=w * h * c, offset=pos).astype(np.float64)
    return arr.reshape(h, w, c) / maxval


def convert_pnm_tree(root) -> Dataset:
    """``root/<class name>/*.pgm|*.ppm`` -> Dataset; classes in sorted name order."""
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"{root}: no class subdirectories")
    images, labels = [], []
    for ci, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() in (".pgm", ".ppm", ".pnm"):
                images.append(read_pnm(f))
                labels.append(ci)
    if not images:
        raise DatasetError(f"{root}: no .pgm/.ppm files")
    if len({im.shape for im in images}) != 1:
        raise DatasetError("all images must share one shape")
    return Dataset(np.stack(images), np.array(labels), len(classes), name=root.name,
                   class_names=tuple(classes))


# --------------------------------------------------------------------------
# synthetic glyphs

GLYPH_SIZE = 16
GLYPH_CLASSES = ("six", "nine", "plus", "ring", "box", "cross", "tee", "ell")
CHIRAL_PAIR = (0, 1)


def _disk_mask(cy, cx, r_out, r_in, size=GLYPH_SIZE):
    yy, xx = np.mgrid[0:size, 0:size]
    d = np.hypot(yy - cy, xx - cx)
    return (d <= r_out) & (d >= r_in)


def canonical_glyph(cls) -> np.ndarray:
    """Noise-free ``(16, 16, 1)`` glyph; ``nine`` is exactly ``six`` turned 180 degrees."""
    s = GLYPH_SIZE
    g = np.zeros((s, s))
    if cls in (0, 1):
        g[_disk_mask(9.5, 8.0, 3.6, 1.8)] = 1.0  # bowl
        g[3:10, 4:6] = 1.0  # stem
        g[3:5, 4:10] = 1.0  # hook
        if cls == 1:
            g = g[::-1, ::-1]
    elif cls == 2:
        g[7:9, 3:13] = 1.0
        g[3:13, 7:9] = 1.0
    elif cls == 3:
        g[_disk_mask(7.5, 7.5, 5.0, 3.2)] = 1.0
    elif cls == 4:
        g[3:13, 3:13] = 1.0
        g[5:11, 5:11] = 0.0
    elif cls == 5:
        i = np.arange(3, 13)
        for off in (0, 1):
            g[i, np.clip(i + off, 0, s - 1)] = 1.0
            g[i, np.clip(s - 1 - i - off, 0, s - 1)] = 1.0
    elif cls == 6:
        g[3:5, 3:13] = 1.0
        g[3:13, 7:9] = 1.0
    elif cls == 7:
        g[3:13, 3:5] = 1.0
        g[11:13, 3:13] = 1.0
    else:
        raise ValueError(f"unknown glyph class {cls}")
    return g[..., None].copy()


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def synth_digits(n, seed, noise=0.05, max_shift=1) -> Dataset:
    """Balanced 8-class glyph set with a 180-degree chiral pair (``six``/``nine``).

    Each sample is its canonical glyph shifted by up to ``max_shift`` pixels,
    scaled in brightness by U(0.7, 1) and perturbed with Gaussian pixel noise.
    """
    nc = len(GLYPH_CLASSES)
    if n < nc:
        raise ValueError(f"need at least {nc} samples, one per class")
    rng = make_rng(seed, "synth")
    labels = np.arange(n) % nc
    rng.shuffle(labels)
    canon = [canonical_glyph(c) for c in range(nc)]
    images = np.empty((n, GLYPH_SIZE, GLYPH_SIZE, 1))
    for i, y in enumerate(labels):
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        img = _shift(canon[y], int(dy), int(dx)) * rng.uniform(0.7, 1.0)
        img = img + noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    # round-trip through 8-bit so saved and in-memory datasets are identical
    images = np.rint(images * 255.0) / 255.0
    return Dataset(images, labels, nc, name="synth_digits", class_names=GLYPH_CLASSES)


def split(ds: Dataset, fractions, seed) -> Dataset:
    """Stratified ``train/val/test`` split; ``fractions`` is a 3-tuple summing to at most 1."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or sum(fractions) > 1 + 1e-12:
        raise DatasetError(f"invalid split fractions {fractions}")
    rng = make_rng(seed, "split")
    parts = {"train": [], "val": [], "test": []}
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(len(idx))]
        counts = [int(np.floor(f * len(idx) + 1e-9)) for f in fractions]
        if abs(sum(fractions) - 1.0) < 1e-12:
            counts[0] = len(idx) - counts[1] - counts[2]
        for name, f, k in zip(("train", "val", "test"), fractions, counts):
            if f > 0 and k == 0:
                raise DatasetError(f"class {c} has no samples in required split {name!r}")
        start = 0
        for name, k in zip(("train", "val", "test"), counts):
            parts[name].append(idx[start:start + k])
            start += k
    splits = {k: np.sort(np.concatenate(v)).astype(np.int64) for k, v in parts.items()}
    return Dataset(ds.images, ds.labels, ds.num_classes, ds.name, splits, ds.class_names)
