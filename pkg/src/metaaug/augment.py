"""The 14-function augmentation catalog, two-function transforms and their embedding.

Images are ``(H, W, C)`` float64 arrays in ``[0, 1]``. Function indices are
1-based and fixed; they appear in logs and checkpoints.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from metaaug import kernels

K = 14
EMBED_DIM = 2 * K
MAGNITUDE_FREE_CODE = 11.0

FUNCTION_NAMES = (
    "AutoContrast",
    "Equalize",
    "Rotate",
    "Posterize",
    "Solarize",
    "Color",
    "Contrast",
    "Brightness",
    "Sharpness",
    "ShearX",
    "ShearY",
    "TranslateX",
    "TranslateY",
    "Identity",
)
INDEX = {name: i + 1 for i, name in enumerate(FUNCTION_NAMES)}

MAGNITUDE_FREE = frozenset({"AutoContrast", "Equalize", "Identity"})
SIGNED = frozenset({
    "Rotate", "Color", "Contrast", "Brightness", "Sharpness",
    "ShearX", "ShearY", "TranslateX", "TranslateY",
})


@dataclass(frozen=True)
class Ranges:
    """Parameter values reached at magnitude 10."""

    rotate_deg: float = 30.0
    shear: float = 0.3
    translate_frac: float = 0.45
    enhance: float = 0.9


@dataclass(frozen=True)
class FunctionInfo:
    index: int
    name: str
    uses_magnitude: bool
    signed: bool


@dataclass(frozen=True)
class Catalog:
    ranges: Ranges = Ranges()

    @property
    def functions(self):
        return tuple(
            FunctionInfo(i + 1, n, n not in MAGNITUDE_FREE, n in SIGNED)
            for i, n in enumerate(FUNCTION_NAMES)
        )

    def param(self, index, magnitude, size=(1, 1)):
        """Map a magnitude in [0, 10] to the unsigned function parameter."""
        name = _name(index)
        m = float(magnitude) / 10.0
        r = self.ranges
        if name == "Rotate":
            return m * r.rotate_deg
        if name in ("ShearX", "ShearY"):
            return m * r.shear
        if name == "TranslateX":
            return m * r.translate_frac * size[1]
        if name == "TranslateY":
            return m * r.translate_frac * size[0]
        if name == "Posterize":
            return max(4, 8 - int(round(magnitude * 4 / 10)))
        if name == "Solarize":
            return 1.0 - m
        if name in ("Color", "Contrast", "Brightness", "Sharpness"):
            return m * r.enhance
        return None

    def hash(self) -> str:
        blob = json.dumps({"names": FUNCTION_NAMES, "ranges": asdict(self.ranges)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


DEFAULT_CATALOG = Catalog()


def _name(index):
    if not isinstance(index, (int, np.integer)) or not 1 <= index <= K:
        raise ValueError(f"function index {index!r} outside [1, {K}]")
    return FUNCTION_NAMES[index - 1]


@dataclass(frozen=True)
class TransformSpec:
    """Apply function ``j`` with magnitude ``m1``, then function ``k`` with ``m2``."""

    j: int
    k: int
    m1: float
    m2: float

    def __post_init__(self):
        _name(self.j)
        _name(self.k)
        for m in (self.m1, self.m2):
            if not 0.0 <= m <= 10.0:
                raise ValueError(f"magnitude {m} outside [0, 10]")

    def __str__(self):
        return f"{FUNCTION_NAMES[self.j - 1]}({self.m1:.2f})->{FUNCTION_NAMES[self.k - 1]}({self.m2:.2f})"


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise ValueError("pixels must be (H, W, C)")

    @property
    def shape(self):
        return self.pixels.shape

    def transformed(self, spec, rng=None, catalog=DEFAULT_CATALOG):
        return ImageSample(apply_transform(self.pixels, spec, rng, catalog=catalog), self.label)


def _gray(img):
    if img.shape[2] == 3:
        g = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
        return g[..., None]
    return img.mean(axis=2, keepdims=True)


def _levels(img):
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.int64)


def _center(img):
    h, w = img.shape[:2]
    return ((w - 1) / 2.0, (h - 1) / 2.0)


def _warp(img, inv):
    return kernels.warp_affine(np.ascontiguousarray(img), np.asarray(inv, dtype=np.float64), _center(img))


def _autocontrast(img):
    q = _levels(img)
    out = img.copy()
    for ch in range(img.shape[2]):
        lo, hi = q[..., ch].min(), q[..., ch].max()
        if hi > lo:
            out[..., ch] = (q[..., ch] - lo) / float(hi - lo)
    return out


def _rotate(img, deg):
    # content rotates counter-clockwise on screen; source = R(deg) applied to output offsets
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    return _warp(img, [[c, -s, 0.0], [s, c, 0.0]])


def apply_function(img, index, magnitude, rng=None, sign=None, catalog=DEFAULT_CATALOG):
    """Apply catalog function ``index`` (1-based) at ``magnitude``.

    Signed functions use ``sign`` when given, else draw it from ``rng``, else +1.
    """
    name = _name(index)
    if not 0.0 <= magnitude <= 10.0:
        raise ValueError(f"magnitude {magnitude} outside [0, 10]")
    img = np.asarray(img, dtype=np.float64)
    if name == "Identity":
        return img.copy()
    if name in SIGNED:
        if sign is None:
            sign = 1.0 if rng is None else (1.0 if rng.random() < 0.5 else -1.0)
        sign = float(np.sign(sign)) or 1.0
    p = catalog.param(index, magnitude, img.shape[:2])

    if name == "AutoContrast":
        out = _autocontrast(img)
    elif name == "Equalize":
        out = kernels.equalize(_levels(img)) / 255.0
    elif name == "Rotate":
        out = _rotate(img, sign * p)
    elif name == "Posterize":
        shift = 8 - p
        out = ((_levels(img) >> shift) << shift) / 255.0
    elif name == "Solarize":
        out = np.where(img > p, 1.0 - img, img)
    elif name in ("Color", "Contrast", "Brightness", "Sharpness"):
        f = 1.0 + sign * p
        if name == "Color":
            base = np.broadcast_to(_gray(img), img.shape)
        elif name == "Contrast":
            base = np.full_like(img, _gray(img).mean())
        elif name == "Brightness":
            base = np.zeros_like(img)
        else:
            base = kernels.smooth3x3(np.ascontiguousarray(img))
        out = base + f * (img - base)
    elif name == "ShearX":
        out = _warp(img, [[1.0, -sign * p, 0.0], [0.0, 1.0, 0.0]])
    elif name == "ShearY":
        out = _warp(img, [[1.0, 0.0, 0.0], [-sign * p, 1.0, 0.0]])
    elif name == "TranslateX":
        out = _warp(img, [[1.0, 0.0, -sign * p], [0.0, 1.0, 0.0]])
    else:  # TranslateY
        out = _warp(img, [[1.0, 0.0, 0.0], [0.0, 1.0, -sign * p]])
    return np.clip(out, 0.0, 1.0)


def apply_transform(img, spec: TransformSpec, rng=None, signs=(None, None), catalog=DEFAULT_CATALOG):
    out = apply_function(img, spec.j, spec.m1, rng, signs[0], catalog)
    return apply_function(out, spec.k, spec.m2, rng, signs[1], catalog)


def augment_batch(images, specs, rng, catalog=DEFAULT_CATALOG):
    """Transform each ``(H, W, C)`` image in ``images`` with the matching spec."""
    return np.stack([apply_transform(x, s, rng, catalog=catalog) for x, s in zip(images, specs)])


def embed(spec: TransformSpec) -> np.ndarray:
    """28-dim code: slot ``2j-1`` holds ``m1+1``, slot ``2k`` holds ``m2+1`` (1-based slots).

    Magnitude-free functions put 11 in their slot.
    """
    e = np.zeros(EMBED_DIM)
    e[2 * spec.j - 2] = MAGNITUDE_FREE_CODE if FUNCTION_NAMES[spec.j - 1] in MAGNITUDE_FREE else spec.m1 + 1.0
    e[2 * spec.k - 1] = MAGNITUDE_FREE_CODE if FUNCTION_NAMES[spec.k - 1] in MAGNITUDE_FREE else spec.m2 + 1.0
    return e


def embed_batch(specs) -> np.ndarray:
    return np.stack([embed(s) for s in specs]) if specs else np.zeros((0, EMBED_DIM))
