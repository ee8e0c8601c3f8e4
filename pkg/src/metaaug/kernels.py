"""Image kernels used by the augmentation catalog.

Each kernel has a numba ``@njit`` version and a pure-numpy version. The
public names (``warp_affine``, ``smooth3x3``, ``equalize``) point at the
numba path unless ``METAAUG_NUMBA=0`` is set in the environment or numba is
not importable. Both paths are deterministic; they agree to float rounding.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _numba_requested():
    return os.environ.get("METAAUG_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = numba is not None and _numba_requested()


# --------------------------------------------------------------------------
# numpy implementations


def warp_affine_numpy(img, inv, center):
    """Bilinear inverse warp with zero padding.

    ``img`` is ``(H, W, C)`` and ``inv`` a 2x3 matrix. For output pixel
    ``(y, x)`` the source location is
    ``inv[:, :2] @ (x - cx, y - cy) + (cx, cy) + inv[:, 2]``.
    """
    h, w, c = img.shape
    cx, cy = center
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xs - cx
    dy = ys - cy
    sx = inv[0, 0] * dx + inv[0, 1] * dy + cx + inv[0, 2]
    sy = inv[1, 0] * dx + inv[1, 1] * dy + cy + inv[1, 2]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros_like(img)
    for oy, ox, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        yy = y0 + oy
        xx = x0 + ox
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.zeros_like(img)
        vals[valid] = img[yy[valid], xx[valid]]
        out += wgt[..., None] * vals
    return out


def smooth3x3_numpy(img):
    """PIL-style SMOOTH filter (centre weight 5, neighbours 1, /13); border pixels kept."""
    h, w, _ = img.shape
    out = img.copy()
    if h < 3 or w < 3:
        return out
    acc = np.zeros_like(img[1:-1, 1:-1])
    for dy in range(3):
        for dx in range(3):
            acc += img[dy:dy + h - 2, dx:dx + w - 2]
    acc += 4.0 * img[1:-1, 1:-1]
    out[1:-1, 1:-1] = acc / 13.0
    return out


def equalize_numpy(q):
    """Per-channel histogram equalization on 8-bit levels ``q`` of shape ``(H, W, C)``.

    Level ``i`` maps to ``round(255 * (cdf[i] - cdf_min) / (N - cdf_min))``,
    in exact integer arithmetic. A single-level channel is left unchanged.
    """
    out = q.copy()
    n = q.shape[0] * q.shape[1]
    for ch in range(q.shape[2]):
        cdf = np.cumsum(np.bincount(q[..., ch].ravel(), minlength=256))
        cmin = cdf[np.flatnonzero(cdf)[0]]
        span = n - cmin
        if span == 0:
            continue
        lut = np.clip((2 * 255 * (cdf - cmin) + span) // (2 * span), 0, 255)
        out[..., ch] = lut[q[..., ch]]
    return out


# --------------------------------------------------------------------------
# numba implementations

if numba is not None:

    @numba.njit(cache=True)
    def warp_affine_numba(img, inv, center):
        h, w, c = img.shape
        cx = center[0]
        cy = center[1]
        out = np.zeros_like(img)
        for y in range(h):
            for x in range(w):
                dx = x - cx
                dy = y - cy
                sx = inv[0, 0] * dx + inv[0, 1] * dy + cx + inv[0, 2]
                sy = inv[1, 0] * dx + inv[1, 1] * dy + cy + inv[1, 2]
                x0f = np.floor(sx)
                y0f = np.floor(sy)
                fx = sx - x0f
                fy = sy - y0f
                x0 = int(x0f)
                y0 = int(y0f)
                for oy in range(2):
                    yy = y0 + oy
                    if yy < 0 or yy >= h:
                        continue
                    wy = fy if oy == 1 else 1.0 - fy
                    for ox in range(2):
                        xx = x0 + ox
                        if xx < 0 or xx >= w:
                            continue
                        wx = fx if ox == 1 else 1.0 - fx
                        wgt = wx * wy
                        for ch in range(c):
                            out[y, x, ch] += wgt * img[yy, xx, ch]
        return out

    @numba.njit(cache=True)
    def smooth3x3_numba(img):
        h, w, c = img.shape
        out = img.copy()
        if h < 3 or w < 3:
            return out
        for y in range(1, h - 1):
            for x in range(1, w - 1):
                for ch in range(c):
                    acc = 4.0 * img[y, x, ch]
                    for dy in range(-1, 2):
                        for dx in range(-1, 2):
                            acc += img[y + dy, x + dx, ch]
                    out[y, x, ch] = acc / 13.0
        return out

    @numba.njit(cache=True)
    def equalize_numba(q):
        h, w, c = q.shape
        n = h * w
        out = q.copy()
        cdf = np.zeros(256, dtype=np.int64)
        for ch in range(c):
            cdf[:] = 0
            for y in range(h):
                for x in range(w):
                    cdf[q[y, x, ch]] += 1
            cmin = 0
            run = 0
            for i in range(256):
                run += cdf[i]
                cdf[i] = run
                if cmin == 0 and run > 0:
                    cmin = run
            span = n - cmin
            if span == 0:
                continue
            for y in range(h):
                for x in range(w):
                    v = (2 * 255 * (cdf[q[y, x, ch]] - cmin) + span) // (2 * span)
                    out[y, x, ch] = min(max(v, 0), 255)
        return out

else:  # pragma: no cover
    warp_affine_numba = smooth3x3_numba = equalize_numba = None


if USE_NUMBA:
    warp_affine = warp_affine_numba
    smooth3x3 = smooth3x3_numba
    equalize = equalize_numba
else:
    warp_affine = warp_affine_numpy
    smooth3x3 = smooth3x3_numpy
    equalize = equalize_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
