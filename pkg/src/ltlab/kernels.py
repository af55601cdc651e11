"""Image-resampling kernels with a numba fast path.

Bilinear resizing runs once per crop per sample per epoch, which makes it
the hottest non-BLAS loop in the lab. The numba path and the pure-numpy
path evaluate the exact same per-pixel expression in the same order, so
their outputs are bitwise identical; `LTLAB_KERNELS=numpy` forces the
fallback (e.g. on machines without a working numba).

`benchmarks/bench_kernels.py` times both paths.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["bilinear_resize", "active_backend", "resize_numpy", "resize_numba"]

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via LTLAB_KERNELS=numpy
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _source_grid(n_in: int, n_out: int):
    """Half-pixel-centered source coordinates, clamped to the input range."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_numpy(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (h, w, c) image, vectorized numpy path."""
    h, w, _ = img.shape
    y0, y1, fy = _source_grid(h, out_h)
    x0, x1, fx = _source_grid(w, out_w)
    fy = fy.astype(img.dtype)[:, None, None]
    fx = fx.astype(img.dtype)[None, :, None]
    p00 = img[y0[:, None], x0[None, :]]
    p01 = img[y0[:, None], x1[None, :]]
    p10 = img[y1[:, None], x0[None, :]]
    p11 = img[y1[:, None], x1[None, :]]
    one = img.dtype.type(1.0)
    return (one - fy) * ((one - fx) * p00 + fx * p01) + fy * ((one - fx) * p10 + fx * p11)


@njit(cache=True)
def _resize_loop(img, out, y0, y1, fy, x0, x1, fx):  # pragma: no cover - jitted
    out_h, out_w, channels = out.shape
    for i in range(out_h):
        wy = fy[i]
        for j in range(out_w):
            wx = fx[j]
            for c in range(channels):
                p00 = img[y0[i], x0[j], c]
                p01 = img[y0[i], x1[j], c]
                p10 = img[y1[i], x0[j], c]
                p11 = img[y1[i], x1[j], c]
                out[i, j, c] = (1.0 - wy) * ((1.0 - wx) * p00 + wx * p01) + wy * (
                    (1.0 - wx) * p10 + wx * p11
                )


def resize_numba(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (h, w, c) image, numba scalar-loop path."""
    h, w, channels = img.shape
    y0, y1, fy = _source_grid(h, out_h)
    x0, x1, fx = _source_grid(w, out_w)
    out = np.empty((out_h, out_w, channels), dtype=img.dtype)
    _resize_loop(
        np.ascontiguousarray(img),
        out,
        y0,
        y1,
        fy.astype(img.dtype),
        x0,
        x1,
        fx.astype(img.dtype),
    )
    return out


def _pick_backend() -> str:
    choice = os.environ.get("LTLAB_KERNELS", "").strip().lower()
    if choice in ("numpy", "numba"):
        if choice == "numba" and not _HAVE_NUMBA:
            raise RuntimeError("LTLAB_KERNELS=numba requested but numba is not importable")
        return choice
    return "numba" if _HAVE_NUMBA else "numpy"


_BACKEND = _pick_backend()


def active_backend() -> str:
    return _BACKEND


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (h, w, c) image to (out_h, out_w, c) with bilinear sampling.

    Sampling uses half-pixel centers with edge clamping; aspect ratio is
    whatever the target shape implies. No-op shapes return a copy.
    """
    if img.ndim != 3:
        raise ValueError(f"expected an (h, w, c) image, got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    if img.shape[0] == out_h and img.shape[1] == out_w:
        return img.copy()
    if _BACKEND == "numba":
        return resize_numba(img, out_h, out_w)
    return resize_numpy(img, out_h, out_w)
