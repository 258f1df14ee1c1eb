"""Dense 2D scalar fields and the forward-only grid kernels.

Fields are plain ``float64`` numpy arrays of shape ``(height, width)``.
Binary masks use the same layout with values in {0, 1}.  Every kernel
here is pure and returns a new array.

The linear kernels (bilinear upsampling, 2x2 average pooling, the Sobel
correlations) also expose their adjoints so the autodiff tape can reuse
them without a second implementation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateBox, OddShape, ShapeMismatch, TooSmall

SOBEL_EPS = 1e-12
NORMALIZE_EPS = 1e-12

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True)
class NormBox:
    """Axis-aligned box in fractions of the image extent."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite: {vals}")
        if not (0.0 <= self.x0 < self.x1 <= 1.0):
            raise ValueError(f"need 0 <= x0 < x1 <= 1, got x0={self.x0}, x1={self.x1}")
        if not (0.0 <= self.y0 < self.y1 <= 1.0):
            raise ValueError(f"need 0 <= y0 < y1 <= 1, got y0={self.y0}, y1={self.y1}")

    @classmethod
    def from_list(cls, xs) -> "NormBox":
        x0, y0, x1, y1 = (float(v) for v in xs)
        return cls(x0, y0, x1, y1)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


def as_field(values, *, name: str = "field") -> np.ndarray:
    f = np.asarray(values, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise ShapeMismatch(f"{name} must be a non-empty 2D array, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name} contains non-finite values")
    return f


def rasterize_box(box: NormBox, height: int, width: int) -> np.ndarray:
    """Mask of the pixels whose centers fall in ``[x0, x1) x [y0, y1)``."""
    if height < 1 or width < 1:
        raise ShapeMismatch(f"raster size must be positive, got {height}x{width}")
    cy = (np.arange(height) + 0.5) / height
    cx = (np.arange(width) + 0.5) / width
    rows = (cy >= box.y0) & (cy < box.y1)
    cols = (cx >= box.x0) & (cx < box.x1)
    mask = np.outer(rows, cols).astype(np.float64)
    if not mask.any():
        raise DegenerateBox(f"{box} covers no pixel center on a {height}x{width} grid")
    return mask


@lru_cache(maxsize=64)
def _bilinear_matrix_cached(n_in: int, n_out: int) -> np.ndarray:
    r = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        r[i, i0] += 1.0 - frac
        r[i, i1] += frac
    r.setflags(write=False)
    return r


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1D resampling matrix of shape (n_out, n_in), align-corners-false."""
    if n_in < 1 or n_out < n_in:
        raise ShapeMismatch(f"cannot upsample length {n_in} to {n_out}")
    return _bilinear_matrix_cached(n_in, n_out)


def bilinear_upsample(f: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    rh = bilinear_matrix(f.shape[0], out_h)
    rw = bilinear_matrix(f.shape[1], out_w)
    return rh @ f @ rw.T


def bilinear_upsample_adjoint(g: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    rh = bilinear_matrix(in_h, g.shape[0])
    rw = bilinear_matrix(in_w, g.shape[1])
    return rh.T @ g @ rw


def avg_pool2(f: np.ndarray) -> np.ndarray:
    """Mean over non-overlapping 2x2 blocks of the two leading axes.

    Trailing axes (e.g. a feature dimension) are carried through.
    """
    f = np.asarray(f, dtype=np.float64)
    h, w = f.shape[:2]
    if h % 2 or w % 2:
        raise OddShape(f"avg_pool2 needs even height and width, got {h}x{w}")
    return f.reshape(h // 2, 2, w // 2, 2, *f.shape[2:]).mean(axis=(1, 3))


def avg_pool2_adjoint(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25


def _replicate_index(n: int) -> np.ndarray:
    return np.clip(np.arange(-1, n + 1), 0, n - 1)


def correlate3_replicate(f: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation with edge-clamped padding; output has f's shape."""
    h, w = f.shape
    p = f[np.ix_(_replicate_index(h), _replicate_index(w))]
    # positive and negative taps summed apart, so a zero-sum kernel maps a
    # constant field to exactly 0
    pos = np.zeros((h, w))
    neg = np.zeros((h, w))
    for a in range(3):
        for b in range(3):
            k = kernel[a, b]
            if k > 0:
                pos += k * p[a:a + h, b:b + w]
            elif k < 0:
                neg += -k * p[a:a + h, b:b + w]
    return pos - neg


def correlate3_replicate_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = g.shape
    gp = np.zeros((h + 2, w + 2))
    for a in range(3):
        for b in range(3):
            if kernel[a, b] != 0.0:
                gp[a:a + h, b:b + w] += kernel[a, b] * g
    out = np.zeros((h, w))
    np.add.at(out, (_replicate_index(h)[:, None], _replicate_index(w)[None, :]), gp)
    return out


def sobel_gradients(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] < 3 or f.shape[1] < 3:
        raise TooSmall(f"Sobel needs at least 3x3, got {f.shape[0]}x{f.shape[1]}")
    return correlate3_replicate(f, SOBEL_X), correlate3_replicate(f, SOBEL_Y)


def sobel_edges(f: np.ndarray) -> np.ndarray:
    """Smoothed gradient magnitude ``sqrt(gx^2 + gy^2 + SOBEL_EPS)``."""
    gx, gy = sobel_gradients(f)
    return np.sqrt(gx * gx + gy * gy + SOBEL_EPS)


def minmax_normalize(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    lo, hi = float(f.min()), float(f.max())
    if hi - lo < NORMALIZE_EPS:
        return np.zeros_like(f)
    return (f - lo) / (hi - lo)


def masked_mean(f: np.ndarray, m: np.ndarray) -> float:
    """Mean of ``f`` over the mask; an empty mask gives 0."""
    f = np.asarray(f, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if f.shape != m.shape:
        raise ShapeMismatch(f"field {f.shape} vs mask {m.shape}")
    total = m.sum()
    if total == 0:
        return 0.0
    return float((f * m).sum() / total)
