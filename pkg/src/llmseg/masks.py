"""Coarse-map geometry and label-map I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE_INDEX = 255


@dataclass
class LabelMap:
    labels: np.ndarray
    class_names: list = field(default_factory=list)
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2 or 0 in self.labels.shape:
            raise ValueError(f"label map must be a non-empty 2-D array, got {self.labels.shape}")

    @property
    def shape(self):
        return self.labels.shape


def reshape_to_grid(a, grid) -> np.ndarray:
    a = np.asarray(a)
    h, w = int(grid[0]), int(grid[1])
    if a.ndim != 1 or h * w != a.shape[0]:
        raise ValueError(f"cannot reshape {a.shape[0]} patch scores to grid {h}x{w}")
    return a.reshape(h, w)


def flatten_grid(g) -> np.ndarray:
    return np.asarray(g).reshape(-1)


def _interp_axis(n_in: int, n_out: int):
    # pixel-centre alignment: src = (dst + 0.5) * n_in / n_out - 0.5, clamped at the borders
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def upsample_bilinear(grid, out) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    H, W = int(out[0]), int(out[1])
    if H <= 0 or W <= 0:
        raise ValueError(f"target size must be positive, got {out}")
    if g.ndim != 2:
        raise ValueError("grid must be 2-D")
    y0, y1, fy = _interp_axis(g.shape[0], H)
    x0, x1, fx = _interp_axis(g.shape[1], W)
    rows = g[y0] * (1 - fy)[:, None] + g[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx)[None, :] + rows[:, x1] * fx[None, :]


def normalize_minmax(m) -> np.ndarray:
    """Scale to [0, 1]; a constant map becomes 0.5 everywhere."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full_like(m, 0.5)
    return (m - lo) / (hi - lo)


def assemble_labelmap(per_class_scores, tau: float = 0.5, class_names=None) -> LabelMap:
    """Argmax over classes where the winning score reaches ``tau``; background (0) elsewhere.

    Foreground classes are numbered 1..L in the order of ``per_class_scores``.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    s = np.asarray(per_class_scores, dtype=np.float64)
    if s.ndim != 3 or s.shape[0] < 1:
        raise ValueError(f"scores must be [L, H, W], got {s.shape}")
    best = s.argmax(axis=0)
    top = np.take_along_axis(s, best[None], axis=0)[0]
    labels = np.where(top >= tau, best + 1, 0).astype(np.uint8)
    return LabelMap(labels, list(class_names or []))


def resize_labels_nearest(labels: LabelMap, out) -> LabelMap:
    H, W = int(out[0]), int(out[1])
    if H <= 0 or W <= 0:
        raise ValueError(f"target size must be positive, got {out}")
    src = labels.labels
    ys = np.minimum(((np.arange(H) + 0.5) * src.shape[0] / H).astype(np.int64), src.shape[0] - 1)
    xs = np.minimum(((np.arange(W) + 0.5) * src.shape[1] / W).astype(np.int64), src.shape[1] - 1)
    return LabelMap(src[ys[:, None], xs[None, :]], labels.class_names, labels.ignore_index)


def voc_palette() -> list[int]:
    """Standard PASCAL VOC colour map, 256 entries flattened to RGB triplets."""
    pal = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal.extend((r, g, b))
    return pal


_PALETTE = voc_palette()


def save_labelmap(path, labels: LabelMap) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(labels.labels, mode="P")
    img.putpalette(_PALETTE)
    img.save(path, format="PNG")


def load_labelmap(path) -> LabelMap:
    """Read an 8-bit indexed (or grayscale) PNG as raw class indices."""
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise ValueError(f"{path}: expected an indexed or 8-bit grayscale PNG, got mode {img.mode}")
    return LabelMap(np.array(img, dtype=np.uint8))


def save_overlay(path, rgb, labels: LabelMap, alpha: float = 0.5) -> None:
    rgb = np.asarray(rgb, dtype=np.float64)
    pal = np.asarray(_PALETTE, dtype=np.float64).reshape(256, 3)
    colors = pal[labels.labels]
    fg = (labels.labels != 0) & (labels.labels != labels.ignore_index)
    out = np.where(fg[..., None], (1 - alpha) * rgb + alpha * colors, rgb)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(out).astype(np.uint8), "RGB").save(path, format="PNG")


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("RGB"), dtype=np.uint8)


def resize_rgb(rgb, size) -> np.ndarray:
    """Bilinear resize to ``size = (H, W)``."""
    H, W = int(size[0]), int(size[1])
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.shape[:2] == (H, W):
        return rgb.copy()
    return np.array(Image.fromarray(rgb, "RGB").resize((W, H), Image.BILINEAR), dtype=np.uint8)
