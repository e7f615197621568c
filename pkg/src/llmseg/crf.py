"""Fully connected CRF refinement with Gaussian and bilateral pairwise kernels.

Mean-field inference with Potts compatibility. Two kernel evaluators share
one contract:

``exact``
    every pair inside a square window ``|dx|, |dy| <= ceil(truncate * sxy)``
    (self excluded). Cost grows with the window, fine for small images or
    narrow kernels.
``grid``
    the Gaussian kernel stays exact (separable), the bilateral kernel is
    approximated on a downsampled 5-D bilateral grid (splat, blur, slice).

``auto`` uses ``exact`` when its pair count is small and ``grid`` otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from llmseg.masks import LabelMap

EXACT_WORK_LIMIT = 2e7


@dataclass
class CrfParams:
    iterations: int = 3
    gauss_sxy: float = 3.0
    gauss_weight: float = 3.0
    bilat_sxy: float = 80.0
    bilat_srgb: float = 13.0
    bilat_weight: float = 10.0
    truncate: float = 3.0
    kernel: str = "auto"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if min(self.gauss_sxy, self.bilat_sxy, self.bilat_srgb, self.truncate) <= 0:
            raise ValueError("bandwidths and truncate must be > 0")
        if min(self.gauss_weight, self.bilat_weight) < 0:
            raise ValueError("kernel weights must be >= 0")
        if self.kernel not in ("auto", "exact", "grid"):
            raise ValueError(f"unknown kernel evaluator {self.kernel!r}")

    def radius(self, sxy: float) -> int:
        return int(math.ceil(self.truncate * sxy))


@dataclass
class UnaryField:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] < 1:
            raise ValueError(f"unary must be [L, H, W], got {p.shape}")
        if (p < 0).any() or not np.allclose(p.sum(axis=0), 1.0, atol=1e-5):
            raise ValueError("unary probabilities must be nonnegative and sum to 1 per pixel")
        self.probs = p


def _softmax0(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=0, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=0, keepdims=True)


def to_unary(score_maps, background_mode: str = "constant", background_score: float = 0.5) -> UnaryField:
    """Prepend a background channel and softmax over channels (temperature 1).

    ``constant`` uses ``background_score`` everywhere; ``complement`` uses
    ``1 - max`` of the class scores at each pixel.
    """
    s = np.asarray(score_maps, dtype=np.float64)
    if s.ndim != 3:
        raise ValueError(f"score maps must be [L, H, W], got {s.shape}")
    if not np.isfinite(s).all():
        raise ValueError("score maps contain non-finite values")
    if s.min() < 0.0 or s.max() > 1.0:
        raise ValueError("score maps must be normalized to [0, 1]")
    if background_mode == "constant":
        bg = np.full(s.shape[1:], float(background_score))
    elif background_mode == "complement":
        bg = 1.0 - s.max(axis=0)
    else:
        raise ValueError(f"unknown background_mode {background_mode!r}")
    return UnaryField(_softmax0(np.concatenate([bg[None], s], axis=0)))


def _gauss_taps(sigma: float, radius: int) -> np.ndarray:
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-(t * t) / (2.0 * sigma * sigma))


def _gaussian_message(Q: np.ndarray, sxy: float, radius: int) -> np.ndarray:
    taps = _gauss_taps(sxy, radius)
    out = correlate1d(Q, taps, axis=1, mode="constant")
    out = correlate1d(out, taps, axis=2, mode="constant")
    return out - Q


def _bilateral_exact(Q: np.ndarray, img: np.ndarray, sxy: float, srgb: float, radius: int) -> np.ndarray:
    _, H, W = Q.shape
    ry, rx = min(radius, H - 1), min(radius, W - 1)
    out = np.zeros_like(Q)
    for dy in range(-ry, ry + 1):
        ys_dst = slice(max(0, -dy), H - max(0, dy))
        ys_src = slice(max(0, dy), H - max(0, -dy))
        for dx in range(-rx, rx + 1):
            if dy == 0 and dx == 0:
                continue
            xs_dst = slice(max(0, -dx), W - max(0, dx))
            xs_src = slice(max(0, dx), W - max(0, -dx))
            diff = img[ys_dst, xs_dst] - img[ys_src, xs_src]
            w = np.exp(-(dy * dy + dx * dx) / (2.0 * sxy * sxy) - (diff * diff).sum(-1) / (2.0 * srgb * srgb))
            out[:, ys_dst, xs_dst] += w[None] * Q[:, ys_src, xs_src]
    return out


class _BilateralGrid:
    """Splat/blur/slice approximation of the bilateral kernel (one cell per bandwidth)."""

    PAD = 2

    def __init__(self, img: np.ndarray, sxy: float, srgb: float):
        H, W, _ = img.shape
        yy, xx = np.mgrid[0:H, 0:W]
        # spatial axes are centred so a mirrored image maps lattice points onto lattice points
        feats = [(yy.ravel() - (H - 1) / 2) / sxy, (xx.ravel() - (W - 1) / 2) / sxy]
        for c in range(3):
            ch = img[..., c].ravel()
            feats.append((ch - ch.min()) / srgb)
        feats = np.stack(feats, axis=1)
        for k in (0, 1):
            feats[:, k] += math.ceil(-feats[:, k].min())
        feats += self.PAD
        self.shape = tuple(int(np.floor(feats[:, k].max())) + 2 + self.PAD for k in range(5))
        base = np.floor(feats).astype(np.int64)
        frac = feats - base
        strides = np.cumprod((1,) + self.shape[:0:-1])[::-1]
        self.size = int(np.prod(self.shape))
        self.idx, self.w = [], []
        for corner in range(32):
            bits = [(corner >> k) & 1 for k in range(5)]
            idx = np.zeros(base.shape[0], dtype=np.int64)
            w = np.ones(base.shape[0])
            for k, b in enumerate(bits):
                idx += (base[:, k] + b) * strides[k]
                w *= frac[:, k] if b else 1.0 - frac[:, k]
            self.idx.append(idx)
            self.w.append(w)
        # splat + slice tents each add variance 1/6 per axis; the blur supplies the rest. Taps sum to
        # sqrt(2 pi), the integral of the unit kernel, which is right for spread-out colour distributions
        # and over-weights images made of a few perfectly flat colours.
        sb = math.sqrt(1.0 - 2.0 / 6.0)
        taps = _gauss_taps(sb, self.PAD)
        self.taps = taps * (math.sqrt(2.0 * math.pi) / taps.sum())

    def filter(self, Q: np.ndarray) -> np.ndarray:
        L = Q.shape[0]
        flat = Q.reshape(L, -1)
        out = np.empty_like(flat)
        for ch in range(L):
            g = np.zeros(self.size)
            for idx, w in zip(self.idx, self.w):
                g += np.bincount(idx, weights=w * flat[ch], minlength=self.size)
            g = g.reshape(self.shape)
            for ax in range(5):
                g = correlate1d(g, self.taps, axis=ax, mode="constant")
            g = g.ravel()
            out[ch] = sum(w * g[idx] for idx, w in zip(self.idx, self.w))
        return out.reshape(Q.shape) - Q


def _choose_kernel(params: CrfParams, H: int, W: int) -> str:
    if params.kernel != "auto":
        return params.kernel
    r = params.radius(params.bilat_sxy)
    work = (2 * min(r, H - 1) + 1) * (2 * min(r, W - 1) + 1) * H * W
    return "exact" if work <= EXACT_WORK_LIMIT else "grid"


def mean_field(unary: UnaryField, image_rgb, params: CrfParams | None = None, return_history: bool = False):
    """Run mean-field inference; returns ``(marginals [L,H,W], LabelMap)``.

    With ``return_history`` a third element lists the marginals after every
    iteration. Labels are the per-pixel argmax of the final marginals.
    """
    params = params or CrfParams()
    if not isinstance(unary, UnaryField):
        unary = UnaryField(unary)
    U = unary.probs
    L, H, W = U.shape
    if L < 1:
        raise ValueError("need at least one label")
    img = np.asarray(image_rgb, dtype=np.float64)
    if img.shape != (H, W, 3):
        raise ValueError(f"image shape {img.shape} does not match unary {(H, W)}")

    with np.errstate(divide="ignore"):
        log_u = np.log(U)
    Q = U.copy()
    history = []
    kernel = _choose_kernel(params, H, W)
    grid = None
    if params.iterations and params.bilat_weight > 0 and kernel == "grid":
        grid = _BilateralGrid(img, params.bilat_sxy, params.bilat_srgb)

    for _ in range(params.iterations):
        msg = np.zeros_like(Q)
        if params.gauss_weight > 0:
            msg += params.gauss_weight * _gaussian_message(Q, params.gauss_sxy, params.radius(params.gauss_sxy))
        if params.bilat_weight > 0:
            if grid is not None:
                msg += params.bilat_weight * grid.filter(Q)
            else:
                msg += params.bilat_weight * _bilateral_exact(
                    Q, img, params.bilat_sxy, params.bilat_srgb, params.radius(params.bilat_sxy)
                )
        # Potts: penalty for label l is the message mass of every other label
        pairwise = msg.sum(axis=0, keepdims=True) - msg
        Q = _softmax0(log_u - pairwise)
        if return_history:
            history.append(Q.copy())

    labels = LabelMap(Q.argmax(axis=0).astype(np.uint8))
    if return_history:
        return Q, labels, history
    return Q, labels
