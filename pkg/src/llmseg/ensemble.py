"""Descriptor selection, patch attention and subclass-descriptor ensembling.

All functions are pure and operate on numpy arrays:

* image features ``[m_i, d]`` (one row per patch),
* token features ``[n, m_t, d]``,
* descriptors ``[n, d]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METHODS = ("paper", "average", "cross_attention", "max_similarity")
ALT_METHODS = METHODS[1:]


class DegenerateDescriptor(ValueError):
    """A descriptor row collapsed to zero and cannot be normalized."""


@dataclass
class DescriptorMatrix:
    values: np.ndarray
    descriptor_names: list
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"descriptor matrix must be [n, d], got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("descriptor matrix contains non-finite values")
        if len(self.descriptor_names) != self.values.shape[0]:
            raise ValueError("descriptor_names length does not match n")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class FusionTrace:
    i_pool: np.ndarray
    relation: np.ndarray
    row_max: np.ndarray
    weights: np.ndarray
    fused: np.ndarray


@dataclass
class EnsembleConfig:
    lambda_super: float = 0.2
    method: str = "paper"
    normalize_features: bool = True
    top_k_image: int = 5

    def __post_init__(self):
        if not 0.0 <= self.lambda_super <= 1.0:
            raise ValueError(f"lambda_super must lie in [0, 1], got {self.lambda_super}")
        if self.method not in METHODS:
            raise ValueError(f"unknown ensemble method {self.method!r}")
        if self.top_k_image < 1:
            raise ValueError("top_k_image must be >= 1")


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, DescriptorMatrix) else np.asarray(x)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise DegenerateDescriptor("zero-norm row cannot be L2-normalized")
    return x / norms


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def _check_d(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def baseline_similarity(image_feats, text_tokens) -> np.ndarray:
    """Mean over text tokens of the token/patch dot product, one score per patch."""
    img = np.asarray(image_feats, dtype=np.float64)
    tok = np.asarray(text_tokens, dtype=np.float64)
    _check_d(img, tok)
    if tok.shape[0] == 0:
        raise ValueError("text_tokens has no rows")
    return (img @ tok.T).mean(axis=1)


def select_text_features(text_tokens, valid_tokens=None, names=None) -> DescriptorMatrix:
    """Per-channel maximum response over the token axis.

    Equivalent to sorting each channel in descending order along the tokens
    and keeping the first row. ``valid_tokens`` masks trailing padding rows.
    """
    if hasattr(text_tokens, "valid_tokens"):
        names = names or text_tokens.descriptor_names
        valid_tokens = text_tokens.valid_tokens if valid_tokens is None else valid_tokens
        text_tokens = text_tokens.values
    tok = np.asarray(text_tokens, dtype=np.float64)
    if tok.ndim != 3 or tok.shape[1] == 0:
        raise ValueError(f"text tokens must be [n, m_t>=1, d], got {tok.shape}")
    if valid_tokens is not None:
        valid = np.arange(tok.shape[1])[None, :] < np.asarray(valid_tokens)[:, None]
        if not valid.any(axis=1).all():
            raise ValueError("a descriptor has no valid tokens")
        tok = np.where(valid[:, :, None], tok, -np.inf)
    out = tok.max(axis=1)
    return DescriptorMatrix(out, list(names) if names is not None else [str(i) for i in range(len(out))])


def attention_map(image_feats, descriptors, normalize: bool = False) -> np.ndarray:
    """Dot product of every descriptor with every patch: ``[n, m_i]``."""
    img = np.asarray(image_feats, dtype=np.float64)
    desc = np.asarray(_values(descriptors), dtype=np.float64)
    _check_d(img, desc)
    if normalize:
        img, desc = l2_normalize(img), l2_normalize(desc)
    return desc @ img.T


def select_image_features(image_feats, k: int) -> np.ndarray:
    """Per channel, the ``k`` largest patch responses in descending order: ``[k, d]``."""
    img = np.asarray(image_feats, dtype=np.float64)
    if not 1 <= k <= img.shape[0]:
        raise ValueError(f"k must satisfy 1 <= k <= m_i={img.shape[0]}, got {k}")
    order = np.argsort(-img, axis=0, kind="stable")[:k]
    return np.take_along_axis(img, order, axis=0)


def fuse_descriptors(image_feats, descriptors, k: int = 5) -> FusionTrace:
    desc = np.asarray(_values(descriptors), dtype=np.float64)
    if desc.ndim != 2 or desc.shape[0] == 0:
        raise ValueError("need at least one descriptor")
    img = np.asarray(image_feats, dtype=np.float64)
    _check_d(img, desc)
    i_pool = select_image_features(img, k).mean(axis=0)
    return fuse_with_pool(i_pool, desc)


def fuse_with_pool(i_pool, descriptors) -> FusionTrace:
    desc = np.asarray(_values(descriptors), dtype=np.float64)
    relation = desc * i_pool[None, :]
    row_max = relation.max(axis=1)
    weights = softmax(row_max)
    return FusionTrace(i_pool, relation, row_max, weights, weights @ desc)


def ensemble_attention(image_feats, fused, normalize: bool = False) -> np.ndarray:
    return attention_map(image_feats, np.asarray(fused, dtype=np.float64)[None, :], normalize)[0]


def mix_superclass(a_super, a_sub, lam: float) -> np.ndarray:
    """Convex mix of (already min-max normalized) superclass and subclass maps."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    a_super = np.asarray(a_super, dtype=np.float64)
    a_sub = np.asarray(a_sub, dtype=np.float64)
    if a_super.shape != a_sub.shape:
        raise ValueError(f"map shape mismatch: {a_super.shape} vs {a_sub.shape}")
    if lam == 1.0:
        return a_super.copy()
    if lam == 0.0:
        return a_sub.copy()
    return lam * a_super + (1.0 - lam) * a_sub


def average_over_templates(descriptor_sets, normalize: bool = True) -> DescriptorMatrix:
    sets = list(descriptor_sets)
    if not sets:
        raise ValueError("no descriptor sets to average")
    first = sets[0]
    names = list(first.descriptor_names)
    for s in sets[1:]:
        if s.values.shape != first.values.shape:
            raise ValueError(f"descriptor set shape mismatch: {s.values.shape} vs {first.values.shape}")
        if list(s.descriptor_names) != names:
            raise ValueError("descriptor order differs across templates")
    mean = np.mean([np.asarray(s.values, dtype=np.float64) for s in sets], axis=0)
    if normalize:
        norms = np.linalg.norm(mean, axis=1)
        bad = [names[i] for i in np.flatnonzero(norms <= 1e-12)]
        if bad:
            raise DegenerateDescriptor(f"descriptor(s) {bad} averaged to zero across templates")
        mean = mean / norms[:, None]
    return DescriptorMatrix(mean, names, normalized=normalize)


def alt_ensemble(method: str, image_feats, descriptors, per_subclass_maps, k: int = 5) -> np.ndarray:
    """Alternative fusions over per-subclass maps ``[n, m_i]``.

    ``cross_attention`` is a stand-in: softmax over descriptors of their dot
    product with the pooled top-k image feature, used to weight the maps.
    """
    maps = np.asarray(per_subclass_maps, dtype=np.float64)
    if method == "average":
        return maps.mean(axis=0)
    if method == "max_similarity":
        return maps.max(axis=0)
    if method == "cross_attention":
        desc = np.asarray(_values(descriptors), dtype=np.float64)
        img = np.asarray(image_feats, dtype=np.float64)
        i_pool = select_image_features(img, min(k, img.shape[0])).mean(axis=0)
        w = softmax(desc @ i_pool)
        return w @ maps
    raise ValueError(f"unknown ensemble method {method!r}")


def subclass_map(image_feats, descriptors, method: str = "paper", k: int = 5) -> np.ndarray:
    """Fused subclass attention ``[m_i]`` for any of the four methods.

    Inputs are used as given; normalize beforehand if required.
    """
    img = np.asarray(image_feats, dtype=np.float64)
    k = min(k, img.shape[0])
    if method == "paper":
        return ensemble_attention(img, fuse_descriptors(img, descriptors, k).fused)
    return alt_ensemble(method, img, descriptors, attention_map(img, descriptors), k)
