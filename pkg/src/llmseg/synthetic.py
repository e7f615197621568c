"""Planted-truth synthetic benchmark.

Builds a tiny VOC-style dataset plus pre-exported features so the whole
pipeline runs offline. Feature construction (``d`` dims, orthonormal basis):

* each region (background, each class) owns one basis vector; a patch feature
  is its region vector plus bounded uniform noise;
* subclass targets are the class vector plus bounded noise; a few
  "confusable" subclasses also lean towards another class;
* the superclass target is deliberately noisy: it leans towards background;
* each text prompt gets several token rows whose per-channel maximum is the
  prompt's target (one row equals it, the rest lie below it).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from llmseg._io import atomic_write_bytes
from llmseg.masks import LabelMap, save_labelmap
from llmseg.pipeline import safe_name
from llmseg.subclass_gen import SubclassSet, cache_key, save_subclass_set
from llmseg.text_embed import DEFAULT_TEMPLATES, FeatureStore, PatchImageFeatures, expand_templates

CLASS_NAMES = ("cat", "dog")
REGION_COLORS = {0: (110, 110, 110), 1: (200, 70, 60), 2: (60, 90, 200)}


@dataclass
class SyntheticBenchmark:
    root: Path
    images_dir: Path
    masks_dir: Path
    features_dir: Path
    subclass_dir: Path
    llm_fixture_dir: Path
    class_list: Path
    split_file: Path
    sample_ids: list
    patch_truth: dict

    def config_overrides(self) -> dict:
        return {
            "images_dir": str(self.images_dir),
            "masks_dir": str(self.masks_dir),
            "class_list": str(self.class_list),
            "split_file": str(self.split_file),
            "features": "dir",
            "features_dir": str(self.features_dir),
            "subclass_dir": str(self.subclass_dir),
            "cache_dir": str(self.root / "cache"),
            "llm": {"fixture_dir": str(self.llm_fixture_dir), "model_id": "fixture"},
        }


def _subclass_names(cls: str, n: int) -> list[str]:
    return [f"{cls} kind {i + 1}" for i in range(n)]


def _plant(rng, grid) -> np.ndarray:
    """Background with one rectangle per class, non-overlapping, each at least 7x6 patches."""
    h, w = grid
    lab = np.zeros(grid, dtype=np.uint8)
    split = int(rng.integers(w // 2 - 1, w // 2 + 2))
    for cls, (x_lo, x_hi) in enumerate(((1, split - 1), (split + 1, w - 1)), start=1):
        x0 = int(rng.integers(x_lo, x_hi - 5))
        x1 = int(rng.integers(x0 + 6, x_hi + 1))
        y0 = int(rng.integers(1, h - 8))
        y1 = int(rng.integers(y0 + 7, h))
        lab[y0:y1, x0:x1] = cls
    return lab


def build_synthetic_benchmark(
    root,
    n_images: int = 4,
    seed: int = 0,
    d: int = 16,
    grid=(18, 18),
    patch: int = 16,
    n_subclasses: int = 10,
    templates=("T1", "T4", "T7"),
    image_noise: float = 0.1,
    subclass_noise: float = 0.2,
    confusable: int = 3,
    confusion: float = 1.2,
    confuse_with: str = "background",
    super_leak: float = 0.9,
    super_noise: float = 0.1,
    pixel_noise: int = 12,
    rotate_basis: bool = False,
) -> SyntheticBenchmark:
    root = Path(root)
    rng = np.random.default_rng(seed)
    if rotate_basis:
        basis = np.linalg.qr(rng.standard_normal((d, d)))[0].T
    else:
        basis = np.eye(d)
    u_bg = basis[0]
    u_cls = {c: basis[1 + i] for i, c in enumerate(CLASS_NAMES)}

    def noise(scale, size=d):
        return rng.uniform(-scale, scale, size)

    targets: dict[str, np.ndarray] = {}
    subclass_sets: dict[str, list[str]] = {}
    for i, c in enumerate(CLASS_NAMES):
        other = u_bg if confuse_with == "background" else u_cls[CLASS_NAMES[1 - i]]
        targets[c] = u_cls[c] + super_leak * u_bg + noise(super_noise)
        names = _subclass_names(c, n_subclasses)
        subclass_sets[c] = names
        for j, s in enumerate(names):
            v = u_cls[c] + noise(subclass_noise)
            if j >= n_subclasses - confusable:
                v = v + confusion * other
            targets[s] = v

    dirs = {k: root / k for k in ("images", "masks", "features", "subclasses", "llm_fixtures")}
    for p in dirs.values():
        p.mkdir(parents=True, exist_ok=True)

    store = FeatureStore(dirs["features"], "synthetic")
    store.write_manifest({"d": d, "seed": seed})
    for t in templates:
        tpl = DEFAULT_TEMPLATES[t]
        for name, target in targets.items():
            m_t = int(rng.integers(3, 9))
            v = target + noise(0.03)
            tokens = v[None, :] - np.abs(rng.normal(0.0, 0.4, (m_t, d)))
            tokens[int(rng.integers(m_t))] = v
            store.put_text(expand_templates([name], [tpl])[0], tokens.astype(np.float32))

    for c, names in subclass_sets.items():
        sset = SubclassSet(c, names, n_subclasses, "P2", "fixture", cache_key("fixture", "P2", c, n_subclasses))
        save_subclass_set(dirs["subclasses"] / f"{safe_name(c)}.json", sset)
        atomic_write_bytes(dirs["llm_fixtures"] / f"{safe_name(c)}.txt", (", ".join(names) + "\n").encode())

    region_vecs = np.stack([u_bg] + [u_cls[c] for c in CLASS_NAMES])
    ids, truth = [], {}
    H, W = grid[0] * patch, grid[1] * patch
    for k in range(n_images):
        sid = f"synth_{k:03d}"
        lab = _plant(rng, grid)
        feats = region_vecs[lab.ravel()] + rng.uniform(-image_noise, image_noise, (lab.size, d))
        store.put_image(sid, PatchImageFeatures(feats.astype(np.float32), grid, sid, (H, W)))
        pix = np.kron(lab, np.ones((patch, patch), dtype=np.uint8))
        colors = np.asarray([REGION_COLORS[i] for i in range(len(CLASS_NAMES) + 1)], dtype=np.int64)
        rgb = colors[pix] + rng.integers(-pixel_noise, pixel_noise + 1, (H, W, 3))
        Image.fromarray(np.clip(rgb, 0, 255).astype(np.uint8), "RGB").save(dirs["images"] / f"{sid}.png")
        save_labelmap(dirs["masks"] / f"{sid}.png", LabelMap(pix))
        ids.append(sid)
        truth[sid] = lab

    class_list = root / "classes.txt"
    class_list.write_text("background\n" + "\n".join(CLASS_NAMES) + "\n")
    split = root / "split.txt"
    split.write_text("\n".join(ids) + "\n")
    return SyntheticBenchmark(root, dirs["images"], dirs["masks"], dirs["features"], dirs["subclasses"],
                              dirs["llm_fixtures"], class_list, split, ids, truth)
