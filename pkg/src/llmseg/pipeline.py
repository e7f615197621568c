"""Per-image segmentation: descriptors -> attention maps -> fusion -> masks -> CRF."""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from llmseg import crf as crf_mod
from llmseg.config import RunConfig
from llmseg.ensemble import (
    DescriptorMatrix,
    attention_map,
    average_over_templates,
    baseline_similarity,
    l2_normalize,
    mix_superclass,
    select_text_features,
    subclass_map,
)
from llmseg.masks import (
    LabelMap,
    assemble_labelmap,
    load_rgb,
    normalize_minmax,
    reshape_to_grid,
    resize_labels_nearest,
    resize_rgb,
    upsample_bilinear,
)
from llmseg.subclass_gen import SubclassSet, generate_subclasses, load_subclass_set, make_client
from llmseg.text_embed import (
    DirFeatureSource,
    EmbeddingClient,
    ServiceFeatureSource,
    expand_templates,
    resolve_templates,
)

log = logging.getLogger(__name__)


def safe_name(name: str) -> str:
    return name.strip().replace("/", "_").replace(" ", "_")


class SubclassProvider:
    """Resolves a class to its subclass set.

    A stored set in ``subclass_dir`` (``{class}__{mode}.json`` then ``{class}.json``)
    is used when it holds at least ``n`` names, truncated to the first ``n``;
    otherwise generation goes through the cache and the LLM endpoint.
    """

    def __init__(self, config: RunConfig, client=None):
        self.config = config
        self._client = client
        self._lock = threading.Lock()

    def _stored(self, class_name: str, mode: str) -> SubclassSet | None:
        if not self.config.subclass_dir:
            return None
        root = Path(self.config.subclass_dir)
        for p in (root / f"{safe_name(class_name)}__{mode}.json", root / f"{safe_name(class_name)}.json"):
            if p.exists():
                return load_subclass_set(p)
        return None

    def client(self):
        with self._lock:
            if self._client is None:
                self._client = make_client(self.config.llm.endpoint())
            return self._client

    def get(self, class_name: str) -> SubclassSet:
        n, mode = self.config.n_subclasses, self.config.prompt_mode
        stored = self._stored(class_name, mode)
        if stored is not None and stored.n >= n:
            return stored.prefix(n)
        cache = Path(self.config.cache_dir) / "subclasses"
        return generate_subclasses(
            class_name, n, mode, self.config.llm.endpoint(), cache_dir=cache, client_factory=self.client
        )


def make_feature_source(config: RunConfig, transport=None):
    if config.features == "dir":
        if not config.features_dir:
            raise ValueError("features=dir requires features_dir")
        return DirFeatureSource(config.features_dir)
    client = EmbeddingClient(config.embed_url, transport=transport)
    return ServiceFeatureSource(client, Path(config.cache_dir) / "features", config.embed_backend_id)


@dataclass
class ClassText:
    name: str
    superclass: DescriptorMatrix
    super_tokens: list = field(default_factory=list)
    subclasses: DescriptorMatrix | None = None
    subclass_set: SubclassSet | None = None


@dataclass
class SegmentResult:
    image_id: str
    labels: LabelMap
    labels_pre_crf: LabelMap
    scores: np.ndarray
    marginals: np.ndarray | None
    work_size: tuple
    original_size: tuple


class Segmenter:
    def __init__(self, config: RunConfig, features=None, subclasses: SubclassProvider | None = None,
                 class_names=None):
        self.config = config
        self.features = features if features is not None else make_feature_source(config)
        self.subclasses = subclasses or SubclassProvider(config)
        self.class_names = list(class_names if class_names is not None else (config.classes or []))
        if not self.class_names:
            raise ValueError("no classes to segment")
        self.templates = resolve_templates(config.templates)
        self._text: dict[str, ClassText] = {}
        self._lock = threading.Lock()

    def _descriptors(self, names, labels) -> tuple[DescriptorMatrix, list]:
        per_template, token_sets = [], []
        for t in self.templates:
            tok = self.features.text(expand_templates(names, [t]), names=list(labels), template_id=t.id)
            token_sets.append(tok)
            dm = select_text_features(tok)
            if self.config.normalize_features:
                dm = DescriptorMatrix(l2_normalize(dm.values), dm.descriptor_names, True)
            per_template.append(dm)
        return average_over_templates(per_template, normalize=self.config.normalize_features), token_sets

    def class_text(self, class_name: str) -> ClassText:
        with self._lock:
            hit = self._text.get(class_name)
        if hit is not None:
            return hit
        sup, sup_tokens = self._descriptors([class_name], [class_name])
        ct = ClassText(class_name, sup, sup_tokens)
        if self.config.text_mode != "superclass":
            sset = self.subclasses.get(class_name)
            ct.subclass_set = sset
            ct.subclasses, _ = self._descriptors(sset.subclasses, sset.subclasses)
        with self._lock:
            self._text.setdefault(class_name, ct)
        return ct

    def prepare(self) -> None:
        """Resolve text descriptors for every class (fails fast on missing inputs)."""
        for c in self.class_names:
            self.class_text(c)

    def _super_map(self, img: np.ndarray, ct: ClassText) -> np.ndarray:
        if self.config.superclass_scoring == "loda":
            return attention_map(img, ct.superclass)[0]
        maps = []
        for tok in ct.super_tokens:
            t = tok.values[0, : tok.valid_tokens[0]].astype(np.float64)
            if self.config.normalize_features:
                t = l2_normalize(t)
            maps.append(baseline_similarity(img, t))
        return np.mean(maps, axis=0)

    def patch_scores(self, image_feats: np.ndarray) -> np.ndarray:
        """Per-class fused patch scores ``[L, m_i]`` in [0, 1]."""
        cfg = self.config
        img = np.asarray(image_feats, dtype=np.float64)
        if cfg.normalize_features:
            img = l2_normalize(img)
        out = []
        for c in self.class_names:
            ct = self.class_text(c)
            if cfg.text_mode == "subclass":
                out.append(normalize_minmax(subclass_map(img, ct.subclasses, cfg.ensemble_method, cfg.top_k_image)))
                continue
            a_super = normalize_minmax(self._super_map(img, ct))
            if cfg.text_mode == "superclass":
                out.append(a_super)
                continue
            a_sub = normalize_minmax(subclass_map(img, ct.subclasses, cfg.ensemble_method, cfg.top_k_image))
            out.append(mix_superclass(a_super, a_sub, cfg.lambda_super))
        return np.stack(out)

    def segment(self, image_path) -> SegmentResult:
        cfg = self.config
        image_path = Path(image_path)
        rgb = load_rgb(image_path)
        work = resize_rgb(rgb, cfg.resize)
        feats = self.features.image(image_path, cfg.resize)
        patch = self.patch_scores(feats.values)
        H, W = work.shape[:2]
        scores = np.stack([normalize_minmax(upsample_bilinear(reshape_to_grid(p, feats.grid), (H, W))) for p in patch])
        pre = assemble_labelmap(scores, cfg.tau, self.class_names)
        marginals = None
        labels = pre
        if cfg.crf.enabled:
            unary = crf_mod.to_unary(scores, cfg.background_mode, cfg.bg_score)
            marginals, labels = crf_mod.mean_field(unary, work, cfg.crf.params())
            labels.class_names = list(self.class_names)
        size = rgb.shape[:2]
        return SegmentResult(
            image_path.stem,
            resize_labels_nearest(labels, size),
            resize_labels_nearest(pre, size),
            scores,
            marginals,
            (H, W),
            size,
        )

    def segment_many(self, image_paths, workers: int | None = None):
        """Yields ``(path, SegmentResult | Exception)`` in input order."""
        workers = workers or self.config.workers
        paths = list(image_paths)

        def run(p):
            try:
                return self.segment(p)
            except Exception as exc:  # collected per image, the batch continues
                log.error("segmentation failed for %s: %s", p, exc)
                return exc

        if workers <= 1:
            for p in paths:
                yield p, run(p)
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from zip(paths, pool.map(run, paths))
