"""Prompt templates, feature containers, the feature store and the embedding-service client."""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import httpx
import numpy as np

from llmseg._io import atomic_write_json, sha256_hex
from llmseg.tensorfile import TensorFileError, read_tensor, write_tensor

EMBED_URL_ENV = "LLMSEG_EMBED_URL"


class FeatureError(RuntimeError):
    pass


class ShapeMismatch(FeatureError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    pattern: str

    def __post_init__(self):
        if self.pattern.count("{}") != 1:
            raise ValueError(f"template {self.id!r} must contain exactly one '{{}}' placeholder: {self.pattern!r}")

    def expand(self, name: str) -> str:
        return self.pattern.replace("{}", name)


def load_templates(path=None) -> dict[str, PromptTemplate]:
    """Load a template registry (JSON list of ``{id, pattern}``); defaults to the bundled ten."""
    if path is None:
        text = resources.files("llmseg").joinpath("data/templates.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return {t["id"]: PromptTemplate(t["id"], t["pattern"]) for t in json.loads(text)}


DEFAULT_TEMPLATES = load_templates()


def resolve_templates(ids) -> list[PromptTemplate]:
    out = []
    for i in ids:
        if isinstance(i, PromptTemplate):
            out.append(i)
        elif i in DEFAULT_TEMPLATES:
            out.append(DEFAULT_TEMPLATES[i])
        else:
            raise KeyError(f"unknown template id {i!r}")
    return out


def expand_templates(names, templates) -> list[str]:
    """Template-major, name-minor expansion."""
    templates = [t if isinstance(t, PromptTemplate) else PromptTemplate("?", t) for t in templates]
    return [t.expand(n) for t in templates for n in names]


@dataclass
class TokenTextFeatures:
    """Token features for a batch of descriptors, padded to the longest token count.

    ``valid_tokens[i]`` is the number of real token rows of descriptor ``i``;
    rows beyond it are zero padding and must never reach a per-channel max.
    """

    values: np.ndarray
    descriptor_names: list[str]
    template_id: str = ""
    valid_tokens: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[1] < 1 or v.shape[2] < 1:
            raise ShapeMismatch(f"text features must be [n, m_t>=1, d>=1], got {v.shape}")
        if not np.isfinite(v).all():
            raise FeatureError("text features contain non-finite values")
        if len(self.descriptor_names) != v.shape[0]:
            raise ShapeMismatch("descriptor_names length does not match n")
        if self.valid_tokens is None:
            self.valid_tokens = np.full(v.shape[0], v.shape[1], dtype=np.int64)
        self.valid_tokens = np.asarray(self.valid_tokens, dtype=np.int64)
        if ((self.valid_tokens < 1) | (self.valid_tokens > v.shape[1])).any():
            raise ShapeMismatch("valid_tokens out of range")
        self.values = v

    @classmethod
    def stack(cls, token_arrays, names, template_id="") -> "TokenTextFeatures":
        arrays = [np.asarray(a) for a in token_arrays]
        if not arrays:
            raise ShapeMismatch("no descriptors")
        d = {a.shape[1] for a in arrays}
        if len(d) != 1:
            raise ShapeMismatch(f"inconsistent feature dims {sorted(d)}")
        m = max(a.shape[0] for a in arrays)
        out = np.zeros((len(arrays), m, d.pop()), dtype=arrays[0].dtype)
        for i, a in enumerate(arrays):
            out[i, : a.shape[0]] = a
        return cls(out, list(names), template_id, np.array([a.shape[0] for a in arrays]))


@dataclass
class PatchImageFeatures:
    values: np.ndarray
    grid: tuple[int, int]
    source_image_id: str = ""
    source_size: tuple[int, int] = (0, 0)

    def __post_init__(self):
        v = np.asarray(self.values)
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        if v.ndim != 2:
            raise ShapeMismatch(f"image features must be [m_i, d], got {v.shape}")
        if self.grid[0] * self.grid[1] != v.shape[0]:
            raise ShapeMismatch(f"grid {self.grid} does not match {v.shape[0]} patch vectors")
        if not np.isfinite(v).all():
            raise FeatureError("image features contain non-finite values")
        self.values = v


def _token_array(values, meta) -> np.ndarray:
    if values.ndim != 2:
        raise ShapeMismatch(f"text feature file must be [m_t, d], got {values.shape}")
    valid = meta.get("valid_tokens")
    if valid is not None:
        values = values[: int(valid)]
    if values.shape[0] < 1:
        raise ShapeMismatch("text feature file has no tokens")
    return values


@dataclass
class FeatureStore:
    """Tensor-file store, one file per text prompt / image.

    ``{root}/text/{key}.lseg`` with key = hash(backend_id, text), and
    ``{root}/image/{key}.lseg`` keyed either by image id (file stem, for
    pre-exported features) or by content hash (service cache).
    """

    root: Path
    backend_id: str = "default"

    def __post_init__(self):
        self.root = Path(self.root)

    def text_key(self, text: str) -> str:
        return sha256_hex("text", self.backend_id, text)[:32]

    def image_key(self, content: bytes, size) -> str:
        return sha256_hex("image", self.backend_id, content, f"{size[0]}x{size[1]}")[:32]

    def text_path(self, text: str) -> Path:
        return self.root / "text" / f"{self.text_key(text)}.lseg"

    def image_path(self, key: str) -> Path:
        return self.root / "image" / f"{key}.lseg"

    def has_text(self, text: str) -> bool:
        return self.text_path(text).exists()

    def get_text(self, text: str) -> np.ndarray:
        p = self.text_path(text)
        if not p.exists():
            raise FeatureError(f"no text features for {text!r} under {self.root}")
        values, meta = read_tensor(p)
        return _token_array(values, meta)

    def put_text(self, text: str, tokens) -> None:
        write_tensor(self.text_path(text), np.asarray(tokens, dtype=np.float32), {"text": text})

    def get_image(self, *keys) -> PatchImageFeatures | None:
        for key in keys:
            p = self.image_path(key)
            if p.exists():
                values, meta = read_tensor(p)
                return PatchImageFeatures(
                    values, tuple(meta["grid"]), meta.get("source_image_id", key), tuple(meta.get("source_size", (0, 0)))
                )
        return None

    def put_image(self, key: str, feats: PatchImageFeatures) -> None:
        write_tensor(
            self.image_path(key),
            np.asarray(feats.values, dtype=np.float32),
            {"grid": list(feats.grid), "source_image_id": feats.source_image_id, "source_size": list(feats.source_size)},
        )

    def write_manifest(self, extra=None) -> None:
        atomic_write_json(self.root / "manifest.json", {"backend_id": self.backend_id, **(extra or {})})


class EmbeddingClient:
    """HTTP client for the embedding service (``/encode_text`` and ``/encode_image``)."""

    def __init__(self, embed_url: str | None = None, transport: httpx.BaseTransport | None = None, timeout=120.0):
        embed_url = embed_url or os.environ.get(EMBED_URL_ENV)
        if not embed_url:
            raise FeatureError(f"no embedding service configured; set {EMBED_URL_ENV}")
        self.calls = 0
        self._http = httpx.Client(base_url=embed_url.rstrip("/"), timeout=timeout, transport=transport)

    def _post(self, path, **kw) -> dict:
        self.calls += 1
        try:
            resp = self._http.post(path, **kw)
            resp.raise_for_status()
            return resp.json()
        except httpx.HTTPError as exc:
            raise FeatureError(f"embedding service {path} failed: {exc}") from exc

    def encode_text(self, texts: list[str]) -> list[np.ndarray]:
        doc = self._post("/encode_text", json={"texts": list(texts)})
        feats = doc.get("features")
        if not isinstance(feats, list) or len(feats) != len(texts):
            raise ShapeMismatch("service returned a feature list that does not match the prompt count")
        out = []
        for t, f in zip(texts, feats):
            arr = np.asarray(f, dtype=np.float32)
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise ShapeMismatch(f"text features for {t!r} must be [m_t, d], got {arr.shape}")
            out.append(arr)
        return out

    def encode_image(self, png_bytes: bytes, name="image.png") -> tuple[np.ndarray, tuple[int, int]]:
        doc = self._post("/encode_image", files={"image": (name, png_bytes, "image/png")})
        arr = np.asarray(doc.get("features"), dtype=np.float32)
        grid = tuple(int(g) for g in doc.get("grid", ()))
        if arr.ndim != 2 or len(grid) != 2:
            raise ShapeMismatch(f"image features must be [m_i, d] with a 2-D grid, got {arr.shape} / {grid}")
        if grid[0] * grid[1] != arr.shape[0]:
            raise ShapeMismatch(f"grid {grid} reports {grid[0] * grid[1]} patches but {arr.shape[0]} vectors returned")
        return arr, grid

    def close(self):
        self._http.close()


def encode_text_remote(prompts, client: EmbeddingClient, store: FeatureStore | None = None, template_id="",
                       names=None) -> TokenTextFeatures:
    """Token features for ``prompts``; cached entries never hit the service."""
    prompts = list(prompts)
    missing = [p for p in dict.fromkeys(prompts) if store is None or not store.has_text(p)]
    fetched = {}
    if missing:
        for p, arr in zip(missing, client.encode_text(missing)):
            fetched[p] = arr
            if store is not None:
                store.put_text(p, arr)
    arrays = [fetched[p] if p in fetched else store.get_text(p) for p in prompts]
    return TokenTextFeatures.stack(arrays, names or prompts, template_id)


def _png_bytes(rgb: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def encode_image_remote(image_path, client: EmbeddingClient, store: FeatureStore | None = None,
                        resize=(288, 288)) -> PatchImageFeatures:
    from llmseg.masks import load_rgb, resize_rgb

    image_path = Path(image_path)
    content = image_path.read_bytes()
    rgb = load_rgb(image_path)
    key = store.image_key(content, resize) if store is not None else None
    if store is not None:
        hit = store.get_image(key)
        if hit is not None:
            return hit
    work = resize_rgb(rgb, resize) if resize else rgb
    values, grid = client.encode_image(_png_bytes(work), image_path.name)
    feats = PatchImageFeatures(values, grid, image_path.stem, rgb.shape[:2])
    if store is not None:
        store.put_image(key, feats)
    return feats


class DirFeatureSource:
    """Features supplied entirely from pre-exported tensor files."""

    def __init__(self, root, backend_id: str | None = None):
        root = Path(root)
        if backend_id is None:
            manifest = root / "manifest.json"
            backend_id = json.loads(manifest.read_text())["backend_id"] if manifest.exists() else "default"
        self.store = FeatureStore(root, backend_id)

    def text(self, prompts, names=None, template_id="") -> TokenTextFeatures:
        try:
            arrays = [self.store.get_text(p) for p in prompts]
        except TensorFileError as exc:
            raise FeatureError(str(exc)) from exc
        return TokenTextFeatures.stack(arrays, names or list(prompts), template_id)

    def image(self, image_path, resize) -> PatchImageFeatures:
        image_path = Path(image_path)
        feats = self.store.get_image(image_path.stem, self.store.image_key(image_path.read_bytes(), resize))
        if feats is None:
            raise FeatureError(f"no image features for {image_path.name} under {self.store.root}")
        return feats

    def has_text(self, prompt: str) -> bool:
        return self.store.has_text(prompt)


class ServiceFeatureSource:
    """Features from the embedding service, cached on disk by content hash."""

    def __init__(self, client: EmbeddingClient, cache_root, backend_id: str = "default"):
        self.client = client
        self.store = FeatureStore(Path(cache_root) / backend_id, backend_id)

    def text(self, prompts, names=None, template_id="") -> TokenTextFeatures:
        return encode_text_remote(prompts, self.client, self.store, template_id, names)

    def image(self, image_path, resize) -> PatchImageFeatures:
        return encode_image_remote(image_path, self.client, self.store, resize)

    def has_text(self, prompt: str) -> bool:
        return True
