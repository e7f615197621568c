"""Run configuration.

A config file is a YAML (or JSON) mapping whose keys mirror :class:`RunConfig`;
nested ``crf`` and ``llm`` sections mirror :class:`CrfConfig` and
:class:`LLMConfig`. Command-line flags override file values; environment
variables only supply endpoint URLs and the API key.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from llmseg.crf import CrfParams
from llmseg.ensemble import METHODS
from llmseg.subclass_gen import LLMEndpoint
from llmseg.text_embed import DEFAULT_TEMPLATES


class ConfigError(ValueError):
    pass


class CrfConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    iterations: int = Field(3, ge=0)
    gauss_sxy: float = Field(3.0, gt=0)
    gauss_weight: float = Field(3.0, ge=0)
    bilat_sxy: float = Field(80.0, gt=0)
    bilat_srgb: float = Field(13.0, gt=0)
    bilat_weight: float = Field(10.0, ge=0)
    truncate: float = Field(3.0, gt=0)
    kernel: Literal["auto", "exact", "grid"] = "auto"

    def params(self) -> CrfParams:
        return CrfParams(**self.model_dump(exclude={"enabled"}))


class LLMConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_url: Optional[str] = None
    model_id: str = "gpt-3.5-turbo-instruct"
    max_tokens: int = 256
    timeout: float = 60.0
    max_attempts: int = Field(4, ge=1)
    backoff: float = 1.0
    requests_per_second: Optional[float] = None
    fixture_dir: Optional[str] = None

    def endpoint(self) -> LLMEndpoint:
        return LLMEndpoint.from_env(**self.model_dump())


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    images_dir: Optional[str] = None
    masks_dir: Optional[str] = None
    split_file: Optional[str] = None
    class_list: Optional[str] = None
    classes: Optional[list[str]] = None

    prompt_mode: Literal["P1", "P2"] = "P2"
    n_subclasses: int = Field(10, ge=1)
    templates: list[str] = Field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    lambda_super: float = Field(0.2, ge=0.0, le=1.0)
    ensemble_method: str = "paper"
    text_mode: Literal["mixed", "superclass", "subclass"] = "mixed"
    superclass_scoring: Literal["loda", "mean_token"] = "loda"
    normalize_features: bool = True
    top_k_image: int = Field(5, ge=1)

    tau: float = Field(0.5, ge=0.0, le=1.0)
    background_mode: Literal["constant", "complement"] = "constant"
    background_score: Optional[float] = None
    crf: CrfConfig = Field(default_factory=CrfConfig)

    features: Literal["dir", "service"] = "dir"
    features_dir: Optional[str] = None
    embed_url: Optional[str] = None
    embed_backend_id: str = "default"
    llm: LLMConfig = Field(default_factory=LLMConfig)
    cache_dir: str = ".llmseg-cache"
    subclass_dir: Optional[str] = None

    resize: tuple[int, int] = (288, 288)
    workers: int = Field(1, ge=1)

    @field_validator("ensemble_method")
    @classmethod
    def _method(cls, v):
        if v not in METHODS:
            raise ValueError(f"ensemble_method must be one of {METHODS}")
        return v

    @field_validator("templates")
    @classmethod
    def _templates(cls, v):
        unknown = [t for t in v if t not in DEFAULT_TEMPLATES]
        if unknown or not v:
            raise ValueError(f"unknown or empty template ids: {unknown}")
        return v

    @field_validator("resize")
    @classmethod
    def _resize(cls, v):
        if v[0] <= 0 or v[1] <= 0:
            raise ValueError("resize must be positive")
        return v

    @property
    def bg_score(self) -> float:
        return self.tau if self.background_score is None else self.background_score

    def canonical(self) -> dict:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    try:
        return RunConfig.model_validate(_deep_merge(data, overrides))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def read_class_list(path) -> list[str]:
    """Newline-separated class names, background first; blank lines ignored."""
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
