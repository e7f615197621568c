import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llmseg.config import ConfigError, RunConfig, load_config
from llmseg.pipeline import Segmenter, SubclassProvider
from llmseg.subclass_gen import FixtureClient
from conftest import synth_config


def test_run_config_defaults():
    cfg = RunConfig()
    assert cfg.n_subclasses == 10 and cfg.lambda_super == 0.2 and cfg.crf.iterations == 3
    assert cfg.resize == (288, 288) and cfg.ensemble_method == "paper" and cfg.prompt_mode == "P2"
    assert cfg.templates == [f"T{i}" for i in range(1, 11)] and cfg.top_k_image == 5


def test_load_yaml_and_flag_override(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("lambda_super: 0.5\ncrf:\n  iterations: 5\n  bilat_weight: 4\n")
    cfg = load_config(p, {"lambda_super": 0.1, "crf": {"iterations": 2}, "tau": None})
    assert cfg.lambda_super == 0.1 and cfg.crf.iterations == 2 and cfg.crf.bilat_weight == 4
    assert cfg.tau == 0.5


@pytest.mark.parametrize("text", ["nonsense_key: 1\n", "lambda_super: 2\n", "ensemble_method: sum\n",
                                  "templates: [T99]\n", "- a\n- b\n"])
def test_bad_config(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


@given(st.permutations(["lambda_super", "tau", "n_subclasses", "prompt_mode"]))
def test_config_hash_stable_under_key_order(order):
    vals = {"lambda_super": 0.3, "tau": 0.4, "n_subclasses": 5, "prompt_mode": "P1"}
    cfg = RunConfig.model_validate({k: vals[k] for k in order})
    assert cfg.config_hash() == RunConfig.model_validate(vals).config_hash()
    assert cfg.config_hash() != RunConfig().config_hash()


def test_subclass_provider_prefix_and_generation(synth, tmp_path):
    cfg = synth_config(synth, n_subclasses=4)
    s = SubclassProvider(cfg).get("cat")
    assert s.subclasses == [f"cat kind {i}" for i in range(1, 5)]
    # no stored set: falls through to the fixture LLM and the cache
    cfg = synth_config(synth, subclass_dir=None, cache_dir=str(tmp_path), n_subclasses=3)
    client = FixtureClient(synth.llm_fixture_dir)
    prov = SubclassProvider(cfg, client=client)
    assert prov.get("dog").subclasses == ["dog kind 1", "dog kind 2", "dog kind 3"]
    SubclassProvider(cfg, client=client).get("dog")
    assert client.calls == 1


def test_segment_result_shapes(synth_clean):
    cfg = synth_config(synth_clean)
    seg = Segmenter(cfg, class_names=["cat", "dog"])
    res = seg.segment(synth_clean.images_dir / f"{synth_clean.sample_ids[0]}.png")
    assert res.labels.shape == res.labels_pre_crf.shape == res.original_size == (288, 288)
    assert res.scores.shape == (2, 288, 288) and res.marginals.shape == (3, 288, 288)
    assert 0.0 <= res.scores.min() and res.scores.max() <= 1.0


def test_patch_scores_modes_and_mean_token(synth):
    img = np.random.default_rng(0).normal(size=(324, 16))
    cfg = synth_config(synth, superclass_scoring="mean_token")
    ps = Segmenter(cfg, class_names=["cat"]).patch_scores(img)
    assert ps.shape == (1, 324) and np.isfinite(ps).all()
    for mode in ("superclass", "subclass"):
        out = Segmenter(synth_config(synth, text_mode=mode), class_names=["cat"]).patch_scores(img)
        assert out.min() >= 0 and out.max() <= 1


def test_segment_many_collects_failures(synth_clean, tmp_path):
    seg = Segmenter(synth_config(synth_clean, crf={"enabled": False}), class_names=["cat"])
    good = synth_clean.images_dir / f"{synth_clean.sample_ids[0]}.png"
    bad = tmp_path / "unknown.png"
    bad.write_bytes(good.read_bytes())
    out = list(seg.segment_many([bad, good], workers=2))
    assert isinstance(out[0][1], Exception) and out[1][1].image_id == synth_clean.sample_ids[0]


def test_no_classes_rejected(synth):
    with pytest.raises(ValueError):
        Segmenter(synth_config(synth))
