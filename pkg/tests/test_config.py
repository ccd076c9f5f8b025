"""Strict-config behavior: defaults, overrides, rejection, echo."""
import yaml

import pytest

from phasectl.config import (RunConfig, config_fingerprint, config_from_dict,
                             load_config)
from phasectl.errors import ConfigInvalid


def test_empty_config_is_all_defaults():
    assert config_from_dict({}) == RunConfig()
    assert config_from_dict(None) == RunConfig()


def test_overrides_apply_and_lists_become_tuples():
    cfg = config_from_dict({"seed": 7,
                            "backbone": {"kind": "flow"},
                            "eval": {"amp_grid": [0.5, 1.0, 2.0]}})
    assert cfg.seed == 7
    assert cfg.backbone.kind == "flow"
    assert cfg.eval.amp_grid == (0.5, 1.0, 2.0)
    # untouched sections keep defaults
    assert cfg.vae == RunConfig().vae


@pytest.mark.parametrize("doc,fragment", [
    ({"typo_section": {}}, "top level"),
    ({"corpus": {"n_sample": 3}}, "corpus"),
    ({"corpus": 5}, "mapping"),
    ({"seed": "zero"}, "seed"),
    ([1, 2], "mapping"),
    ({"backbone": {"kind": "vae"}}, "kind"),
    ({"control": {"mode": "adapter"}}, "mode"),
    ({"phase": {"mode": "limbs"}}, "mode"),
    ({"sampling": {"steps": 0}}, "steps"),
    ({"control": {"lambda_phase": -1.0}}, "lambda_phase"),
    ({"eval": {"freq_grid": [0.5, -1.0]}}, "positive"),
])
def test_bad_configs_are_rejected_with_context(doc, fragment):
    with pytest.raises(ConfigInvalid, match=fragment):
        config_from_dict(doc)


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"workdir": "out", "vae": {"epochs": 3}}))
    cfg = load_config(path)
    assert cfg.workdir == "out"
    assert cfg.vae.epochs == 3


def test_load_config_missing_and_invalid_yaml(tmp_path):
    with pytest.raises(ConfigInvalid, match="not found"):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("corpus: [unclosed")
    with pytest.raises(ConfigInvalid, match="YAML"):
        load_config(bad)


def test_resolved_mapping_is_json_friendly_and_complete():
    res = RunConfig().resolved()
    assert set(res) == {"seed", "workdir", "corpus", "vae", "phase",
                        "backbone", "control", "sampling", "eval"}
    assert res["corpus"]["classes"] == list(RunConfig().corpus.classes)
    assert isinstance(res["eval"]["amp_grid"], list)


def test_echo_writes_resolved_yaml(tmp_path):
    cfg = config_from_dict({"seed": 3})
    path = cfg.echo(tmp_path / "outdir")
    loaded = yaml.safe_load(path.read_text())
    assert loaded == cfg.resolved()
    assert config_from_dict(loaded) == cfg


def test_fingerprint_tracks_content_not_identity():
    a = config_from_dict({"seed": 1})
    b = config_from_dict({"seed": 1})
    c = config_from_dict({"seed": 2})
    assert config_fingerprint(a) == config_fingerprint(b)
    assert config_fingerprint(a) != config_fingerprint(c)
    assert len(config_fingerprint(a)) == 16
