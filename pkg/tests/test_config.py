import json

import pytest

from comodal.config import (
    ExperimentConfig,
    config_reference,
    default_config,
    layer_shapes,
    parse_config,
    validate_config,
)
from comodal.errors import ConfigError, ModalityLookupError

MINIMAL = {
    "modalities": [
        {"name": "rgb", "input_shape": [4, 6, 2, 2],
         "layers": [{"kind": "pointwise", "channels": 8}, {"kind": "pool_spatial"}, {"kind": "conv1d", "channels": 8}]},
        {"name": "audio", "input_shape": [3, 6], "layers": [{"kind": "conv1d", "channels": 8}]},
    ]
}


def write(tmp_path, data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


def test_minimal_config_gets_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL))
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.names == ["rgb", "audio"]
    assert cfg.loss.alpha == 1.0 and cfg.loss.temperature == 5.0
    assert cfg.optimizer.lr == 1e-3 and cfg.optimizer.beta2 == 0.999 and cfg.optimizer.eps == 1e-8
    assert cfg.mode == "cotrain" and cfg.task.kind == "classification"
    assert cfg.modality("audio").layers[0].kernel == 3


@pytest.mark.parametrize("patch,key", [
    ({"loss": {"alpha": -1}}, "loss.alpha"),
    ({"loss": {"temperature": 0}}, "loss.temperature"),
    ({"loss": {"gamma": -0.5}}, "loss.gamma"),
    ({"epochs": 0}, "epochs"),
    ({"mode": "teacher_only"}, "mode"),
    ({"bogus": 1}, "bogus"),
    ({"loss": {"alfa": 1}}, "loss.alfa"),
])
def test_schema_violations_name_the_key(tmp_path, patch, key):
    with pytest.raises(ConfigError) as err:
        parse_config(write(tmp_path, {**MINIMAL, **patch}))
    assert key in str(err.value)


def test_unknown_key_is_reported_as_such(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(write(tmp_path, {**MINIMAL, "extra": True}))


def test_wrong_type_mentions_expectation(tmp_path):
    with pytest.raises(ConfigError, match="batch_size.*integer"):
        parse_config(write(tmp_path, {**MINIMAL, "batch_size": "big"}))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / "absent.json")


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        parse_config(path)


def test_cross_field_checks():
    with pytest.raises(ConfigError, match="decision"):
        validate_config({**MINIMAL, "task": {"kind": "regression"}})
    with pytest.raises(ConfigError, match="duplicate"):
        validate_config({"modalities": [MINIMAL["modalities"][1]] * 2})
    with pytest.raises(ConfigError):
        validate_config({"modalities": MINIMAL["modalities"][:1]})
    with pytest.raises(ConfigError, match="spatial"):
        validate_config({"modalities": [MINIMAL["modalities"][0],
                                        {"name": "x", "input_shape": [2, 4], "layers": [{"kind": "pool_spatial"}]}]})


def test_layer_shapes():
    cfg = validate_config(MINIMAL)
    assert layer_shapes(cfg.modality("rgb")) == [(4, 6, 2, 2), (8, 6, 2, 2), (8, 6), (8, 6)]
    assert layer_shapes(cfg.modality("audio")) == [(3, 6), (8, 6)]


def test_unknown_modality_lookup():
    with pytest.raises(ModalityLookupError):
        validate_config(MINIMAL).modality("depth")


def test_with_updates_merges_sections():
    cfg = default_config().with_updates(loss={"alpha": 5.0}, seed=3)
    assert cfg.loss.alpha == 5.0 and cfg.loss.beta == 1.0 and cfg.seed == 3
    with pytest.raises(ConfigError):
        cfg.with_updates(loss={"alpha": -2.0})


def test_dump_and_reload_roundtrip(tmp_path):
    cfg = default_config()
    assert parse_config(write(tmp_path, cfg.model_dump())) == cfg


def test_reference_lists_every_leaf_key():
    ref = config_reference()
    for key in ("loss.alpha", "loss.temperature", "optimizer.lr", "data.n_train", "multimodal.d_model",
                "modalities", "mode", "seed"):
        assert f"`{key}`" in ref
    assert ref.splitlines()[0].startswith("| key |")


def test_shipped_default_config_file_matches():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "default.json"
    assert parse_config(path) == default_config()
