import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comodal import checkpoint
from comodal.config import default_config
from comodal.errors import ContractError, ModalityLookupError, ShapeError
from comodal.gradcheck import tiny_config
from comodal.model import (
    TokenMaker,
    build_model,
    build_unimodal,
    extract_unimodal,
    forward_all,
    tokens_from_features,
)
from comodal.objectives import task_loss
from comodal.tensor import Tensor, backward


def batch_for(cfg, n=3, seed=0):
    rng = np.random.default_rng(seed)
    return {m.name: rng.normal(size=(n, *m.input_shape)) for m in cfg.modalities}


def three_modal_config():
    cfg = tiny_config()
    mods = [m.model_dump() for m in cfg.modalities]
    mods.append({"name": "c", "input_shape": [2, 5], "layers": [{"kind": "conv1d", "channels": 4},
                                                              {"kind": "conv1d", "channels": 4}]})
    return cfg.with_updates(modalities=mods)


def test_direction_counts():
    assert len(build_model(tiny_config(), 0).mm.directions()) == 2
    model = build_model(three_modal_config(), 0)
    assert len(model.mm.directions()) == 6
    forward_all(model, batch_for(three_modal_config()))
    assert len(model.mm.last_directions) == 6


def test_partitions_cover_every_parameter_once():
    model = build_model(default_config(), 0)
    parts = model.partitions()
    names = [n for _, ns in parts.items() for n in ns]
    assert len(names) == len(set(names)) == len(list(model.named_parameters()))
    sizes = sum(p.size for key in parts for p in model.partition_params(key))
    assert sizes == model.num_parameters()
    assert not any(n.startswith("mm.") for key, ns in parts.items() if key != "mm" for n in ns)
    assert all(n.startswith("mm.") for n in parts["mm"])


def test_parameter_names_follow_registry_paths():
    names = [n for n, _ in build_model(default_config(), 0).named_parameters()]
    assert "rgb.stem.0.weight" in names
    assert "mm.cross.audio->rgb.0.Wq" in names and "mm.cross.rgb->audio.0.Wq" in names
    assert "audio.head.bias" in names and "mm.head.weight" in names


def test_build_is_deterministic():
    a = build_model(default_config(), 3).state_dict()
    b = build_model(default_config(), 3).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_cotrain_shares_stem_output():
    cfg = tiny_config()
    model = build_model(cfg, 0)
    out = forward_all(model, batch_for(cfg), "cotrain")
    for m, branch in model.branches.items():
        # the stem tensor stored in the outputs is the single shared activation
        direct = branch.stem_forward(Tensor(batch_for(cfg)[m]))
        np.testing.assert_array_equal(out.stems[m].data, direct.data)
    assert out.mm_pred.shape == (3, 3)


def test_frozen_shared_blocks_mm_gradient_into_stems():
    cfg = tiny_config()
    model = build_model(cfg, 0)
    inputs = batch_for(cfg)
    out = forward_all(model, inputs, "frozen_shared_mm")
    backward(task_loss(out.mm_pred, np.array([0, 1, 2]), "classification"))
    for key in ("stem:a", "stem:b"):
        for p in model.partition_params(key):
            assert p.grad is None or np.all(p.grad == 0)
    assert any(p.grad is not None and np.any(p.grad != 0) for p in model.partition_params("mm"))


def test_cotrain_mm_gradient_reaches_stems():
    cfg = tiny_config()
    model = build_model(cfg, 0)
    out = forward_all(model, batch_for(cfg), "cotrain")
    backward(task_loss(out.mm_pred, np.array([0, 1, 2]), "classification"))
    assert any(p.grad is not None and np.any(p.grad != 0) for p in model.partition_params("stem:a"))
    assert all(p.grad is None for p in model.partition_params("head:a"))


def test_no_mm_skips_multimodal_and_matches_standalone():
    cfg = tiny_config()
    model = build_model(cfg, 4)
    inputs = batch_for(cfg)
    out = forward_all(model, inputs, "no_mm")
    assert out.mm_pred is None and out.mm_feat is None
    backward(sum((p.sum() for p in out.uni_pred.values()), Tensor(0.0)))
    assert all(p.grad is None for p in model.partition_params("mm"))
    for m in cfg.names:
        solo = build_unimodal(cfg, m, 99)
        solo.load_state_dict({k: v for k, v in model.state_dict().items() if k.startswith(m + ".")})
        np.testing.assert_array_equal(solo(inputs[m]).data, out.uni_pred[m].data)


def test_forward_mode_and_batch_errors():
    cfg = tiny_config()
    model = build_model(cfg, 0)
    with pytest.raises(ContractError):
        forward_all(model, batch_for(cfg), "bogus")
    with pytest.raises(ContractError):
        forward_all(model, {"a": batch_for(cfg)["a"]})


def test_tokens_pool_spatial_and_put_time_first():
    rng = np.random.default_rng(1)
    recipe = TokenMaker((5, 4, 2, 3), d=5, project=False)
    phi = rng.normal(size=(5, 4, 2, 3))
    tok = tokens_from_features(Tensor(phi), recipe)
    assert tok.shape == (4, 5)
    np.testing.assert_allclose(tok.data, phi.mean(axis=(2, 3)).T, atol=1e-15)
    batched = tokens_from_features(Tensor(phi[None]), recipe)
    assert batched.shape == (1, 4, 5)


def test_tokens_identity_recipe_and_constant_rows():
    x = Tensor(np.random.default_rng(2).normal(size=(6, 4)))
    assert tokens_from_features(x) is x
    tok = tokens_from_features(Tensor(np.full((3, 4, 2, 2), 1.5)), TokenMaker((3, 4, 2, 2), 3, project=False))
    assert np.all(tok.data == 1.5)
    with pytest.raises(ShapeError):
        tokens_from_features(Tensor(np.ones((3, 4))), TokenMaker((3, 4, 2, 2), 3, project=False))


def test_extraction_matches_full_model_exactly():
    cfg = default_config()
    model = build_model(cfg, 2)
    inputs = batch_for(cfg, n=100, seed=3)
    out = forward_all(model, inputs, "cotrain")
    for m in cfg.names:
        uni = extract_unimodal(model, m)
        np.testing.assert_array_equal(uni(inputs[m]).data, out.uni_pred[m].data)
        parts = model.partitions()
        expected = sum(model.partition_params(f"{p}:{m}")[i].size
                       for p in ("stem", "tail", "head") for i in range(len(parts[f"{p}:{m}"])))
        assert uni.num_parameters() == expected
        assert not any(n.startswith("mm.") for n, _ in uni.named_parameters())


def test_extraction_is_a_copy():
    model = build_model(tiny_config(), 0)
    uni = extract_unimodal(model, "a")
    model.branches["a"].head.bias.data += 1.0
    assert np.all(uni.branch.head.bias.data == 0.0)


def test_extracted_checkpoint_roundtrip(tmp_path):
    cfg = default_config()
    model = build_model(cfg, 5)
    x = batch_for(cfg, n=7)["rgb"]
    uni = extract_unimodal(model, "rgb")
    path = checkpoint.save_module(uni, tmp_path / "rgb.cmkt")
    fresh = build_unimodal(cfg, "rgb", 77)
    checkpoint.load_module(fresh, path)
    assert fresh(x).data.tobytes() == uni(x).data.tobytes()


def test_extract_unknown_modality():
    with pytest.raises(ModalityLookupError):
        extract_unimodal(build_model(tiny_config(), 0), "depth")


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(1, 4))
def test_extraction_equivalence_property(seed, n):
    cfg = tiny_config()
    model = build_model(cfg, seed)
    inputs = batch_for(cfg, n=n, seed=seed)
    out = forward_all(model, inputs, "cotrain")
    for m in cfg.names:
        assert np.array_equal(extract_unimodal(model, m)(inputs[m]).data, out.uni_pred[m].data)


def test_attention_tail_exposes_probs():
    cfg = tiny_config("attention", attention=True)
    model = build_model(cfg, 0)
    out = forward_all(model, batch_for(cfg))
    for m in cfg.names:
        assert out.uni_attn[m].shape == out.mm_attn[m].shape == (3, 1, 4, 4)
