import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from comodal import checkpoint
from comodal.config import default_config
from comodal.errors import CheckpointFormatError
from comodal.gradcheck import tiny_config
from comodal.metrics import MetricsRecord
from comodal.model import build_model, extract_unimodal, forward_all
from comodal.records import dumps, format_float, metric_lines, read_jsonl, run_id, write_jsonl


def probe_batch(cfg, n=5, seed=0):
    rng = np.random.default_rng(seed)
    return {m.name: rng.normal(size=(n, *m.input_shape)) for m in cfg.modalities}


def test_layout_matches_hand_built_bytes():
    state = {"w": np.array([[1.0, -2.0], [0.5, 3.0]]), "b": np.array(7.0)}
    expected = (b"CMKT" + struct.pack("<II", 1, 2)
                + struct.pack("<H", 1) + b"w" + struct.pack("<BII", 2, 2, 2)
                + struct.pack("<4d", 1.0, -2.0, 0.5, 3.0)
                + struct.pack("<H", 1) + b"b" + struct.pack("<B", 0) + struct.pack("<d", 7.0))
    assert checkpoint.encode(state) == expected


def test_model_roundtrip_is_bit_exact(tmp_path):
    cfg = default_config()
    model = build_model(cfg, 1)
    path = checkpoint.save_module(model, tmp_path / "m.cmkt")
    fresh = checkpoint.load_module(build_model(cfg, 2), path)
    inputs = probe_batch(cfg)
    a, b = forward_all(model, inputs), forward_all(fresh, inputs)
    assert a.mm_pred.data.tobytes() == b.mm_pred.data.tobytes()
    for m in cfg.names:
        assert a.uni_pred[m].data.tobytes() == b.uni_pred[m].data.tobytes()
    names = list(checkpoint.load(path))
    assert names == [n for n, _ in model.named_parameters()]
    assert "rgb.stem.0.weight" in names and "mm.cross.rgb->audio.0.Wq" in names


@settings(max_examples=30, deadline=None)
@given(arrays=st.lists(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
                       min_size=1, max_size=4),
       names=st.lists(st.text(min_size=1, max_size=12), min_size=4, max_size=4, unique=True))
def test_roundtrip_property(arrays, names):
    state = dict(zip(names, arrays))
    back = checkpoint.decode(checkpoint.encode(state))
    assert list(back) == list(state)
    for k in state:
        assert back[k].shape == state[k].shape
        assert back[k].tobytes() == state[k].tobytes()


def test_corrupt_payload_byte_changes_outputs():
    cfg = tiny_config()
    model = build_model(cfg, 0)
    buf = bytearray(checkpoint.encode(model.state_dict()))
    buf[-1] ^= 0x3F  # sign/exponent byte of the last value (mm head bias)
    fresh = build_model(cfg, 0)
    fresh.load_state_dict(checkpoint.decode(bytes(buf)))
    inputs = probe_batch(cfg)
    assert forward_all(model, inputs).mm_pred.data.tobytes() != forward_all(fresh, inputs).mm_pred.data.tobytes()


def test_truncation_reports_byte_offset():
    buf = checkpoint.encode({"weight": np.ones((2, 3))})
    header = 12 + 2 + len("weight") + 1 + 8
    with pytest.raises(CheckpointFormatError, match=f"byte offset {header}"):
        checkpoint.decode(buf[:header + 5])
    with pytest.raises(CheckpointFormatError, match="byte offset 0"):
        checkpoint.decode(buf[:3])
    for cut in range(len(buf)):
        with pytest.raises(CheckpointFormatError):
            checkpoint.decode(buf[:cut])


def test_magic_version_and_trailing_bytes():
    buf = checkpoint.encode({"a": np.zeros(2)})
    with pytest.raises(CheckpointFormatError, match="magic"):
        checkpoint.decode(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointFormatError, match="version"):
        checkpoint.decode(buf[:4] + struct.pack("<I", 2) + buf[8:])
    with pytest.raises(CheckpointFormatError, match="trailing"):
        checkpoint.decode(buf + b"\x00")


def test_duplicate_entry_rejected():
    one = checkpoint.encode({"a": np.zeros(1)})
    entry = one[12:]
    with pytest.raises(CheckpointFormatError, match="duplicate"):
        checkpoint.decode(b"CMKT" + struct.pack("<II", 1, 2) + entry + entry)


def test_extracted_checkpoint_has_no_mm_entries(tmp_path):
    model = build_model(default_config(), 0)
    path = checkpoint.save_module(extract_unimodal(model, "audio"), tmp_path / "audio.cmkt")
    names = list(checkpoint.load(path))
    assert names and not any(n.startswith("mm.") for n in names)
    assert all(n.startswith("audio.") for n in names)


# --- metrics lines ---------------------------------------------------------

def test_float_format_roundtrips_exactly():
    for x in (0.1, 1 / 3, 1e-300, 2.0**60, -0.0, 5.0, math.pi):
        text = format_float(x)
        assert float(text) == x and json.loads(text) == x
    assert format_float(5.0) == "5.0"
    assert format_float(0.1) == "0.10000000000000001"


def test_dumps_is_compact_and_typed():
    assert dumps({"a": 1, "b": 0.5, "c": None, "d": [True, "x"]}) == '{"a":1,"b":0.5,"c":null,"d":[true,"x"]}'
    assert dumps(np.float64(0.25)) == "0.25"


def test_run_id_depends_on_config_and_seed():
    cfg = default_config()
    assert run_id(cfg, 0) == run_id(default_config(), 0)
    assert run_id(cfg, 0) != run_id(cfg, 1)
    assert run_id(cfg, 0) != run_id(cfg.with_updates(loss={"alpha": cfg.loss.alpha + 1.0}), 0)
    assert len(run_id(cfg, 0)) == 16


def test_metric_lines_roundtrip(tmp_path):
    recs = [MetricsRecord(1, "train", {}, {"total": 1.25, "task/a": 0.1}),
            MetricsRecord(1, "val", {"a": {"acc": 0.5}, "mm": {"acc": 2 / 3}})]
    path = write_jsonl(metric_lines(recs, "abc"), tmp_path / "m.jsonl")
    lines = read_jsonl(path)
    assert lines[0] == {"run_id": "abc", "epoch": 1, "split": "train", "branch": None, "metric": "loss",
                        "value": 1.25, "losses": {"total": 1.25, "task/a": 0.1}}
    assert [(x["branch"], x["metric"]) for x in lines[1:]] == [("a", "acc"), ("mm", "acc")]
    assert lines[2]["value"] == 2 / 3
    text = path.read_text()
    assert text.endswith("\n") and len(text.splitlines()) == 3
