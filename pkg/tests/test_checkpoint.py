import numpy as np
import pytest

from eegtrm.checkpoint import load_checkpoint, save_checkpoint
from eegtrm.errors import ValidationError
from eegtrm.hostnet import HostNetConfig, build_model


def test_roundtrip_exact(tmp_path, rng):
    state = {"b.w": rng.standard_normal((3, 1, 2, 2)), "a": rng.standard_normal(5), "scalar": np.array(2.5)}
    save_checkpoint(tmp_path / "c.trmc", state)
    back = load_checkpoint(tmp_path / "c.trmc")
    assert list(back) == ["a", "b.w", "scalar"]
    for k in state:
        assert back[k].shape == state[k].shape
        assert back[k].tobytes() == state[k].tobytes()


def test_records_sorted_by_name(tmp_path):
    save_checkpoint(tmp_path / "c.trmc", {"z": np.zeros(1), "m": np.zeros(1)})
    raw = (tmp_path / "c.trmc").read_bytes()
    assert raw[:8] == b"TRMC\x01\x00\x00\x00"
    assert raw.index(b"m") < raw.index(b"z")


def test_model_state_roundtrip(tmp_path, toy):
    cfg = HostNetConfig(n_classes=2)
    model = build_model(cfg, 20, 128, toy, trm_k=3, seed=5)
    save_checkpoint(tmp_path / "m.trmc", model.state_dict())
    fresh = build_model(cfg, 20, 128, toy, trm_k=3, seed=99)
    fresh.load_state_dict(load_checkpoint(tmp_path / "m.trmc"))
    x = np.random.default_rng(0).standard_normal((3, 20, 128)).astype(np.float32)
    np.testing.assert_array_equal(fresh.forward(x, training=False), model.forward(x, training=False))


def test_rejects_bad_magic_and_truncation(tmp_path, rng):
    save_checkpoint(tmp_path / "c.trmc", {"w": rng.standard_normal((4, 4))})
    raw = (tmp_path / "c.trmc").read_bytes()
    (tmp_path / "bad.trmc").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValidationError, match="not a TRMC"):
        load_checkpoint(tmp_path / "bad.trmc")
    (tmp_path / "short.trmc").write_bytes(raw[:-8])
    with pytest.raises(ValidationError, match="truncated"):
        load_checkpoint(tmp_path / "short.trmc")
    (tmp_path / "cut.trmc").write_bytes(raw[:11])
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "cut.trmc")
