import struct

import numpy as np
import pytest

from cmnet import checkpoint
from cmnet.data import SynthConfig, generate_sequence
from cmnet.errors import FormatError, StateError
from cmnet.layers import ParamStore
from cmnet.model import ContextMotionNet, ModelConfig
from cmnet.train import OptimizerState, TrainConfig, Trainer, adamw_step, evaluate_sequences


def _store(rng, precision="single"):
    store = ParamStore(precision)
    store.add("a.weight", rng.standard_normal((2, 3, 3, 3)))
    store.add("a.bias", rng.standard_normal((1, 2, 1, 1)))
    store.add("flow.x.weight", rng.standard_normal((1, 1, 1, 1)), frozen=True)
    return store


def test_header_layout(rng):
    raw = checkpoint.encode(_store(rng), step=7, seed=3)
    magic, version, step, count = struct.unpack("<4sIQI", raw[:20])
    assert (magic, version, step, count) == (b"CMCK", 1, 7, 4)
    (n,) = struct.unpack("<I", raw[20:24])
    assert raw[24:24 + n] == b"a.bias"


@pytest.mark.parametrize("precision", ["single", "double"])
def test_save_load_save_identical(tmp_path, rng, precision):
    store = _store(rng, precision)
    opt = OptimizerState()
    adamw_step(store, {n: rng.standard_normal(store[n].shape) for n in ("a.weight", "a.bias")}, opt, 1e-3)
    seed = 0xFEDCBA9876543210
    checkpoint.save(tmp_path / "a.cmck", store, opt, 5, seed)

    other = _store(np.random.default_rng(99), precision)
    opt2 = OptimizerState()
    step, got_seed = checkpoint.load(tmp_path / "a.cmck", other, opt2)
    assert (step, got_seed) == (5, seed)
    assert other.is_frozen("flow.x.weight")
    for n in store.names():
        assert other[n].data.tobytes() == store[n].data.tobytes()
    assert opt2.t == opt.t
    checkpoint.save(tmp_path / "b.cmck", other, opt2, step, got_seed)
    assert (tmp_path / "a.cmck").read_bytes() == (tmp_path / "b.cmck").read_bytes()


def test_bad_magic_and_version(tmp_path, rng):
    raw = checkpoint.encode(_store(rng))
    with pytest.raises(FormatError):
        checkpoint.decode(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        checkpoint.decode(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(FormatError):
        checkpoint.decode(raw[:-5])
    with pytest.raises(FormatError):
        checkpoint.decode(raw + b"\0")


def test_load_state_errors(tmp_path, rng):
    store = _store(rng)
    checkpoint.save(tmp_path / "a.cmck", store)
    bigger = _store(rng)
    bigger.add("extra.weight", np.zeros((1, 1, 1, 1)))
    with pytest.raises(StateError):
        checkpoint.load(tmp_path / "a.cmck", bigger)
    smaller = ParamStore("single")
    smaller.add("a.weight", np.zeros((2, 3, 3, 3)))
    with pytest.raises(StateError):
        checkpoint.load(tmp_path / "a.cmck", smaller)


def test_restored_model_metrics_identical(tmp_path):
    seq = generate_sequence(SynthConfig(height=16, width=16), seed=2)
    cfg = ModelConfig(reduction=4, channels=8, hidden=8)
    model = ContextMotionNet(cfg, seed=1)
    tr = Trainer(model, [seq], TrainConfig(total_steps=3, crop=16))
    tr.run()
    tr.save(tmp_path / "m.cmck")
    before, _ = evaluate_sequences(model, [seq])
    fresh = ContextMotionNet(cfg, seed=42)
    checkpoint.load(tmp_path / "m.cmck", fresh.params)
    after, _ = evaluate_sequences(fresh, [seq])
    assert before == after
