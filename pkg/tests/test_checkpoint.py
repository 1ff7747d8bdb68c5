import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmlite.checkpoint import ALIGN, checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint
from mmlite.config import PRESETS
from mmlite.errors import FormatError
from mmlite.model import build_model, lite_block_forward, registry_bytes
from mmlite.tensor import Tensor


@pytest.fixture(scope="module")
def st_model():
    return build_model(PRESETS["lite-st-tiny"], seed=3)


@pytest.mark.parametrize("name", ["lite-st-tiny", "medmamba-t-baseline-tiny", "lite-tr-tiny"])
def test_save_load_save_identical(tmp_path, name):
    m = build_model(PRESETS[name], seed=1)
    p = save_checkpoint(m, tmp_path / "a.mmlc")
    m2 = load_checkpoint(p)
    save_checkpoint(m2, tmp_path / "b.mmlc")
    assert (tmp_path / "a.mmlc").read_bytes() == (tmp_path / "b.mmlc").read_bytes()
    assert registry_bytes(m) == registry_bytes(m2)
    assert m2.config == m.config


def test_f64_round_trip():
    m = build_model(PRESETS["lite-st-tiny"], seed=2, dtype=np.float64)
    m2 = model_from_bytes(checkpoint_bytes(m))
    assert m2.dtype == np.float64 and registry_bytes(m) == registry_bytes(m2)


def test_header_layout(st_model):
    buf = checkpoint_bytes(st_model)
    assert buf[:4] == b"MMLC"
    version, cfg_len = struct.unpack("<II", buf[4:12])
    assert version == 1
    assert buf[12:12 + cfg_len].decode().startswith("name=lite-st-tiny")
    assert len(buf) % ALIGN == 0


def test_aliases_restored_as_shared_storage(st_model):
    m = model_from_bytes(checkpoint_bytes(st_model))
    a, b = m["stages.2.blocks.0.ssm.A_log"], m["stages.2.blocks.1.ssm.A_log"]
    assert a is b
    assert set(m.aliases) == set(st_model.aliases)


def test_loaded_alias_mutation_changes_both_blocks(tmp_path):
    m = load_checkpoint(save_checkpoint(build_model(PRESETS["lite-tr-tiny"], seed=4), tmp_path / "t.mmlc"))
    x = Tensor(np.random.default_rng(0).normal(size=(1, 128, 2, 2)).astype(np.float32))
    blocks = m.stages[2][0]
    before = [lite_block_forward(x, w).data.copy() for w in blocks]
    m["stages.2.A_log"].data[...] += 1.0
    after = [lite_block_forward(x, w).data for w in blocks]
    assert len(blocks) == 2
    for b, a in zip(before, after):
        assert np.abs(a - b).max() > 0


def test_bad_magic(st_model):
    buf = bytearray(checkpoint_bytes(st_model))
    buf[0] ^= 0xFF
    with pytest.raises(FormatError) as exc:
        model_from_bytes(bytes(buf))
    assert exc.value.offset == 0


def test_bad_version(st_model):
    buf = bytearray(checkpoint_bytes(st_model))
    buf[4:8] = struct.pack("<I", 9)
    with pytest.raises(FormatError) as exc:
        model_from_bytes(bytes(buf))
    assert exc.value.offset == 4


@given(st.floats(0.0, 0.999))
def test_truncation_detected(frac):
    buf = _buf()
    cut = int(len(buf) * frac)
    with pytest.raises(FormatError) as exc:
        model_from_bytes(buf[:cut])
    assert exc.value.offset is not None and exc.value.offset <= len(buf)


def test_trailing_bytes(st_model):
    with pytest.raises(FormatError):
        model_from_bytes(checkpoint_bytes(st_model) + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "none.mmlc")


_CACHE = {}


def _buf():
    if "b" not in _CACHE:
        _CACHE["b"] = checkpoint_bytes(build_model(PRESETS["lite-st-tiny"], seed=3))
    return _CACHE["b"]
