import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbackdoor import checkpoint, nn
from fedbackdoor.checkpoint import FormatError


def test_roundtrip_is_bit_exact(tmp_path):
    spec = nn.small_cnn(conv_channels=4, hidden=8)
    params = nn.init_params(spec, 1)
    path = tmp_path / "m.fshd"
    checkpoint.save_checkpoint(path, spec, params)
    spec2, params2 = checkpoint.load_checkpoint(path)
    assert spec2 == spec and params2.equals(params)
    assert path.read_bytes()[:5] == b"FSHD1"
    assert checkpoint.dumps_checkpoint(spec2, params2) == path.read_bytes()


def test_header_layout():
    spec = nn.NetworkSpec((2,), [nn.dense(2, 2)], 2)
    params = nn.ParamSet([(0, "weight", np.array([[1, 2], [3, 4]], np.float32)),
                          (0, "bias", np.array([0.5, -1], np.float32))])
    buf = checkpoint.dumps_checkpoint(spec, params)
    (n,) = struct.unpack_from("<I", buf, 5)
    assert buf[9:9 + n].decode() == spec.to_json()
    off = 9 + n
    assert struct.unpack_from("<I", buf, off) == (2,)
    layer, role, ndim, d0, d1 = struct.unpack_from("<IBIII", buf, off + 4)
    assert (layer, role, ndim, d0, d1) == (0, 0, 2, 2, 2)
    assert np.frombuffer(buf, "<f4", 4, off + 4 + 17).tolist() == [1, 2, 3, 4]


def test_float64_params_are_stored_as_f32():
    spec = nn.NetworkSpec((2,), [nn.dense(2, 2)], 2)
    params = nn.init_params(spec, 0, dtype=np.float64)
    _, back = checkpoint.loads_checkpoint(checkpoint.dumps_checkpoint(spec, params))
    assert back.dtype == np.float32
    np.testing.assert_allclose(back.flat(), params.flat(), rtol=1e-7)


def test_spec_mismatch_is_rejected():
    spec = nn.small_cnn(conv_channels=4, hidden=8)
    other = nn.init_params(nn.small_cnn(conv_channels=4, hidden=9), 0)
    with pytest.raises(nn.ShapeMismatchError):
        checkpoint.dumps_checkpoint(spec, other)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_truncation_reports_offset(seed):
    spec = nn.NetworkSpec((3,), [nn.dense(3, 2)], 2)
    buf = checkpoint.dumps_checkpoint(spec, nn.init_params(spec, 0))
    cut = seed % len(buf)
    with pytest.raises(FormatError) as info:
        checkpoint.loads_checkpoint(buf[:cut])
    assert 0 <= info.value.offset <= cut


def test_bad_magic_and_trailing_bytes():
    spec = nn.NetworkSpec((3,), [nn.dense(3, 2)], 2)
    buf = checkpoint.dumps_checkpoint(spec, nn.init_params(spec, 0))
    with pytest.raises(FormatError) as info:
        checkpoint.loads_checkpoint(b"XXXXX" + buf[5:])
    assert info.value.offset == 0
    with pytest.raises(FormatError):
        checkpoint.loads_checkpoint(buf + b"\0")


def test_tensor_file_roundtrip(tmp_path):
    arr = np.random.default_rng(0).random((2, 3, 4)).astype(np.float32)
    checkpoint.save_tensor(tmp_path / "t.bin", arr)
    assert np.array_equal(checkpoint.load_tensor(tmp_path / "t.bin"), arr)
