"""Model zoo: shapes, taps, determinism and the checkpoint file format."""
import struct

import numpy as np
import pytest

from ntml import tensor as tn
from ntml.errors import ConfigError, DimensionError, FormatError
from ntml.model import (ArchSpec, ModelCheckpoint, forward, forward_with_taps, init_model,
                        load_checkpoint, predict_logits, save_checkpoint)
from ntml.rng import Rng


def test_param_count_two_block_example():
    arch = ArchSpec(1, 16, (8, 8), 32, 4)
    # 80 + 584 + 4128 + 132
    assert arch.param_count == 4924
    assert init_model(arch, Rng(0)).params.size == 4924


def test_default_arch_shapes():
    arch = ArchSpec()
    names = [n for n, _ in arch.layer_shapes()]
    assert names == ["conv0.weight", "conv0.bias", "conv1.weight", "conv1.bias",
                     "fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"]
    assert arch.tap_names == ("block0", "block1", "penultimate")
    assert arch.flat_features == 16 * 4 * 4


@pytest.mark.parametrize("kwargs", [dict(num_classes=1), dict(input_size=10, conv_filters=(4, 4)),
                                    dict(conv_filters=()), dict(hidden_dense=0)])
def test_arch_validation(kwargs):
    with pytest.raises(ConfigError):
        ArchSpec(**kwargs)


def test_forward_shapes_and_taps():
    arch = ArchSpec(1, 16, (8, 8), 32, 4)
    model = init_model(arch, Rng(1))
    logits, taps = forward_with_taps(model, np.zeros((3, 1, 16, 16), dtype=np.uint8))
    assert logits.shape == (3, 4)
    assert len(taps) == 3
    assert [t.shape for t in taps] == [(3, 8, 8, 8), (3, 8, 4, 4), (3, 32)]
    assert all(np.all(t.data >= 0) for t in taps)


def test_forward_rejects_wrong_shape():
    model = init_model(ArchSpec(), Rng(0))
    with pytest.raises(DimensionError):
        forward_with_taps(model, np.zeros((1, 1, 8, 8)))


def test_init_is_seeded():
    a = init_model(ArchSpec(), Rng(3)).params
    b = init_model(ArchSpec(), Rng(3)).params
    c = init_model(ArchSpec(), Rng(4)).params
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_init_biases_zero_and_kaiming_scale():
    arch = ArchSpec(1, 16, (32,), 64, 4)
    w = init_model(arch, Rng(0)).tensors()
    assert np.all(w["conv0.bias"].data == 0) and np.all(w["fc1.bias"].data == 0)
    assert w["fc0.weight"].data.std() == pytest.approx(np.sqrt(2 / arch.flat_features), rel=0.05)


def test_batch_invariance():
    model = init_model(ArchSpec(), Rng(2))
    x = Rng(9).integers(0, 256, size=(5, 1, 16, 16)).astype(np.uint8)
    full = predict_logits(model, x)
    for i in range(5):
        single = predict_logits(model, x[i:i + 1])
        np.testing.assert_allclose(single[0], full[i], rtol=0, atol=1e-12)
    np.testing.assert_allclose(predict_logits(model, x, batch_size=2), full, rtol=0, atol=1e-12)


def test_checkpoint_params_read_only():
    model = init_model(ArchSpec(), Rng(0))
    with pytest.raises(ValueError):
        model.params[0] = 1.0


def test_tensors_are_copies():
    model = init_model(ArchSpec(), Rng(0))
    w = model.tensors(requires_grad=True)
    w["fc1.bias"].data += 1.0
    assert np.all(model.tensors()["fc1.bias"].data == 0)


def test_model_gradients_check(small_arch):
    model = init_model(small_arch, Rng(0))
    x = Rng(1).uniform(0.1, 1.0, size=(2, 1, 8, 8))
    weights = model.tensors()
    names = [n for n, _ in small_arch.layer_shapes()]

    def f(params):
        w = dict(zip(names, params))
        logits, _ = forward(small_arch, w, x)
        return tn.sum(tn.square(logits))

    assert tn.grad_check(f, [weights[n] for n in names]) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    model = init_model(ArchSpec(), Rng(11)).with_params(
        init_model(ArchSpec(), Rng(12)).params, epoch=7, stage="ml-student")
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path, ArchSpec())
    assert back.arch == model.arch
    assert back.params.tobytes() == model.params.tobytes()
    assert (back.seed, back.epoch, back.stage, back.tap_names) == (model.seed, 7, "ml-student",
                                                                    model.tap_names)
    assert path.read_bytes()[:4] == b"NTML"


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_model(ArchSpec(), Rng(0)), path)
    data = path.read_bytes()
    for cut in (2, 20, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(path)


def test_checkpoint_trailing_bytes_and_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_model(ArchSpec(), Rng(0)), path)
    data = path.read_bytes()
    path.write_bytes(data + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_arch_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_model(ArchSpec(conv_filters=(8, 8)), Rng(0)), path)
    with pytest.raises(FormatError):
        load_checkpoint(path, ArchSpec())


def test_checkpoint_header_layout(tmp_path):
    arch = ArchSpec(1, 8, (2,), 3, 2)
    model = init_model(arch, Rng(5))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    buf = path.read_bytes()
    assert struct.unpack_from("<IIIII", buf, 4) == (1, 1, 8, 1, 2)
    assert struct.unpack_from("<IIQII", buf, 24) == (3, 2, model.seed, 0, 4)
    assert buf[48:52] == b"init"
    assert struct.unpack_from("<Q", buf, 52)[0] == arch.param_count
    assert len(buf) == 60 + 8 * arch.param_count


def test_bad_param_count_and_stage():
    with pytest.raises(FormatError):
        ModelCheckpoint(ArchSpec(), np.zeros(3))
    with pytest.raises(ConfigError):
        ModelCheckpoint(ArchSpec(), np.zeros(ArchSpec().param_count), stage="weird")
