import struct
import zlib

import numpy as np
import pytest

from conftest import end_to_end_grad_errors
from tcnn import nn
from tcnn.model import (
    TCNN,
    ArchConfig,
    WeightsFormatError,
    export_activations,
    load_weights,
    param_table,
    save_weights,
    train_step,
)

PER_LAYER = {"conv1": 3904, "conv2": 18496, "fc1": 12416, "fc2": 8256, "output": 195}


def expected_count(cfg):
    """Closed-form parameter count, written out independently of param_shapes."""
    k1, k2 = cfg.conv1_kernel, cfg.conv2_kernel
    f1, f2 = cfg.conv1_filters, cfg.conv2_filters
    total = f1 * (cfg.in_channels * k1 * k1 + 1)
    total += f2 * (f1 * k2 * k2 + 1)
    total += (f1 + f2 + 1) * cfg.dense1
    total += (cfg.dense1 + 1) * cfg.dense2
    total += (cfg.dense2 + 1) * cfg.classes
    return total


def tiny_arch(**kw):
    base = dict(input_size=16, conv1_filters=2, conv1_kernel=3, conv1_stride=2,
                conv2_filters=3, conv2_kernel=2, dense1=4, dense2=3)
    base.update(kw)
    return ArchConfig(**base)


# ------------------------------------------------------------------ counting


def test_default_count():
    model = TCNN()
    assert model.count_params() == 43267
    assert dict(param_table()) == PER_LAYER
    assert sum(PER_LAYER.values()) == 43267


def test_two_classes_drops_one_output_row():
    assert TCNN(ArchConfig(classes=2)).count_params() == 43267 - 65


def test_conv_only_submodel():
    assert TCNN().count_params(["conv1", "conv2"]) == 22400


def test_degenerate_config():
    cfg = ArchConfig(input_size=1, conv1_filters=1, conv1_kernel=1, conv1_stride=1, pool_window=1,
                     pool_stride=1, conv2_filters=1, conv2_kernel=1, dense1=1, dense2=1, classes=1)
    assert TCNN(cfg).count_params() == expected_count(cfg) == 11


@pytest.mark.parametrize("kw", [{}, {"classes": 5}, {"dense1": 7, "dense2": 9}, {"conv2_filters": 10}])
def test_count_formula(kw):
    cfg = ArchConfig(**kw)
    assert TCNN(cfg).count_params() == expected_count(cfg)


def test_inconsistent_arch_rejected():
    with pytest.raises(ValueError):
        ArchConfig(input_size=20, conv1_kernel=11, conv1_stride=3).validate()
    with pytest.raises(ValueError):
        ArchConfig(conv1_reduce="median").validate()


def test_same_seed_same_parameters():
    a, b = TCNN(seed=3), TCNN(seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert not np.array_equal(a.params["conv1.weight"], TCNN(seed=4).params["conv1.weight"])
    assert all(not v.any() for k, v in a.params.items() if k.endswith(".bias"))


# ------------------------------------------------------------------ forward


def test_forward_shapes():
    model = TCNN()
    logits, acts = model.forward(np.zeros((2, 1, 224, 224), np.float32), capture=True)
    assert logits.shape == (2, 3)
    assert acts["conv1"].shape == (2, 32, 72, 72)
    assert acts["conv2"].shape == (2, 64, 34, 34)
    assert acts["energy"].shape == (2, 96)


def test_forward_rejects_wrong_input():
    with pytest.raises(nn.ShapeError):
        TCNN().forward(np.zeros((1, 1, 200, 200), np.float32))


def test_zero_input_batch():
    model = TCNN(seed=1)
    logits, acts = model.forward(np.zeros((3, 1, 224, 224), np.float32), capture=True)
    assert not acts["energy"].any()
    # zero biases everywhere, so the whole head collapses to the zero vector
    np.testing.assert_array_equal(logits, np.zeros_like(logits))
    model.params["output.bias"][:] = [0.5, -1.0, 2.0]
    logits = model.forward(np.zeros((3, 1, 224, 224), np.float32))
    np.testing.assert_array_equal(logits, np.tile([0.5, -1.0, 2.0], (3, 1)))


def test_energy_invariant_to_period_translation():
    # a pattern with period 12 shifted by 6 px (two conv1 strides, one pool cell)
    # gives the same texture statistics up to boundary effects, which vanish for a
    # periodic input whose period divides the sampling grid
    yy, xx = np.mgrid[0:236, 0:236]
    tile = (np.sin(2 * np.pi * yy / 12) + np.cos(2 * np.pi * xx / 12)).astype(np.float64)
    model = TCNN(seed=0, dtype=np.float64)
    a = model.forward(tile[None, None, :224, :224], capture=True)[1]["energy"]
    b = model.forward(tile[None, None, 12:236, 12:236], capture=True)[1]["energy"]
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_max_reduce_variant_runs():
    model = TCNN(tiny_arch(conv1_reduce="max"), dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 1, 16, 16))
    _, _, grads = model.loss_and_grads(x, [0, 1])
    assert set(grads) == set(model.params)


# ------------------------------------------------------------------ training


def test_overfit_single_batch():
    rng = np.random.default_rng(0)
    model = TCNN(seed=0)
    # standardized inputs, as the training loop feeds them
    x = rng.standard_normal((4, 1, 224, 224)).astype(np.float32)
    y = np.array([0, 1, 2, 1])
    state, cfg = nn.OptimizerState(), nn.OptimizerConfig()
    losses = []
    for _ in range(500):
        losses.append(train_step(model, x, y, state, cfg))
        if losses[-1] < 0.01 and len(losses) % 10 == 0:
            break
    assert losses[-1] < 0.01
    # Adam's per-step loss jitters slightly; the trend over blocks of 10 steps must not rise
    blocks = np.array(losses[: len(losses) // 10 * 10]).reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(blocks) <= 0)


def test_zero_learning_rate_fixed_point():
    rng = np.random.default_rng(1)
    model = TCNN(tiny_arch(), seed=0, dtype=np.float64)
    before = {k: v.copy() for k, v in model.params.items()}
    x = rng.standard_normal((3, 1, 16, 16))
    state, cfg = nn.OptimizerState(), nn.OptimizerConfig("sgd", lr=0.0)
    losses = [train_step(model, x, [0, 1, 2], state, cfg) for _ in range(3)]
    assert losses[0] == losses[1] == losses[2]
    for k, v in before.items():
        np.testing.assert_array_equal(model.params[k], v)


def test_train_step_rejects_mismatched_targets():
    model = TCNN(tiny_arch())
    with pytest.raises(ValueError):
        train_step(model, np.zeros((2, 1, 16, 16)), [0], nn.OptimizerState(), nn.OptimizerConfig())


def test_train_step_non_finite_loss():
    model = TCNN(tiny_arch(), dtype=np.float64)
    model.params["output.bias"][:] = [np.inf, 0, 0]
    before = model.params["fc1.weight"].copy()
    with pytest.raises(nn.NonFiniteError), np.errstate(invalid="ignore"):
        train_step(model, np.ones((1, 1, 16, 16)), [1], nn.OptimizerState(), nn.OptimizerConfig())
    np.testing.assert_array_equal(model.params["fc1.weight"], before)


def test_end_to_end_gradient_sample():
    errors = end_to_end_grad_errors(per_layer=4)
    assert sum(len(v) for v in errors.values()) == 20
    assert max(max(v) for v in errors.values()) < 1e-3


def test_training_is_deterministic():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 1, 16, 16))

    def run():
        model = TCNN(tiny_arch(), seed=2, dtype=np.float64)
        state = nn.OptimizerState()
        return [train_step(model, x, [0, 1, 2, 1], state, nn.OptimizerConfig()) for _ in range(5)]

    assert run() == run()


# ------------------------------------------------------------------ weights file


def test_round_trip_byte_identical(tmp_path):
    model = TCNN(seed=7)
    n = save_weights(model, tmp_path / "a.tcnw")
    again = load_weights(tmp_path / "a.tcnw")
    save_weights(again, tmp_path / "b.tcnw")
    assert (tmp_path / "a.tcnw").read_bytes() == (tmp_path / "b.tcnw").read_bytes()
    for k in model.params:
        np.testing.assert_array_equal(model.params[k], again.params[k])
    # payload is the float32 values plus small per-record headers
    assert 43267 * 4 < n < 43267 * 4 + 400


def test_file_layout(tmp_path):
    save_weights(TCNN(), tmp_path / "w.tcnw")
    data = (tmp_path / "w.tcnw").read_bytes()
    assert data[:4] == b"TCNW"
    assert struct.unpack_from("<II", data, 4) == (1, 10)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])
    (nlen,) = struct.unpack_from("<H", data, 12)
    assert data[14:14 + nlen] == b"conv1.weight"


def test_float64_model_is_narrowed(tmp_path):
    model = TCNN(seed=1, dtype=np.float64)
    save_weights(model, tmp_path / "w.tcnw")
    back = load_weights(tmp_path / "w.tcnw", dtype=np.float64)
    np.testing.assert_array_equal(back.params["fc1.weight"], model.params["fc1.weight"].astype(np.float32))


@pytest.mark.parametrize("mutate", [
    lambda d: d[:-10],
    lambda d: d[:20],
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:100] + bytes([d[100] ^ 0xFF]) + d[101:],
    lambda d: b"",
])
def test_corrupted_files_rejected(tmp_path, mutate):
    save_weights(TCNN(), tmp_path / "w.tcnw")
    bad = tmp_path / "bad.tcnw"
    bad.write_bytes(mutate((tmp_path / "w.tcnw").read_bytes()))
    with pytest.raises(WeightsFormatError):
        load_weights(bad)


def test_version_mismatch_rejected(tmp_path):
    save_weights(TCNN(), tmp_path / "w.tcnw")
    data = bytearray((tmp_path / "w.tcnw").read_bytes())
    data[4:8] = struct.pack("<I", 2)
    data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])))
    (tmp_path / "v.tcnw").write_bytes(bytes(data))
    with pytest.raises(WeightsFormatError, match="version"):
        load_weights(tmp_path / "v.tcnw")


def test_shape_mismatch_rejected(tmp_path):
    save_weights(TCNN(ArchConfig(classes=2)), tmp_path / "w.tcnw")
    with pytest.raises(WeightsFormatError):
        load_weights(tmp_path / "w.tcnw")
    assert load_weights(tmp_path / "w.tcnw", ArchConfig(classes=2)).count_params() == 43267 - 65


# ------------------------------------------------------------------ activations


def test_activation_export_shapes():
    model = TCNN(seed=0)
    img = np.random.default_rng(0).uniform(0, 1, (224, 224)).astype(np.float32)
    maps1 = export_activations(model, img, "conv1")
    maps2 = export_activations(model, img, "conv2")
    assert len(maps1) == 32 and all(m.shape == (72, 72) and m.dtype == np.uint8 for m in maps1)
    assert len(maps2) == 64 and all(m.shape == (34, 34) for m in maps2)


def test_activation_constant_input_is_mid_gray():
    maps = export_activations(TCNN(seed=0), np.full((224, 224), 0.5, np.float32), "conv1")
    assert all((m == 128).all() for m in maps)


def test_activation_unknown_layer():
    with pytest.raises(KeyError):
        export_activations(TCNN(), np.zeros((224, 224), np.float32), "fc1")
