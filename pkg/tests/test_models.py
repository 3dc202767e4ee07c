import itertools
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from partscope import tensor as T
from partscope.errors import ConfigError, DataError, GeometryError
from partscope.models import (BACKBONES, DEFAULT_ANCHORS_PER_BACKBONE, FreezePolicy, apply_freeze, build_detection,
                              build_recognition, decode_weights, encode_weights, load_weights, restore, save_weights,
                              snapshot)
from partscope.train import Adam


def anchors(a):
    return np.linspace(0.05, 0.6, 2 * a).reshape(a, 2)


@pytest.mark.parametrize("backbone", BACKBONES)
def test_detection_shape_law(backbone):
    rng = np.random.default_rng(0)
    for s, a, c in itertools.product((4, 8, 13), (3, 6, 9), (3, 29)):
        model = build_detection(backbone, s, anchors(a), c, width=4, max_channels=16)
        size = model.input_size
        with T.no_grad():
            out = model(T.Tensor(rng.random((1, size, size, 3), dtype=np.float32)))
        assert out.shape[1:] == model.output_shape == (s, s, a * (5 + c))


def test_detection_geometry_errors():
    with pytest.raises(GeometryError):
        build_detection("darknet_mini", 5, anchors(3), 3, input_size=64)
    with pytest.raises(GeometryError):
        build_detection("darknet_mini", 3, anchors(3), 3, input_size=72)  # stride 24
    with pytest.raises(ConfigError):
        build_detection("resnet", 4, anchors(3), 3)


def test_anchor_presets():
    assert DEFAULT_ANCHORS_PER_BACKBONE == {"darknet_mini": 9, "squeezenet_mini": 9, "tinydarknet_mini": 6}


@pytest.mark.parametrize("head", ["LIGHT", "INT", "FULL"])
def test_recognition_heads(head):
    model = build_recognition(head, 5, input_size=32, seed=1)
    x = T.Tensor(np.random.default_rng(0).random((3, 32, 32, 3), dtype=np.float32))
    model.eval()
    p = model(x).data
    assert p.shape == (3, 5)
    assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert model.base_frozen == (head != "FULL")


def test_recognition_errors():
    with pytest.raises(ConfigError):
        build_recognition("HUGE", 3)
    with pytest.raises(ConfigError):
        build_recognition("FULL", 1)
    with pytest.raises(GeometryError):
        build_recognition("INT", 3, input_size=16)


def test_freeze_policies():
    model = build_detection("darknet_mini", 4, anchors(3), 3, width=4, max_channels=16)
    apply_freeze(model, FreezePolicy("all_but_last_k", 3))
    layers = model.param_layers()
    trainable = {id(p) for layer in layers[-3:] for p in layer.parameters()}
    for p in model.parameters():
        assert p.requires_grad == (id(p) in trainable)
    apply_freeze(model, FreezePolicy("none"))
    assert all(p.requires_grad for p in model.parameters())
    with pytest.raises(ConfigError):
        apply_freeze(model, FreezePolicy("all_but_last_k", len(layers) + 1))
    with pytest.raises(ConfigError):
        FreezePolicy("some")


def test_frozen_tensors_stay_bit_identical():
    rng = np.random.default_rng(0)
    model = build_detection("tinydarknet_mini", 4, anchors(3), 2, width=4, max_channels=16)
    apply_freeze(model, FreezePolicy("all_but_last_k", 3))
    frozen = [p for p in model.parameters() if not p.requires_grad]
    before = [p.data.copy() for p in frozen]
    opt = Adam(model.parameters(), 1e-2)
    x = T.Tensor(rng.random((2, 128, 128, 3), dtype=np.float32))
    for _ in range(3):
        loss = (model(x) ** 2.0).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p, b in zip(frozen, before):
        assert_array_equal(p.data, b)
    assert all(p.grad is None for p in frozen)


def test_weight_container_roundtrip(tmp_path):
    model = build_detection("squeezenet_mini", 4, anchors(3), 3, width=4, max_channels=16, seed=3)
    path = str(tmp_path / "w.gcrd")
    save_weights(model, path)
    other = build_detection("squeezenet_mini", 4, anchors(3), 3, width=4, max_channels=16, seed=4)
    load_weights(other, path)
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), other.named_parameters()):
        assert n1 == n2
        assert p1.data.tobytes() == p2.data.tobytes()
    with open(path, "rb") as fh:
        blob = fh.read()
    assert blob[:4] == b"GCRD"
    assert struct.unpack_from("<I", blob, 4)[0] == 1
    assert encode_weights(decode_weights(blob)) == blob


def test_weight_container_layout():
    blob = encode_weights([("w", np.arange(6, dtype=np.float32).reshape(2, 3))])
    expected = (b"GCRD" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"w" + struct.pack("<I", 2)
                + struct.pack("<2I", 2, 3) + np.arange(6, dtype="<f4").tobytes())
    assert blob == expected


def test_weight_container_errors(tmp_path):
    with pytest.raises(DataError):
        decode_weights(b"XXXX" + struct.pack("<I", 1))
    with pytest.raises(DataError):
        decode_weights(b"GCRD" + struct.pack("<I", 2))
    good = encode_weights([("w", np.ones((4, 4), dtype=np.float32))])
    with pytest.raises(DataError):
        decode_weights(good[:-3])
    model = build_recognition("LIGHT", 3, input_size=32)
    path = str(tmp_path / "x.gcrd")
    with open(path, "wb") as fh:
        fh.write(good)
    with pytest.raises(DataError):
        load_weights(model, path)


def test_snapshot_restore():
    model = build_recognition("LIGHT", 3, input_size=32)
    snap = snapshot(model)
    for p in model.parameters():
        p.data += 1
    restore(model, snap)
    for p, s in zip(model.parameters(), snap):
        assert_array_equal(p.data, s)
