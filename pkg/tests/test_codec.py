import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from partscope.codec import (ANCHOR_PRESETS, BoundingBox, Detection, decode, encode_targets, iou, iou_matrix,
                             kmeans_anchors, nms, postprocess, targets_to_raw, wh_iou)
from partscope.errors import ConfigError, ContractError, DataError, GeometryError


def raster_iou(a, b, size=32):
    """Count unit pixels covered by integer-coordinate boxes."""
    ga = np.zeros((size, size), dtype=bool)
    gb = np.zeros((size, size), dtype=bool)
    ga[int(a.y_min):int(a.y_max), int(a.x_min):int(a.x_max)] = True
    gb[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] = True
    union = (ga | gb).sum()
    return (ga & gb).sum() / union


def int_box(rng, size=32):
    x0, x1 = sorted(rng.choice(size + 1, 2, replace=False))
    y0, y1 = sorted(rng.choice(size + 1, 2, replace=False))
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def real_box(rng):
    x0, y0 = rng.random(2)
    return BoundingBox(x0, y0, x0 + rng.random() * 0.5 + 1e-3, y0 + rng.random() * 0.5 + 1e-3)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def test_box_validation():
    with pytest.raises(ContractError):
        BoundingBox(0.5, 0.1, 0.5, 0.3)
    with pytest.raises(ContractError):
        BoundingBox(0.0, 0.0, float("nan"), 1.0)
    b = BoundingBox.from_center(0.5, 0.5, 0.2, 0.4, 2)
    assert (b.cx, b.cy, b.class_id) == (0.5, 0.5, 2)
    assert_allclose((b.w, b.h, b.area), (0.2, 0.4, 0.08))


def test_detection_confidence_bounds():
    with pytest.raises(ContractError):
        Detection(BoundingBox(0, 0, 1, 1), 0, 1.5)


def test_iou_matches_raster_oracle(rng):
    for _ in range(200):
        a, b = int_box(rng), int_box(rng)
        assert iou(a, b) == raster_iou(a, b)


def test_iou_identity_and_disjoint():
    a = BoundingBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(2, 0, 3, 1)) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.lists(st.floats(0.001, 1), min_size=4, max_size=4))
def test_iou_symmetric_and_bounded(xy, wh):
    a = BoundingBox(xy[0], xy[1], xy[0] + wh[0], xy[1] + wh[1])
    b = BoundingBox(xy[2], xy[3], xy[2] + wh[2], xy[3] + wh[3])
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


def test_iou_matrix_agrees_with_scalar(rng):
    boxes = [real_box(rng) for _ in range(6)]
    arr = np.array([b.as_array() for b in boxes])
    m = iou_matrix(arr, arr)
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes):
            assert_allclose(m[i, j], iou(a, b), rtol=1e-12)


def test_wh_iou_is_cocentered():
    assert_allclose(wh_iou([[0.2, 0.4]], [[0.4, 0.2], [0.2, 0.4]]), [[0.04 / 0.12, 1.0]])


# ---------------------------------------------------------------------------
# kmeans anchors
# ---------------------------------------------------------------------------


def test_kmeans_cost_is_monotone(rng):
    for seed in range(20):
        wh = rng.random((60, 2)) * 0.5 + 0.02
        res = kmeans_anchors(wh, 5, seed=seed)
        assert all(b <= a + 1e-12 for a, b in zip(res.cost_history, res.cost_history[1:]))
        assert np.all(res.pairs >= wh.min(axis=0) - 1e-12) and np.all(res.pairs <= wh.max(axis=0) + 1e-12)
        areas = res.pairs[:, 0] * res.pairs[:, 1]
        assert np.all(np.diff(areas) >= 0)


def test_kmeans_degenerate_cases(rng):
    uniform = np.tile([[0.3, 0.2]], (10, 1))
    assert_allclose(kmeans_anchors(uniform, 1).pairs, [[0.3, 0.2]])
    wh = rng.random((7, 2)) * 0.5 + 0.05
    res = kmeans_anchors(wh, 7)
    order = np.argsort(wh[:, 0] * wh[:, 1])
    assert_allclose(res.pairs, wh[order])
    assert res.cost_history[-1] == 0.0


def test_kmeans_errors():
    with pytest.raises(DataError):
        kmeans_anchors(np.tile([[0.3, 0.2]], (10, 1)), 2)
    with pytest.raises(DataError):
        kmeans_anchors([[0.1, 0.1]], 2)
    with pytest.raises(ConfigError):
        kmeans_anchors([[0.1, 0.1]], 0)
    with pytest.raises(DataError):
        kmeans_anchors([[0.1, -0.1], [0.2, 0.2]], 1)


def test_kmeans_deterministic(rng):
    wh = rng.random((50, 2)) + 0.01
    assert_allclose(kmeans_anchors(wh, 4, seed=3).pairs, kmeans_anchors(wh, 4, seed=3).pairs)


def test_anchor_presets():
    assert ANCHOR_PRESETS["darknet_mini"] == 9 and ANCHOR_PRESETS["tinydarknet_mini"] == 6


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------

ANCHORS = np.array([[0.1, 0.1], [0.3, 0.2], [0.5, 0.6]])


def test_encode_layout():
    box = BoundingBox.from_center(0.55, 0.30, 0.3, 0.2, 1)
    t = encode_targets([box], 4, ANCHORS, 3)
    assert t.shape == (4, 4, 3, 8)
    row, col = 1, 2
    slot = t[row, col, 1]
    assert_allclose(slot, [0.55 * 4 - 2, 0.3 * 4 - 1, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0], atol=1e-12)
    assert t[..., 4].sum() == 1


def test_encode_falls_back_to_next_anchor_then_drops():
    same = [BoundingBox.from_center(0.5, 0.5, 0.3, 0.2, 0)] * 4
    t, dropped = encode_targets(same, 2, ANCHORS, 1, return_dropped=True)
    assert t[1, 1, :, 4].tolist() == [1.0, 1.0, 1.0]
    assert dropped == 1


def test_encode_rejects_bad_input():
    with pytest.raises(DataError):
        encode_targets([BoundingBox.from_center(0.5, 0.5, 0.1, 0.1, 5)], 4, ANCHORS, 3)
    with pytest.raises(DataError):
        encode_targets([BoundingBox(1.2, 0.1, 1.4, 0.2)], 4, ANCHORS, 3)


def test_center_on_far_edge_goes_to_last_cell():
    t = encode_targets([BoundingBox.from_center(1.0, 1.0, 0.2, 0.2, 0)], 4, ANCHORS, 1)
    assert t[3, 3, :, 4].sum() == 1


def random_boxes(rng, n, c):
    out = []
    for _ in range(n):
        w, h = rng.uniform(0.05, 0.4, 2)
        cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
        out.append(BoundingBox.from_center(cx, cy, w, h, int(rng.integers(c))))
    return out


def test_roundtrip(rng):
    for _ in range(50):
        boxes = random_boxes(rng, int(rng.integers(1, 6)), 4)
        t, dropped = encode_targets(boxes, 7, ANCHORS, 4, return_dropped=True)
        if dropped:
            continue
        dets = decode(targets_to_raw(t), ANCHORS, conf_threshold=0.5)
        assert len(dets) == len(boxes)
        got = sorted((d.box.as_array().tolist(), d.class_id) for d in dets)
        want = sorted((b.as_array().tolist(), b.class_id) for b in boxes)
        for (ga, gc), (wa, wc) in zip(got, want):
            assert gc == wc
            assert_allclose(ga, wa, atol=1e-6)


def test_decode_shape_check():
    with pytest.raises(GeometryError):
        decode(np.zeros((4, 4, 20)), ANCHORS)
    with pytest.raises(GeometryError):
        decode(np.zeros((4, 3, 24)), ANCHORS)


def test_decode_confidence_is_obj_times_class_prob():
    raw = np.zeros((1, 1, 7))
    raw[0, 0, 4] = 0.0          # objectness 0.5
    raw[0, 0, 5:] = [np.log(3.0), 0.0]  # class probs 0.75 / 0.25
    (det,) = decode(raw, [[0.5, 0.5]], conf_threshold=0.0)
    assert_allclose(det.confidence, 0.5 * 0.75)
    assert det.class_id == 0
    assert_allclose(det.box.as_array(), [0.25, 0.25, 0.75, 0.75])


# ---------------------------------------------------------------------------
# nms
# ---------------------------------------------------------------------------


def brute_nms(dets, thr):
    remaining = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].class_id, i))
    kept = []
    while remaining:
        i = remaining.pop(0)
        kept.append(dets[i])
        remaining = [j for j in remaining
                     if dets[j].class_id != dets[i].class_id or iou(dets[i].box, dets[j].box) <= thr]
    return kept


def random_dets(rng, n):
    return [Detection(b, b.class_id, float(rng.random())) for b in random_boxes(rng, n, 2)]


def test_nms_matches_oracle_and_properties(rng):
    for _ in range(100):
        dets = random_dets(rng, int(rng.integers(0, 15)))
        kept = nms(dets, 0.45)
        assert kept == brute_nms(dets, 0.45)
        assert all(k in dets for k in kept)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert a.class_id != b.class_id or iou(a.box, b.box) <= 0.45


def test_nms_chain_suppression():
    # A suppresses B, B would suppress C, but C survives because B is gone
    a = Detection(BoundingBox(0.0, 0.0, 0.4, 0.4), 0, 0.9)
    b = Detection(BoundingBox(0.1, 0.0, 0.5, 0.4), 0, 0.8)
    c = Detection(BoundingBox(0.25, 0.0, 0.65, 0.4), 0, 0.7)
    assert iou(a.box, b.box) > 0.45 and iou(b.box, c.box) > 0.45 and iou(a.box, c.box) <= 0.45
    assert nms([c, b, a]) == [a, c]


def test_nms_keeps_other_classes():
    a = Detection(BoundingBox(0.0, 0.0, 0.4, 0.4, 0), 0, 0.9)
    b = Detection(BoundingBox(0.0, 0.0, 0.4, 0.4, 1), 1, 0.8)
    assert nms([a, b]) == [a, b]


def test_postprocess_batch():
    t = encode_targets([BoundingBox.from_center(0.3, 0.3, 0.2, 0.2, 0)], 4, ANCHORS, 2)
    raw = np.stack([targets_to_raw(t)] * 2)
    dets = postprocess(raw, ANCHORS, 0.5, 0.45, ["a", "b"])
    assert [d.sample_id for d in dets] == ["a", "b"]
