import itertools

import numpy as np
import pytest

from moedet import autodiff as ad
from moedet.autodiff import Tensor
from moedet.expert import ExpertConfig
from moedet.geometry import Box, giou
from moedet.losses import (LossWeights, RoutingStats, assign_targets, detection_loss, dfl_loss, load_balance_loss,
                           routing_entropy, routing_stats, select_level, total_loss)

CFG = ExpertConfig(hidden_channels=8, num_bins=16, num_classes=4, image_size=64)


# ---------------------------------------------------------------- assignment


def test_level_rule_boundaries():
    assert select_level(Box(0, 0, 7.9, 3), 64) == 0
    assert select_level(Box(0, 0, 8, 3), 64) == 1
    assert select_level(Box(0, 0, 3, 15.9), 64) == 1
    assert select_level(Box(0, 0, 16, 16), 64) == 2


def test_assign_box_of_side_sixteen():
    # max side 16 is not below 64/4, so the stated rule picks stride 32
    (a,) = assign_targets([(Box(24, 24, 40, 40), 1)], CFG)
    assert (a.level, a.row, a.col, a.class_id) == (2, 1, 1, 1)
    # centre (32, 32) falls in cell (1, 1), whose anchor (48, 48) lies past the
    # bottom-right corner: those two distances clamp to zero
    np.testing.assert_allclose(a.distances, [24 / 32, 24 / 32, 0.0, 0.0])


def test_assign_stride_sixteen_box():
    (a,) = assign_targets([(Box(20, 20, 32, 32), 0)], CFG)
    assert (a.level, a.row, a.col) == (1, 1, 1)
    # anchor (24, 24): left/top 4 px, bottom/right 8 px
    np.testing.assert_allclose(a.distances, [0.25, 0.25, 0.5, 0.5])


def test_assign_clamps_to_bin_range():
    cfg = ExpertConfig(hidden_channels=8, num_bins=2, num_classes=1, image_size=64)
    (a,) = assign_targets([(Box(0, 0, 60, 60), 0)], cfg)
    assert max(a.distances) == 1.0 and min(a.distances) >= 0.0


def test_assign_empty_and_degenerate():
    assert assign_targets([], CFG) == []
    with pytest.raises(ValueError):
        assign_targets([(Box(5, 5, 5, 9), 0)], CFG)


def test_smaller_box_wins_shared_cell():
    big = (Box(10, 10, 20, 20), 0)      # side 10 -> level 1, centre (15, 15)
    small = (Box(12, 12, 18, 18), 1)    # side 6 -> level 0, different level
    assert len(assign_targets([big, small], CFG)) == 2
    a = (Box(5, 5, 15, 15), 2)          # area 100
    b = (Box(0, 0, 20, 20), 3)          # area 400, side 20 -> level 2
    c = (Box(4, 4, 16, 16), 3)          # side 12 -> level 1, centre (10, 10), same cell as a
    out = assign_targets([c, a, b], CFG)
    assert [x.class_id for x in out if x.level == 1] == [2]


def test_assignment_is_order_independent():
    gts = [(Box(5, 5, 15, 15), 2), (Box(4, 4, 16, 16), 3), (Box(30, 30, 60, 62), 1), (Box(40, 2, 45, 7), 0)]
    ref = assign_targets(gts, CFG)
    for perm in itertools.permutations(gts):
        assert assign_targets(list(perm), CFG) == ref


# ---------------------------------------------------------------- dfl


def test_dfl_uniform_integer_target_is_log_n():
    with ad.default_dtype(np.float64):
        v = dfl_loss(Tensor(np.zeros((4, 16))), [3, 0, 15, 7]).item()
    assert abs(v - np.log(16)) < 1e-9


def test_dfl_uniform_half_target_is_log_n():
    with ad.default_dtype(np.float64):
        v = dfl_loss(Tensor(np.zeros((4, 16))), [1.5] * 4).item()
    assert abs(v - np.log(16)) < 1e-9


def test_dfl_confident_prediction_is_near_zero():
    logits = np.full((4, 16), -30.0)
    logits[:, 5] = 30.0
    with ad.default_dtype(np.float64):
        assert dfl_loss(Tensor(logits), [5, 5, 5, 5]).item() < 1e-12


def test_dfl_two_bin_formula():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 6))
    t = np.array([0.3, 2.0, 4.75, 5.0])
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    ref = 0.0
    for s in range(4):
        lo = min(int(np.floor(t[s])), 4)
        ref += -((lo + 1 - t[s]) * logp[s, lo] + (t[s] - lo) * logp[s, lo + 1])
    with ad.default_dtype(np.float64):
        assert dfl_loss(Tensor(logits), t).item() == pytest.approx(ref / 4, abs=1e-12)


def test_dfl_rejects_out_of_range():
    with pytest.raises(ValueError):
        dfl_loss(Tensor(np.zeros((4, 4))), [0, 0, 0, 3.5])
    with pytest.raises(ValueError):
        dfl_loss(Tensor(np.zeros((4, 4))), [-0.1, 0, 0, 0])


# ---------------------------------------------------------------- detection loss


def _zero_logits(cfg, batch=1, value=-20.0):
    box = [Tensor(np.zeros((batch, 4 * cfg.num_bins, g, g))) for g in cfg.grid_sizes]
    cls = [Tensor(np.full((batch, cfg.num_classes, g, g), value)) for g in cfg.grid_sizes]
    return box, cls


def test_perfect_prediction_has_near_zero_loss():
    cfg = CFG
    # integer-stride distances so the one-hot bins decode the box exactly
    gts = [(Box(16, 16, 48, 48), 2)]  # anchor (48, 48): distances (1, 1, 0, 0) strides
    assign = assign_targets(gts, cfg)
    with ad.default_dtype(np.float64):
        box, cls = _zero_logits(cfg)
        for a in assign:
            cls[a.level].data[0, a.class_id, a.row, a.col] = 20.0
            bl = box[a.level].data
            bl[0, :, a.row, a.col] = -20.0
            for side, d in enumerate(a.distances):
                assert d == int(d)
                bl[0, side * cfg.num_bins + int(d), a.row, a.col] = 20.0
        loss, parts = detection_loss(box, cls, [assign], cfg)
    assert parts["box"] < 1e-6 and parts["dfl"] < 1e-6 and parts["cls"] < 1e-6


def test_background_only_loss():
    with ad.default_dtype(np.float64):
        box, cls = _zero_logits(CFG, batch=2)
        loss, parts = detection_loss(box, cls, [[], []], CFG)
    assert loss.item() < 1e-6 and parts["box"] == 0.0 and parts["dfl"] == 0.0


def test_loss_is_non_negative_on_random_inputs():
    rng = np.random.default_rng(1)
    cfg = ExpertConfig(hidden_channels=4, num_bins=4, num_classes=2, image_size=32)
    for _ in range(1000):
        n = int(rng.integers(0, 4))
        gts = []
        for _ in range(n):
            x1, y1 = rng.uniform(0, 24, 2)
            w, h = rng.uniform(1, 8, 2)
            gts.append((Box(x1, y1, x1 + w, y1 + h), int(rng.integers(2))))
        box = [Tensor(3 * rng.standard_normal((1, 16, g, g))) for g in cfg.grid_sizes]
        cls = [Tensor(3 * rng.standard_normal((1, 2, g, g))) for g in cfg.grid_sizes]
        with ad.default_dtype(np.float64):
            loss, _ = detection_loss(box, cls, [assign_targets(gts, cfg)], cfg)
        assert loss.item() >= 0.0


def test_loss_components_match_direct_computation():
    rng = np.random.default_rng(2)
    cfg = ExpertConfig(hidden_channels=4, num_bins=8, num_classes=3, image_size=64)
    gts = [[(Box(3, 4, 9, 10), 1), (Box(20, 18, 50, 60), 2)], [(Box(30, 30, 41, 43), 0)]]
    assign = [assign_targets(g, cfg) for g in gts]
    box = [rng.standard_normal((2, 32, g, g)) for g in cfg.grid_sizes]
    cls = [rng.standard_normal((2, 3, g, g)) for g in cfg.grid_sizes]
    with ad.default_dtype(np.float64):
        loss, parts = detection_loss([Tensor(b) for b in box], [Tensor(c) for c in cls], assign, cfg,
                                     LossWeights(0.5, 7.5, 1.5))
    # classification: BCE summed over classes, averaged over every cell of every level and image
    bce, cells = 0.0, 0
    for k, c in enumerate(cls):
        t = np.zeros_like(c)
        for b, image_assign in enumerate(assign):
            for a in image_assign:
                if a.level == k:
                    t[b, a.class_id, a.row, a.col] = 1
        p = 1 / (1 + np.exp(-c))
        bce += np.sum(-(t * np.log(p) + (1 - t) * np.log(1 - p)))
        cells += c.shape[0] * c.shape[2] * c.shape[3]
    g_sum, positives = 0.0, 0
    for b, image_assign in enumerate(assign):
        for a in image_assign:
            stride = cfg.strides[a.level]
            logits = box[a.level][b, :, a.row, a.col].reshape(4, 8)
            probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
            d = probs @ np.arange(8) * stride
            cx, cy = (a.col + 0.5) * stride, (a.row + 0.5) * stride
            pred = Box(cx - d[0], cy - d[1], cx + d[3], cy + d[2])
            g_sum += 1 - giou(pred, a.box)
            positives += 1
    assert parts["cls"] == pytest.approx(bce / cells, rel=1e-10)
    assert parts["box"] == pytest.approx(g_sum / positives, rel=1e-10)
    assert loss.item() == pytest.approx(0.5 * parts["cls"] + 7.5 * parts["box"] + 1.5 * parts["dfl"], rel=1e-12)


def test_loss_invariant_to_gt_order():
    rng = np.random.default_rng(3)
    gts = [(Box(3, 4, 9, 10), 1), (Box(20, 18, 50, 60), 2), (Box(30, 30, 41, 43), 0), (Box(4, 5, 10, 9), 3)]
    box = [Tensor(rng.standard_normal((1, 64, g, g))) for g in CFG.grid_sizes]
    cls = [Tensor(rng.standard_normal((1, 4, g, g))) for g in CFG.grid_sizes]
    values = set()
    for perm in itertools.permutations(gts):
        with ad.default_dtype(np.float64):
            values.add(detection_loss(box, cls, [assign_targets(list(perm), CFG)], CFG)[0].item())
    assert len(values) == 1


# ---------------------------------------------------------------- routing


def test_routing_stats_examples():
    alpha = np.array([[0.9, 0.1], [0.6, 0.4], [0.2, 0.8], [0.7, 0.3]])
    s = routing_stats([Tensor(alpha)])
    assert s.f[0].tolist() == [0.75, 0.25]
    u = routing_stats([Tensor(np.full((3, 2), 0.5))])
    assert u.f[0].tolist() == [1.0, 0.0]
    np.testing.assert_allclose(u.P[0].data, [0.5, 0.5])
    p = routing_stats([Tensor(np.array([[0.6, 0.4], [0.7, 0.3]]), dtype=np.float64)])
    np.testing.assert_allclose(p.P[0].data, [0.65, 0.35], atol=1e-15)


@pytest.mark.parametrize("E", [1, 2, 4])
@pytest.mark.parametrize("I", [1, 3])
def test_load_balance_anchors(E, I):
    with ad.default_dtype(np.float64):
        uniform = RoutingStats([np.full(E, 1 / E)] * I, [Tensor(np.full(E, 1 / E))] * I)
        onehot = np.eye(E)[0]
        collapse = RoutingStats([onehot] * I, [Tensor(onehot)] * I)
        assert abs(load_balance_loss(uniform, E, I).item() - 1.0) < 1e-9
        assert abs(load_balance_loss(collapse, E, I).item() - E) < 1e-9


def test_load_balance_worked_case():
    with ad.default_dtype(np.float64):
        stats = RoutingStats([np.array([0.75, 0.25])], [Tensor(np.array([0.6, 0.4]))])
        assert abs(load_balance_loss(stats, 2, 1).item() - 1.1) < 1e-9


def test_load_balance_gradient_flows_through_p_only():
    with ad.default_dtype(np.float64):
        logits = Tensor(np.array([[2.0, 0.0], [1.0, 0.5], [0.0, 1.0]]), requires_grad=True)
        alpha = ad.softmax(logits, axis=1)
        stats = routing_stats([alpha])
        ad.backward(load_balance_loss(stats, 2, 1))
    a = alpha.data
    f = stats.f[0]
    # d/dlogit of 2 * sum_e f_e * mean_b alpha_be, f constant
    expected = np.zeros_like(a)
    for b in range(3):
        g = 2 * f / 3
        expected[b] = a[b] * (g - np.dot(g, a[b]))
    np.testing.assert_allclose(logits.grad, expected, atol=1e-12)


def test_load_balance_rejects_wrong_level_count():
    with pytest.raises(ValueError):
        load_balance_loss(RoutingStats([np.ones(2) / 2], [Tensor(np.ones(2) / 2)]), 2, 3)


def test_total_loss_cases():
    with ad.default_dtype(np.float64):
        assert total_loss(1.0, 1.1, 0.5).item() == pytest.approx(1.55, abs=1e-12)
        assert total_loss(2.5, 7.0, 0.0).item() == 2.5
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.1)


def test_routing_entropy():
    np.testing.assert_allclose(routing_entropy(np.array([[0.5, 0.5], [1.0, 0.0]])), [np.log(2), 0.0])
