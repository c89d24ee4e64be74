import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharingan import tensor as T
from sharingan.decoders import ContractError
from sharingan.losses import (LossWeights, build_gt_heatmap, global_loss, loss_angular, loss_heatmap, loss_inout,
                              loss_point, point_to_cell)
from sharingan.tensor import Tensor

from conftest import check_grads


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_loss_heatmap_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(64, 64))
    assert loss_heatmap(t(a), a).item() == 0
    gt = np.zeros((64, 64))
    gt[5, 9] = 1
    assert loss_heatmap(t(np.zeros((64, 64))), gt).item() == 1.0
    b = rng.normal(size=(64, 64))
    ref = 0.0
    for r in range(64):
        for c in range(64):
            ref += (a[r, c] - b[r, c]) ** 2
    assert loss_heatmap(t(a), b).item() == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ContractError):
        loss_heatmap(t(a), np.zeros((32, 32)))


def test_loss_point_examples():
    assert loss_point(t([0.5, 0.5]), [0.5, 0.5]).item() == 0
    assert loss_point(t([0.0, 0.0]), [1.0, 1.0]).item() == 2.0
    assert loss_point(t([0.2, 0.4]), [0.5, 0.8]).item() == pytest.approx(0.25, abs=1e-12)


def test_loss_angular_fixed_points():
    v = np.array([0.6, 0.8])
    assert abs(loss_angular(t(v), v)[0].item()) < 1e-6
    assert loss_angular(t(v), [-0.8, 0.6])[0].item() == pytest.approx(1.0, abs=1e-6)
    assert loss_angular(t(v), -v)[0].item() == pytest.approx(2.0, abs=1e-6)
    _, valid = loss_angular(t([[1.0, 0.0]]), [[0.0, 0.0]])
    assert valid.tolist() == [False]


@settings(max_examples=50, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi), st.floats(0.01, 100))
def test_loss_angular_scale_invariant_and_bounded(a, b, scale):
    pred = t([math.cos(a), math.sin(a)])
    gt = np.array([math.cos(b), math.sin(b)])
    l1 = loss_angular(pred, gt)[0].item()
    l2 = loss_angular(pred, gt * scale)[0].item()
    assert l1 == pytest.approx(l2, abs=1e-9)
    assert -1e-12 <= l1 <= 2 + 1e-12


def test_loss_inout_examples():
    assert loss_inout(t(0.5), 1).item() == pytest.approx(math.log(2), abs=1e-6)
    assert loss_inout(t(0.5), 0).item() == pytest.approx(math.log(2), abs=1e-6)
    assert loss_inout(t(0.9), 0).item() == pytest.approx(-math.log(0.1), abs=1e-6)
    assert loss_inout(t(1 - 1e-9), 1).item() < 1e-6
    assert np.isfinite(loss_inout(t(0.0), 1).item())


def test_global_loss_examples():
    mask = np.ones(1, bool)
    total, _ = global_loss({"reg": t([0.0]), "ang": t([0.0]), "io": t([0.0])}, LossWeights(), mask)
    assert total.item() == 0
    total, vals = global_loss({"reg": t([0.01]), "ang": t([0.2]), "io": t([0.7])}, LossWeights(100, 3, 1), mask)
    assert total.item() == pytest.approx(2.3, abs=1e-12)
    parts = {"reg": t([0.3, 0.5]), "ang": t([0.2, 0.1]), "io": t([0.7, 0.4])}
    m = np.ones(2, bool)
    base = global_loss(parts, LossWeights(10, 3, 1), m)[0].item()
    dbl = global_loss(parts, LossWeights(20, 3, 1), m)[0].item()
    assert dbl - base == pytest.approx(10 * 0.4, abs=1e-12)
    with pytest.raises(ContractError):
        global_loss(parts, LossWeights(), np.zeros(2, bool))


def test_global_loss_masks():
    parts = {"reg": t([1.0, 100.0, 3.0]), "ang": t([1.0, 100.0, 5.0]), "io": t([1.0, 100.0, 2.0])}
    mask = np.array([True, False, True])
    inframe = np.array([True, True, False])
    total, vals = global_loss(parts, LossWeights(1, 1, 1), mask, reg_mask=inframe)
    assert vals == {"reg": 1.0, "ang": 1.0, "io": 1.5}
    assert total.item() == 3.5
    assert LossWeights.for_variant("heatmap").reg == 1000 and LossWeights.for_variant("point").reg == 100


def test_masked_persons_get_zero_gradient():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True, dtype=np.float64)
    mask = np.array([[True, False, True], [False, True, True]])
    reg = x * x
    total, _ = global_loss({"reg": reg, "ang": x * 2.0, "io": T.exp(x)}, LossWeights(), mask)
    T.backward(total)
    assert np.all(x.grad[~mask] == 0) and np.all(x.grad[mask] != 0)


def test_loss_grads():
    rng = np.random.default_rng(0)
    gt = rng.normal(size=(2, 64, 64))
    assert check_grads(lambda p: loss_heatmap(p, gt).sum(), [rng.normal(size=(2, 64, 64))]) < 1e-4
    assert check_grads(lambda p: loss_point(p, [0.3, 0.6]).sum(), [rng.uniform(size=(3, 2))]) < 1e-4
    g = rng.normal(size=(3, 2))
    assert check_grads(lambda p: loss_angular(T.l2_normalize(p), g)[0].sum(), [rng.normal(size=(3, 2))]) < 1e-4
    assert check_grads(lambda p: loss_inout(T.sigmoid(p), [1, 0, 1]).sum(), [rng.normal(size=3)]) < 1e-4


def test_gt_heatmap_examples():
    hm = build_gt_heatmap([(0.5, 0.5)])
    assert hm.shape == (64, 64) and np.unravel_index(hm.argmax(), hm.shape) == (32, 32) and hm[32, 32] == 1
    assert hm[32, 35] == pytest.approx(math.exp(-0.5)) and hm[35, 32] == pytest.approx(0.6065, abs=1e-4)
    two = build_gt_heatmap([(0.1, 0.1), (0.9, 0.8)])
    assert two[point_to_cell(0.1, 0.1)] == 1 and two[point_to_cell(0.9, 0.8)] == 1
    with pytest.raises(ContractError):
        build_gt_heatmap([])
    assert point_to_cell(1.0, 1.0) == (63, 63)
