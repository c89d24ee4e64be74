import numpy as np
import pytest

from sharingan import tensor as T
from sharingan.decoders import (HEATMAP_SIZE, ContractError, DPTHeatmapDecoder, InOutHead, PointDecoder, cell_center,
                                heatmap_argmax)
from sharingan.tensor import ConfigurationError, Tensor


def zero_biases(module):
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data[:] = 0


@pytest.mark.parametrize("grid", [2, 3, 7])
def test_dpt_shape(grid):
    rng = np.random.default_rng(0)
    dec = DPTHeatmapDecoder(32, grid, rng, fusion_width=8)
    taps = [Tensor(rng.normal(size=(2, grid * grid + 2, 32))) for _ in range(4)]
    assert dec(taps, grid * grid).shape == (2, HEATMAP_SIZE, HEATMAP_SIZE)


def test_dpt_contracts():
    rng = np.random.default_rng(0)
    dec = DPTHeatmapDecoder(32, 3, rng, fusion_width=8)
    taps = [Tensor(np.zeros((1, 11, 32)))] * 4
    with pytest.raises(ContractError):
        dec(taps, 9, n_persons=2)
    with pytest.raises(ConfigurationError):
        dec(taps[:3], 9)


def test_dpt_zero_in_zero_out():
    rng = np.random.default_rng(0)
    dec = DPTHeatmapDecoder(32, 3, rng, fusion_width=8)
    zero_biases(dec)
    out = dec([Tensor(np.zeros((1, 11, 32)))] * 4, 9).data
    assert np.all(out == 0)


def test_dpt_ignores_non_image_rows():
    rng = np.random.default_rng(0)
    dec = DPTHeatmapDecoder(32, 3, rng, fusion_width=8)
    taps = [rng.normal(size=(1, 11, 32)) for _ in range(4)]
    a = dec([Tensor(t) for t in taps], 9).data
    for t in taps:
        t[:, 9:] = rng.normal(size=(1, 2, 32)) * 100
    b = dec([Tensor(t) for t in taps], 9).data
    assert np.array_equal(a, b)


def test_dpt_grad_to_taps():
    from sharingan.gradcheck import grad_check

    rng = np.random.default_rng(0)
    with T.default_dtype(np.float64):
        dec = DPTHeatmapDecoder(16, 2, rng, fusion_width=4)
        taps = {f"tap{i}": T.parameter(rng.normal(size=(1, 6, 16))) for i in range(4)}
        w = Tensor(rng.normal(size=(1, 64, 64)))
        rep = grad_check(lambda: (dec(list(taps.values()), 4) * w).sum(), taps, max_entries=20)
    assert rep.passed, rep.format()


def test_point_decoder():
    rng = np.random.default_rng(0)
    dec = PointDecoder(16, rng)
    for p in dec.parameters():
        p.data[:] = 0
    assert np.all(dec(Tensor(rng.normal(size=(3, 16)))).data == 0.5)
    dec = PointDecoder(16, rng)
    out = dec(Tensor(rng.normal(size=(1000, 16)) * 5)).data
    assert np.all((out > 0) & (out < 1))


def test_inout_head():
    rng = np.random.default_rng(0)
    head = InOutHead(32, rng)
    assert len(head.mlp.layers) == 7
    widths = [l.weight.shape[0] for l in head.mlp.layers]
    assert widths == [64, 32, 16, 8, 4, 2, 1]
    a, b = Tensor(rng.normal(size=(50, 32))), Tensor(rng.normal(size=(50, 32)))
    p = head(a, b).data
    assert np.all((p > 0) & (p < 1))
    assert not np.allclose(p, head(b, a).data)
    for q in head.parameters():
        q.data[:] = 0
    assert np.all(head(a, b).data == 0.5)
    with pytest.raises(ConfigurationError):
        InOutHead(24, rng)


def test_heatmap_argmax_examples():
    hm = np.zeros((64, 64))
    hm[32, 16] = 1
    assert tuple(heatmap_argmax(hm)) == (0.2578125, 0.5078125)
    assert tuple(heatmap_argmax(np.ones((64, 64)))) == (0.0078125, 0.0078125)
    assert cell_center(32, 16) == (0.2578125, 0.5078125)


def test_heatmap_argmax_scan_oracle():
    rng = np.random.default_rng(0)
    maps = rng.integers(0, 5, size=(20, 64, 64)).astype(float)
    out = heatmap_argmax(maps)
    for m, (x, y) in zip(maps, out):
        best, where = -np.inf, None
        for r in range(64):
            for c in range(64):
                if m[r, c] > best:
                    best, where = m[r, c], (r, c)
        assert (x, y) == ((where[1] + 0.5) / 64, (where[0] + 0.5) / 64)
