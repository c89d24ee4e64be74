import numpy as np
import pytest

from sharingan import tensor as T
from sharingan.nn import Linear
from sharingan.person import (CapacityError, GazeBackbone, PersonInput, PersonModule, make_gaze_token, pad_persons,
                              predict_gaze_vector)
from sharingan.tensor import ConfigurationError, Tensor
from sharingan.tokens import standardize


def test_person_input_validation():
    with pytest.raises(ValueError):
        PersonInput(np.zeros((8, 8, 3), np.uint8), (0.5, 0.1, 0.4, 0.3))
    pad = PersonInput.pad(8)
    assert pad.is_pad and pad.h_bbox == (0.0, 0.0, 0.0, 0.0) and not pad.h_crop.any()


@pytest.mark.parametrize("n,cap,mask", [(2, 6, [1, 1, 0, 0, 0, 0]), (0, 1, [0]), (6, 6, [1] * 6)])
def test_pad_persons(n, cap, mask):
    persons = [PersonInput(np.full((8, 8, 3), i + 1, np.uint8), (0.1, 0.1, 0.2, 0.2)) for i in range(n)]
    slots, m = pad_persons(persons, cap, 8)
    assert m.tolist() == [bool(v) for v in mask]
    assert slots[:n] == persons


def test_pad_persons_capacity():
    persons = [PersonInput(np.zeros((8, 8, 3), np.uint8), (0.1, 0.1, 0.2, 0.2))] * 3
    with pytest.raises(CapacityError):
        pad_persons(persons, 2, 8)


def test_backbone_pad_and_determinism():
    rng = np.random.default_rng(0)
    bb = GazeBackbone((4, 4, 8, 8), rng)
    pads = standardize(np.zeros((3, 16, 16, 3), np.uint8))
    emb = bb(Tensor(pads)).data
    assert np.array_equal(emb[0], emb[1]) and np.array_equal(emb[1], emb[2])
    crops = standardize(np.random.default_rng(1).integers(0, 256, (2, 16, 16, 3), dtype=np.uint8))
    a, b = bb(Tensor(crops)).data, bb(Tensor(crops)).data
    assert np.array_equal(a, b)
    assert not np.allclose(a[0], a[1])
    with pytest.raises(ConfigurationError):
        bb(Tensor(np.zeros((1, 12, 12, 3))))
    with pytest.raises(ConfigurationError):
        bb(Tensor(np.zeros((1, 16, 32, 3))))


def test_predict_gaze_vector_examples():
    v, deg = predict_gaze_vector(Tensor(np.array([[3.0, 4.0], [0.0, -2.0], [0.0, 0.0]])))
    np.testing.assert_allclose(v.data[:2], [[0.6, 0.8], [0.0, -1.0]], atol=1e-7)
    assert deg.tolist() == [False, False, True]
    assert np.all(np.isfinite(v.data))


def test_gaze_vector_unit_norm():
    raw = np.random.default_rng(0).normal(size=(100, 2)) * 10
    v, _ = predict_gaze_vector(Tensor(raw, dtype=np.float64))
    np.testing.assert_allclose(np.linalg.norm(v.data, axis=1), 1.0, atol=1e-6)


def test_gaze_token_zero_and_additivity(f64):
    rng = np.random.default_rng(0)
    pg, pb = Linear(8, 16, rng), Linear(4, 16, rng)
    for p in (pg, pb):
        p.bias.data[:] = 0
    assert np.all(make_gaze_token(Tensor(np.zeros(8)), Tensor(np.zeros(4)), pg, pb).data == 0)
    pg.bias.data[:] = rng.normal(size=16)
    pb.bias.data[:] = rng.normal(size=16)
    g, b = Tensor(rng.normal(size=8)), Tensor(rng.uniform(size=4))
    tok = make_gaze_token(g, b, pg, pb).data
    # forcing the bbox projection to zero
    zero_b = Linear(4, 16, rng)
    zero_b.weight.data[:] = 0
    zero_b.bias.data[:] = 0
    assert np.array_equal(tok, pg(g).data + pb(b).data)
    assert np.array_equal(make_gaze_token(g, b, pg, zero_b).data, pg(g).data)
    b2 = Tensor(rng.uniform(size=4))
    assert not np.allclose(tok, make_gaze_token(g, b2, pg, pb).data)


def test_person_module_pads_identical():
    rng = np.random.default_rng(0)
    pm = PersonModule(16, (4, 4, 8, 8), rng)
    crops = np.zeros((2, 3, 16, 16, 3), np.uint8)
    crops[0, 0] = 200
    out = pm(Tensor(standardize(crops)), Tensor(np.zeros((2, 3, 4))))
    x = out["x_g"].data
    assert np.array_equal(x[0, 1], x[0, 2]) and np.array_equal(x[0, 1], x[1, 0])
    np.testing.assert_allclose(np.linalg.norm(out["gaze_vec"].data, axis=-1), 1.0, atol=1e-5)
