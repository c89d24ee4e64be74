import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharingan import tensor as T
from sharingan.nn import Linear
from sharingan.tensor import ConfigurationError, Tensor
from sharingan.tokens import ImageTokenizer, embed_patches, patchify, posenc_2d, standardize, unpatchify


@pytest.mark.parametrize("size,patch,n,width", [(224, 16, 196, 768), (112, 16, 49, 768), (48, 16, 9, 768)])
def test_patch_counts(size, patch, n, width):
    g = patchify(np.zeros((size, size, 3)), patch)
    assert g.n == n and g.patches.shape == (n, width)


def test_patchify_indivisible():
    with pytest.raises(ConfigurationError):
        patchify(np.zeros((20, 16, 3)), 16)


def test_constant_image_patches():
    g = patchify(np.full((32, 32, 3), 0.25), 16)
    assert np.all(g.patches.data == np.float32(0.25))


def test_patch_content_raster_order():
    img = np.arange(4 * 6 * 2, dtype=np.float64).reshape(4, 6, 2)
    g = patchify(Tensor(img, dtype=np.float64), 2)
    # patch k = 4 is grid row 1, col 1 -> pixel rows 2..3, cols 2..3
    np.testing.assert_array_equal(g.patches.data[4], img[2:4, 2:4, :].reshape(-1))
    assert (g.grid_h, g.grid_w) == (2, 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(0, 10**6))
def test_patchify_roundtrip_and_count(gh, gw, p, c, seed):
    img = np.random.default_rng(seed).normal(size=(gh * p, gw * p, c)).astype(np.float32)
    g = patchify(img, p)
    assert g.patches.shape[0] == gh * gw
    assert np.array_equal(unpatchify(g, c).data, img)


def test_embed_zero_and_identity():
    rng = np.random.default_rng(0)
    proj = Linear(16 * 16 * 3, 8, rng)
    proj.bias.data[:] = 0
    assert np.all(embed_patches(patchify(np.zeros((32, 32, 3)), 16), proj).data == 0)
    small = Linear(2 * 2 * 1, 6, rng)
    small.weight.data[:] = 0
    small.weight.data[:4, :4] = np.eye(4)
    small.bias.data[:] = 0
    img = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
    g = patchify(img, 2)
    tok = embed_patches(g, small).data
    np.testing.assert_array_equal(tok[:, :4], g.patches.data)
    with pytest.raises(ConfigurationError):
        embed_patches(g, proj)


def test_identical_patches_identical_tokens():
    rng = np.random.default_rng(1)
    block = rng.normal(size=(16, 16, 3))
    img = np.tile(block, (2, 2, 1))
    proj = Linear(768, 16, rng)
    tok = embed_patches(patchify(img, 16), proj).data
    assert np.array_equal(tok[0], tok[3])


def test_posenc_origin_and_axes():
    pe = posenc_2d(4, 4, 16)
    assert np.all(pe[0, 0::2] == 0) and np.all(pe[0, 1::2] == 1)
    assert not np.array_equal(pe[1], pe[4])  # (0,1) vs (1,0)
    with pytest.raises(ConfigurationError):
        posenc_2d(2, 2, 6)


def test_posenc_row_column_split_oracle():
    D = 8
    pe = posenc_2d(3, 5, D)
    r, c = 2, 3
    w = 10000.0 ** (-np.arange(2) * 2 / 4)
    row = np.ravel(np.column_stack([np.sin(r * w), np.cos(r * w)]))
    col = np.ravel(np.column_stack([np.sin(c * w), np.cos(c * w)]))
    np.testing.assert_allclose(pe[r * 5 + c], np.concatenate([row, col]), atol=1e-15)


def test_posenc_distinct_full_grid():
    pe = posenc_2d(14, 14, 768)
    d = np.sqrt(((pe[:, None, :] - pe[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    assert d.min() > 0


def test_tokenizer_posenc_added_exactly(f64):
    rng = np.random.default_rng(0)
    tok = ImageTokenizer(32, 16, 3, 8, rng)
    img = Tensor(rng.normal(size=(2, 32, 32, 3)))
    out = tok(img).data
    emb = embed_patches(patchify(img, 16), tok.proj).data
    assert np.array_equal(out, emb + posenc_2d(2, 2, 8))


def test_standardize():
    x = standardize(np.array([[0, 255, 128]], dtype=np.uint8).reshape(1, 1, 3), dtype=np.float64)
    np.testing.assert_allclose(x.ravel(), [-2.0, 2.0, (128 / 255 - 0.5) / 0.25])
