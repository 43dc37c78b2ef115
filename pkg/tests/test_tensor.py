import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fcnlab.errors import ShapeError
from fcnlab.tensor import as_tensor, channel_argmax, crop, elementwise_add, new_filled, zeros


def test_new_filled_zeros():
    t = new_filled((1, 1, 2, 2), 0)
    assert t.shape == (1, 1, 2, 2) and t.dtype == np.float64
    assert np.all(t == 0)


def test_new_filled_value():
    t = new_filled((1, 3, 1, 1), 1.5)
    assert t.size == 3 and np.all(t == 1.5)


@pytest.mark.parametrize("dims", [(1, 1, 0, 1), (0, 1, 1, 1), (1, 1, 1), (2**20, 2**20, 2, 1)])
def test_bad_dims(dims):
    with pytest.raises(ShapeError):
        zeros(dims)


def test_as_tensor_rejects_3d():
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((2, 2, 2)))


def test_add_identity_and_doubling(rng):
    a = rng.standard_normal((2, 3, 4, 5))
    assert np.array_equal(elementwise_add(a, zeros(a.shape)), a)
    assert np.array_equal(elementwise_add(a, a), 2 * a)


def test_add_mismatch():
    with pytest.raises(ShapeError):
        elementwise_add(zeros((1, 1, 2, 2)), zeros((1, 1, 2, 3)))


def test_add_does_not_mutate(rng):
    a = rng.standard_normal((1, 1, 3, 3))
    before = a.copy()
    elementwise_add(a, a)
    assert np.array_equal(a, before)


def test_crop_identity(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    assert np.array_equal(crop(x, 0, 0, 5, 6), x)


def test_crop_ramp_center():
    ramp = np.arange(16.0).reshape(1, 1, 4, 4)
    # index arithmetic: rows 1..2, cols 1..2 of the row-major ramp
    expected = np.array([[5.0, 6.0], [9.0, 10.0]])
    assert np.array_equal(crop(ramp, 1, 1, 2, 2)[0, 0], expected)


def test_crop_out_of_bounds():
    x = zeros((1, 1, 4, 4))
    with pytest.raises(ShapeError):
        crop(x, 3, 0, 4, 4)
    with pytest.raises(ShapeError):
        crop(x, -1, 0, 2, 2)


def test_crop_returns_copy():
    x = zeros((1, 1, 3, 3))
    y = crop(x, 0, 0, 2, 2)
    y[...] = 7
    assert np.all(x == 0)


def test_argmax_one_hot():
    x = np.zeros((1, 4, 2, 3))
    hot = np.array([[0, 3, 1], [2, 2, 0]])
    for i in range(2):
        for j in range(3):
            x[0, hot[i, j], i, j] = 1.0
    assert np.array_equal(channel_argmax(x)[0], hot)


def test_argmax_ties_to_lowest():
    assert np.all(channel_argmax(np.ones((2, 5, 3, 3))) == 0)


def test_argmax_vs_scan(rng):
    x = rng.integers(0, 3, (2, 3, 6, 7)).astype(float)   # many ties
    out = channel_argmax(x)
    for n in range(2):
        for i in range(6):
            for j in range(7):
                best = 0
                for c in range(1, 3):
                    if x[n, c, i, j] > x[n, best, i, j]:
                        best = c
                assert out[n, i, j] == best


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(-1e6, 1e6)),
       st.data())
def test_crop_matches_slicing(x, data):
    h, w = x.shape[2:]
    oh = data.draw(st.integers(0, h - 1))
    ow = data.draw(st.integers(0, w - 1))
    ch = data.draw(st.integers(1, h - oh))
    cw = data.draw(st.integers(1, w - ow))
    assert np.array_equal(crop(x, oh, ow, ch, cw), x[:, :, oh:oh + ch, ow:ow + cw])
