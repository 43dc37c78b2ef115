import struct

import numpy as np
import pytest

from fcnlab import layers as L
from fcnlab.errors import GraphError, ParseError, ShapeError, StateError
from fcnlab.graph import (Graph, load_checkpoint, read_checkpoint, whole_image_equals_patch_batch,
                          write_checkpoint)

from conftest import chain_net, graph_grad_check


def identity_graph():
    g = Graph()
    g.add_input("data", 1)
    g.add_conv("id", "data", 1, 1, weights=np.ones((1, 1, 1, 1)))
    return g


def diamond(rng):
    g = Graph()
    g.add_input("data", 2)
    g.add_conv("a", "data", 3, 3, pad=1, rng=rng)
    g.add_relu("ra", "a")
    g.add_conv("b1", "ra", 2, 1, rng=rng)
    g.add_conv("b2", "ra", 2, 3, pad=1, rng=rng)
    g.add_sum("s", ["b1", "b2"])
    return g


def test_identity_graph(rng):
    x = rng.standard_normal((1, 1, 5, 4))
    assert np.array_equal(identity_graph().forward(x), x)


def test_arbitrary_size(rng):
    g = chain_net([("conv", dict(out=2, k=3, s=2)), ("relu", {})])
    assert g.forward(rng.standard_normal((1, 2, 9, 9))).shape == (1, 2, 4, 4)
    assert g.forward(rng.standard_normal((1, 2, 17, 11))).shape == (1, 2, 8, 5)


def test_diamond_vs_manual(rng):
    g = diamond(rng)
    x = rng.standard_normal((2, 2, 6, 7))
    cp = {n: g.nodes[n].op.conv_params(g) for n in ("a", "b1", "b2")}
    h = L.relu_forward(L.conv2d_forward(x, cp["a"]))
    expected = L.conv2d_forward(h, cp["b1"]) + L.conv2d_forward(h, cp["b2"])
    assert np.abs(g.forward(x) - expected).max() < 1e-12


def test_error_names_node(rng):
    g = chain_net([("conv", dict(out=2, k=5))])
    with pytest.raises(GraphError) as info:
        g.forward(rng.standard_normal((1, 2, 3, 3)))
    assert "conv0" in str(info.value)


def test_duplicate_and_undefined():
    g = Graph()
    g.add_input("data", 1)
    with pytest.raises(GraphError):
        g.add_relu("data", "data")
    with pytest.raises(GraphError):
        g.add_relu("r", "nope")


def test_wrong_input_channels():
    with pytest.raises(GraphError):
        identity_graph().forward(np.ones((1, 2, 3, 3)))


def test_backward_before_forward():
    with pytest.raises(StateError):
        identity_graph().backward(np.ones((1, 1, 2, 2)))


def test_backward_zero(rng):
    g = diamond(rng)
    y = g.forward(rng.standard_normal((1, 2, 5, 5)))
    g.backward(np.zeros_like(y))
    assert all(not p.grad.any() for p in g.params.values())


def test_backward_shape_mismatch(rng):
    g = identity_graph()
    g.forward(np.ones((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        g.backward(np.ones((1, 1, 2, 2)))


def test_three_layer_finite_differences(rng):
    g = chain_net([("conv", dict(out=3, k=3, s=2, pad=1)), ("relu", {}), ("conv", dict(out=2, k=2)),
                   ("pool", dict(k=2, kind="average")), ("conv", dict(out=2, k=1))])
    x = rng.standard_normal((1, 2, 9, 9))
    assert graph_grad_check(g, x) < 1e-6


def test_diamond_finite_differences(rng):
    assert graph_grad_check(diamond(rng), rng.standard_normal((1, 2, 5, 6))) < 1e-6


def test_fan_out_sum_of_branches(rng):
    g = diamond(rng)
    x = rng.standard_normal((1, 2, 5, 5))
    gy = rng.standard_normal(g.forward(x).shape)
    g.zero_grads()
    g.forward(x)
    g.backward(gy)
    both = g.params["a.weight"].grad.copy()
    single = []
    for branch in ("b1", "b2"):
        h = Graph()
        h.add_input("data", 2)
        h.add_conv("a", "data", 3, 3, pad=1, weights=g.params["a.weight"].value)
        h.add_relu("ra", "a")
        h.add_conv(branch, "ra", 2, g.nodes[branch].op.kernel, pad=g.nodes[branch].op.pad,
                   weights=g.params[f"{branch}.weight"].value, bias=g.params[f"{branch}.bias"].value)
        h.forward(x)
        h.backward(gy)
        single.append(h.params["a.weight"].grad)
    assert np.abs(both - (single[0] + single[1])).max() < 1e-12


def test_grads_accumulate(rng):
    g = diamond(rng)
    x = rng.standard_normal((1, 2, 5, 5))
    gy = np.ones(g.forward(x).shape)
    g.backward(gy)
    once = g.grads()
    g.forward(x)
    g.backward(gy)
    assert all(np.allclose(g.params[k].grad, 2 * v) for k, v in once.items())
    g.zero_grads()
    assert all(not p.grad.any() for p in g.params.values())


def test_dropout_seeded(rng):
    g = Graph()
    g.add_input("data", 1)
    g.add_dropout("d", "data", 0.5)
    x = np.ones((1, 1, 8, 8))
    assert np.array_equal(g.forward(x, train=True, seed=3), g.forward(x, train=True, seed=3))
    assert np.array_equal(g.forward(x, train=False), x)


# -- whole image vs patch batch ------------------------------------------------------------

def _unpadded(stride):
    return chain_net([("conv", dict(out=3, k=3, s=stride)), ("relu", {}), ("conv", dict(out=2, k=1))], seed=4)


def test_single_patch(rng):
    g = _unpadded(1)
    rep = whole_image_equals_patch_batch(g, rng.standard_normal((2, 3, 3)), np.array([[1]]))
    assert rep.n_patches == 1 and rep.max_rel_error == 0.0


def test_non_overlapping_patches(rng):
    g = _unpadded(3)
    rep = whole_image_equals_patch_batch(g, rng.standard_normal((2, 6, 6)), rng.integers(0, 2, (2, 2)))
    assert rep.n_patches == 4 and not rep.overlapping
    assert rep.max_rel_error < 1e-12


def test_overlapping_patches(rng):
    g = _unpadded(1)
    rep = whole_image_equals_patch_batch(g, rng.standard_normal((2, 6, 6)), rng.integers(0, 2, (4, 4)))
    assert rep.overlapping
    assert rep.max_rel_error < 1e-8


# -- checkpoints ---------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    g = diamond(rng)
    path = tmp_path / "c.bin"
    write_checkpoint(path, g)
    h = diamond(np.random.default_rng(99))
    load_checkpoint(path, h)
    assert all(np.array_equal(g.params[k].value, h.params[k].value) for k in g.params)
    write_checkpoint(tmp_path / "d.bin", h)
    assert (tmp_path / "d.bin").read_bytes() == path.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "c.bin"
    p.write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(ParseError) as info:
        read_checkpoint(p)
    assert info.value.offset == 0


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "c.bin"
    write_checkpoint(p, {"w": np.arange(4.0)})
    data = p.read_bytes()
    p.write_bytes(data[:-5])
    with pytest.raises(ParseError) as info:
        read_checkpoint(p)
    # the values block starts after magic, header, name and dims
    assert info.value.offset == 8 + 8 + 4 + 1 + 4 + 4


def test_checkpoint_trailing_bytes(tmp_path):
    p = tmp_path / "c.bin"
    write_checkpoint(p, {"w": np.zeros(1)})
    p.write_bytes(p.read_bytes() + b"x")
    with pytest.raises(ParseError):
        read_checkpoint(p)


def test_checkpoint_missing_param(tmp_path, rng):
    p = tmp_path / "c.bin"
    write_checkpoint(p, {"other": np.zeros(1)})
    with pytest.raises(ParseError):
        load_checkpoint(p, diamond(rng))


def test_checkpoint_header_layout(tmp_path):
    p = tmp_path / "c.bin"
    write_checkpoint(p, {"ab": np.ones((2, 3))})
    data = p.read_bytes()
    assert data[:8] == b"FCNCKPT\0"
    assert struct.unpack("<II", data[8:16]) == (1, 1)
    assert len(data) == 16 + 4 + 2 + 4 + 8 + 6 * 8
