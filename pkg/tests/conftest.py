import numpy as np
import pytest

from fcnlab.graph import Graph


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max() / scale)


def graph_grad_check(g, x, seed=0, eps=1e-5):
    """Worst relative error between backprop and central differences of <w, g(x)>."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(g.forward(x).shape)

    def objective():
        return float((g.forward(x, keep=False) * w).sum())

    g.zero_grads()
    g.forward(x)
    gx = g.backward(w)[g.inputs[0]]
    worst = rel_err(gx, numeric_grad(objective, x, eps))
    for name, p in g.params.items():
        if p.learnable:
            worst = max(worst, rel_err(p.grad, numeric_grad(objective, p.value, eps)))
    return worst


def chain_net(layers, in_channels=2, seed=0, positive=False):
    """Build a line net from (kind, args) tuples."""
    rng = np.random.default_rng(seed)
    g = Graph()
    src = g.add_input("data", in_channels)
    for i, (kind, kw) in enumerate(layers):
        name = f"{kind}{i}"
        if kind == "conv":
            shape = (kw["out"], g.channels(src), kw["k"], kw["k"])
            w = rng.uniform(0.1, 1.0, shape) if positive else rng.standard_normal(shape) * 0.5
            src = g.add_conv(name, src, kw["out"], kw["k"], kw.get("s", 1), kw.get("pad", 0),
                             kw.get("d", 1), weights=w, bias=rng.standard_normal(kw["out"]) * 0.1)
        elif kind == "pool":
            src = g.add_pool(name, src, kw["k"], kw.get("s", kw["k"]), kw.get("pad", 0), kw.get("kind", "max"))
        elif kind == "relu":
            src = g.add_relu(name, src)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, description, seconds, limit); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text, secs, limit = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {n:2d}  {text}  ({secs:.1f} s / limit {limit} s)")
