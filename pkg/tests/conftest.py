import numpy as np
import pytest

from slimforge import autodiff as ad
from slimforge.graph_ir import ChannelMask, ModelGraph, LayerNode, ResidualGroup


def fd_grad(f, x0, h=1e-5):
    """Central finite differences of scalar-valued f at x0 (fp64)."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_grad(f_tensor, x0, rtol=1e-4, h=1e-5):
    """Compare autodiff gradient of f_tensor (Tensor -> scalar Tensor)
    against central differences; asserts max relative error < rtol."""
    x0 = np.asarray(x0, dtype=np.float64)
    x = ad.Tensor(x0.copy(), requires_grad=True)
    y = f_tensor(x)
    y.backward()
    num = fd_grad(lambda v: float(f_tensor(ad.Tensor(v)).data.sum()), x0, h)
    scale = np.maximum(np.abs(num), np.maximum(np.abs(x.grad), 1e-3))
    rel = np.abs(x.grad - num) / scale
    assert rel.max() < rtol, f"max rel err {rel.max():.2e}"


def random_slimmable_chain(rng, depth=None):
    """Small random slimmable graph: conv+bn+relu chain with an optional
    residual mini-group; returns a valid ModelGraph."""
    from slimforge.graph_ir import _Builder

    b = _Builder(tags=("deployable", "slimmable"))
    b.add("input", "input", channels=3)
    c_prev = 3
    x = "input"
    depth = depth if depth is not None else int(rng.integers(1, 3))
    for i in range(depth):
        c = int(rng.integers(2, 7))
        k = int(rng.choice([1, 3]))
        x = b.conv_bn_relu(f"c{i}", x, c_prev, c, k)
        c_prev = c
    groups = []
    if rng.random() < 0.6:
        c = int(rng.integers(2, 7))
        y1c = b.conv(f"blk_conv", x, c_prev, c, 3)
        y1 = b.bn(f"blk_bn", y1c, c)
        y2c = b.conv(f"ds_conv", x, c_prev, c, 1)
        y2 = b.bn(f"ds_bn", y2c, c)
        x = b.add("res_add", "add", [y1, y2])
        x = b.add("res_relu", "relu", [x])
        c_prev = c
        groups.append(ResidualGroup(1, ["blk_bn"], "ds_bn"))
    c = int(rng.integers(2, 7))
    x = b.conv_bn_relu("tail", x, c_prev, c, 1)
    b.add("output", "output", [x])
    b.g.residual_groups = groups
    return b.g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
