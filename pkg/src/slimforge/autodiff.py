"""Minimal reverse-mode autodiff on numpy arrays, plus a Session that
executes ModelGraphs forward/backward.

Correctness over speed: convolutions go through im2col, everything runs on
the CPU at desk scale. fp64 inputs stay fp64 (used by the gradient tests);
training runs use fp32.
"""

from __future__ import annotations

import numpy as np

from .graph_ir import ModelGraph


class Tensor:
    """Array with an optional gradient and a taped backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) \
            else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None and t.requires_grad:
                t._backward(t.grad)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_lift(other), Tensor(np.asarray(-1.0))))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, Tensor(np.asarray(-1.0))))

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0)))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g, shape):
    """Reduce gradient g to the given (broadcast-source) shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _binop(a, b, out, da, db):
    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(da(g), a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(db(g), b.data.shape))
    return Tensor(out, parents=(a, b), backward=bw)


def add(a, b):
    return _binop(a, b, a.data + b.data, lambda g: g, lambda g: g)


def mul(a, b):
    return _binop(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    return _binop(a, b, a.data / b.data,
                  lambda g: g / b.data,
                  lambda g: -g * a.data / (b.data ** 2))


def _unop(a, out, da):
    def bw(g):
        if a.requires_grad:
            a._accum(da(g))
    return Tensor(out, parents=(a,), backward=bw)


def relu(a):
    mask = a.data > 0  # subgradient at 0 is 0
    return _unop(a, a.data * mask, lambda g: g * mask)


def absval(a):
    s = np.sign(a.data)  # sign(0) = 0
    return _unop(a, np.abs(a.data), lambda g: g * s)


def square(a):
    return _unop(a, a.data ** 2, lambda g: g * 2.0 * a.data)


def sqrt(a):
    out = np.sqrt(a.data)
    return _unop(a, out, lambda g: g * 0.5 / out)


def exp(a):
    out = np.exp(a.data)
    return _unop(a, out, lambda g: g * out)


def log(a, eps=0.0):
    return _unop(a, np.log(a.data + eps), lambda g: g / (a.data + eps))


def power(a, p):
    out = a.data ** p
    return _unop(a, out, lambda g: g * p * a.data ** (p - 1))


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def da(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _unop(a, out, da)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis, keepdims) * Tensor(np.asarray(1.0 / n))


def reshape(a, shape):
    return _unop(a, a.data.reshape(shape), lambda g: g.reshape(a.data.shape))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _unop(a, a.data.transpose(axes), lambda g: g.transpose(inv))


def concat(tensors, axis=1):
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return Tensor(out, parents=tuple(tensors), backward=bw)


def matmul(a, b):
    return _binop(a, b, a.data @ b.data,
                  lambda g: g @ b.data.T, lambda g: a.data.T @ g)


def gather_rows(a, idx):
    """Pick a[i, idx[i]] for each row i."""
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def da(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return full

    return _unop(a, out, da)


def take_rows(a, idx):
    """Row subset a[idx] (first axis)."""
    out = a.data[idx]

    def da(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return full

    return _unop(a, out, da)


# ---------------------------------------------------------------------------
# convolution / pooling

def _pad_hw(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _im2col(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(cols, x_shape, k, stride, ho, wo):
    n, c, h, w = x_shape
    cols = cols.reshape(n, c, k, k, ho, wo)
    x = np.zeros(x_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return x


def conv2d(x, w, bias=None, stride=1, padding=0):
    """x: (N, Cin, H, W); w: (Cout, Cin, k, k); bias: (Cout,) or None."""
    k = w.data.shape[2]
    xp = _pad_hw(x.data, padding)
    cols, ho, wo = _im2col(xp, k, stride)
    n = x.data.shape[0]
    cout = w.data.shape[0]
    w2 = w.data.reshape(cout, -1)
    out = np.einsum("oc,ncl->nol", w2, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g2 = g.reshape(n, cout, ho * wo)
        if w.requires_grad:
            dw = np.einsum("nol,ncl->oc", g2, cols).reshape(w.data.shape)
            w._accum(dw)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.einsum("oc,nol->ncl", w2, g2)
            dxp = _col2im(dcols, xp.shape, k, stride, ho, wo)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accum(dxp)

    return Tensor(out, parents=parents, backward=bw)


def max_pool2d(x, k, stride, padding=0):
    xp = _pad_hw(x.data, padding, value=-np.inf)
    n, c, h, w = xp.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    windows = np.empty((n, c, k * k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            windows[:, :, i * k + j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    arg = windows.argmax(axis=2)
    out = np.take_along_axis(windows, arg[:, :, None], axis=2)[:, :, 0]

    def da(g):
        dw = np.zeros_like(windows)
        np.put_along_axis(dw, arg[:, :, None], g[:, :, None], axis=2)
        dxp = _col2im(dw.reshape(n, c * k * k, ho * wo), xp.shape, k, stride, ho, wo)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return dxp

    return _unop(x, out, da)


def avg_pool2d(x, k, stride, padding=0):
    xp = _pad_hw(x.data, padding)
    n, c, h, w = xp.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols, _, _ = _im2col(xp.reshape(n * c, 1, h, w), k, stride)
    out = cols.mean(axis=1).reshape(n, c, ho, wo)

    def da(g):
        gcols = np.repeat(g.reshape(n * c, 1, ho * wo), k * k, axis=1) / (k * k)
        dxp = _col2im(gcols, (n * c, 1, h, w), k, stride, ho, wo).reshape(n, c, h, w)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return dxp

    return _unop(x, out, da)


def global_avg_pool(x):
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _unop(x, out, lambda g: np.broadcast_to(g / (h * w), x.data.shape).copy())


def batch_norm(x, gamma, beta, running_mean, running_var, eps=1e-5,
               training=True, momentum=0.9):
    """BN over (N, H, W) per channel. In train mode, running stats (plain
    ndarrays) are updated in place with the given momentum."""
    n, c, h, w = x.data.shape
    if training:
        m = x.data.mean(axis=(0, 2, 3))
        v = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * m
        running_var *= momentum
        running_var += (1 - momentum) * v
        cnt = n * h * w
        inv = 1.0 / np.sqrt(v + eps)
        xhat = (x.data - m.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

        def bw(g):
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gxhat = g * gamma.data.reshape(1, c, 1, 1)
                s1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                dx = inv.reshape(1, c, 1, 1) * (gxhat - s1 / cnt - xhat * s2 / cnt)
                x._accum(dx)

        return Tensor(out, parents=(x, gamma, beta), backward=bw)
    # eval: pure affine transform with frozen stats
    inv = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma.data * inv).reshape(1, c, 1, 1)
    shift = (beta.data - gamma.data * running_mean * inv).reshape(1, c, 1, 1)
    out = x.data * scale + shift
    xhat_e = (x.data - running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat_e).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accum(g * scale)

    return Tensor(out, parents=(x, gamma, beta), backward=bw)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def da(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _unop(x, out, da)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def da(g):
        p = np.exp(out)
        return g - p * g.sum(axis=axis, keepdims=True)

    return _unop(x, out, da)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over rows; logits (N, C), labels int (N,)."""
    lp = log_softmax(logits, axis=-1)
    picked = gather_rows(lp, np.asarray(labels))
    return -tmean(picked)


# ---------------------------------------------------------------------------
# graph execution

class SessionError(RuntimeError):
    pass


def init_params(graph: ModelGraph, seed=0, dtype=np.float32) -> dict:
    """He-style init. Returns {node_id: {name: ndarray}}; batchnorm keeps
    running stats alongside gamma/beta."""
    rng = np.random.default_rng(seed)
    params = {}
    for node in graph.nodes.values():
        if node.kind == "conv":
            k, cin, cout = node.attrs["kernel"], node.attrs["in_channels"], node.attrs["out_channels"]
            fan_in = k * k * cin
            p = {"weight": rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                      (cout, cin, k, k)).astype(dtype)}
            if node.attrs.get("has_bias"):
                p["bias"] = np.zeros(cout, dtype=dtype)
            params[node.id] = p
        elif node.kind == "batchnorm":
            c = node.attrs["channels"]
            params[node.id] = {
                "gamma": np.ones(c, dtype=dtype),
                "beta": np.zeros(c, dtype=dtype),
                "running_mean": np.zeros(c, dtype=dtype),
                "running_var": np.ones(c, dtype=dtype),
            }
        elif node.kind == "fc":
            cin, cout = node.attrs["in_features"], node.attrs["out_features"]
            p = {"weight": rng.normal(0.0, np.sqrt(2.0 / cin), (cin, cout)).astype(dtype)}
            if node.attrs.get("has_bias"):
                p["bias"] = np.zeros(cout, dtype=dtype)
            params[node.id] = p
    return params


TRAINABLE = {"weight", "bias", "gamma", "beta"}


class Session:
    """Owns a graph plus parameters and executes it. Single-threaded during
    forward/backward; distinct Sessions are independent."""

    def __init__(self, graph: ModelGraph, params=None, mode="train", seed=0,
                 bn_momentum=0.9):
        self.graph = graph
        raw = params if params is not None else init_params(graph, seed)
        self.params = {
            nid: {name: (Tensor(np.asarray(arr), requires_grad=True)
                         if name in TRAINABLE else np.asarray(arr).copy())
                  for name, arr in group.items()}
            for nid, group in raw.items()
        }
        self.mode = mode
        self.bn_momentum = bn_momentum
        self._velocity = {}
        self._taped = False

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def trainable(self):
        for nid, group in self.params.items():
            for name, t in group.items():
                if name in TRAINABLE:
                    yield nid, name, t

    def export_params(self) -> dict:
        out = {}
        for nid, group in self.params.items():
            out[nid] = {name: (t.data if isinstance(t, Tensor) else t).copy()
                        for name, t in group.items()}
        return out

    def zero_grad(self):
        for _, _, t in self.trainable():
            t.zero_grad()


def forward(session: Session, batch: Tensor) -> dict:
    """Run the graph on a batch (N, C, H, W); returns id -> activation."""
    g = session.graph
    training = session.mode == "train"
    acts = {}
    for nid in g.order:
        node = g.nodes[nid]
        k = node.kind
        if k == "input":
            if batch.data.ndim != 4 or batch.data.shape[1] != node.attrs["channels"]:
                raise ValueError(
                    f"{nid}: batch shape {batch.data.shape} does not match "
                    f"input channels {node.attrs['channels']}")
            acts[nid] = batch
            continue
        x = acts[node.inputs[0]]
        if k == "conv":
            p = session.params[nid]
            if x.data.shape[1] != node.attrs["in_channels"]:
                raise ValueError(f"{nid}: got {x.data.shape[1]} channels, "
                                 f"expected {node.attrs['in_channels']}")
            acts[nid] = conv2d(x, p["weight"], p.get("bias"),
                               stride=node.attrs["stride"],
                               padding=node.attrs["padding"])
        elif k == "batchnorm":
            p = session.params[nid]
            acts[nid] = batch_norm(x, p["gamma"], p["beta"],
                                   p["running_mean"], p["running_var"],
                                   eps=node.attrs.get("eps", 1e-5),
                                   training=training,
                                   momentum=session.bn_momentum)
        elif k == "relu":
            acts[nid] = relu(x)
        elif k == "add":
            acts[nid] = add(x, acts[node.inputs[1]])
        elif k == "max_pool":
            acts[nid] = max_pool2d(x, node.attrs["kernel"], node.attrs["stride"],
                                   node.attrs["padding"])
        elif k == "avg_pool":
            acts[nid] = avg_pool2d(x, node.attrs["kernel"], node.attrs["stride"],
                                   node.attrs["padding"])
        elif k == "global_pool":
            acts[nid] = global_avg_pool(x)
        elif k == "fc":
            p = session.params[nid]
            flat = reshape(x, (x.data.shape[0], -1))
            y = matmul(flat, p["weight"])
            if "bias" in p:
                y = add(y, p["bias"])
            acts[nid] = y
        elif k == "concat":
            acts[nid] = concat([acts[i] for i in node.inputs], axis=1)
        elif k == "softmax":
            acts[nid] = softmax(x, axis=1)
        elif k == "output":
            acts[nid] = x
        else:
            raise ValueError(f"{nid}: unsupported kind {k!r}")
    session._taped = training
    return acts


def backward(session: Session, loss: Tensor) -> None:
    if not session._taped:
        raise SessionError("backward() requires a prior forward in train mode")
    loss.backward()


def sgd_step(session: Session, lr, momentum=0.0, weight_decay=0.0) -> None:
    for nid, name, t in session.trainable():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        # decay conv/linear weights only: decaying BN scales starves
        # rarely-active channels into permanent dead ReLUs, and biases
        # gain nothing from shrinkage
        if weight_decay and name == "weight":
            g = g + weight_decay * t.data
        key = (nid, name)
        if momentum:
            v = session._velocity.get(key)
            v = momentum * v + g if v is not None else g
            session._velocity[key] = v
            g = v
        t.data = t.data - lr * g
        t.grad = None
