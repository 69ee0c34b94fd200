"""Dense float64 tensor engine with reverse-mode automatic differentiation.

Every network in this package is built from the primitives here. Tensors wrap
numpy arrays; each operation records its parents and a backward rule, forming
an implicit DAG that ``backward`` walks once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.float64, copy=False)
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional float64 array with optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False,
                 parents: Sequence["Tensor"] = (), backward: Callable | None = None,
                 name: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = tuple(parents)
        self._backward = backward
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph machinery -----------------------------------------------------
    def backward(self):
        """Accumulate dself/dleaf into .grad of every requires_grad tensor.

        Only scalar roots are accepted. Calling twice accumulates.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        other = _ensure(other)
        return mul(self, _recip(other))

    def __rtruediv__(self, other):
        return mul(_ensure(other), _recip(self))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, parents=parents, backward=backward)
    return Tensor(data)


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                         _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def _recip(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def power(a, p: float) -> Tensor:
    a = _ensure(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = _ensure(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _ensure(a)
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def absolute(a) -> Tensor:
    """|x| with subgradient 0 at 0."""
    a = _ensure(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# -- activations ----------------------------------------------------------------

def relu(a) -> Tensor:
    a = _ensure(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def relu6(a) -> Tensor:
    a = _ensure(a)
    mask = (a.data > 0) & (a.data < 6)  # subgradient 0 at both kinks
    return _make(np.clip(a.data, 0.0, 6.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _ensure(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def hard_sigmoid(a) -> Tensor:
    """clamp((x+3)/6, 0, 1), subgradient 0 at the kinks."""
    a = _ensure(a)
    out = np.clip((a.data + 3.0) / 6.0, 0.0, 1.0)
    mask = (a.data > -3.0) & (a.data < 3.0)
    return _make(out, (a,), lambda g: (g * mask / 6.0,))


def hard_swish(a) -> Tensor:
    """x * relu6(x+3) / 6."""
    a = _ensure(a)
    hs = np.clip(a.data + 3.0, 0.0, 6.0) / 6.0
    inner = (a.data > -3.0) & (a.data < 3.0)
    local = hs + a.data * inner / 6.0
    return _make(a.data * hs, (a,), lambda g: (g * local,))


# -- reductions / shape ----------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[i] for i in axis]))
    else:
        n = a.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _ensure(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _ensure(a)
    out = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_ensure(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(ts), backward)


def getitem(a, idx) -> Tensor:
    a = _ensure(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- softmax family ---------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _ensure(a)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _ensure(a)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"log_softmax axis {axis} out of range for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


# -- spatial ops ------------------------------------------------------------------

def conv2d(x, weight, stride=(1, 1), padding=(0, 0), groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input.

    weight is [O, C/groups, kh, kw]. padding entries may be ints (symmetric)
    or (before, after) pairs; with symmetric padding the output height is
    floor((H+2ph-kh)/sh)+1, analogously for width.
    """
    x, weight = _ensure(x), _ensure(weight)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-D, got shape {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    sh, sw = stride
    pt, pb = (padding[0], padding[0]) if np.isscalar(padding[0]) else padding[0]
    pl, pr = (padding[1], padding[1]) if np.isscalar(padding[1]) else padding[1]
    if c % groups != 0:
        raise ValueError(f"input channels {c} not divisible by groups {groups}")
    if o % groups != 0:
        raise ValueError(f"output channels {o} not divisible by groups {groups}")
    if cg != c // groups:
        raise ValueError(
            f"weight channel dim {cg} != input channels/groups {c // groups}")
    if kh > h + pt + pb or kw > w + pl + pr:
        raise ValueError(
            f"kernel ({kh},{kw}) larger than padded input ({h + pt + pb},{w + pl + pr})")

    pad_any = pt or pb or pl or pr
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pad_any else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]  # [N, C, H', W', kh, kw]

    if groups == 1:
        # single GEMM via tensordot
        out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

        def backward(g):
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            # one GEMM for all kernel positions, then scatter-add the slices
            full = np.tensordot(g, weight.data, axes=([1], [0]))  # [N,H',W',C,kh,kw]
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += \
                        full[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pt:pt + h, pl:pl + w] if pad_any else gxp
            return (gx, gw)

        return _make(out, (x, weight), backward)

    if groups == c and o == c:
        # depthwise: small accumulation loop over kernel taps
        wd = weight.data.reshape(c, kh, kw)
        out = np.zeros((n, c, ho, wo))
        for i in range(kh):
            for j in range(kw):
                out += win[:, :, :, :, i, j] * wd[:, i, j][:, None, None]

        def backward(g):
            gw = np.empty((c, kh, kw))
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gw[:, i, j] = (win[:, :, :, :, i, j] * g).sum(axis=(0, 2, 3))
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += \
                        g * wd[:, i, j][:, None, None]
            gx = gxp[:, :, pt:pt + h, pl:pl + w] if pad_any else gxp
            return (gx, gw.reshape(o, 1, kh, kw))

        return _make(out, (x, weight), backward)

    wing = win.reshape(n, groups, c // groups, ho, wo, kh, kw)
    wg = weight.data.reshape(groups, o // groups, c // groups, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", wing, wg, optimize=True)
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        go = g.reshape(n, groups, o // groups, ho, wo)
        gw = np.einsum("ngchwij,ngohw->gocij", wing, go, optimize=True)
        gw = gw.reshape(o, c // groups, kh, kw)
        gxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                contrib = np.einsum("ngohw,goc->ngchw", go, wg[:, :, :, i, j],
                                    optimize=True).reshape(n, c, ho, wo)
                gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += contrib
        gx = gxp[:, :, pt:pt + h, pl:pl + w] if pad_any else gxp
        return (gx, gw)

    return _make(out, (x, weight), backward)


def global_avg_pool(x) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1] spatial mean."""
    x = _ensure(x)
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW, got {x.shape}")
    return tmean(x, axis=(2, 3), keepdims=True)


def upsample_nearest(x, factor: int) -> Tensor:
    """Integer-factor nearest-neighbor upsampling of NCHW maps."""
    x = _ensure(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


def batchnorm_train(x, gamma, beta, eps: float = 1e-5):
    """Batch normalization over (N,H,W) per channel, training statistics.

    Returns (normalized tensor, batch mean, batch variance); the caller owns
    the running-statistics update.
    """
    x, gamma, beta = _ensure(x), _ensure(gamma), _ensure(beta)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm channel mismatch: x has {c} channels, "
            f"gamma {gamma.shape}, beta {beta.shape}")
    m = n * h * w
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * ivstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (dxhat - s1 / m - xhat * s2 / m) * ivstd[None, :, None, None]
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), backward), mu, var


def batchnorm_infer(x, gamma, beta, running_mean, running_var,
                    eps: float = 1e-5) -> Tensor:
    x = _ensure(x)
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ValueError(f"batchnorm channel mismatch: x has {c} channels")
    scale = gamma.data / np.sqrt(running_var + eps)
    shift = beta.data - running_mean * scale
    sc = Tensor(scale[None, :, None, None])
    sh = Tensor(shift[None, :, None, None])
    # inference path treats running stats as constants; gradients still flow
    # to x through the affine map below when needed
    out = x.data * sc.data + sh.data
    return _make(out, (x,), lambda g: (g * sc.data,))


# -- recurrent sequence op ----------------------------------------------------------

def lstm_sequence(x, wx, wh, b, reverse: bool = False) -> Tensor:
    """Full unidirectional LSTM pass, fused with hand-derived BPTT.

    x: [T, N, F]; wx: [F, 4H]; wh: [H, 4H]; b: [4H], gate order (i, f, g, o).
    Returns hidden states [T, N, H] in original time order.
    """
    x, wx, wh, b = _ensure(x), _ensure(wx), _ensure(wh), _ensure(b)
    t_len, n, f = x.shape
    hdim = wh.shape[0]
    if wx.shape != (f, 4 * hdim) or b.shape != (4 * hdim,):
        raise ValueError(
            f"lstm weight shapes inconsistent: wx {wx.shape}, wh {wh.shape}, b {b.shape}")
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    hs = np.zeros((t_len, n, hdim))
    cache = {}
    h = np.zeros((n, hdim))
    c = np.zeros((n, hdim))
    xd, wxd, whd, bd = x.data, wx.data, wh.data, b.data
    for t in order:
        z = xd[t] @ wxd + h @ whd + bd
        i = 1.0 / (1.0 + np.exp(-z[:, :hdim]))
        fg = 1.0 / (1.0 + np.exp(-z[:, hdim:2 * hdim]))
        g = np.tanh(z[:, 2 * hdim:3 * hdim])
        o = 1.0 / (1.0 + np.exp(-z[:, 3 * hdim:]))
        c_prev = c
        c = fg * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[t] = h
        cache[t] = (i, fg, g, o, c_prev, tc, h)

    def backward(gout):
        gwx = np.zeros_like(wxd)
        gwh = np.zeros_like(whd)
        gb = np.zeros_like(bd)
        gx = np.zeros_like(xd)
        dh_next = np.zeros((n, hdim))
        dc_next = np.zeros((n, hdim))
        for t in list(order)[::-1]:
            i, fg, g, o, c_prev, tc, _ = cache[t]
            dh = gout[t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dc_next = dc * fg
            dz = np.concatenate([di * i * (1 - i), df * fg * (1 - fg),
                                 dg * (1 - g * g), do * o * (1 - o)], axis=1)
            dh_next = dz @ whd.T
            gx[t] = dz @ wxd.T
            gwx += xd[t].T @ dz
            gb += dz.sum(axis=0)
            # h_{t-1} is the hidden state of the previous step in iteration order
            prev_t = (t + 1) if reverse else (t - 1)
            hp = hs[prev_t] if 0 <= prev_t < t_len else np.zeros((n, hdim))
            gwh += hp.T @ dz
        return (gx, gwx, gwh, gb)

    return _make(hs, (x, wx, wh, b), backward)
