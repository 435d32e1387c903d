"""Reverse-mode autodiff over float64 numpy arrays.

A Tensor wraps an ndarray and, when gradients are required, a closure that
maps the output gradient to gradients for its parents. The op set is exactly
what the network needs: broadcast arithmetic, batched matmul, a 2-D
convolution with temporal stride/dilation/padding, batch and layer
normalization, pointwise nonlinearities, reductions, shape moves,
concatenation and inverted dropout. ``backward`` walks the graph in reverse
topological order; ``grad_check`` compares analytic gradients against central
differences.
"""

from __future__ import annotations

import numpy as np

from .errors import NondeterminismError


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # ndarray, accumulated across backward() calls
        self.parents: tuple = ()
        self._backward = None  # g -> tuple of parent grads aligned with parents

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


_grad_enabled = True


class no_grad:
    """Context that skips graph construction; use for pure inference.

    Keeps eval-time memory flat: without it every activation stays alive
    through the output's parent chain because parameters require grad.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _make(data, parents, backward_fn) -> Tensor:
    """Build an op output, pruning graph edges when no parent needs grad."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes numpy broadcast to reach it, back down to shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def back(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return (-g,)

    return _make(-a.data, (a,), back)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; both operands rank >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(data, (a, b), back)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b=None, stride: int = 1, dilation: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution over (N, C, T, V) input.

    The kernel is (C_out, C_in, k_t, k_v). Stride, dilation and zero padding
    apply to the temporal axis only; the joint axis is convolved valid with
    unit stride (k_v is 1 everywhere in this network).
    """
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, c_in, t, v = x.data.shape
    c_out, c_in_w, k_t, k_v = w.data.shape
    if c_in != c_in_w:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, kernel {c_in_w}")
    if b is not None and b.data.shape != (c_out,):
        raise ValueError("conv2d bias must be (C_out,)")
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError("conv2d stride/dilation must be >= 1 and pad >= 0")
    t_pad = t + 2 * pad
    t_out = (t_pad - dilation * (k_t - 1) - 1) // stride + 1
    v_out = v - (k_v - 1)
    if t_pad < dilation * (k_t - 1) + 1 or v_out < 1:
        raise ValueError("conv2d kernel larger than padded input")

    if pad:
        xp = np.zeros((n, c_in, t_pad, v), dtype=np.float64)
        xp[:, :, pad:pad + t, :] = x.data
    else:
        xp = x.data
    span = (t_out - 1) * stride + 1

    acc = np.zeros((n, t_out, v_out, c_out), dtype=np.float64)
    for it in range(k_t):
        t0 = it * dilation
        xs = xp[:, :, t0:t0 + span:stride, :]
        for iv in range(k_v):
            xv = xs[:, :, :, iv:iv + v_out]
            acc += np.tensordot(xv, w.data[:, :, it, iv], axes=([1], [1]))
    data = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if b is not None:
        data += b.data.reshape(1, c_out, 1, 1)

    def back(g):
        gt = g.transpose(0, 2, 3, 1)  # (N, T_out, V_out, C_out)
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for it in range(k_t):
            t0 = it * dilation
            xs = xp[:, :, t0:t0 + span:stride, :]
            for iv in range(k_v):
                xv = xs[:, :, :, iv:iv + v_out]
                dw[:, :, it, iv] = np.tensordot(gt, xv, axes=([0, 1, 2], [0, 2, 3]))
                dxv = np.tensordot(gt, w.data[:, :, it, iv], axes=([3], [0]))
                dxp[:, :, t0:t0 + span:stride, iv:iv + v_out] += dxv.transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + t, :] if pad else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, back)


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x, gamma, beta, mean, var, batch_stats: bool,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over axes (N, T, V) of a 4-D input.

    ``mean``/``var`` are plain (C,) arrays. With ``batch_stats=True`` they
    must be the batch statistics of ``x`` over (N, T, V) (biased variance)
    and the backward pass differentiates through them; with False they are
    treated as constants (running statistics at eval time). The op never
    mutates them; the owning layer maintains running state.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ValueError("batch_norm expects 4-D input")
    n, c, t, v = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("batch_norm affine params must be (C,)")
    axes = (0, 2, 3)
    count = n * t * v
    if count == 0:
        raise ValueError("batch_norm over an empty batch")

    ivar = 1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    xhat = (x.data - np.asarray(mean, dtype=np.float64).reshape(1, c, 1, 1)) \
        * ivar.reshape(1, c, 1, 1)
    data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        if batch_stats:
            dx = (ivar.reshape(1, c, 1, 1) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * ivar.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return _make(data, (x, gamma, beta), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over (C, T, V) with per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ValueError("layer_norm expects 4-D input")
    n, c, t, v = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("layer_norm affine params must be (C,)")
    axes = (1, 2, 3)
    count = c * t * v
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * ivar
    data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def back(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        dx = ivar * (dxhat
                     - dxhat.mean(axis=axes, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    return _make(data, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# pointwise


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), back)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), back)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), back)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    ls = shifted - lse
    s = np.exp(ls)

    def back(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(ls, (x,), back)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def back(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), back)


# ---------------------------------------------------------------------------
# reductions and shape moves


def _norm_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def tsum(x, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if axes is None:
            g = np.asarray(g).reshape((1,) * x.ndim)
        elif not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape),)

    return _make(data, (x,), back)


def tmean(x, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    data = x.data.mean(axis=axes, keepdims=keepdims)
    if axes is None:
        count = x.data.size
    else:
        count = int(np.prod([x.data.shape[a] for a in axes]))

    def back(g):
        if axes is None:
            g = np.asarray(g).reshape((1,) * x.ndim)
        elif not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape) / count,)

    return _make(data, (x,), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def back(g):
        return (g.reshape(x.data.shape),)

    return _make(data, (x,), back)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), back)


# ---------------------------------------------------------------------------
# backward engine


def _topo(root: Tensor):
    """Reverse-postorder DFS; raises on cycles (in-place graph abuse)."""
    order = []
    state = {}  # id -> 1 on stack, 2 done
    stack = [(root, iter(root.parents))]
    state[id(root)] = 1
    while stack:
        node, it = stack[-1]
        pushed = False
        for p in it:
            s = state.get(id(p))
            if s == 1:
                raise ValueError("cycle detected in autodiff graph")
            if s is None:
                state[id(p)] = 1
                stack.append((p, iter(p.parents)))
                pushed = True
                break
        if not pushed:
            stack.pop()
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor, grad_map: dict | None = None):
    """Backpropagate from a scalar loss.

    Leaf gradients accumulate into ``.grad`` (repeated calls add up until
    zeroed); interior nodes only relay flow, which keeps peak memory at the
    live frontier instead of the whole graph. When ``grad_map`` is given,
    leaf gradients go into that dict keyed by tensor id instead of touching
    ``.grad``; this keeps shard-parallel accumulation race-free.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    flows = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node.parents:
            if grad_map is not None:
                key = id(node)
                grad_map[key] = g if key not in grad_map else grad_map[key] + g
            else:
                node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            flows[pid] = pg if pid not in flows else flows[pid] + pg


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a Tensor to a Tensor; its output is summed into the scalar
    being differentiated. The function is run twice up front and must produce
    bit-identical output, otherwise NondeterminismError is raised. The error
    metric is |a - n| / max(1, |a|, |n|) taken elementwise.
    """
    base = np.array(x.data, dtype=np.float64, copy=True)

    out1 = fn(Tensor(base.copy(), requires_grad=True))
    probe = Tensor(base.copy(), requires_grad=True)
    out2 = fn(probe)
    if (out1.data.shape != out2.data.shape
            or out1.data.tobytes() != out2.data.tobytes()):
        raise NondeterminismError("fn returned different outputs on identical input")

    backward(tsum(out2))
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        xp = base.copy()
        xp.reshape(-1)[i] = orig + eps
        fp = float(fn(Tensor(xp)).data.sum())
        xm = base.copy()
        xm.reshape(-1)[i] = orig - eps
        fm = float(fn(Tensor(xm)).data.sum())
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())
