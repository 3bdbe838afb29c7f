"""A small reverse-mode autodiff core over numpy arrays.

The op vocabulary is fixed: exactly what the part attention network and the
composition head need. Values are stored as float64; graphs are built
eagerly and freed by :meth:`Tensor.backward`.

    >>> w = Parameter(np.array([1.0, 2.0]), name="w")
    >>> loss = sum_all(mul(w, Tensor(np.array([3.0, 4.0]))))
    >>> loss.backward()
    >>> w.grad
    array([3., 4.])
"""
from __future__ import annotations

import contextlib
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def backward(self) -> None:
        """Accumulate d(self)/d(param) into every reachable parameter's ``grad``."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward; run forward again")
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if isinstance(node, Parameter):
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is not None and g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
            if not isinstance(node, Parameter):
                node._backward = None
                node._parents = ()
                node._consumed = True


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product; size-1 axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


elementwise_mul = mul


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a, eps: float = 0.0) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data + eps)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


_relu_trace: Optional[list] = None


@contextlib.contextmanager
def trace_relu_masks():
    """Record the activation pattern of every ReLU evaluated inside the block."""
    global _relu_trace
    prev, _relu_trace = _relu_trace, []
    try:
        yield _relu_trace
    finally:
        _relu_trace = prev


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    if _relu_trace is not None:
        _relu_trace.append(mask)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# -- reductions and shape ops ----------------------------------------------------

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.sum(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def split(a, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    """Inverse of :func:`concat`: slice ``a`` into consecutive chunks."""
    a = as_tensor(a)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    if bounds[-1] != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        index = [slice(None)] * a.data.ndim
        index[axis] = slice(lo, hi)
        index = tuple(index)

        def back(g, index=index):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)
        out.append(_make(a.data[index], (a,), back))
    return out


def take_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]`` along axis 0 (indices may repeat)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    picked = a.data[idx]
    idx = np.where(idx < 0, idx + a.shape[0], idx)

    def back(g):
        # sorted segment sums; much faster than np.add.at for wide rows
        full = np.zeros_like(a.data)
        if len(idx):
            order = np.argsort(idx, kind="stable")
            rows, starts = np.unique(idx[order], return_index=True)
            full[rows] = np.add.reduceat(g[order], starts, axis=0)
        return (full,)
    return _make(picked, (a,), back)


def global_avg_pool(a) -> Tensor:
    """Spatial mean over the last two axes: ``(..., C, H, W) -> (..., C)``."""
    a = as_tensor(a)
    h, w = a.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError("global_avg_pool needs a non-empty spatial grid")
    inv = 1.0 / (h * w)
    return _make(a.data.mean(axis=(-2, -1)), (a,),
                 lambda g: (np.broadcast_to(g[..., None, None] * inv, a.shape).copy(),))


# -- linear maps -------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a, b) -> Tensor:
    """Batched matrix product ``(N, i, k) @ (N, k, j)``."""
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(N, in)`` and weight ``(out, in)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def back(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)
    return _make(out, parents, back)


def _im2col(xd: np.ndarray, k: int) -> np.ndarray:
    """``(N, C, H, W)`` to ``(N*H*W, C*k*k)`` patches with 'same' zero padding."""
    n, c, h, w = xd.shape
    pad = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    return cols.reshape(n * h * w, c * k * k)


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 'same' cross-correlation with zero padding.

    ``x`` is ``(C_in, H, W)`` or ``(N, C_in, H, W)``; ``weight`` is
    ``(C_out, C_in, k, k)`` with odd ``k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    co, ci, k, k2 = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ValueError("conv2d: kernel must be square with odd size")
    # with 'same' padding the padded extent is h + k - 1, so only an empty
    # spatial axis can leave the kernel larger than the padded input
    if k > h + 2 * (k // 2) or k > w + 2 * (k // 2) or h == 0 or w == 0:
        raise ValueError(f"conv2d: {k}x{k} kernel larger than padded {h}x{w} input")
    cols = _im2col(xd, k)
    wmat = weight.data.reshape(co, -1)
    out = cols @ wmat.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(n, h, w, co).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def back(g):
        gd = g[None] if squeeze else g
        gflat = gd.transpose(0, 2, 3, 1).reshape(n * h * w, co)
        gw = (gflat.T @ cols).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            # input gradient = 'same' correlation of g with the flipped, channel-swapped kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            dx = (_im2col(np.ascontiguousarray(gd), k) @ wflip.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            dx = dx[0] if squeeze else dx
        grads = [dx, gw]
        if bias is not None:
            grads.append(gflat.sum(axis=0))
        return tuple(grads)
    return _make(np.ascontiguousarray(out), parents, back)


# -- losses ----------------------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    """Sum of squared differences ``||target - pred||^2``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    return _make(np.array((diff * diff).sum()), (pred, target),
                 lambda g: (2.0 * g * diff, -2.0 * g * diff))


# -- parameters and optimization --------------------------------------------------

def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def conv_weight(c_out: int, c_in: int, k: int, rng, name: str = "") -> Parameter:
    w = glorot_uniform((c_out, c_in, k, k), c_in * k * k, c_out * k * k, rng)
    return Parameter(w, name=name)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """``value -= lr * grad`` for every parameter, then zero the grads."""
    params = list(params)
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        if p.grad is not None and lr != 0.0:
            p.data -= lr * p.grad
        p.grad = None


# -- gradient checking --------------------------------------------------------------

def gradcheck(fn: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-3,
              max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None):
    """Compare backprop gradients of ``fn()`` with central differences.

    Returns ``{param name: relative error}`` where the error is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||)`` over the checked
    coordinates. ``"__all__"`` holds the same measure over the checked
    coordinates of every parameter together. Coordinates whose +/-eps stencil
    flips a ReLU activation are skipped since the function is not
    differentiable there; the number skipped is reported under the key
    ``"__skipped__"``.
    """
    rng = rng or np.random.default_rng(0)
    zero_grad(params)
    with trace_relu_masks() as base_masks:
        loss = fn()
    loss.backward()
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in params}
    zero_grad(params)

    def flips(masks):
        return any(not np.array_equal(m0, m1) for m0, m1 in zip(base_masks, masks))

    def rel(a, n):
        denom = max(np.linalg.norm(a), np.linalg.norm(n))
        return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)

    result = {}
    skipped = 0
    all_a, all_n = [], []
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        a_vals, n_vals = [], []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with trace_relu_masks() as m_plus:
                f_plus = fn().item()
            flat[i] = orig - eps
            with trace_relu_masks() as m_minus:
                f_minus = fn().item()
            flat[i] = orig
            if flips(m_plus) or flips(m_minus):
                skipped += 1
                continue
            a_vals.append(analytic[id(p)].reshape(-1)[i])
            n_vals.append((f_plus - f_minus) / (2 * eps))
        all_a += a_vals
        all_n += n_vals
        result[p.name] = rel(np.array(a_vals), np.array(n_vals))
    result["__all__"] = rel(np.array(all_a), np.array(all_n))
    result["__skipped__"] = skipped
    return result
