"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

All tensors carry float64 data. Each operation builds a dynamic tape;
calling :meth:`Tensor.backward` walks it in reverse topological order.
Backward rules are themselves expressed with taped operations, so passing
``create_graph=True`` yields gradients that are differentiable again
(needed for gradient-matching attacks).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional float64 array with optional gradient tracking.

    ``grad`` is populated on leaves (tensors created directly, not by an
    operation) after a backward pass and accumulates across passes until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self._parents: tuple = ()
        self._bwd = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._bwd is None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes if axes else None)

    @property
    def T(self):
        return permute(self, None)

    # -- autodiff -------------------------------------------------------
    def backward(self, grad: Optional["Tensor"] = None, create_graph: bool = False) -> None:
        """Accumulate gradients of this tensor into every reachable leaf.

        ``grad`` defaults to ones and may be omitted only for scalars.
        With ``create_graph=True`` the computed gradients are themselves
        tracked, enabling second-order differentiation.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar backward()")
            grad = Tensor(np.ones_like(self.data))
        if grad.shape != self.shape:
            raise ValueError(f"grad shape {grad.shape} != tensor shape {self.shape}")

        topo = self._topo_order()
        grads: dict[int, Tensor] = {id(self): grad}

        global _GRAD_ENABLED
        prev = _GRAD_ENABLED
        _GRAD_ENABLED = create_graph
        try:
            for node in reversed(topo):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if node._bwd is None:
                    # leaf: accumulate into .grad
                    if node.requires_grad:
                        node.grad = g if node.grad is None else add(node.grad, g)
                    continue
                parent_grads = node._bwd(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else add(acc, pg)
        finally:
            _GRAD_ENABLED = prev

    def grad_of(self, inputs: Sequence["Tensor"], create_graph: bool = False) -> list:
        """Gradients of this scalar w.r.t. ``inputs`` without touching ``.grad``.

        Returns one tensor per input (zeros when an input is unreachable).
        With ``create_graph=True`` the results are differentiable again.
        """
        if self.data.size != 1:
            raise RuntimeError("grad_of expects a scalar output")
        topo = self._topo_order()
        grads: dict[int, Tensor] = {id(self): Tensor(np.ones_like(self.data))}
        wanted = {id(t) for t in inputs}

        global _GRAD_ENABLED
        prev = _GRAD_ENABLED
        _GRAD_ENABLED = create_graph
        try:
            for node in reversed(topo):
                pop = id(node) not in wanted
                g = (grads.pop(id(node), None) if pop else grads.get(id(node)))
                if g is None or node._bwd is None:
                    continue
                parent_grads = node._bwd(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else add(acc, pg)
        finally:
            _GRAD_ENABLED = prev
        return [grads.get(id(t), Tensor(np.zeros_like(t.data))) for t in inputs]

    def _topo_order(self) -> list:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, bwd) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._bwd = bwd
    return out


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reverse numpy broadcasting: reduce ``g`` down to ``shape``."""
    if g.shape == shape:
        return g
    extra = len(g.shape) - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# -- arithmetic primitives ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return (_sum_to(g, a.shape) if a.requires_grad else None,
                _sum_to(g, b.shape) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),))


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return (_sum_to(mul(g, b), a.shape) if a.requires_grad else None,
                _sum_to(mul(g, a), b.shape) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        ga = _sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = (_sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
              if b.requires_grad else None)
        return ga, gb

    return _node(a.data / b.data, (a, b), bwd)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)

    def bwd(g):
        return (mul(g, mul(Tensor(np.float64(p)), power(a, p - 1.0))),)

    return _node(a.data ** p, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    out = _node(out_data, (a,), None)
    if out.requires_grad:
        out._bwd = lambda g: (mul(g, out),)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    """Element-wise square root with a zero-safe gradient.

    The derivative at exactly 0 is taken to be 0 (valid subgradient), so
    pairwise-distance losses with coincident points stay finite.
    """
    a = _as_tensor(a)
    pos = a.data > 0.0

    def bwd(g):
        safe = where(pos, a, Tensor(np.float64(1.0)))
        return (mul(mul(g, Tensor(pos.astype(np.float64))),
                    mul(Tensor(np.float64(0.5)), power(safe, -0.5))),)

    return _node(np.sqrt(a.data), (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bwd(g):
        ga = matmul(g, permute(b, None)) if a.requires_grad else None
        gb = matmul(permute(a, None), g) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), bwd)


# -- structural primitives ------------------------------------------------


def permute(a, axes: Optional[tuple]) -> Tensor:
    a = _as_tensor(a)
    inv = None if axes is None else tuple(int(i) for i in np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (permute(g, inv),))


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    orig = a.shape
    return _node(np.reshape(a.data, shape), (a,), lambda g: (reshape(g, orig),))


def getitem(a, key) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _node(a.data[key], (a,), lambda g: (scatter_slice(g, shape, key),))


def scatter_slice(a, shape: tuple, key) -> Tensor:
    """Place ``a`` into a zero tensor of ``shape`` at basic-slice ``key``."""
    a = _as_tensor(a)
    data = np.zeros(shape, dtype=np.float64)
    data[key] = a.data
    return _node(data, (a,), lambda g: (getitem(g, key),))


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Pick ``a[b, idx[b]]`` for each row b of a 2-D tensor."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n, c = a.shape
    if idx.shape != (n,):
        raise ValueError(f"index shape {idx.shape} does not match rows {n}")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= c:
        raise ValueError("row index out of range")
    rows = np.arange(n)
    return _node(a.data[rows, idx], (a,),
                 lambda g: (scatter_rows(g, (n, c), idx),))


def scatter_rows(a, shape: tuple, idx: np.ndarray) -> Tensor:
    a = _as_tensor(a)
    data = np.zeros(shape, dtype=np.float64)
    data[np.arange(shape[0]), idx] = a.data
    return _node(data, (a,), lambda g: (gather_rows(g, idx),))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a``/``b`` by a constant boolean mask."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    mask = cond.astype(np.float64)

    def bwd(g):
        ga = _sum_to(mul(g, Tensor(mask)), a.shape) if a.requires_grad else None
        gb = _sum_to(mul(g, Tensor(1.0 - mask)), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(np.where(cond, a.data, b.data), (a, b), bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.data.ndim,)
    else:
        axes = tuple(ax % a.data.ndim for ax in axis)
    orig = a.shape
    kept = tuple(1 if i in axes else d for i, d in enumerate(orig))

    def bwd(g):
        return (broadcast_to(reshape(g, kept), orig),)

    return _node(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bwd)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, int):
        n = a.shape[axis % a.data.ndim]
    else:
        n = int(np.prod([a.shape[ax % a.data.ndim] for ax in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), Tensor(np.float64(1.0 / n)))


def broadcast_to(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    orig = a.shape
    return _node(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_sum_to(g, orig),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    axis = axis % ts[0].data.ndim
    sizes = [t.shape[axis] for t in ts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g):
        outs = []
        for t, start, stop in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                key = tuple(slice(None) if i != axis else slice(int(start), int(stop))
                            for i in range(g.data.ndim))
                outs.append(getitem(g, key))
            else:
                outs.append(None)
        return tuple(outs)

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bwd)


# -- convolution / pooling -------------------------------------------------


def pad2d(a, ph: int, pw: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes of a 4-D tensor."""
    a = _as_tensor(a)
    _, _, h, w = a.shape
    data = np.pad(a.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    key = (slice(None), slice(None), slice(ph, ph + h), slice(pw, pw + w))
    return _node(data, (a,), lambda g: (getitem(g, key),))


def conv2d(x, kernel, bias: Optional[Tensor] = None) -> Tensor:
    """Valid cross-correlation, stride 1, optional per-channel bias.

    ``x`` is (B, C_in, H, W), ``kernel`` is (C_out, C_in, kh, kw); output is
    (B, C_out, H-kh+1, W-kw+1).
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    b_, cin, h, w = x.shape
    cout, cink, kh, kw = kernel.shape
    if cin != cink:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cink}")
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")

    ho, wo = h - kh + 1, w - kw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b_ * ho * wo, cin * kh * kw)
    out_data = (cols @ kernel.data.reshape(cout, -1).T)
    out_data = out_data.reshape(b_, ho, wo, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        gx = gk = None
        if x.requires_grad:
            # full correlation of the padded output grad with the kernel
            # flipped spatially and swapped in its channel axes
            kr = permute(getitem(kernel, (slice(None), slice(None),
                                          slice(None, None, -1), slice(None, None, -1))),
                         (1, 0, 2, 3))
            gx = conv2d(pad2d(g, kh - 1, kw - 1), kr)
        if kernel.requires_grad:
            gk = permute(conv2d(permute(x, (1, 0, 2, 3)), permute(g, (1, 0, 2, 3))),
                         (1, 0, 2, 3))
        return gx, gk

    out = _node(out_data, (x, kernel), bwd)
    if bias is not None:
        out = add(out, reshape(_as_tensor(bias), (1, cout, 1, 1)))
    return out


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element in
    row-major window order, which also fixes the backward routing."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError("maxpool2 expects a 4-D tensor")
    _, _, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2 needs spatial dims >= 2, got {h}x{w}")
    he, we = (h // 2) * 2, (w // 2) * 2
    if (he, we) != (h, w):
        x = getitem(x, (slice(None), slice(None), slice(0, he), slice(0, we)))
    w00 = x[:, :, 0::2, 0::2]
    w01 = x[:, :, 0::2, 1::2]
    w10 = x[:, :, 1::2, 0::2]
    w11 = x[:, :, 1::2, 1::2]
    top = where(w00.data >= w01.data, w00, w01)
    bot = where(w10.data >= w11.data, w10, w11)
    return where(top.data >= bot.data, top, bot)


# -- neural layer functions ------------------------------------------------


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0

    def bwd(g):
        return (mul(g, Tensor(mask.astype(np.float64))),)

    return _node(np.maximum(x.data, 0.0), (x,), bwd)


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    return where(x.data >= 0.0, x, neg(x))


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight shaped (out, in)."""
    return add(matmul(x, permute(weight, None)), bias)


def softmax(logits) -> Tensor:
    """Row-wise softmax over a (B, c) tensor, stabilized by max-shift."""
    logits = _as_tensor(logits)
    if np.isnan(logits.data).any():
        raise FloatingPointError("softmax received NaN input")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    e = exp(sub(logits, shift))
    return div(e, sum_(e, axis=1, keepdims=True))


def log_softmax(logits) -> Tensor:
    logits = _as_tensor(logits)
    if np.isnan(logits.data).any():
        raise FloatingPointError("log_softmax received NaN input")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, shift)
    return sub(z, log(sum_(exp(z), axis=1, keepdims=True)))


def _batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Fused batch standardization; first-order gradients only.

    The backward closure uses the saved normalized activations as
    constants, which is exact for one differentiation but not twice; no
    second-order path in this package goes through batch norm.
    """
    n = x.shape[0]
    mu = x.data.mean(axis=0, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bwd(g):
        gx = None
        if x.requires_grad:
            gm = Tensor(g.data.mean(axis=0, keepdims=True))
            gxm = Tensor((g.data * xhat).mean(axis=0, keepdims=True))
            gx = mul(sub(sub(g, gm), mul(Tensor(xhat), gxm)), Tensor(inv))
        return (gx,)

    out = _node(xhat, (x,), bwd)
    return add(mul(out, gamma), beta), mu.reshape(-1), var.reshape(-1)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def kl_div_rows(p_logits, q_logits) -> Tensor:
    """Per-row KL(softmax(p) || softmax(q)) with a closed-form backward.

    The gradient w.r.t. the first argument is p * (d - (p.d)) with
    d = log p - log q, so it is exactly zero (bitwise) whenever the two
    rows agree bitwise; a generic autodiff composite instead leaves
    ulp-level residue that optimizers can amplify. Both arguments are
    differentiable.
    """
    p_logits, q_logits = _as_tensor(p_logits), _as_tensor(q_logits)
    if np.isnan(p_logits.data).any() or np.isnan(q_logits.data).any():
        raise FloatingPointError("kl_div_rows received NaN input")
    rows = p_logits.shape[0]
    lp_np = _log_softmax_np(p_logits.data)
    lq_np = _log_softmax_np(q_logits.data)
    out_data = (np.exp(lp_np) * (lp_np - lq_np)).sum(axis=1)

    def bwd(g):
        gcol = reshape(g, (rows, 1))
        gp = gq = None
        lp = log_softmax(p_logits)
        p = exp(lp)
        if p_logits.requires_grad:
            d = sub(lp, log_softmax(q_logits))
            inner = sub(d, sum_(mul(p, d), axis=1, keepdims=True))
            gp = mul(gcol, mul(p, inner))
        if q_logits.requires_grad:
            q = exp(log_softmax(q_logits))
            gq = mul(gcol, sub(mul(q, sum_(p, axis=1, keepdims=True)), p))
        return gp, gq

    return _node(out_data, (p_logits, q_logits), bwd)


def batchnorm1d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5):
    """Per-feature batch normalization over (B, F) inputs.

    Returns ``(out, new_running_mean, new_running_var)``; the running
    statistics are plain arrays and are only advanced in training mode
    (convention: new = (1-momentum)*old + momentum*batch, with the
    unbiased variance feeding the running estimate).
    """
    x = _as_tensor(x)
    n = x.shape[0]
    if training:
        if n < 2:
            raise ValueError("batchnorm1d training mode needs batch size >= 2")
        out, mu, var = _batchnorm_train(x, gamma, beta, eps)
        new_rm = (1.0 - momentum) * running_mean + momentum * mu
        new_rv = (1.0 - momentum) * running_var + momentum * var * (n / (n - 1.0))
        return out, new_rm, new_rv
    rm = Tensor(running_mean.reshape(1, -1))
    inv = Tensor(1.0 / np.sqrt(running_var.reshape(1, -1) + eps))
    xhat = mul(sub(x, rm), inv)
    return add(mul(xhat, gamma), beta), running_mean, running_var


def one_hot(labels: np.ndarray, num_classes: int) -> Tensor:
    """Constant one-hot matrix for integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= num_classes:
        raise ValueError("label out of range for one_hot")
    data = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    data[np.arange(labels.shape[0]), labels] = 1.0
    return Tensor(data)


def row_l2(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along one axis (zero-safe gradient at the origin)."""
    a = _as_tensor(a)
    return sqrt(sum_(mul(a, a), axis=axis, keepdims=keepdims))
