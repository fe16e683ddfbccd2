"""Reverse-mode automatic differentiation over dense NCHW numpy arrays.

The engine is tape-based: every differentiable operation returns a new
:class:`Tensor` holding references to its parents and a closure that
propagates the output gradient backwards.  ``Tensor.backward()`` walks the
recorded graph in reverse topological order and accumulates gradients
additively, so a parameter used in several places receives the sum of all
contributions.

Kernels are float32 by default; constructing leaf tensors with
``dtype=np.float64`` switches the whole downstream computation to 64-bit,
which is what the finite-difference gradient checks use.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

# When enabled, every op output is checked for NaN/Inf right after the
# forward computation.  Off by default: it costs a full pass over the data.
_debug_checks = False


def set_debug_checks(enabled):
    """Toggle NaN/Inf checking of every forward result."""
    global _debug_checks
    _debug_checks = bool(enabled)


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional array with an optional gradient.

    Image tensors use NCHW order throughout the package.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------
    # construction helpers

    @staticmethod
    def _from_op(data, parents, backward):
        data = np.asarray(data)
        if _debug_checks and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite values in op output")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self):
        """A view of the same data cut off from the graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def item(self):
        return float(self.data.item())

    # ------------------------------------------------------------------
    # backward pass

    def backward(self):
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                # graph is single-use: free intermediate buffers eagerly
                node._backward = None
                node._parents = ()

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # ------------------------------------------------------------------
    # elementwise arithmetic

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = Tensor._from_op(a.data + b.data, (a, b), None)
        if out.requires_grad:
            def backward(g):
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g, b.data.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor._from_op(-self.data, (self,), None)
        if out.requires_grad:
            a = self
            out._backward = lambda g: a._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = Tensor._from_op(a.data * b.data, (a, b), None)
        if out.requires_grad:
            def backward(g):
                if a.requires_grad:
                    a._accum(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g * a.data, b.data.shape))
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = Tensor._from_op(a.data / b.data, (a, b), None)
        if out.requires_grad:
            def backward(g):
                if a.requires_grad:
                    a._accum(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
            out._backward = backward
        return out

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self
        out = Tensor._from_op(a.data ** exponent, (a,), None)
        if out.requires_grad:
            def backward(g):
                a._accum(g * exponent * a.data ** (exponent - 1))
            out._backward = backward
        return out

    # ------------------------------------------------------------------
    # unary math

    def exp(self):
        a = self
        y = np.exp(a.data)
        out = Tensor._from_op(y, (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accum(g * y)
        return out

    def log(self):
        a = self
        out = Tensor._from_op(np.log(a.data), (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accum(g / a.data)
        return out

    def sqrt(self):
        a = self
        y = np.sqrt(a.data)
        out = Tensor._from_op(y, (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accum(g / (2.0 * y))
        return out

    # ------------------------------------------------------------------
    # reductions / shape

    def sum(self, axis=None, keepdims=False):
        a = self
        out = Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)
        if out.requires_grad:
            def backward(g):
                a._accum(_expand_reduced(g, a.data.shape, axis, keepdims))
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else _axis_size(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out = Tensor._from_op(a.data.reshape(shape), (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accum(g.reshape(a.data.shape))
        return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` along the axes numpy broadcast over."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _axis_size(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        if isinstance(axis, int):
            axis = (axis,)
        axis = tuple(ax % len(shape) for ax in axis)
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


# ----------------------------------------------------------------------
# activations


def relu(x):
    mask = x.data > 0
    out = Tensor._from_op(np.where(mask, x.data, 0), (x,), None)
    if out.requires_grad:
        out._backward = lambda g: x._accum(np.where(mask, g, 0))
    return out


def leaky_relu(x, slope=0.2):
    mask = x.data > 0
    out = Tensor._from_op(np.where(mask, x.data, slope * x.data), (x,), None)
    if out.requires_grad:
        out._backward = lambda g: x._accum(np.where(mask, g, slope * g))
    return out


def softplus(x):
    """log(1 + exp(x)), stable for large |x|."""
    d = x.data
    y = np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0)
    out = Tensor._from_op(y, (x,), None)
    if out.requires_grad:
        # exp of a non-positive argument cannot overflow
        e = np.exp(-np.abs(d))
        sig = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        out._backward = lambda g: x._accum(g * sig)
    return out


def softmax(x, axis=-1):
    """Row-stochastic softmax along ``axis``.

    The max-shift is treated as a constant, which leaves the gradient exact
    because softmax is shift-invariant.
    """
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True), dtype=x.dtype)
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def concat(tensors, axis=1):
    """Concatenate tensors along ``axis``; backward splits the gradient."""
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._from_op(data, tuple(tensors), None)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum(sizes)[:-1]
        def backward(g):
            for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
                if t.requires_grad:
                    t._accum(piece)
        out._backward = backward
    return out


# ----------------------------------------------------------------------
# dense / matmul


def dense(x, w, b=None):
    """Affine map: ``x [N,D] @ w [D,M] + b [M]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"dense: incompatible shapes {x.data.shape} @ {w.data.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor._from_op(y, parents, None)
    if out.requires_grad:
        def backward(g):
            if x.requires_grad:
                x._accum(g @ w.data.T)
            if w.requires_grad:
                w._accum(x.data.T @ g)
            if b is not None and b.requires_grad:
                b._accum(g.sum(axis=0))
        out._backward = backward
    return out


# ----------------------------------------------------------------------
# convolution kernels (numpy level)


def _same_pads(h, w, kh, kw, stride):
    """TF-style SAME padding: extra row/column goes to the bottom/right."""
    oh = -(-h // stride)
    ow = -(-w // stride)
    ph = max((oh - 1) * stride + kh - h, 0)
    pw = max((ow - 1) * stride + kw - w, 0)
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def _conv_fwd(x, w, stride, pads):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    oh = (H + pt + pb - kh) // stride + 1
    ow = (W + pl + pr - kw) // stride + 1
    acc = np.zeros((O, B, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            acc += np.tensordot(w[:, :, i, j], xs, axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3))


def _conv_grad_input(gy, w, stride, pads, in_hw):
    B, O, oh, ow = gy.shape
    _, C, kh, kw = w.shape
    H, W = in_hw
    pt, pb, pl, pr = pads
    gxp = np.zeros((B, C, H + pt + pb, W + pl + pr), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            t = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))  # [B,oh,ow,C]
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                t.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gxp[:, :, pt:pt + H, pl:pl + W])


def _conv_grad_weight(x, gy, stride, pads, kshape):
    B, C, H, W = x.shape
    _, O, oh, ow = gy.shape
    kh, kw = kshape
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    gw = np.empty((O, C, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            gw[:, :, i, j] = np.tensordot(gy, xs, axes=([0, 2, 3], [0, 2, 3]))
    return gw


def _resolve_pads(padding, h, w, kh, kw, stride):
    if padding == "same":
        return _same_pads(h, w, kh, kw, stride)
    if padding == "valid":
        return (0, 0, 0, 0)
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x, w, b=None, stride=1, padding="same"):
    """2-D convolution (cross-correlation) over an NCHW batch.

    ``w`` has shape [outC, inC, kH, kW].  SAME padding pads symmetrically
    with the odd row/column on the bottom/right.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    B, C, H, W = x.data.shape
    O, Ci, kh, kw = w.data.shape
    if C != Ci:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape} do not match weight {w.data.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    pads = _resolve_pads(padding, H, W, kh, kw, stride)
    y = _conv_fwd(x.data, w.data, stride, pads)
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor._from_op(y, parents, None)
    if out.requires_grad:
        def backward(g):
            if x.requires_grad:
                x._accum(_conv_grad_input(g, w.data, stride, pads, (H, W)))
            if w.requires_grad:
                w._accum(_conv_grad_weight(x.data, g, stride, pads, (kh, kw)))
            if b is not None and b.requires_grad:
                b._accum(g.sum(axis=(0, 2, 3)))
        out._backward = backward
    return out


def transpose_conv2d(x, w, b=None, stride=2):
    """Transposed convolution: the exact adjoint of SAME-padded ``conv2d``.

    ``w`` has conv2d layout [O, C, kH, kW]; the input carries O channels and
    the output C channels, with spatial dims exactly ``stride`` times the
    input's.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("transpose_conv2d expects 4-D input and weight")
    B, O, H, W = x.data.shape
    Ow, C, kh, kw = w.data.shape
    if O != Ow:
        raise ShapeError(
            f"transpose_conv2d: input channels {x.data.shape} do not match weight {w.data.shape}")
    H2, W2 = H * stride, W * stride
    pads = _same_pads(H2, W2, kh, kw, stride)
    y = _conv_grad_input(x.data, w.data, stride, pads, (H2, W2))
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor._from_op(y, parents, None)
    if out.requires_grad:
        def backward(g):
            if x.requires_grad:
                x._accum(_conv_fwd(g, w.data, stride, pads))
            if w.requires_grad:
                w._accum(_conv_grad_weight(g, x.data, stride, pads, (kh, kw)))
            if b is not None and b.requires_grad:
                b._accum(g.sum(axis=(0, 2, 3)))
        out._backward = backward
    return out


def _box_sum(x, k, pt, pl):
    """Per-position sum of a k×k window starting at offset (-pt, -pl).

    Out-of-bounds parts of the window are simply absent (clipped), which is
    what makes avg_pool2d exclude padding from its divisor.  Accumulation is
    float64 to avoid cancellation error in the integral image.
    """
    B, C, H, W = x.shape
    s = np.zeros((B, C, H + 1, W + 1), dtype=np.float64)
    s[:, :, 1:, 1:] = np.cumsum(np.cumsum(x, axis=2, dtype=np.float64), axis=3)
    r0 = np.clip(np.arange(H) - pt, 0, H)
    r1 = np.clip(np.arange(H) - pt + k, 0, H)
    c0 = np.clip(np.arange(W) - pl, 0, W)
    c1 = np.clip(np.arange(W) - pl + k, 0, W)
    out = (s[:, :, r1[:, None], c1[None, :]]
           - s[:, :, r0[:, None], c1[None, :]]
           - s[:, :, r1[:, None], c0[None, :]]
           + s[:, :, r0[:, None], c0[None, :]])
    return out.astype(x.dtype, copy=False)


def avg_pool2d(x, kernel):
    """Stride-1 SAME average pooling; boundary windows average only the
    in-bounds elements."""
    if x.data.ndim != 4:
        raise ShapeError("avg_pool2d expects a 4-D input")
    B, C, H, W = x.data.shape
    if kernel > 2 * min(H, W):
        raise ShapeError(
            f"avg_pool2d: kernel {kernel} larger than 2x spatial dims ({H}x{W})")
    pt = (kernel - 1) // 2
    pl = (kernel - 1) // 2
    pb = kernel - 1 - pt
    pr = kernel - 1 - pl
    ones = np.ones((1, 1, H, W), dtype=x.dtype)
    counts = _box_sum(ones, kernel, pt, pl)
    y = _box_sum(x.data, kernel, pt, pl) / counts
    out = Tensor._from_op(y, (x,), None)
    if out.requires_grad:
        def backward(g):
            x._accum(_box_sum(g / counts, kernel, pb, pr))
        out._backward = backward
    return out


# ----------------------------------------------------------------------


def backward(loss, params=None):
    """Run backprop from ``loss`` and zero-fill grads of unreached params.

    A parameter that does not influence the loss still ends up with an
    all-zero gradient so the optimizer sees a complete gradient set.
    """
    loss.backward()
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
