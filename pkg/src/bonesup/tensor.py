"""float32 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records a
:class:`Node` on the output.  :func:`backward` walks those nodes in reverse
topological order.  Only scalar-vs-tensor broadcasting is supported.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, UsageError

DTYPE = np.float32
LOG_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One tape entry: the op that produced a tensor and how to push gradients back.

    ``backward_fn`` maps the output gradient to a tuple of parent gradients
    (``None`` for parents that do not need one).  Forward values it needs are
    captured in its closure.
    """

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ----------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def log_sigmoid(self):
        return log_sigmoid(self)

    def leaky_relu(self, slope=0.2):
        return leaky_relu(self, slope)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def abs(self):
        return absolute(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def sum(self, axes=None, keepdims=False):
        return reduce(self, "sum", axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce(self, "mean", axes, keepdims)

    def backward(self, accumulate=True):
        return backward(self, accumulate=accumulate)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _make(data, op, parents, backward_fn):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.node = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.node = Node(op, tuple(parents), backward_fn)
    return out


# -- elementwise ------------------------------------------------------------

def _binary_operands(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=DTYPE).reshape(shape)


def _out_shape(a, b):
    return a.shape if a.size >= b.size and a.ndim >= b.ndim else b.shape


def add(a, b):
    a, b = _binary_operands(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(
        np.add(a.data, b.data).reshape(_out_shape(a, b)), "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(
        np.subtract(a.data, b.data).reshape(_out_shape(a, b)), "sub", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        np.multiply(ad, bd).reshape(_out_shape(a, b)), "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a):
    """Numerically stable ``log(sigmoid(a))``."""
    a = as_tensor(a)
    x = a.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(y, "log_sigmoid", (a,), lambda g: (g * _sigmoid(-x),))


def leaky_relu(a, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise UsageError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    a = as_tensor(a)
    scale = np.where(a.data > 0, DTYPE(1.0), DTYPE(slope))
    return _make(a.data * scale, "leaky_relu", (a,), lambda g: (g * scale,))


def relu(a):
    a = as_tensor(a)
    mask = (a.data > 0).astype(DTYPE)
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def absolute(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def log(a):
    """Natural log with inputs below ``LOG_EPS`` clamped to ``LOG_EPS``.

    Negative inputs are an error; clamping only guards underflow of values
    that are meant to be positive probabilities.
    """
    a = as_tensor(a)
    x = a.data
    if (x < 0).any() or np.isnan(x).any():
        raise NumericError("log of a negative or NaN value")
    xc = np.maximum(x, DTYPE(LOG_EPS))
    live = (x >= LOG_EPS).astype(DTYPE)
    return _make(np.log(xc), "log", (a,), lambda g: (g * live / xc,))


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    x = a.data
    y = np.clip(x, lo, hi) if (lo is not None or hi is not None) else x.copy()
    inside = np.ones_like(x)
    if lo is not None:
        inside[x < lo] = 0.0
    if hi is not None:
        inside[x > hi] = 0.0
    return _make(y, "clamp", (a,), lambda g: (g * inside,))


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "leaky_relu": leaky_relu,
    "log": log,
    "clamp": clamp,
}


def elementwise(op, *inputs, **params):
    """Dispatch an elementwise op by name, e.g. ``elementwise("leaky_relu", x, slope=0.2)``."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs, **params)


# -- reductions and shape ops ---------------------------------------------

def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(a, op="sum", axes=None, keepdims=False):
    """Sum or mean over ``axes`` (all axes when ``None``; identity for ``[]``)."""
    if op not in ("sum", "mean"):
        raise UsageError(f"unknown reduction {op!r}")
    a = as_tensor(a)
    axes = _normalize_axes(axes, a.ndim)
    shape = a.shape
    if not axes:
        return _make(a.data.copy(), op, (a,), lambda g: (g,))
    count = int(np.prod([shape[ax] for ax in axes]))
    y = a.data.sum(axis=axes, keepdims=keepdims, dtype=DTYPE)
    if op == "mean":
        y = y / DTYPE(count)
    scale = DTYPE(1.0 / count) if op == "mean" else DTYPE(1.0)
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward_fn(g):
        return (np.broadcast_to(g.reshape(kept) * scale, shape).copy(),)

    return _make(np.asarray(y, dtype=DTYPE), op, (a,), backward_fn)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = _normalize_axes((axis,), len(ref))[0]
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, backward_fn
    )


# -- convolution ------------------------------------------------------------

def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _check_conv_args(stride, padding):
    if int(stride) != stride or stride < 1:
        raise DimensionError(f"stride must be a positive integer, got {stride}")
    if int(padding) != padding or padding < 0:
        raise DimensionError(f"padding must be a non-negative integer, got {padding}")


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp, kh, kw, stride, ho, wo):
    # (N, C, Ho, Wo, kh, kw) strided view, no copy
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _conv_forward(x, w, stride, pad):
    _, _, kh, kw = w.shape
    ho = _conv_out_size(x.shape[2], kh, stride, pad)
    wo = _conv_out_size(x.shape[3], kw, stride, pad)
    cols = _windows(_pad(x, pad), kh, kw, stride, ho, wo)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g, w, stride, pad, in_shape):
    """Adjoint of ``_conv_forward`` w.r.t. its input (scatter-add of window grads)."""
    n, c, h, wd = in_shape
    _, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    dcols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=DTYPE)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + hspan : stride, j : j + wspan : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp)


def _conv_kernel_grad(x, g, stride, pad, kshape):
    _, _, kh, kw = kshape
    cols = _windows(_pad(x, pad), kh, kw, stride, g.shape[2], g.shape[3])
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw


def _check_bias(bias, channels):
    if bias is None:
        return None
    bias = as_tensor(bias)
    if bias.shape != (channels,):
        raise DimensionError(f"bias shape {bias.shape} != ({channels},)")
    return bias


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation of an NCHW input with an OIHW kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_args(stride, padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OIHW kernel")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}"
        )
    ho = _conv_out_size(x.shape[2], kernel.shape[2], stride, padding)
    wo = _conv_out_size(x.shape[3], kernel.shape[3], stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: non-positive output size {ho}x{wo}")
    bias = _check_bias(bias, kernel.shape[0])
    xd, wd = x.data, kernel.data
    y = _conv_forward(xd, wd, stride, padding)
    if bias is not None:
        y += bias.data[None, :, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(g):
        gx = _conv_input_grad(g, wd, stride, padding, xd.shape) if x.requires_grad else None
        gw = _conv_kernel_grad(xd, g, stride, padding, wd.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(y, "conv2d", parents, backward_fn)


def conv_transpose2d(x, kernel, bias=None, stride=1, padding=0):
    """Transposed convolution; kernel layout is (in_channels, out_channels, kH, kW).

    This is the exact adjoint of :func:`conv2d` with the same kernel, so
    ``H_out = (H - 1) * stride - 2 * padding + kH``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_args(stride, padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv_transpose2d expects NCHW input and IOHW kernel")
    if x.shape[1] != kernel.shape[0]:
        raise DimensionError(
            f"conv_transpose2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[0]}"
        )
    n, _, h, w = x.shape
    ci, co, kh, kw = kernel.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d: non-positive output size {ho}x{wo}")
    bias = _check_bias(bias, co)
    xd, wd = x.data, kernel.data
    y = _conv_input_grad(xd, wd, stride, padding, (n, co, ho, wo))
    if bias is not None:
        y += bias.data[None, :, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(g):
        gx = _conv_forward(g, wd, stride, padding) if x.requires_grad else None
        gw = _conv_kernel_grad(g, xd, stride, padding, wd.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(y, "conv_transpose2d", parents, backward_fn)


# -- normalization ----------------------------------------------------------

def normalize(x, mode, gamma, beta, epsilon=1e-5):
    """Per-channel normalization using the statistics of the current input.

    ``mode="batch"`` pools over (N, H, W); ``mode="instance"`` over (H, W) of
    each sample separately.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if epsilon <= 0:
        raise UsageError("epsilon must be positive")
    if x.ndim != 4:
        raise DimensionError("normalize expects an NCHW tensor")
    n, c, h, w = x.shape
    if h * w == 0:
        raise DimensionError("normalize: zero spatial extent")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    if mode == "batch":
        axes = (0, 2, 3)
    elif mode == "instance":
        axes = (2, 3)
    else:
        raise UsageError(f"unknown normalization mode {mode!r}")
    count = float(np.prod([x.shape[a] for a in axes]))
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + DTYPE(epsilon))
    xhat = centered * inv_std
    gd = gamma.data[None, :, None, None]
    y = xhat * gd + beta.data[None, :, None, None]

    def backward_fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (inv_std / DTYPE(count)) * (DTYPE(count) * dxhat - s1 - xhat * s2)
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(y, f"normalize_{mode}", (x, gamma, beta), backward_fn)


# -- backward pass -----------------------------------------------------------

def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
    return order  # parents before children


def backward(root, accumulate=True):
    """Back-propagate from a single-element tensor.

    Intermediate gradient buffers are fresh on every call.  Leaf ``.grad``
    buffers accumulate across calls when ``accumulate`` is true (clear them
    with ``zero_grad``); otherwise they are overwritten.  Returns a dict
    mapping each reached leaf to its gradient array.
    """
    if root.size != 1:
        raise UsageError(f"backward needs a single-element root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topological_order(root)
    grads = {id(root): np.ones(root.shape, dtype=DTYPE)}
    leaves = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if accumulate and t.grad is not None:
                t.grad = t.grad + g
            else:
                t.grad = g.astype(DTYPE, copy=True)
            leaves[t] = t.grad
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE).reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    checked: int
    nondifferentiable: int

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:g} "
            f"checked={self.checked} kinks={self.nondifferentiable}"
        )


def grad_check(
    f: Callable[..., Tensor],
    inputs,
    step=1e-3,
    tolerance=1e-2,
    max_elements=None,
    seed=0,
) -> GradCheckReport:
    """Compare :func:`backward` gradients of ``f`` against central differences.

    ``inputs`` is a tensor or a sequence of tensors passed positionally to
    ``f``.  Each element's error is ``|analytic - numeric|`` divided by the
    largest gradient magnitude seen (over both estimates).  In float32 the
    central difference carries absolute noise of roughly ``ulp(f) / step``,
    so errors are measured against the gradient's scale rather than against
    each component's own size.  Coordinates where the one-sided differences
    disagree and bracket the analytic value sit on a kink (relu-type ops);
    they are counted in ``nondifferentiable`` and not scored.
    """
    if step <= 0:
        raise UsageError("step must be positive")
    single = isinstance(inputs, Tensor)
    xs = [inputs] if single else list(inputs)
    xs = [Tensor(as_tensor(x).data.copy(), requires_grad=True) for x in xs]

    out = f(*xs)
    if out.size != 1:
        raise UsageError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out, accumulate=False)
    analytic = [
        (x.grad if x.grad is not None else np.zeros(x.shape, DTYPE)).astype(np.float64)
        for x in xs
    ]

    def evaluate():
        with no_grad():
            return float(np.asarray(f(*xs).data, dtype=np.float64).reshape(-1)[0])

    rng = np.random.default_rng(seed)
    f0 = evaluate()
    records = []  # (analytic, central, forward, backward)
    for x, a in zip(xs, analytic):
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        for i in idx:
            orig = flat[i]
            hi = DTYPE(orig + step)
            lo = DTYPE(orig - step)
            flat[i] = hi
            fp = evaluate()
            flat[i] = lo
            fm = evaluate()
            flat[i] = orig
            dh = float(hi) - float(orig)
            dl = float(orig) - float(lo)
            records.append(
                (a.reshape(-1)[i], (fp - fm) / (dh + dl), (fp - f0) / dh, (f0 - fm) / dl)
            )

    if not records:
        return GradCheckReport(0.0, True, tolerance, 0, 0)
    rec = np.array(records)
    ana, num, fwd, bwd = rec.T
    scale = max(float(np.abs(num).max()), float(np.abs(ana).max()), 1e-12)
    rel = np.abs(ana - num) / scale
    lo_side = np.minimum(fwd, bwd) - tolerance * scale
    hi_side = np.maximum(fwd, bwd) + tolerance * scale
    kink = (
        (rel > tolerance)
        & (np.abs(fwd - bwd) > tolerance * scale)
        & (ana >= lo_side)
        & (ana <= hi_side)
    )
    scored = rel[~kink]
    worst = float(scored.max()) if scored.size else 0.0
    return GradCheckReport(
        max_rel_error=worst,
        passed=bool(worst <= tolerance),
        tolerance=tolerance,
        checked=int(scored.size),
        nondifferentiable=int(kink.sum()),
    )

