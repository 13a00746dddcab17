"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the network is a Tensor holding a numpy
float64 array. Operations record a backward closure on their output;
``backward(loss)`` walks the graph in reverse topological order and
accumulates gradients into ``.grad``. Gradients accumulate across calls
until ``zero_grad`` — the training harness resets them each episode.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError, DimensionError, RangeError, StateError

_grad_state = threading.local()


def _grad_enabled_now():
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation fast path).

    The flag is per-thread, so concurrent evaluation threads cannot switch
    tracking off under a training thread."""
    prev = _grad_enabled_now()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the module-level functions do the work
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fn):
    out = Tensor(data)
    if _grad_enabled_now() and any(p.requires_grad or p._grad_fn is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn()
    return out


def _accumulate(t, g):
    """Add g into t.grad; copies because g may alias shared memory."""
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _accumulate_owned(t, g):
    """Like _accumulate for a freshly allocated g the caller will not touch
    again: the first accumulation takes ownership instead of copying."""
    if t.grad is None and g.shape == t.data.shape:
        t.grad = g
    else:
        _accumulate(t, g)


def _wants_grad(t):
    return t.requires_grad or t._grad_fn is not None


def _unbroadcast(g, shape):
    # sum the upstream gradient over axes that were broadcast in the forward
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss):
    """Reverse-mode sweep from a scalar loss; fills .grad on reachable tensors."""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    # iterative post-order topological sort (graphs can be deep)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._grad_fn is not None:
                stack.append((p, False))

    # non-leaf grads are per-pass quantities: reset them so a repeated
    # backward adds exactly one more unit of loss gradient to the leaves
    for node in topo:
        node.grad = None
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------

def add(a, b):
    def grad_fn():
        def fn(g):
            if _wants_grad(a):
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if _wants_grad(b):
                _accumulate(b, _unbroadcast(g, b.data.shape))
        return fn
    try:
        data = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: incompatible shapes {a.data.shape} vs {b.data.shape}") from e
    return _make(data, (a, b), grad_fn)


def sub(a, b):
    def grad_fn():
        def fn(g):
            if _wants_grad(a):
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if _wants_grad(b):
                _accumulate(b, _unbroadcast(-g, b.data.shape))
        return fn
    return _make(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    def grad_fn():
        def fn(g):
            if _wants_grad(a):
                _accumulate_owned(a, _unbroadcast(g * b.data, a.data.shape))
            if _wants_grad(b):
                _accumulate_owned(b, _unbroadcast(g * a.data, b.data.shape))
        return fn
    try:
        data = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: incompatible shapes {a.data.shape} vs {b.data.shape}") from e
    return _make(data, (a, b), grad_fn)


def div(a, b):
    def grad_fn():
        def fn(g):
            if _wants_grad(a):
                _accumulate_owned(a, _unbroadcast(g / b.data, a.data.shape))
            if _wants_grad(b):
                _accumulate_owned(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        return fn
    return _make(a.data / b.data, (a, b), grad_fn)


def neg(a):
    def grad_fn():
        def fn(g):
            _accumulate_owned(a, -g)
        return fn
    return _make(-a.data, (a,), grad_fn)


def power(a, exponent):
    """a ** exponent for a scalar python exponent."""
    def grad_fn():
        def fn(g):
            _accumulate_owned(a, g * exponent * a.data ** (exponent - 1))
        return fn
    return _make(a.data ** exponent, (a,), grad_fn)


def exp(a):
    data = np.exp(a.data)
    def grad_fn():
        def fn(g):
            _accumulate_owned(a, g * data)
        return fn
    return _make(data, (a,), grad_fn)


def log(a):
    def grad_fn():
        def fn(g):
            _accumulate_owned(a, g / a.data)
        return fn
    return _make(np.log(a.data), (a,), grad_fn)


def sqrt(a):
    data = np.sqrt(a.data)
    def grad_fn():
        def fn(g):
            _accumulate_owned(a, g * 0.5 / data)
        return fn
    return _make(data, (a,), grad_fn)


def clamp_min(a, floor):
    """max(a, floor); gradient passes where a >= floor."""
    mask = a.data >= floor
    def grad_fn():
        def fn(g):
            _accumulate_owned(a, g * mask)
        return fn
    return _make(np.maximum(a.data, floor), (a,), grad_fn)


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero outside the interval."""
    mask = (a.data >= lo) & (a.data <= hi)
    def grad_fn():
        def fn(g):
            _accumulate_owned(a, g * mask)
        return fn
    return _make(np.clip(a.data, lo, hi), (a,), grad_fn)


def leaky_relu(a, slope=0.2):
    if not 0.0 <= slope <= 1.0:
        raise ContractError(f"leaky_relu: slope must be in [0, 1], got {slope}")
    pos = a.data >= 0
    # for slope in [0, 1], max(x, slope*x) equals the usual piecewise form
    def grad_fn():
        def fn(g):
            _accumulate_owned(a, g * np.where(pos, 1.0, slope))
        return fn
    return _make(np.maximum(a.data, slope * a.data), (a,), grad_fn)


def sigmoid(a):
    # split by sign to avoid overflow in exp
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    def grad_fn():
        def fn(g):
            _accumulate_owned(a, g * data * (1.0 - data))
        return fn
    return _make(data, (a,), grad_fn)


def softmax(a, axis):
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.data.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)
    def grad_fn():
        def fn(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            _accumulate_owned(a, data * (g - dot))
        return fn
    return _make(data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    def grad_fn():
        def fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        return fn
    return _make(data, (a,), grad_fn)


def reduce_mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)
    def grad_fn():
        def fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate_owned(a, np.broadcast_to(g, a.data.shape) / n)
        return fn
    return _make(data, (a,), grad_fn)


def reduce_max(a, axis, keepdims=False):
    """Max along one axis; gradient routes to the first argmax."""
    idx = a.data.argmax(axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        data = data.squeeze(axis=axis)
    def grad_fn():
        def fn(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
            _accumulate_owned(a, ga)
        return fn
    return _make(data, (a,), grad_fn)


def reshape(a, shape):
    def grad_fn():
        def fn(g):
            _accumulate(a, g.reshape(a.data.shape))
        return fn
    return _make(a.data.reshape(shape), (a,), grad_fn)


def transpose(a, axes):
    inv = np.argsort(axes)
    def grad_fn():
        def fn(g):
            _accumulate(a, g.transpose(inv))
        return fn
    return _make(a.data.transpose(axes), (a,), grad_fn)


def concat(xs, axis):
    xs = list(xs)
    if not xs:
        raise ContractError("concat requires at least one tensor")
    splits = np.cumsum([x.data.shape[axis] for x in xs])[:-1]
    def grad_fn():
        def fn(g):
            for x, piece in zip(xs, np.split(g, splits, axis=axis)):
                if _wants_grad(x):
                    _accumulate(x, piece)
        return fn
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from e
    return _make(data, tuple(xs), grad_fn)


def narrow(a, start, stop):
    """Contiguous row range [start, stop) along axis 0 (cheap view forward)."""
    n = a.data.shape[0]
    if not (0 <= start < stop <= n):
        raise RangeError(f"narrow: [{start}, {stop}) invalid for length {n}")
    def grad_fn():
        def fn(g):
            ga = np.zeros_like(a.data)
            ga[start:stop] = g
            _accumulate_owned(a, ga)
        return fn
    return _make(a.data[start:stop], (a,), grad_fn)


def gather(a, index, axis):
    """take_along_axis with constant integer indices."""
    index = np.asarray(index)
    def grad_fn():
        def fn(g):
            ga = np.zeros_like(a.data)
            it = list(np.ogrid[tuple(map(slice, index.shape))])
            it[axis] = index
            np.add.at(ga, tuple(it), g)
            _accumulate_owned(a, ga)
        return fn
    return _make(np.take_along_axis(a.data, index, axis=axis), (a,), grad_fn)


def scatter(a, index, axis, size):
    """Spread ``a`` into a zero tensor whose ``axis`` has length ``size``.

    Indices must be distinct along ``axis`` within each row (top-k output
    satisfies this), so forward assignment never collides.
    """
    index = np.asarray(index)
    shape = list(a.data.shape)
    shape[axis] = size
    data = np.zeros(shape)
    np.put_along_axis(data, index, a.data, axis=axis)
    def grad_fn():
        def fn(g):
            _accumulate_owned(a, np.take_along_axis(g, index, axis=axis))
        return fn
    return _make(data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def _parse_einsum(eq):
    lhs, out = eq.split("->")
    in0, in1 = lhs.split(",")
    for name, spec in (("first", in0), ("second", in1)):
        if len(set(spec)) != len(spec):
            raise ContractError(f"einsum: repeated index in {name} operand of '{eq}'")
    for spec, other in ((in0, in1), (in1, in0)):
        if not set(spec) <= set(other) | set(out):
            raise ContractError(f"einsum: '{eq}' sums an index inside a single operand")
    return in0, in1, out


# np.einsum's optimizer cannot route batched-GEMM patterns (a shared batch
# index on both operands) through BLAS; these show up in the prototype
# generator's backward pass, so map them to matmul by hand.
_EINSUM_BLAS = {
    "nbct,nck->nbtk": lambda a, b: np.matmul(a.transpose(0, 1, 3, 2), b[:, None]),
    "nbtk,nbct->nck": lambda a, b: np.matmul(
        np.ascontiguousarray(b.transpose(0, 2, 1, 3)).reshape(b.shape[0], b.shape[2], -1),
        np.ascontiguousarray(a).reshape(a.shape[0], -1, a.shape[3])),
}


def _einsum_eval(eq, a, b):
    special = _EINSUM_BLAS.get(eq)
    if special is not None:
        return np.ascontiguousarray(special(a, b))
    return np.einsum(eq, a, b, optimize=True)


def einsum(eq, a, b):
    """Two-operand einsum. Each operand index must appear in the output or
    the other operand, which makes both VJPs einsums as well."""
    in0, in1, out = _parse_einsum(eq)
    def grad_fn():
        def fn(g):
            if _wants_grad(a):
                _accumulate_owned(a, _einsum_eval(f"{out},{in1}->{in0}", g, b.data))
            if _wants_grad(b):
                _accumulate_owned(b, _einsum_eval(f"{in0},{out}->{in1}", a.data, g))
        return fn
    return _make(_einsum_eval(eq, a.data, b.data), (a, b), grad_fn)


def linear(x, weight, bias=None):
    """x @ weight.T + bias with weight shaped (out_features, in_features)."""
    if x.data.shape[-1] != weight.data.shape[1]:
        raise DimensionError(
            f"linear: input width {x.data.shape[-1]} != weight in_features {weight.data.shape[1]}")
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    def grad_fn():
        def fn(g):
            if _wants_grad(x):
                _accumulate_owned(x, g @ weight.data)
            if _wants_grad(weight):
                gm = g.reshape(-1, g.shape[-1])
                xm = x.data.reshape(-1, x.data.shape[-1])
                _accumulate_owned(weight, gm.T @ xm)
            if bias is not None and _wants_grad(bias):
                _accumulate_owned(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))
        return fn
    return _make(data, parents, grad_fn)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

_scratch = threading.local()


def _scratch_buf(tag, shape):
    """Reusable per-thread scratch array (large buffers are expensive to
    fault in fresh every call). Contents are garbage; callers overwrite."""
    cache = getattr(_scratch, "bufs", None)
    if cache is None:
        cache = _scratch.bufs = {}
    buf = cache.get(tag)
    if buf is None or buf.shape != shape:
        buf = cache[tag] = np.empty(shape)
    return buf


def _scratch_take(tag, shape):
    """Check a buffer out of the per-thread pool (or allocate one). The
    caller owns it until ``_scratch_put`` returns it, so it can be retained
    across forward/backward without aliasing a concurrent checkout."""
    cache = getattr(_scratch, "pools", None)
    if cache is None:
        cache = _scratch.pools = {}
    pool = cache.get((tag, shape))
    if pool:
        return pool.pop()
    return np.empty(shape)


def _scratch_put(tag, buf):
    cache = getattr(_scratch, "pools", None)
    if cache is None:
        cache = _scratch.pools = {}
    pool = cache.setdefault((tag, buf.shape), [])
    if len(pool) < 4:
        pool.append(buf)


def _im2col(xp, kh, kw, stride, oh, ow, buf):
    for di in range(kh):
        for dj in range(kw):
            buf[:, :, di, dj] = xp[:, :, di:di + stride * oh:stride, dj:dj + stride * ow:stride]
    return buf


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation over NCHW input.

    Internally an im2col: kernel-offset slices are packed into a scratch
    column buffer and contracted with a batched GEMM. The column buffer is
    rebuilt in backward rather than retained, so it can be recycled.
    """
    b, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if stride < 1:
        raise RangeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    col = _im2col(xp, kh, kw, stride, oh, ow,
                  _scratch_take("conv_col", (b, cin, kh, kw, oh, ow)))
    colm = col.reshape(b, cin * kh * kw, oh * ow)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w2[None], colm).reshape(b, cout, oh, ow)
    if bias is not None:
        out += bias.data[None, :, None, None]

    track = _grad_enabled_now() and (_wants_grad(x) or _wants_grad(weight)
                                     or (bias is not None and _wants_grad(bias)))
    if not track:
        _scratch_put("conv_col", col)

    parents = (x, weight) if bias is None else (x, weight, bias)
    kept = {"col": None if not track else col}
    def grad_fn():
        def fn(g):
            gm = g.reshape(b, cout, oh * ow)
            if _wants_grad(weight):
                ck = kept["col"]
                if ck is None:  # repeated backward after the buffer went back
                    ck = _im2col(xp, kh, kw, stride, oh, ow,
                                 _scratch_take("conv_col", (b, cin, kh, kw, oh, ow)))
                ckm = ck.reshape(b, cin * kh * kw, oh * ow)
                gwb = _scratch_buf("conv_gw", (b, cout, cin * kh * kw))
                np.matmul(gm, ckm.transpose(0, 2, 1), out=gwb)
                _accumulate_owned(weight, gwb.sum(axis=0).reshape(weight.data.shape))
                _scratch_put("conv_col", ck)
                kept["col"] = None
            if bias is not None and _wants_grad(bias):
                _accumulate_owned(bias, g.sum(axis=(0, 2, 3)))
            if _wants_grad(x):
                gcol = _scratch_buf("conv_gcol", (b, cin * kh * kw, oh * ow))
                np.matmul(w2.T[None], gm, out=gcol)
                gcol = gcol.reshape(b, cin, kh, kw, oh, ow)
                gxp = _scratch_buf("conv_gxp", (b, cin, h + 2 * padding, w + 2 * padding))
                gxp.fill(0.0)
                for di in range(kh):
                    for dj in range(kw):
                        gxp[:, :, di:di + stride * oh:stride,
                            dj:dj + stride * ow:stride] += gcol[:, :, di, dj]
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
                _accumulate(x, gx)
            if kept["col"] is not None:   # weight did not want grad; release anyway
                _scratch_put("conv_col", kept["col"])
                kept["col"] = None
        return fn
    return _make(out, parents, grad_fn)


def _adaptive_bounds(n, out_n):
    # window i covers [floor(i*n/out), ceil((i+1)*n/out)); windows may overlap
    starts = [(i * n) // out_n for i in range(out_n)]
    ends = [-(-((i + 1) * n) // out_n) for i in range(out_n)]
    return starts, ends


def pool2d(x, kind, out_h, out_w):
    """Adaptive pooling of an NCHW tensor to (out_h, out_w).

    ``kind`` is 'max' or 'avg'. Max routes the gradient to the argmax of
    each window (first index on ties); avg spreads it uniformly.
    """
    b, c, h, w = x.data.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise DimensionError(f"pool2d: output {out_h}x{out_w} invalid for input {h}x{w}")
    if kind not in ("max", "avg"):
        raise ContractError(f"pool2d: unknown kind {kind!r}")

    if h % out_h == 0 and w % out_w == 0:
        return _pool2d_uniform(x, kind, out_h, out_w)
    return _pool2d_adaptive(x, kind, out_h, out_w)


def _pool2d_uniform(x, kind, out_h, out_w):
    b, c, h, w = x.data.shape
    kh, kw = h // out_h, w // out_w
    win = x.data.reshape(b, c, out_h, kh, out_w, kw)
    if kind == "avg":
        data = win.mean(axis=(3, 5))
        def grad_fn():
            def fn(g):
                gx = np.broadcast_to(g[:, :, :, None, :, None],
                                     (b, c, out_h, kh, out_w, kw)) / (kh * kw)
                _accumulate_owned(x, gx.reshape(b, c, h, w))
            return fn
        return _make(data, (x,), grad_fn)

    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, out_h, out_w, kh * kw)
    idx = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    def grad_fn():
        def fn(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            gx = gflat.reshape(b, c, out_h, out_w, kh, kw).transpose(0, 1, 2, 4, 3, 5)
            _accumulate(x, gx.reshape(b, c, h, w))  # transpose view: copy on accumulate
        return fn
    return _make(data, (x,), grad_fn)


def _pool2d_adaptive(x, kind, out_h, out_w):
    b, c, h, w = x.data.shape
    hs, he = _adaptive_bounds(h, out_h)
    ws, we = _adaptive_bounds(w, out_w)
    data = np.empty((b, c, out_h, out_w))
    argmaxes = {} if kind == "max" else None
    for i in range(out_h):
        for j in range(out_w):
            seg = x.data[:, :, hs[i]:he[i], ws[j]:we[j]]
            if kind == "avg":
                data[:, :, i, j] = seg.mean(axis=(2, 3))
            else:
                flat = seg.reshape(b, c, -1)
                idx = flat.argmax(axis=-1)
                argmaxes[(i, j)] = idx
                data[:, :, i, j] = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    def grad_fn():
        def fn(g):
            gx = np.zeros_like(x.data)
            for i in range(out_h):
                for j in range(out_w):
                    if kind == "avg":
                        n = (he[i] - hs[i]) * (we[j] - ws[j])
                        gx[:, :, hs[i]:he[i], ws[j]:we[j]] += g[:, :, i, j, None, None] / n
                    else:
                        seg = gx[:, :, hs[i]:he[i], ws[j]:we[j]]
                        gseg = np.zeros_like(seg.reshape(b, c, -1))
                        np.put_along_axis(gseg, argmaxes[(i, j)][..., None],
                                          g[:, :, i, j, None], axis=-1)
                        gx[:, :, hs[i]:he[i], ws[j]:we[j]] += gseg.reshape(seg.shape)
            _accumulate_owned(x, gx)
        return fn
    return _make(data, (x,), grad_fn)


class BatchNormState:
    """Running statistics of one batchnorm layer.

    ``build_embedding`` initializes the running stats to (0, 1) so a freshly
    built model can be evaluated; a bare state raises if used in eval mode
    before any train-mode pass.
    """

    def __init__(self, channels=None):
        if channels is None:
            self.running_mean = None
            self.running_var = None
            self.initialized = False
        else:
            self.running_mean = np.zeros(channels)
            self.running_var = np.ones(channels)
            self.initialized = True

    def copy(self):
        s = BatchNormState()
        if self.running_mean is not None:
            s.running_mean = self.running_mean.copy()
            s.running_var = self.running_var.copy()
        s.initialized = self.initialized
        return s


def batchnorm2d(x, gamma, beta, state, mode, momentum=0.1, eps=1e-5):
    """Per-channel normalization of an NCHW tensor.

    Train mode normalizes by batch statistics and updates the running
    stats in ``state``; eval mode uses the running stats.
    """
    b, c, h, w = x.data.shape
    n_per_channel = b * h * w
    if mode == "train":
        if n_per_channel < 2:
            raise ContractError("batchnorm2d: train mode needs at least 2 values per channel")
        m = x.data.mean(axis=(0, 2, 3))
        xhat = x.data - m[None, :, None, None]
        v = np.einsum("bchw,bchw->c", xhat, xhat) / n_per_channel
        if state is not None:
            if state.running_mean is None:
                state.running_mean = np.zeros(c)
                state.running_var = np.ones(c)
            state.running_mean = (1 - momentum) * state.running_mean + momentum * m
            state.running_var = (1 - momentum) * state.running_var + momentum * v
            state.initialized = True
        inv_std = 1.0 / np.sqrt(v + eps)
        np.multiply(xhat, inv_std[None, :, None, None], out=xhat)
    elif mode == "eval":
        if state is None or not state.initialized or state.running_mean is None:
            raise StateError("batchnorm2d: eval mode requires initialized running stats")
        m = state.running_mean
        v = state.running_var
        inv_std = 1.0 / np.sqrt(v + eps)
        xhat = (x.data - m[None, :, None, None]) * inv_std[None, :, None, None]
    else:
        raise ContractError(f"batchnorm2d: unknown mode {mode!r}")

    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def grad_fn():
        def fn(g):
            need_gamma = _wants_grad(gamma)
            need_x = _wants_grad(x)
            gxh_sum = np.einsum("bchw,bchw->c", g, xhat) if (need_gamma or
                                                             (need_x and mode == "train")) else None
            if need_gamma:
                _accumulate_owned(gamma, gxh_sum)
            if _wants_grad(beta):
                _accumulate_owned(beta, g.sum(axis=(0, 2, 3)))
            if need_x:
                gi = (gamma.data * inv_std)[None, :, None, None]
                if mode == "train":
                    gm = g.mean(axis=(0, 2, 3))[None, :, None, None]
                    gxh = (gxh_sum / n_per_channel)[None, :, None, None]
                    _accumulate_owned(x, gi * (g - gm - xhat * gxh))
                else:
                    _accumulate_owned(x, gi * g)
        return fn
    return _make(out, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

def topk_indices(values, k, axis=-1):
    """Indices of the k largest entries, descending, ties by ascending index.

    argpartition fast path; rows whose boundary value ties with excluded
    entries fall back to a full stable sort so the index rule stays exact.
    """
    values = np.asarray(values)
    v = np.moveaxis(values, axis, -1)
    n = v.shape[-1]
    if k < 1 or k > n:
        raise RangeError(f"topk_indices: k={k} outside [1, {n}]")
    if n <= 16 or k * 4 >= n:
        idx = np.argsort(-v, axis=-1, kind="stable")[..., :k]
        return np.moveaxis(idx, -1, axis)
    part = np.argpartition(-v, k - 1, axis=-1)[..., :k]
    pv = np.take_along_axis(v, part, -1)
    order = np.lexsort((part, -pv), axis=-1)   # primary -value, secondary index
    idx = np.take_along_axis(part, order, -1)
    vals = np.take_along_axis(pv, order, -1)
    kth = vals[..., -1:]
    class_size = (v == kth).sum(-1)
    selected_size = (vals == kth).sum(-1)
    bad = class_size > selected_size           # tie class crosses the boundary
    if bad.any():
        idx[bad] = np.argsort(-v[bad], axis=-1, kind="stable")[..., :k]
    return np.moveaxis(idx, -1, axis)


def topk_gather(values, k):
    """Top-k of a 1-D tensor: (indices, gathered values).

    Indices are constants of the backward pass; the gathered tensor carries
    gradient back to the selected positions only.
    """
    (n,) = values.data.shape
    if not 1 <= k <= n:
        raise RangeError(f"topk_gather: k={k} outside [1, {n}]")
    idx = topk_indices(values.data, k)
    gathered = gather(values, idx, axis=0)
    return [int(i) for i in idx], gathered


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus hyperparameters for Adam."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not 0 < beta1 < 1 or not 0 < beta2 < 1:
            raise RangeError("AdamState: betas must lie in (0, 1)")
        if lr <= 0 or eps <= 0:
            raise RangeError("AdamState: lr and eps must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, state):
    """One bias-corrected Adam update in place.

    Returns False without touching anything if any gradient contains
    NaN/Inf, so the caller can abort cleanly.
    """
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            return False
        grads.append(g)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, inputs, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic and return a scalar Tensor; stateful ops
    (train-mode batchnorm) must be frozen by the caller.
    """
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError("grad_check: f must be scalar-valued")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*inputs).data)
            flat[i] = orig - eps
            fm = float(f(*inputs).data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(an_flat[i] - numeric) / max(1e-8, abs(an_flat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
