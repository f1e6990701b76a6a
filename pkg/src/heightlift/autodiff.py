"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every learned block in the pipeline runs on these primitives. Forward code
executes eagerly on numpy arrays; when a :class:`Tape` is active, each
primitive appends a backward rule so :func:`backward` can replay the tape in
reverse and accumulate gradients. Without an active tape the same functions
run in plain inference mode.
"""

from __future__ import annotations

import json
import threading

import numpy as np

from .errors import ContractError, DimensionError, GradCheckError

_STATE = threading.local()


def _tape_stack():
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense N-d float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; everything routes through the module-level primitives
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

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data):
    """Tensor that never receives a gradient."""
    return Tensor(data, requires_grad=False)


class Tape:
    """Ordered record of executed primitives and their backward rules.

    Creation order is topological by construction: a primitive can only
    consume tensors that already exist.
    """

    def __init__(self):
        self.records = []  # (out, inputs, backward_fn)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))


def _finish(out_data, inputs, backward_fn):
    """Wrap a primitive's result, recording it when a tape is active."""
    tracked = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    tape = _active_tape()
    if tape is not None and tracked:
        tape.record(out, inputs, backward_fn)
    return out


def _accumulate(tensor, grad):
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def backward(tape, loss):
    """Populate ``grad`` on every tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out, and also across repeated
    backward calls into tensors created outside the tape (model parameters),
    which is how multi-scene batch gradients are summed; callers clear those
    grads between optimizer steps. Tensors produced on this tape get fresh
    gradients. Walking the tape in reverse visits each record exactly once,
    so the result is bit-identical for identical tapes and starting grads.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    for out, _, _ in tape.records:
        out.grad = None
    loss.grad = np.ones_like(loss.data)
    for out, inputs, backward_fn in reversed(tape.records):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for t, g in zip(inputs, grads):
            if g is not None and t.requires_grad:
                _accumulate(t, g)


# ---------------------------------------------------------------------------
# elementwise primitives


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _finish(out, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _finish(out, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g * b_data, a_data.shape),
                _unbroadcast(g * a_data, b_data.shape))

    return _finish(out, (a, b), bwd)


def relu(x):
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return _finish(out, (x,), bwd)


def sigmoid(x):
    # split by sign keeps exp() bounded for large |x|
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    out_data = out

    def bwd(g):
        return (g * out_data * (1.0 - out_data),)

    return _finish(out, (x,), bwd)


def exp(x):
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _finish(out, (x,), bwd)


def log(x):
    x_data = x.data
    out = np.log(x_data)

    def bwd(g):
        return (g / x_data,)

    return _finish(out, (x,), bwd)


def power(x, exponent):
    """x ** exponent for a constant float exponent."""
    x_data = x.data
    out = x_data ** exponent

    def bwd(g):
        return (g * exponent * x_data ** (exponent - 1.0),)

    return _finish(out, (x,), bwd)


def absolute(x):
    sign = np.sign(x.data)
    out = np.abs(x.data)

    def bwd(g):
        return (g * sign,)

    return _finish(out, (x,), bwd)


def clip(x, lo, hi):
    """Clamp values; gradient passes through only where unclamped."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)

    def bwd(g):
        return (g * inside,)

    return _finish(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy() if np.ndim(g) == 0
                    else np.full(shape, g.reshape(())),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _finish(out, (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def reshape(x, shape):
    old = x.data.shape
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _finish(out, (x,), bwd)


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _finish(out, (x,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish(out, tuple(tensors), bwd)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = x.data[index]
    shape = x.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return _finish(out, (x,), bwd)


def gather_rows(x, indices):
    """Select rows of a 2-D tensor by an integer index array."""
    idx = np.asarray(indices, dtype=np.intp)
    out = x.data[idx]
    shape = x.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return _finish(out, (x,), bwd)


def scatter_sum(values, cell_indices, n_cells):
    """Sum rows of ``values`` (N, C) into ``n_cells`` buckets.

    Accumulation order follows the row order of ``values``, which keeps the
    result bit-identical to a sequential per-row loop.
    """
    idx = np.asarray(cell_indices, dtype=np.intp)
    if idx.shape[0] != values.data.shape[0]:
        raise DimensionError(
            f"scatter_sum: {values.data.shape[0]} rows vs {idx.shape[0]} indices")
    out = np.zeros((n_cells, values.data.shape[1]), dtype=np.float64)
    np.add.at(out, idx, values.data)

    def bwd(g):
        return (g[idx],)

    return _finish(out, (values,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and learned-layer primitives


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g @ b_data.T, a_data.T @ g

    return _finish(out, (a, b), bwd)


def softmax(x, axis):
    if x.data.ndim == 0 or axis >= x.data.ndim or x.data.shape[axis] == 0:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    out_data = out

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _finish(out, (x,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta {gamma.data.shape}/{beta.data.shape} vs last axis {d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = centered * inv_std
    out = norm * gamma.data + beta.data
    g_data = gamma.data

    def bwd(g):
        dnorm = g * g_data
        dx = inv_std * (dnorm
                        - dnorm.mean(axis=-1, keepdims=True)
                        - norm * (dnorm * norm).mean(axis=-1, keepdims=True))
        dgamma = (g * norm).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        return dx, dgamma, dbeta

    return _finish(out, (x, gamma, beta), bwd)


def _conv_out_dim(dim, pad, stride):
    return (dim + 2 * pad - 3) // stride + 1


def conv2d(x, kernel, bias=None, stride=1, pad=1):
    """3x3 convolution over a (C_in, H, W) map via im2col.

    ``kernel`` is (C_out, C_in, 3, 3); ``bias`` is (C_out,) or None.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4 or kernel.data.shape[2:] != (3, 3):
        raise DimensionError(
            f"conv2d: input {x.data.shape}, kernel {kernel.data.shape}")
    c_in, h, w = x.data.shape
    c_out, kc_in = kernel.data.shape[:2]
    if kc_in != c_in:
        raise DimensionError(f"conv2d: kernel expects {kc_in} channels, input has {c_in}")
    if stride not in (1, 2) or pad not in (0, 1):
        raise ContractError(f"conv2d: stride {stride}, pad {pad} unsupported")
    ho, wo = _conv_out_dim(h, pad, stride), _conv_out_dim(w, pad, stride)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: empty output for input {x.data.shape}")

    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((c_in, 9, ho, wo), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            cols[:, di * 3 + dj] = padded[:, di:di + stride * ho:stride,
                                          dj:dj + stride * wo:stride]
    cols2 = cols.reshape(c_in * 9, ho * wo)
    w_mat = kernel.data.reshape(c_out, c_in * 9)
    out = w_mat @ cols2
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(c_out, ho, wo)
    ph, pw = padded.shape[1], padded.shape[2]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        g2 = g.reshape(c_out, ho * wo)
        dw = (g2 @ cols2.T).reshape(kernel.data.shape)
        dcols = (w_mat.T @ g2).reshape(c_in, 9, ho, wo)
        dpad = np.zeros((c_in, ph, pw), dtype=np.float64)
        for di in range(3):
            for dj in range(3):
                dpad[:, di:di + stride * ho:stride,
                     dj:dj + stride * wo:stride] += dcols[:, di * 3 + dj]
        dx = dpad[:, pad:ph - pad, pad:pw - pad] if pad else dpad
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=1)

    return _finish(out, inputs, bwd)


def avg_pool2d(x):
    """2x2 average pooling of a (C, H, W) map; dims must be even."""
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2d: odd spatial dims {x.data.shape}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bwd(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _finish(out, (x,), bwd)


def bilinear_sample(feature_map, points):
    """Bilinearly sample a (C, H, W) map at continuous (u, v) pixel coords.

    ``points`` is an (N, 2) tensor of (u, v) with u along the width axis.
    Points outside [0, W-1] x [0, H-1] return zero vectors; inside, the four
    neighboring texels are blended. Differentiable in both the map and the
    points (zero gradient for out-of-range points).
    """
    if feature_map.data.ndim != 3 or points.data.ndim != 2 or points.data.shape[1] != 2:
        raise DimensionError(
            f"bilinear_sample: map {feature_map.data.shape}, points {points.data.shape}")
    c, h, w = feature_map.data.shape
    u = points.data[:, 0]
    v = points.data[:, 1]
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)

    u0 = np.clip(np.floor(u), 0, max(w - 2, 0)).astype(np.intp)
    v0 = np.clip(np.floor(v), 0, max(h - 2, 0)).astype(np.intp)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = np.where(valid, u - u0, 0.0)
    fv = np.where(valid, v - v0, 0.0)

    m = feature_map.data
    a = m[:, v0, u0]  # (C, N)
    b = m[:, v0, u1]
    cc = m[:, v1, u0]
    d = m[:, v1, u1]
    w00 = (1.0 - fu) * (1.0 - fv) * valid
    w01 = fu * (1.0 - fv) * valid
    w10 = (1.0 - fu) * fv * valid
    w11 = fu * fv * valid
    out = (a * w00 + b * w01 + cc * w10 + d * w11).T  # (N, C)

    def bwd(g):
        gt = g.T  # (C, N)
        dmap = np.zeros_like(m)
        np.add.at(dmap.transpose(1, 2, 0), (v0, u0), (gt * w00).T)
        np.add.at(dmap.transpose(1, 2, 0), (v0, u1), (gt * w01).T)
        np.add.at(dmap.transpose(1, 2, 0), (v1, u0), (gt * w10).T)
        np.add.at(dmap.transpose(1, 2, 0), (v1, u1), (gt * w11).T)
        du_dir = (1.0 - fv) * (b - a) + fv * (d - cc)  # (C, N)
        dv_dir = (1.0 - fu) * (cc - a) + fu * (d - b)
        dpoints = np.empty_like(points.data)
        dpoints[:, 0] = (gt * du_dir).sum(axis=0) * valid
        dpoints[:, 1] = (gt * dv_dir).sum(axis=0) * valid
        return dmap, dpoints

    return _finish(out, (feature_map, points), bwd)


def linear(x, weight, bias=None):
    """x @ weight.T + bias with weight stored as (out_dim, in_dim)."""
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(op, inputs, eps=1e-5, seed=0):
    """Max relative error between tape gradients and central differences.

    ``op`` maps the given tensors to one output tensor; the comparison uses a
    fixed random linear functional of the output so every Jacobian entry
    contributes. Relative error is |analytic - numeric| / max(1, |numeric|),
    maximized over every element of every ``requires_grad`` input.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.grad = None

    with Tape() as tape:
        out = op(*inputs)
        if not np.all(np.isfinite(out.data)):
            raise GradCheckError(f"non-finite output in {getattr(op, '__name__', op)}")
        weights = constant(rng.standard_normal(out.data.shape))
        loss = tsum(mul(out, weights))
    backward(tape, loss)
    analytic = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data)
                for t in inputs if t.requires_grad]

    def eval_loss():
        value = op(*inputs)
        if not np.all(np.isfinite(value.data)):
            raise GradCheckError(f"non-finite value in {getattr(op, '__name__', op)}")
        return float((value.data * weights.data).sum())

    max_err = 0.0
    checked = [t for t in inputs if t.requires_grad]
    for t, grads in zip(checked, analytic):
        flat = t.data.reshape(-1)
        gflat = grads.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = eval_loss()
            flat[i] = orig - eps
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
    return max_err


# ---------------------------------------------------------------------------
# parameter serialization (dotted names -> {shape, data})


def params_to_json(params):
    """Serialize {name: Tensor} deterministically (sorted names)."""
    doc = {name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
           for name, t in params.items()}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def params_from_json(text):
    doc = json.loads(text)
    out = {}
    for name, entry in doc.items():
        shape = tuple(entry["shape"])
        data = np.array(entry["data"], dtype=np.float64).reshape(shape)
        out[name] = data
    return out


def load_params_into(params, arrays):
    """Copy named arrays into an existing parameter dict, shapes must match."""
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise DimensionError(f"parameter name mismatch: missing {missing}, extra {extra}")
    for name, t in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(t.data.shape):
            raise DimensionError(
                f"parameter {name}: file shape {arr.shape} vs expected {t.data.shape}")
        t.data = np.array(arr, dtype=np.float64)
