"""Dense tensor engine with tape-based reverse-mode automatic differentiation.

Every learnable computation in this package runs through :class:`Tensor` and
the op functions below.  Data lives in numpy arrays (float32 for training,
float64 for gradient checking); adjoints are hand-written per op and recorded
on a tape in execution order, which is a valid topological order, so the
backward pass is a single reversed sweep.

Memory discipline: adjoint closures donate freshly computed gradient buffers
to `accumulate_grad(g, owned=True)` so first accumulations alias instead of
allocating, and the reverse sweep frees each node's adjoint as soon as it has
been propagated.  Donated buffers are owned by exactly one tensor, so the
in-place `+=` of later contributions never aliases live data.

Broadcasting is deliberately restricted to scalar*tensor and trailing-axis
("per-row") vectors; all other shape alignment is explicit.
"""

from __future__ import annotations

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "Tape",
    "TapeConsumedError",
    "DimensionError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "affine",
    "concat",
    "concat_last_axis",
    "gather_rows",
    "scatter_rows",
    "permute_rows",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reshape",
    "broadcast_to",
    "transpose",
    "leaky_relu",
    "softmax_over_axis",
    "log_softmax_over_axis",
    "standardize_over_axis",
    "layer_norm",
    "grad_check",
]

ALLOWED_DTYPES = (np.float32, np.float64)


class TapeConsumedError(RuntimeError):
    """Raised when backward is called twice without re-running forward."""


class DimensionError(ValueError):
    """Shape or axis mismatch between operands."""


class Tape:
    """Ordered record of executed ops, replayed in reverse for adjoints.

    Single-use: one backward pass consumes the tape.  Recording a new op after
    consumption starts a fresh tape, so ordinary train loops never need to
    reset it by hand.
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def __len__(self):
        return len(self._records)

    def record(self, out, backward_fn):
        if self._consumed:
            self._records = []
            self._consumed = False
        self._records.append((out, backward_fn))

    def reset(self):
        self._records = []
        self._consumed = False

    def run_backward(self, root):
        if self._consumed:
            raise TapeConsumedError(
                "tape already consumed by a previous backward pass; re-run forward"
            )
        if root.data.size != 1:
            raise DimensionError(
                f"backward root must be scalar, got shape {root.shape}"
            )
        root.grad = np.ones_like(root.data)
        while self._records:
            out, fn = self._records.pop()
            if out.grad is not None:  # node contributes to the root
                fn()
                out.grad = None  # adjoint fully propagated; free it early
        self._consumed = True


_tape = Tape()
_grad_enabled = True


def active_tape():
    return _tape


class no_grad:
    """Context manager disabling tape recording (evaluation passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype.type not in ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        _tape.run_backward(self)

    def accumulate_grad(self, g, owned=False):
        if self.grad is None:
            self.grad = g if owned else g.copy()
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    # operator sugar; full semantics live in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")


def _check_same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise DimensionError(
                f"mixed dtypes in one graph: {dt} vs {t.data.dtype}"
            )
    return dt


def _make_output(data, inputs, backward_fn):
    """Wrap op output; record adjoint closure when any input needs grad."""
    requires = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        _tape.record(out, backward_fn(out))
    return out


# ---------------------------------------------------------------------------
# elementwise / broadcast ops
# ---------------------------------------------------------------------------


def _binary_broadcast_check(a, b, opname):
    """Allow same-shape or trailing-vector ("per-row") pairing only."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row"
    raise DimensionError(
        f"{opname}: unsupported shapes {a.shape} and {b.shape}; only same-shape "
        "or trailing per-row vectors broadcast"
    )


_ones_cache = {}


def _ones_vec(n, dtype):
    key = (n, dtype.str)
    vec = _ones_cache.get(key)
    if vec is None:
        vec = np.ones(n, dtype=dtype)
        _ones_cache[key] = vec
    return vec


def _col_sum(g):
    """Sum a 2-D array over axis 0 through BLAS (much faster than .sum)."""
    return g.T @ _ones_vec(g.shape[0], g.dtype)


def _sum_to_row(g):
    if g.ndim == 1:
        return g.copy()
    return _col_sum(np.ascontiguousarray(g).reshape(-1, g.shape[-1]))


def add(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        data = a.data + np.asarray(s, dtype=a.data.dtype)

        def bw(out):
            def fn():
                if a.requires_grad:
                    a.accumulate_grad(out.grad, owned=True)
            return fn

        return _make_output(data, (a,), bw)
    _check_same_dtype(a, b)
    mode = _binary_broadcast_check(a, b, "add")
    data = a.data + b.data

    def bw(out):
        def fn():
            if b.requires_grad:
                if mode == "same":
                    b.accumulate_grad(out.grad)  # defensive copy on first use
                else:
                    b.accumulate_grad(_sum_to_row(out.grad), owned=True)
            if a.requires_grad:
                # b holds its own buffer by now, so out.grad has one owner
                a.accumulate_grad(out.grad, owned=True)
        return fn

    return _make_output(data, (a, b), bw)


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_dtype(a, b)
    mode = _binary_broadcast_check(a, b, "sub")
    data = a.data - b.data

    def bw(out):
        def fn():
            if b.requires_grad:
                g = -out.grad if mode == "same" else -_sum_to_row(out.grad)
                b.accumulate_grad(g, owned=True)
            if a.requires_grad:
                a.accumulate_grad(out.grad, owned=True)
        return fn

    return _make_output(data, (a, b), bw)


def mul(a, b):
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same_dtype(a, b)
    mode = _binary_broadcast_check(a, b, "mul")
    data = a.data * b.data

    def bw(out):
        def fn():
            if a.requires_grad:
                a.accumulate_grad(out.grad * b.data, owned=True)
            if b.requires_grad:
                g = out.grad * a.data
                if mode == "row":
                    g = _sum_to_row(g)
                b.accumulate_grad(g, owned=True)
        return fn

    return _make_output(data, (a, b), bw)


def scale(x, s):
    s = float(s)
    data = x.data * np.asarray(s, dtype=x.data.dtype)

    def bw(out):
        def fn():
            if x.requires_grad:
                x.accumulate_grad(out.grad * s, owned=True)
        return fn

    return _make_output(data, (x,), bw)


# ---------------------------------------------------------------------------
# matmul / affine
# ---------------------------------------------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} vs {b.shape}"
        )
    _check_same_dtype(a, b)
    data = a.data @ b.data

    def bw(out):
        def fn():
            if a.requires_grad:
                a.accumulate_grad(out.grad @ b.data.T, owned=True)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ out.grad, owned=True)
        return fn

    return _make_output(data, (a, b), bw)


def affine(x, w, b=None):
    """x @ w (+ row bias b) as one tape node; x 2-D."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: incompatible shapes {x.shape} and {w.shape}")
    _check_same_dtype(*((x, w, b) if b is not None else (x, w)))
    data = x.data @ w.data
    if b is not None:
        data += b.data

    def bw(out):
        def fn():
            if x.requires_grad:
                x.accumulate_grad(out.grad @ w.data.T, owned=True)
            if w.requires_grad:
                w.accumulate_grad(x.data.T @ out.grad, owned=True)
            if b is not None and b.requires_grad:
                b.accumulate_grad(_col_sum(out.grad), owned=True)
        return fn

    inputs = (x, w) if b is None else (x, w, b)
    return _make_output(data, inputs, bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x, shape):
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def bw(out):
        def fn():
            if x.requires_grad:
                x.accumulate_grad(out.grad.reshape(x.shape), owned=True)
        return fn

    return _make_output(data, (x,), bw)


def broadcast_to(x, shape):
    """Zero-copy expansion of size-1 axes; adjoint sums them back."""
    shape = tuple(shape)
    if len(shape) < x.ndim:
        raise DimensionError(f"cannot broadcast {x.shape} to shorter {shape}")
    data = np.broadcast_to(x.data, shape)
    lead = len(shape) - x.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1
    )

    def bw(out):
        def fn():
            if x.requires_grad:
                if axes:
                    g = out.grad.sum(axis=axes).reshape(x.shape)
                else:
                    g = out.grad.reshape(x.shape)
                x.accumulate_grad(g, owned=True)
        return fn

    return _make_output(data, (x,), bw)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = x.data.transpose(axes)

    def bw(out):
        def fn():
            if x.requires_grad:
                x.accumulate_grad(out.grad.transpose(inv), owned=True)
        return fn

    return _make_output(data, (x,), bw)


def concat(parts, axis):
    parts = list(parts)
    _check_same_dtype(*parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def fn():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    # disjoint slices of one buffer: safe to donate each
                    p.accumulate_grad(out.grad[tuple(sl)], owned=True)
        return fn

    return _make_output(data, tuple(parts), bw)


def concat_last_axis(*parts):
    return concat(parts, axis=-1)


# ---------------------------------------------------------------------------
# indexed ops
# ---------------------------------------------------------------------------


def _check_row_indices(idx, n_rows, opname):
    idx = np.asarray(idx)
    if idx.ndim != 1:
        raise DimensionError(f"{opname}: index array must be 1-D, got {idx.shape}")
    if idx.size:
        bad = np.where((idx < 0) | (idx >= n_rows))[0]
        if bad.size:
            raise IndexError(
                f"{opname}: row index {int(idx[bad[0]])} at position {int(bad[0])} "
                f"out of bounds for {n_rows} rows"
            )
    return idx.astype(np.int64, copy=False)


def gather_rows(x, idx):
    if x.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D source, got {x.shape}")
    idx = _check_row_indices(idx, x.shape[0], "gather_rows")
    data = x.data[idx]

    def bw(out):
        def fn():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                np.add.at(g, idx, out.grad)
                x.accumulate_grad(g, owned=True)
        return fn

    return _make_output(data, (x,), bw)


def permute_rows(x, perm):
    """gather_rows specialized to a permutation: adjoint scatters by assignment."""
    if x.ndim != 2:
        raise DimensionError(f"permute_rows expects a 2-D source, got {x.shape}")
    perm = _check_row_indices(perm, x.shape[0], "permute_rows")
    if perm.shape[0] != x.shape[0]:
        raise DimensionError("permute_rows: permutation length must match rows")
    data = x.data[perm]

    def bw(out):
        def fn():
            if x.requires_grad:
                g = np.empty_like(x.data)
                g[perm] = out.grad
                x.accumulate_grad(g, owned=True)
        return fn

    return _make_output(data, (x,), bw)


def scatter_rows(values, idx, num_rows):
    """Add value rows into a fresh (num_rows, C) zero matrix at idx."""
    if values.ndim != 2:
        raise DimensionError(f"scatter_rows expects 2-D values, got {values.shape}")
    idx = _check_row_indices(idx, num_rows, "scatter_rows")
    if idx.shape[0] != values.shape[0]:
        raise DimensionError(
            f"scatter_rows: {values.shape[0]} value rows but {idx.shape[0]} indices"
        )
    data = np.zeros((num_rows, values.shape[1]), dtype=values.data.dtype)
    np.add.at(data, idx, values.data)

    def bw(out):
        def fn():
            if values.requires_grad:
                values.accumulate_grad(out.grad[idx], owned=True)
        return fn

    return _make_output(data, (values,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def reduce_sum(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(out):
        def fn():
            if x.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                x.accumulate_grad(np.broadcast_to(g, x.shape).copy(), owned=True)
        return fn

    return _make_output(data, (x,), bw)


def reduce_mean(x, axis=None, keepdims=False):
    data = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else x.shape[axis]

    def bw(out):
        def fn():
            if x.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                scaled = np.broadcast_to(g, x.shape) / n
                x.accumulate_grad(scaled, owned=True)
        return fn

    return _make_output(data, (x,), bw)


def reduce_max(x, axis, keepdims=False):
    """Max over one axis; adjoint routes to the first argmax per group."""
    data = x.data.max(axis=axis, keepdims=keepdims)
    argmax = np.argmax(x.data, axis=axis)

    def bw(out):
        def fn():
            if x.requires_grad:
                g = out.grad if keepdims else np.expand_dims(out.grad, axis)
                scat = np.zeros_like(x.data)
                np.put_along_axis(scat, np.expand_dims(argmax, axis), g, axis=axis)
                x.accumulate_grad(scat, owned=True)
        return fn

    return _make_output(data, (x,), bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations
# ---------------------------------------------------------------------------


def leaky_relu(x, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    dt = x.data.dtype.type
    # piecewise slope as arithmetic (masked ufuncs are an order of magnitude
    # slower); at exactly 0 the factor is the negative-side slope
    fact = (x.data > 0).astype(x.data.dtype)
    fact *= dt(1.0 - slope)
    fact += dt(slope)
    data = x.data * fact

    def bw(out):
        def fn():
            if x.requires_grad:
                x.accumulate_grad(out.grad * fact, owned=True)
        return fn

    return _make_output(data, (x,), bw)


def _softmax_forward(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=axis, keepdims=True)
    return shifted


def _softmax_adjoint(y, g, axis):
    # dx = y * (g - sum(g * y)); module-level so tests can mutate it
    inner = (g * y).sum(axis=axis, keepdims=True)
    return y * (g - inner)


def softmax_over_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    ax = axis % x.ndim
    y = kernels.softmax_mid_axis(x.data) if ax == x.ndim - 2 else None
    fast = y is not None
    if y is None:
        y = _softmax_forward(x.data, axis)

    def bw(out):
        def fn():
            if x.requires_grad:
                g = kernels.softmax_mid_adjoint(y, out.grad) if fast else None
                if g is None:
                    g = _softmax_adjoint(y, out.grad, axis)
                x.accumulate_grad(g, owned=True)
        return fn

    return _make_output(y, (x,), bw)


def log_softmax_over_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"log_softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    shifted -= lse
    soft = np.exp(shifted)

    def bw(out):
        def fn():
            if x.requires_grad:
                gsum = out.grad.sum(axis=axis, keepdims=True)
                x.accumulate_grad(out.grad - soft * gsum, owned=True)
        return fn

    return _make_output(shifted, (x,), bw)


def standardize_over_axis(x, axis, eps=1e-5):
    """(x - mean) / sqrt(var + eps) along axis; constant slices map to zeros."""
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    centered *= inv
    y = centered

    def bw(out):
        def fn():
            if x.requires_grad:
                g = out.grad
                gmean = g.mean(axis=axis, keepdims=True)
                gy = (g * y).mean(axis=axis, keepdims=True)
                x.accumulate_grad((g - gmean - y * gy) * inv, owned=True)
        return fn

    return _make_output(y, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """standardize(x, -1) * gain + bias as one tape node.

    The standardized activations are recomputed in the backward pass instead
    of being kept alive, trading one transient allocation for graph memory.
    """
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm affine parameters must be ({x.shape[-1]},)"
        )
    fast = kernels.layer_norm_fwd(x.data, gain.data, bias.data, eps)
    if fast is not None:
        data, mu_flat, inv_flat = fast

        def bw(out):
            def fn():
                dx, dgain, dbias = kernels.layer_norm_bwd(
                    x.data, out.grad, gain.data, mu_flat, inv_flat)
                if bias.requires_grad:
                    bias.accumulate_grad(dbias, owned=True)
                if gain.requires_grad:
                    gain.accumulate_grad(dgain, owned=True)
                if x.requires_grad:
                    x.accumulate_grad(dx, owned=True)
            return fn

        return _make_output(data, (x, gain, bias), bw)

    mu = x.data.mean(axis=-1, keepdims=True)
    data = x.data - mu
    var = (data * data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data *= inv
    data *= gain.data
    data += bias.data

    def bw(out):
        def fn():
            g = out.grad
            y = (x.data - mu) * inv
            d = g.shape[-1]
            if bias.requires_grad:
                bias.accumulate_grad(_col_sum(g.reshape(-1, d)), owned=True)
            if gain.requires_grad:
                gain.accumulate_grad(_col_sum((g * y).reshape(-1, d)), owned=True)
            if x.requires_grad:
                gy = g * gain.data
                gmean = gy.mean(axis=-1, keepdims=True)
                gyy = (gy * y).mean(axis=-1, keepdims=True)
                y *= gyy
                gy -= gmean
                gy -= y
                gy *= inv
                x.accumulate_grad(gy, owned=True)
        return fn

    return _make_output(data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# numeric gradient verification
# ---------------------------------------------------------------------------


def grad_check(f, x, step=1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic; ``x``
    should be float64 for the finite differences to be trustworthy.
    """
    if x.data.dtype != np.float64:
        raise ValueError("grad_check requires a float64 tensor")
    if not x.data.flags["C_CONTIGUOUS"]:
        x.data = np.ascontiguousarray(x.data)
    x.zero_grad()
    out = f(x)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: non-finite forward value")
    out.backward()
    g_ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    g_fd = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(x).item()
            flat[i] = orig - step
            f_minus = f(x).item()
            flat[i] = orig
            g_fd[i] = (f_plus - f_minus) / (2.0 * step)
    if not np.isfinite(g_fd).all():
        raise FloatingPointError("grad_check: non-finite finite-difference value")
    g_fd = g_fd.reshape(x.shape)

    num = np.abs(g_ad - g_fd)
    den = np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float((num / den).max())
