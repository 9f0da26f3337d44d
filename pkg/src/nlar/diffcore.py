"""Small reverse-mode autodiff engine over dense float64 numpy arrays.

Define-by-run: every primitive call appends a node to a ``Tape`` holding
the output value, the parent variables and a VJP closure.  ``backward``
walks the tape once in reverse, accumulating gradients additively across
fan-out.  The op functions below dispatch on their argument types: if no
``Var`` is involved they run in plain numpy, so the same code path can be
used both for differentiable evaluation and for fast oracles.

The primitive set is exactly what the surrogate network and the NUTS
log-density gradients need; there is no broadcasting cleverness beyond
numpy's trailing-axes rule, and no higher-order derivatives.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeMismatchError(ValueError):
    """Raised when primitive inputs have incompatible shapes."""

    def __init__(self, primitive, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        super().__init__(f"{primitive}: incompatible shapes {shapes}")


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    # operator sugar so network code reads naturally
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


class Tape:
    """Ordered record of primitive operations.

    Nodes are stored in topological order by construction; ``backward``
    visits them exactly once in reverse.
    """

    def __init__(self):
        self.values = []
        self.parents = []
        self.vjps = []
        self.inputs = []

    def _new(self, value, parents=(), vjp=None):
        idx = len(self.values)
        self.values.append(value)
        self.parents.append(tuple(p.idx for p in parents))
        self.vjps.append(vjp)
        return Var(self, idx, value)

    def input(self, value) -> Var:
        """Register a differentiation root (e.g. a weight or theta)."""
        var = self._new(np.asarray(value, dtype=np.float64))
        self.inputs.append(var)
        return var

    def constant(self, value) -> Var:
        return self._new(np.asarray(value, dtype=np.float64))

    def release(self):
        """Drop all recorded arrays and closures.

        The tape, its Vars and its vjp closures reference each other, so
        the cycle collector is the only thing that would otherwise free
        them; their numpy buffers do not count toward gc thresholds and
        pile up across iterations.  Call this once the tape is no longer
        needed to return the memory immediately.
        """
        self.values.clear()
        self.parents.clear()
        self.vjps.clear()
        self.inputs.clear()


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _lift(tape, x):
    return x if isinstance(x, Var) else tape.constant(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, output: Var):
    """Gradients of a scalar output with respect to every tape input.

    Returns a dict mapping each input ``Var`` to its gradient array
    (matching the input's shape).  Accumulation is additive across
    fan-out.
    """
    out_val = output.value
    if np.size(out_val) != 1:
        raise ValueError(f"backward: output must be scalar, got shape {np.shape(out_val)}")
    n = len(tape.values)
    grads = [None] * n
    grads[output.idx] = np.ones_like(np.asarray(out_val, dtype=np.float64))
    input_idx = {var.idx for var in tape.inputs}
    for idx in range(output.idx, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        vjp = tape.vjps[idx]
        if vjp is None:
            continue
        for pidx, pg in zip(tape.parents[idx], vjp(g)):
            if pg is None:
                continue
            if grads[pidx] is None:
                grads[pidx] = pg
            else:
                grads[pidx] = grads[pidx] + pg
        if idx not in input_idx:
            grads[idx] = None  # release intermediate gradients eagerly
    result = {}
    for var in tape.inputs:
        g = grads[var.idx]
        result[var] = np.zeros_like(var.value) if g is None else g
    return result


def grad(output: Var, wrt) -> list:
    """Convenience: gradient of ``output`` for an explicit list of inputs."""
    table = backward(output.tape, output)
    return [table[v] for v in wrt]


# ---------------------------------------------------------------------------
# elementwise / broadcast primitives
# ---------------------------------------------------------------------------


def _binary(name, fwd, vjp_factory, a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    try:
        out = fwd(av, bv)
    except ValueError as exc:
        raise ShapeMismatchError(name, av.shape, bv.shape) from exc
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)
    vjp = vjp_factory(av, bv, out)
    return tape._new(out, (a, b), vjp)


def add(a, b):
    def vjp_factory(av, bv, out):
        return lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))

    return _binary("add", np.add, vjp_factory, a, b)


def sub(a, b):
    def vjp_factory(av, bv, out):
        return lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape))

    return _binary("subtract", np.subtract, vjp_factory, a, b)


def mul(a, b):
    def vjp_factory(av, bv, out):
        return lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))

    return _binary("multiply", np.multiply, vjp_factory, a, b)


def div(a, b):
    def vjp_factory(av, bv, out):
        return lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        )

    return _binary("divide", np.divide, vjp_factory, a, b)


def _unary(name, fwd, dfun, x):
    tape = _tape_of(x)
    xv = _val(x)
    out = fwd(xv)
    if tape is None:
        return out
    return tape._new(out, (x,), lambda g: (g * dfun(xv, out),))


def neg(x):
    return _unary("negative", np.negative, lambda xv, out: -np.ones_like(xv), x)


def exp(x):
    return _unary("exp", np.exp, lambda xv, out: out, x)


def log(x):
    return _unary("log", np.log, lambda xv, out: 1.0 / xv, x)


def sigmoid(x):
    def fwd(xv):
        return ndtr_free_sigmoid(xv)

    return _unary("sigmoid", fwd, lambda xv, out: out * (1.0 - out), x)


def ndtr_free_sigmoid(xv):
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(xv):
    return np.logaddexp(0.0, xv)


def softplus(x):
    return _unary("softplus", _softplus_np, lambda xv, out: ndtr_free_sigmoid(xv), x)


def log_sigmoid(x):
    def fwd(xv):
        return -_softplus_np(-xv)

    return _unary("log_sigmoid", fwd, lambda xv, out: ndtr_free_sigmoid(-xv), x)


def gelu(x):
    """Exact GeLU, x * Phi(x)."""

    def fwd(xv):
        return xv * ndtr(xv)

    def dfun(xv, out):
        return ndtr(xv) + xv * _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)

    return _unary("gelu", fwd, dfun, x)


def log1mexp(x):
    """log(1 - exp(-x)) for x > 0, numerically stable at both ends."""

    def fwd(xv):
        xv = np.asarray(xv)
        small = xv < np.log(2.0)
        out = np.empty_like(xv, dtype=np.float64)
        out[small] = np.log(-np.expm1(-xv[small]))
        out[~small] = np.log1p(-np.exp(-xv[~small]))
        return out

    def dfun(xv, out):
        # d/dx log(1-e^{-x}) = e^{-x} / (1 - e^{-x}) = 1 / (e^x - 1)
        return np.exp(-xv - out)

    return _unary("log1mexp", fwd, dfun, x)


# ---------------------------------------------------------------------------
# reductions and axis ops
# ---------------------------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    tape = _tape_of(x)
    xv = _val(x)
    out = xv.sum(axis=axis, keepdims=keepdims)
    if tape is None:
        return out

    def vjp(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, xv.shape),)

    return tape._new(np.asarray(out), (x,), vjp)


def masked_sum(x, mask):
    """Sum of x over entries where mask is 1 (mask is a constant)."""
    return sum_(mul(x, _val(mask)))


def logsumexp(x, axis=-1, keepdims=False):
    tape = _tape_of(x)
    xv = _val(x)
    m = np.max(xv, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(xv - m), axis=axis, keepdims=True)
    out = m + np.log(s)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    if tape is None:
        return out

    soft = np.exp(xv - m) / s

    def vjp(g):
        gg = np.asarray(g)
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (gg * soft,)

    return tape._new(out, (x,), vjp)


def softmax(x, axis=-1):
    tape = _tape_of(x)
    xv = _val(x)
    m = np.max(xv, axis=axis, keepdims=True)
    e = np.exp(xv - m)
    out = e / e.sum(axis=axis, keepdims=True)
    if tape is None:
        return out

    def vjp(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return tape._new(out, (x,), vjp)


def log_softmax(x, axis=-1):
    tape = _tape_of(x)
    xv = _val(x)
    m = np.max(xv, axis=axis, keepdims=True)
    shifted = xv - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    if tape is None:
        return out

    soft = np.exp(out)

    def vjp(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return tape._new(out, (x,), vjp)


def reshape(x, shape):
    tape = _tape_of(x)
    xv = _val(x)
    out = xv.reshape(shape)
    if tape is None:
        return out
    return tape._new(out, (x,), lambda g: (g.reshape(xv.shape),))


def slice_axis(x, axis, start, stop):
    tape = _tape_of(x)
    xv = _val(x)
    index = [slice(None)] * xv.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = xv[index]
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(xv)
        full[index] = g
        return (full,)

    return tape._new(out, (x,), vjp)


def concat(parts, axis):
    tape = _tape_of(*parts)
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    parts = [_lift(tape, p) for p in parts]
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        index = [slice(None)] * out.ndim
        for i in range(len(sizes)):
            index[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(index)])
        return tuple(grads)

    return tape._new(out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.shape[-1] != bv.shape[0] or bv.ndim != 2:
        raise ShapeMismatchError("matmul", av.shape, bv.shape)
    out = av @ bv
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)

    def vjp(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return (ga, gb)

    return tape._new(out, (a, b), vjp)


def conv1d_causal(x, w):
    """Causal 1-D convolution with implicit left zero padding.

    x: (batch, n, c_in); w: (k, c_in, c_out).  Output index i depends on
    input indices <= i only; tap ``w[k-1]`` is the current-step tap.
    """
    tape = _tape_of(x, w)
    xv, wv = _val(x), _val(w)
    if xv.ndim != 3 or wv.ndim != 3 or xv.shape[2] != wv.shape[1]:
        raise ShapeMismatchError("conv1d_causal", xv.shape, wv.shape)
    k = wv.shape[0]
    batch, n, _ = xv.shape
    c_out = wv.shape[2]
    out = np.zeros((batch, n, c_out))
    for j in range(k):
        d = k - 1 - j  # lag of tap j
        if d >= n:
            continue
        if d == 0:
            out += xv @ wv[j]
        else:
            out[:, d:, :] += xv[:, : n - d, :] @ wv[j]
    if tape is None:
        return out
    x, w = _lift(tape, x), _lift(tape, w)

    def vjp(g):
        gx = np.zeros_like(xv)
        gw = np.zeros_like(wv)
        for j in range(k):
            d = k - 1 - j
            if d >= n:
                continue
            if d == 0:
                gx += g @ wv[j].T
                gw[j] = np.tensordot(xv, g, axes=([0, 1], [0, 1]))
            else:
                gx[:, : n - d, :] += g[:, d:, :] @ wv[j].T
                gw[j] = np.tensordot(xv[:, : n - d, :], g[:, d:, :], axes=([0, 1], [0, 1]))
        return (gx, gw)

    return tape._new(out, (x, w), vjp)


# ---------------------------------------------------------------------------
# generic dispatch and gradient checking
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "matmul": matmul,
    "conv1d_causal": conv1d_causal,
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "divide": div,
    "negative": neg,
    "gelu": gelu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "exp": exp,
    "log": log,
    "log1mexp": log1mexp,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "logsumexp": logsumexp,
    "sum": sum_,
    "masked_sum": masked_sum,
    "reshape": reshape,
    "slice": slice_axis,
    "concat": concat,
}


def forward_primitive(name, inputs, attrs=None):
    """Apply a named primitive, recording it on the inputs' tape."""
    if name not in PRIMITIVES:
        raise KeyError(f"unknown primitive {name!r}")
    attrs = attrs or {}
    fn = PRIMITIVES[name]
    if name in ("concat",):
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def gradient_check(f, points, step=1e-5, scale_floor=0.0):
    """Max relative error between AD and central finite differences.

    ``f`` maps positional array arguments to a scalar; it is evaluated
    both through a tape (for AD) and in plain numpy (for differences).
    ``scale_floor`` adds that fraction of the largest gradient magnitude
    to every denominator, so coordinates whose true derivative is near
    zero are judged against the gradient's overall scale instead of
    against finite-difference noise.
    """
    points = [np.asarray(p, dtype=np.float64) for p in points]
    tape = Tape()
    xs = [tape.input(p) for p in points]
    out = f(*xs)
    if not np.isfinite(out.value).all():
        raise FloatingPointError("gradient_check: non-finite function value")
    table = backward(tape, out)
    g_max = max(float(np.abs(table[x]).max()) for x in xs) if xs else 0.0
    floor = 1e-12 + scale_floor * g_max
    worst = 0.0
    for arg_idx, p in enumerate(points):
        g_ad = table[xs[arg_idx]]
        flat = p.reshape(-1)
        for coord in range(flat.size):
            bumped = [q.copy() for q in points]
            bumped[arg_idx].reshape(-1)[coord] = flat[coord] + step
            hi = float(_val(f(*bumped)))
            bumped[arg_idx].reshape(-1)[coord] = flat[coord] - step
            lo = float(_val(f(*bumped)))
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(
                    f"gradient_check: non-finite value at arg {arg_idx} coord {coord}"
                )
            fd = (hi - lo) / (2.0 * step)
            ad = g_ad.reshape(-1)[coord]
            err = abs(ad - fd) / (abs(ad) + abs(fd) + floor)
            worst = max(worst, err)
    return worst
