"""Dense tensors with reverse-mode differentiation.

Define-by-run: while a ComputeRecord is active (see `recording`), every
operation whose inputs require gradients appends one node to the record.
Nodes are therefore stored in execution order, which is already a valid
topological order, so `backward` is a single reverse sweep over the tape.
Without an active record the same operations run as plain numpy compute,
which is how inference and finite-difference probes stay cheap.

Values are float32 by default; gradient checks build float64 graphs. Hot
kernels (softmax, layer normalization, GELU, sigmoid) are dispatched through
semcap._kernels so they run compiled when the extension is available.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from semcap import _kernels as K

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A caller obligation was violated (non-scalar loss, zero vector, ...)."""


class NumericsError(ArithmeticError):
    """A numeric failure such as a NaN loss during training."""


class ComputeRecord:
    """Tape of executed operations.

    Each node is (op name, input node ids, vjp). The vjp maps the output
    gradient to a tuple of input gradients; leaves carry vjp None. A node's
    inputs always precede it because nodes are appended at execution time.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def _append(self, op, input_ids, vjp):
        self.nodes.append((op, input_ids, vjp))
        return len(self.nodes) - 1

    def __len__(self):
        return len(self.nodes)


_active: ComputeRecord | None = None


@contextmanager
def recording(record: ComputeRecord | None = None):
    """Activate a compute record for the duration of the block.

    Records are single-use: one forward pass per record, one backward sweep.
    """
    global _active
    if record is None:
        record = ComputeRecord()
    prev = _active
    _active = record
    try:
        yield record
    finally:
        _active = prev


def active_record():
    return _active


class Tensor:
    """A dense array plus its position (node id) in the active record."""

    __slots__ = ("data", "requires_grad", "node_id", "_record")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32,
                                                             np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = None
        self._record = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    # operator sugar; scalars are treated as non-differentiable constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _input_id(t: Tensor, rec: ComputeRecord) -> int:
    """Node id of `t` inside `rec`, registering leaves on first use.

    Returns -1 for constants (no gradient will ever be requested), which the
    backward sweep skips.
    """
    if t._record is rec and t.node_id is not None:
        return t.node_id
    if t.requires_grad:
        t.node_id = rec._append("leaf", (), None)
        t._record = rec
        return t.node_id
    return -1


def _make(op, data, inputs, vjp):
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    rec = _active
    if rec is not None and out.requires_grad:
        ids = tuple(_input_id(t, rec) for t in inputs)
        out.node_id = rec._append(op, ids, vjp)
        out._record = rec
    return out


def backward(record: ComputeRecord, loss: Tensor) -> dict:
    """Reverse sweep from `loss`; returns {node id: gradient array}.

    Gradients accumulate for every node on a path from a requires_grad leaf
    to the loss; fetch a specific tensor's gradient with `grad_for`.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if loss._record is not record or loss.node_id is None:
        raise ContractError("loss was not computed under this record")
    grads = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        _op, input_ids, vjp = record.nodes[nid]
        if vjp is None:
            continue
        for iid, gi in zip(input_ids, vjp(g)):
            if iid < 0 or gi is None:
                continue
            acc = grads.get(iid)
            grads[iid] = gi if acc is None else acc + gi
    return grads


def grad_for(grads: dict, record: ComputeRecord, t: Tensor):
    """Gradient array for `t` from a backward result, or None if unused."""
    if t._record is not record or t.node_id is None:
        return None
    return grads.get(t.node_id)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _const(value, like):
    return np.asarray(value, dtype=like.data.dtype)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _const(b, a)
        ash = a.shape

        def vjp(g):
            return (_unbroadcast(g, ash),)

        return _make("add", a.data + c, (a,), vjp)
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g, ash), _unbroadcast(g, bsh))

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -np.asarray(b))
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g, ash), _unbroadcast(-g, bsh))

    return _make("sub", a.data - b.data, (a, b), vjp)


def rsub(a: Tensor, c) -> Tensor:
    """c - a for a scalar/array constant c."""
    cv = _const(c, a)
    ash = a.shape

    def vjp(g):
        return (_unbroadcast(-g, ash),)

    return _make("rsub", cv - a.data, (a,), vjp)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh))

    return _make("mul", ad * bd, (a, b), vjp)


def scale(a: Tensor, c) -> Tensor:
    cv = _const(c, a)

    def vjp(g):
        return (g * cv,)

    return _make("scale", a.data * cv, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. float32 goes through BLAS; float64 (the verification
    mode) uses the sequential-accumulation kernel so results are bitwise
    reproducible against a triple-loop reference.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if ad.dtype == np.float64:
        data = K.active.matmul_exact(np.ascontiguousarray(ad),
                                     np.ascontiguousarray(bd))
    else:
        data = ad @ bd

    def vjp(g):
        return (g @ bd.T, ad.T @ g)

    return _make("matmul", data, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2D operand, got {a.shape}")

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _make("transpose", np.ascontiguousarray(a.data.T), (a,), vjp)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    if any(t.data.ndim != 2 for t in tensors) or axis not in (0, 1):
        raise ShapeError("concat supports 2D tensors along axis 0 or 1")
    sizes = [t.shape[axis] for t in tensors]

    def vjp(g):
        outs = []
        off = 0
        for s in sizes:
            sl = (slice(off, off + s), slice(None)) if axis == 0 \
                else (slice(None), slice(off, off + s))
            outs.append(g[sl])
            off += s
        return tuple(outs)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make("concat", data, tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` rows/columns starting at `start`."""
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"narrow supports 2D tensors, got {a.shape}")
    n = a.shape[axis]
    if not (0 <= start and start + length <= n):
        raise ShapeError(
            f"narrow range [{start}, {start + length}) outside axis of size {n}")
    sl = (slice(start, start + length), slice(None)) if axis == 0 \
        else (slice(None), slice(start, start + length))
    ash = a.shape

    def vjp(g):
        ga = np.zeros(ash, dtype=g.dtype)
        ga[sl] = g
        return (ga,)

    return _make("narrow", np.ascontiguousarray(a.data[sl]), (a,), vjp)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Rows of `a` selected by an integer sequence (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2D table, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(
            f"row index out of range for table with {a.shape[0]} rows")
    ash = a.shape

    def vjp(g):
        ga = np.zeros(ash, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make("gather_rows", a.data[idx], (a,), vjp)


def pick(a: Tensor, rows, cols) -> Tensor:
    """Entries a[rows[i], cols[i]] as a column vector of shape (k, 1)."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    if r.shape != c.shape:
        raise ShapeError(f"pick index shapes differ: {r.shape} vs {c.shape}")
    ash = a.shape

    def vjp(g):
        ga = np.zeros(ash, dtype=g.dtype)
        np.add.at(ga, (r, c), g[:, 0])
        return (ga,)

    return _make("pick", a.data[r, c].reshape(-1, 1), (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    ash = a.shape
    dt = a.data.dtype

    def vjp(g):
        return (np.full(ash, g.reshape(-1)[0], dtype=dt),)

    return _make("sum_all", a.data.sum(dtype=dt).reshape(1, 1), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def max_axis0(a: Tensor) -> Tensor:
    """Column-wise max over rows; gradient routes to the argmax rows."""
    if a.data.ndim != 2:
        raise ShapeError(f"max_axis0 needs a 2D operand, got {a.shape}")
    arg = a.data.argmax(axis=0)
    ash = a.shape

    def vjp(g):
        ga = np.zeros(ash, dtype=g.dtype)
        ga[arg, np.arange(ash[1])] = g[0]
        return (ga,)

    return _make("max_axis0", a.data.max(axis=0, keepdims=True), (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _make("relu", a.data * mask, (a,), vjp)


def clamp_min(a: Tensor, c: float) -> Tensor:
    """max(a, c) elementwise; gradient is zero where the clamp engages."""
    mask = a.data > c

    def vjp(g):
        return (g * mask,)

    return _make("clamp_min", np.maximum(a.data, c), (a,), vjp)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _make("log", np.log(ad), (a,), vjp)


def powc(a: Tensor, c: float) -> Tensor:
    """a ** c for a constant exponent; defined for nonnegative inputs."""
    ad = a.data
    if c == 0.0:
        def vjp0(g):
            return (np.zeros_like(ad),)

        return _make("powc", np.ones_like(ad), (a,), vjp0)

    def vjp(g):
        return (g * c * ad ** (c - 1.0),)

    return _make("powc", ad ** c, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    flat = np.ascontiguousarray(a.data.reshape(-1))
    y = K.active.sigmoid_fwd(flat)
    yr = y.reshape(a.shape)

    def vjp(g):
        return (K.active.sigmoid_bwd(y, np.ascontiguousarray(g.reshape(-1)))
                .reshape(a.shape),)

    return _make("sigmoid", yr, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    flat = np.ascontiguousarray(a.data.reshape(-1))
    y = K.active.gelu_fwd(flat)

    def vjp(g):
        return (K.active.gelu_bwd(flat, np.ascontiguousarray(g.reshape(-1)))
                .reshape(a.shape),)

    return _make("gelu", y.reshape(a.shape), (a,), vjp)


def _rows_2d(a: Tensor, axis: int):
    """View `a` as 2D rows with the softmax axis last; returns (arr, undo)."""
    d = a.data
    if d.ndim == 1:
        if axis not in (0, -1):
            raise ShapeError(f"axis {axis} invalid for shape {a.shape}")
        return np.ascontiguousarray(d.reshape(1, -1)), lambda x: x.reshape(d.shape)
    if d.ndim == 2:
        if axis in (1, -1):
            return np.ascontiguousarray(d), lambda x: x
        if axis == 0:
            return np.ascontiguousarray(d.T), lambda x: np.ascontiguousarray(x.T)
    raise ShapeError(f"axis {axis} invalid for shape {a.shape}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic normalization along `axis`, max-subtracted for stability."""
    x2, undo = _rows_2d(a, axis)
    y2 = K.active.softmax_fwd(x2)
    transposed = a.data.ndim == 2 and axis == 0

    def vjp(g):
        g2 = np.ascontiguousarray(g.T) if transposed \
            else np.ascontiguousarray(g.reshape(y2.shape))
        gx = K.active.softmax_bwd(y2, g2)
        return (undo(gx).reshape(a.shape),)

    return _make("softmax", undo(y2).reshape(a.shape), (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    """Log of the row softmax over the last axis of a 2D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax needs a 2D operand, got {a.shape}")
    x2 = np.ascontiguousarray(a.data)
    y2 = K.active.log_softmax_fwd(x2)

    def vjp(g):
        return (K.active.log_softmax_bwd(y2, np.ascontiguousarray(g)),)

    return _make("log_softmax", y2, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then gain and bias."""
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2D operand, got {a.shape}")
    d = a.shape[1]
    if gain.size != d or bias.size != d:
        raise ShapeError(
            f"layer_norm width {d} does not match gain {gain.shape} / "
            f"bias {bias.shape}")
    x2 = np.ascontiguousarray(a.data)
    g1 = np.ascontiguousarray(gain.data.reshape(-1))
    b1 = np.ascontiguousarray(bias.data.reshape(-1))
    out, xhat, inv_std = K.active.layer_norm_fwd(x2, g1, b1, eps)
    gshape, bshape = gain.shape, bias.shape

    def vjp(g):
        gx, ggain, gbias = K.active.layer_norm_bwd(
            xhat, inv_std, g1, np.ascontiguousarray(g))
        return (gx, ggain.reshape(gshape), gbias.reshape(bshape))

    return _make("layer_norm", out, (a, gain, bias), vjp)


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Worst relative error between the analytic gradient of f at x and
    central finite differences.

    f maps the tensor to a scalar Tensor and must be deterministic; the
    analytic gradient is taken from one recorded backward pass, then every
    coordinate of x is perturbed in place for the two-sided probe. Error per
    coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    with recording() as rec:
        out = f(x)
        if out.size != 1:
            raise ContractError("finite_diff_check needs a scalar-valued f")
        grads = backward(rec, out)
    analytic = grad_for(grads, rec, x)
    if analytic is None:
        analytic = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    aflat = np.asarray(analytic, dtype=np.float64).reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        a = aflat[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        if err > worst:
            worst = err
    return worst


def xavier_uniform(rng, fan_in: int, fan_out: int, dtype=DEFAULT_DTYPE):
    """Seeded uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)
