"""Dense tensors with taped reverse-mode automatic differentiation.

Small engine behind every model and loss in this package. Operations run on
numpy arrays and record onto an explicit tape whenever an operand requires
gradients; ``backward`` then walks the tape once in reverse. The design favors
auditability over raw throughput: every primitive carries its own VJP closure,
and ``finite_difference_check`` can compare any of them against central
differences.

Shape discipline: no implicit broadcasting except a (1, d) row vector added
across the rows of an (n, d) matrix. Mixing float32 and float64 operands in
one primitive is an error; precision is chosen per run.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_F32 = np.dtype(np.float32)
_F64 = np.dtype(np.float64)
PRECISIONS = {"float32": _F32, "float64": _F64}


class ShapeError(ValueError):
    """Operand shapes (or dtypes) do not conform for the requested primitive."""


def resolve_dtype(precision) -> np.dtype:
    """Map 'float32'/'float64' (or a numpy dtype) to the numpy dtype object."""
    if isinstance(precision, str):
        if precision not in PRECISIONS:
            raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(PRECISIONS)}")
        return PRECISIONS[precision]
    dt = np.dtype(precision)
    if dt not in (_F32, _F64):
        raise ValueError(f"unsupported dtype {dt}, expected float32 or float64")
    return dt


class Tensor:
    """A dense array plus gradient bookkeeping.

    ``grad`` accumulates additively across backward passes and is never
    cleared implicitly. ``leaf`` is True for user-created tensors (parameters,
    constants); primitive outputs recorded on a tape are non-leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in (_F32, _F64):
            arr = arr.astype(_F64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPES: list["Tape"] = []
_SUPPRESS = 0


class Tape:
    """Ordered record of primitive applications.

    Tape order is creation order, so reversed iteration is a valid reverse
    topological order: every node's inputs precede it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class suppress_recording:
    """Context manager: primitives compute but never record, even under a tape."""

    def __enter__(self):
        global _SUPPRESS
        _SUPPRESS += 1
        return self

    def __exit__(self, *exc):
        global _SUPPRESS
        _SUPPRESS -= 1


def active_tape() -> Tape | None:
    if _SUPPRESS or not _TAPES:
        return None
    return _TAPES[-1]


def apply(inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap a primitive's output, recording the node when gradients can flow.

    ``vjp(g)`` must return one cotangent array (or None) per input, shaped
    like that input. Modules define fused primitives through this hook; they
    are tape citizens like any built-in op.
    """
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=track)
    if track:
        out.leaf = False
        tape.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf on the tape.

    Adjoints of intermediate nodes live only inside this call, so running
    backward twice from the same root exactly doubles each leaf gradient.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    produced = {id(n.out) for n in tape.nodes}
    if id(root) not in produced and not root.leaf:
        raise ValueError("backward: root was not produced on this tape")
    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    if root.leaf and root.requires_grad:
        leaves[id(root)] = root
    for node in reversed(tape.nodes):
        g = adjoint.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.vjp(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            prev = adjoint.get(key)
            adjoint[key] = gt if prev is None else prev + gt
            if t.leaf:
                leaves.setdefault(key, t)
    for key, t in leaves.items():
        g = adjoint.get(key)
        if g is None:
            continue
        t.grad = np.array(g, copy=True) if t.grad is None else t.grad + g


def _check_same_dtype(op: str, *tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} and {t.dtype}")
    return dt


def _dims(t: Tensor) -> str:
    return "x".join(map(str, t.shape)) or "scalar"


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a (1, d) row vector broadcast over a's rows."""
    _check_same_dtype("add", a, b)
    if a.shape == b.shape:
        return apply([a, b], a.data + b.data, lambda g: (g, g))
    if a.ndim == 2 and b.shape == (1, a.shape[1]):
        return apply([a, b], a.data + b.data, lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise ShapeError(f"add: shapes {_dims(a)} and {_dims(b)} do not conform")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    if a.shape == b.shape:
        return apply([a, b], a.data - b.data, lambda g: (g, -g))
    if a.ndim == 2 and b.shape == (1, a.shape[1]):
        return apply([a, b], a.data - b.data, lambda g: (g, -g.sum(axis=0, keepdims=True)))
    raise ShapeError(f"sub: shapes {_dims(a)} and {_dims(b)} do not conform")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, same shapes only."""
    _check_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {_dims(a)} and {_dims(b)} differ")
    ad, bd = a.data, b.data
    return apply([a, b], ad * bd, lambda g: (g * bd, g * ad))


def affine(a: Tensor, alpha: float, beta: float) -> Tensor:
    """alpha * a + beta, scalars cast to a's dtype."""
    al = a.dtype.type(alpha)
    be = a.dtype.type(beta)
    return apply([a], al * a.data + be, lambda g: (g * al,))


def neg(a: Tensor) -> Tensor:
    return affine(a, -1.0, 0.0)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors as a single node."""
    if not tensors:
        raise ShapeError("add_n: empty input list")
    _check_same_dtype("add_n", *tensors)
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"add_n: shapes {_dims(tensors[0])} and {_dims(t)} differ")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data
    n = len(tensors)
    return apply(list(tensors), total, lambda g: (g,) * n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    _check_same_dtype("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {_dims(a)} and {_dims(b)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ ({_dims(a)} @ {_dims(b)})")
    ad, bd = a.data, b.data
    return apply([a, b], ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {_dims(a)}")
    return apply([a], a.data.T.copy(), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    new = a.data.reshape(shape)
    old = a.shape
    return apply([a], new, lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    _check_same_dtype("concat", *tensors)
    nd = tensors[0].ndim
    ax = axis % nd
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {_dims(tensors[0])} vs {_dims(t)}")
        for d in range(nd):
            if d != ax and t.shape[d] != ref[d]:
                raise ShapeError(f"concat: axis {d} differs ({_dims(tensors[0])} vs {_dims(t)})")
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]
    value = np.concatenate([t.data for t in tensors], axis=ax)

    def vjp(g):
        return tuple(np.split(g, offsets, axis=ax))

    return apply(list(tensors), value, vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice a[start:stop] along axis 0."""
    n = a.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {_dims(a)}")
    value = a.data[start:stop].copy()
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[start:stop] = g
        return (z,)

    return apply([a], value, vjp)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows a[indices]; gradient scatter-adds into the source rows."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: indices must be 1-D, got shape {idx.shape}")
    if a.ndim < 1:
        raise ShapeError("take_rows: source must have rows")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {_dims(a)}")
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return (z,)

    return apply([a], a.data[idx].copy(), vjp)


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a (1, d) row n times -> (n, d)."""
    if v.ndim != 2 or v.shape[0] != 1:
        raise ShapeError(f"broadcast_rows: expected (1, d), got {_dims(v)}")
    value = np.repeat(v.data, n, axis=0)
    return apply([v], value, lambda g: (g.sum(axis=0, keepdims=True),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply([a], np.where(mask, a.data, a.dtype.type(0)), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    s = s.astype(a.dtype, copy=False)
    return apply([a], s, lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return apply([a], t, lambda g: (g * (1.0 - t * t),))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    r = np.sqrt(a.data)
    return apply([a], r, lambda g: (g / (2.0 * r),))


def _softmax_last(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    y = _softmax_last(a.data)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return apply([a], y, vjp)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis: x - logsumexp(x)."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def vjp(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return apply([a], y, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis of a 2-D input, then affine."""
    _check_same_dtype("layer_norm", x, gain, bias)
    if x.ndim != 2:
        raise ShapeError(f"layer_norm: expected 2-D input, got {_dims(x)}")
    d = x.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ShapeError(f"layer_norm: gain/bias must be (1, {d})")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    value = xhat * gain.data + bias.data
    gd = gain.data

    def vjp(g):
        dgain = (g * xhat).sum(axis=0, keepdims=True)
        dbias = g.sum(axis=0, keepdims=True)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return (dx, dgain, dbias)

    return apply([x, gain, bias], value, vjp)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return apply([a], np.asarray(a.data.sum(), dtype=a.dtype),
                 lambda g: (np.broadcast_to(g, shape).astype(a.dtype, copy=False),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return apply([a], np.asarray(a.data.mean(), dtype=a.dtype),
                 lambda g: (np.broadcast_to(g / n, shape).astype(a.dtype, copy=False),))


def mean_axis0(a: Tensor) -> Tensor:
    """Column means of a 2-D tensor, kept as a (1, d) row."""
    if a.ndim != 2:
        raise ShapeError(f"mean_axis0: expected 2-D, got {_dims(a)}")
    n = a.shape[0]
    shape = a.shape
    return apply([a], a.data.mean(axis=0, keepdims=True),
                 lambda g: (np.broadcast_to(g / n, shape).astype(a.dtype, copy=False),))


def var_axis0(a: Tensor, ddof: int = 1) -> Tensor:
    """Per-column variance of a 2-D tensor as a (1, d) row."""
    if a.ndim != 2:
        raise ShapeError(f"var_axis0: expected 2-D, got {_dims(a)}")
    n = a.shape[0]
    if n <= ddof:
        raise ShapeError(f"var_axis0: need more than {ddof} rows, got {n}")
    centered = a.data - a.data.mean(axis=0, keepdims=True)
    value = (centered * centered).sum(axis=0, keepdims=True) / (n - ddof)

    def vjp(g):
        return (g * 2.0 * centered / (n - ddof),)

    return apply([a], value, vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    _check_same_dtype("mse", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {_dims(a)} and {_dims(b)} differ")
    diff = a.data - b.data
    n = a.size
    value = np.asarray((diff * diff).mean(), dtype=a.dtype)

    def vjp(g):
        s = g * 2.0 / n
        return (s * diff, -s * diff)

    return apply([a, b], value, vjp)


def cosine_rows(h: Tensor, c: Tensor) -> Tensor:
    """Cosine similarity of each row of h (n, d) against c (1, d) -> (n, 1).

    Zero-norm rows (or a zero-norm c) get similarity 0 and contribute no
    gradient; callers that care should detect and log the degenerate case.
    """
    _check_same_dtype("cosine_rows", h, c)
    if h.ndim != 2 or c.shape != (1, h.shape[1]):
        raise ShapeError(f"cosine_rows: got {_dims(h)} and {_dims(c)}")
    hd = h.data
    cd = c.data[0]
    hn = np.sqrt((hd * hd).sum(axis=1))
    cn = float(np.sqrt((cd * cd).sum()))
    valid = (hn > 0) & (cn > 0)
    denom = np.where(valid, hn * cn, 1.0)
    sim = np.where(valid, hd @ cd / denom, 0.0).astype(h.dtype)
    value = sim[:, None]

    def vjp(g):
        gv = g[:, 0] * valid
        safe_hn = np.where(hn > 0, hn, 1.0)
        dh = (gv / denom)[:, None] * cd[None, :] \
            - (gv * sim / (safe_hn * safe_hn))[:, None] * hd
        if cn > 0:
            dc = (hd.T @ (gv / denom)) - cd * float((gv * sim).sum()) / (cn * cn)
        else:
            dc = np.zeros_like(cd)
        return (dh.astype(hd.dtype, copy=False), dc[None, :].astype(cd.dtype, copy=False))

    return apply([h, c], value, vjp)


def outer_add(f: Tensor, g_rows: Tensor) -> Tensor:
    """Pairwise row sums: (T, j) and (U, j) -> (T, U, j)."""
    _check_same_dtype("outer_add", f, g_rows)
    if f.ndim != 2 or g_rows.ndim != 2 or f.shape[1] != g_rows.shape[1]:
        raise ShapeError(f"outer_add: got {_dims(f)} and {_dims(g_rows)}")
    value = f.data[:, None, :] + g_rows.data[None, :, :]

    def vjp(g):
        return (g.sum(axis=1), g.sum(axis=0))

    return apply([f, g_rows], value, vjp)


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FiniteDifferenceReport:
    """Per-parameter worst relative error between analytic and numeric grads."""

    max_rel_error: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    coords_checked: int = 0
    aborted: bool = False
    message: str = ""

    def ok(self, tol: float) -> bool:
        return not self.aborted and self.max_rel_error < tol


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-6,
    samples_per_param: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> FiniteDifferenceReport:
    """Compare analytic gradients of loss_fn against central differences.

    loss_fn must be a pure function of the parameter values. When
    samples_per_param is None every coordinate is checked; otherwise that many
    coordinates are sampled per parameter with a seeded generator. Relative
    error is |a - n| / max(|a|, |n|); pairs whose magnitudes both sit below
    ``floor`` count as zero error (central differences are pure cancellation
    noise there). A non-finite loss aborts the check.
    """
    report = FiniteDifferenceReport()
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    base = loss.item()
    if not np.isfinite(base):
        report.aborted = True
        report.message = f"non-finite loss {base!r} at the evaluation point"
        return report
    backward(tape, loss)
    rng = np.random.default_rng(seed)

    def eval_loss() -> float:
        with suppress_recording():
            return loss_fn().item()

    for name in sorted(params):
        p = params[name]
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_param, replace=False)
        worst = 0.0
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            up = eval_loss()
            flat[i] = keep - h
            down = eval_loss()
            flat[i] = keep
            if not (np.isfinite(up) and np.isfinite(down)):
                report.aborted = True
                report.message = f"non-finite loss while perturbing {name}[{i}]"
                return report
            numeric = (up - down) / (2.0 * h)
            analytic = float(gflat[i])
            scale = max(abs(analytic), abs(numeric))
            err = 0.0 if scale <= floor else abs(analytic - numeric) / scale
            worst = max(worst, err)
            report.coords_checked += 1
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
