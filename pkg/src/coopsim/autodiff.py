"""Reverse-mode automatic differentiation over numpy arrays.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output keeps a reference to its inputs plus a closure that maps the output
gradient onto input gradients; :meth:`Tensor.backward` walks that graph in
reverse topological order.

Shape rules are strict. Elementwise ops need identical shapes, except that a
0-d tensor (or a python number) may be combined with anything. Bias addition
and matrix products have their own documented rules below.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when op inputs violate the op's shape rule."""


def _fail(op: str, *shapes) -> None:
    raise ShapeError(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Populate ``grad`` on every tensor reachable from this scalar.

        Gradients accumulate: calling this twice on the same graph doubles them.
        """
        if self.data.size != 1 or self.data.ndim != 0:
            raise ShapeError(f"backward: loss must be a 0-d scalar, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def _reduce_scalar(g: np.ndarray, target: Tensor) -> np.ndarray:
    return g if target.data.ndim else np.asarray(g.sum())


def _elementwise_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        _fail(op, a.shape, b.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes("add", a, b)

    def backward(g):
        return _reduce_scalar(g, a), _reduce_scalar(g, b)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes("sub", a, b)

    def backward(g):
        return _reduce_scalar(g, a), _reduce_scalar(-g, b)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes("mul", a, b)

    def backward(g):
        return _reduce_scalar(g * b.data, a), _reduce_scalar(g * a.data, b)

    return _make(a.data * b.data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (out > 0),)

    return _make(out, (x,), backward, "relu")


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at exactly 0."""
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return _make(np.abs(x.data), (x,), backward, "abs")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(x.data, lo, hi), (x,), backward, "clip")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., n, m) @ (m, p)`` or ``(..., n, m) @ (..., m, p)`` with equal leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        _fail("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        _fail("matmul", a.shape, b.shape)
    shared = b.ndim == 2

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a ``(D,)`` bias along the last axis of ``x``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.ndim < 1 or x.shape[-1] != bias.shape[0]:
        _fail("add_bias", x.shape, bias.shape)

    def backward(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(x.data + bias.data, (x, bias), backward, "add_bias")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` fused into one node; ``weight`` is (m, p), ``bias`` (p,)."""
    if bias is None:
        return matmul(x, weight)
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim < 1 or weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        _fail("linear", x.shape, weight.shape, bias.shape)
    out = x.data @ weight.data
    out += bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ weight.data.T, x.data.reshape(-1, x.shape[-1]).T @ g2, g2.sum(axis=0)

    return _make(out, (x, weight, bias), backward, "linear")


# ---------------------------------------------------------------- reductions

def total(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        def backward(g):
            return (np.broadcast_to(g, x.shape),)

        return _make(x.data.sum(), (x,), backward, "sum")
    axis = axis % x.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return _make(x.data.sum(axis=axis), (x,), backward, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(total(x, axis), 1.0 / n)


def max_over(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first argmax on ties."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        _fail("max_over", x.shape)
    axis = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), backward, "max")


def segment_max(x: Tensor, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Rows of ``x`` (M, D) max-pooled into ``n_segments`` groups.

    Every segment must be non-empty. Gradient goes to the lowest row index
    attaining the max, per channel.
    """
    x = as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if x.ndim != 2 or seg.shape != (x.shape[0],):
        _fail("segment_max", x.shape, seg.shape)
    if n_segments and (seg.min() < 0 or seg.max() >= n_segments or np.bincount(seg, minlength=n_segments).min() == 0):
        raise ShapeError("segment_max: every segment id in [0, n) must be used")
    out = np.full((n_segments, x.shape[1]), -np.inf)
    np.maximum.at(out, seg, x.data)
    rows = np.arange(x.shape[0])[:, None]
    hit = np.where(x.data == out[seg], rows, x.shape[0])
    first = np.full(out.shape, x.shape[0])
    np.minimum.at(first, seg, hit)
    cols = np.broadcast_to(np.arange(x.shape[1]), out.shape)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[first, cols] = g
        return (gx,)

    return _make(out, (x,), backward, "segment_max")


def softmax(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


# ---------------------------------------------------------------- structure

def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ref = xs[0]
    axis = axis % ref.ndim
    for t in xs[1:]:
        if t.ndim != ref.ndim or t.shape[:axis] + t.shape[axis + 1:] != ref.shape[:axis] + ref.shape[axis + 1:]:
            _fail("concat", *[u.shape for u in xs])
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, backward, "concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along the point axis.

    ``x`` is ``(N, D)`` with any integer ``index`` -> ``index.shape + (D,)``, or
    batched ``(B, N, D)`` with ``index`` shaped ``(B, ...)`` -> ``index.shape + (D,)``.
    """
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim == 2:
        flat_idx = idx.reshape(-1)
        n = x.shape[0]
    elif x.ndim == 3 and idx.ndim >= 1 and idx.shape[0] == x.shape[0]:
        n = x.shape[1]
        offsets = (np.arange(x.shape[0]) * n).reshape((-1,) + (1,) * (idx.ndim - 1))
        flat_idx = (idx + offsets).reshape(-1)
        n = x.shape[0] * n
    else:
        _fail("gather_rows", x.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= (x.shape[-2])):
        raise ShapeError(f"gather_rows: index out of range for shape {x.shape}")
    d = x.shape[-1]
    flat_x = x.data.reshape(-1, d)
    out = flat_x[flat_idx].reshape(idx.shape + (d,))

    def backward(g):
        return (_scatter_rows(flat_idx, g.reshape(-1, d), n).reshape(x.shape),)

    return _make(out, (x,), backward, "gather_rows")


def _scatter_rows(index: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """Sum ``rows`` into an (n, D) array at ``index`` (duplicates accumulate)."""
    m = len(index)
    op = sparse.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))
    return np.asarray(op @ rows)


_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "abs": absolute,
    "clip": clip,
    "matmul": matmul,
    "add_bias": add_bias,
    "linear": linear,
    "sum": total,
    "mean": mean,
    "max": max_over,
    "segment_max": segment_max,
    "softmax": softmax,
    "concat": lambda *xs, axis: concat(xs, axis),
    "reshape": reshape,
    "gather_rows": gather_rows,
}


def apply(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch an op by name, e.g. ``apply("softmax", x, axis=0)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- verification

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-6) -> float:
    """Max relative error between the analytic and central-difference gradient.

    Relative error per coordinate is ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(base)).item()
        flat[i] = orig - eps
        lo = f(Tensor(base)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"CPNP"
CHECKPOINT_VERSION = 1


def save_params(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write named float64 arrays in the CPNP little-endian layout."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(as_tensor(params[name]).data, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CPNP checkpoint")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * size
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out


def parameters(tree: Mapping[str, Tensor]) -> Iterable[Tensor]:
    return (tree[k] for k in sorted(tree))
