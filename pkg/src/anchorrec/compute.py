"""Small reverse-mode autodiff core on top of numpy.

Every differentiable op appends one record to the active :class:`Tape`
(if any input tracks gradients). ``Tape.backward`` walks the records in
exact reverse order and sums gradients at fan-out. Outside a tape the same
ops run as plain numpy, which is how inference reuses the training code.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=DTYPE), like.shape))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered op log. Use as a context manager, then call :meth:`backward`."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
        loss._accumulate(np.full(loss.shape, seed, dtype=DTYPE))
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is not None and inp.requires_grad:
                    inp._accumulate(gi)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(_finite(value, op))
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].records.append(_Record(out, inputs, backward, op))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def sparse_matmul(s: sp.spmatrix, x: Tensor) -> Tensor:
    """``s @ x`` for a constant sparse ``s``; gradient flows to ``x`` only."""
    if x.data.ndim != 2 or s.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul: cannot multiply {s.shape} by {x.shape}")
    s = sp.csr_matrix(s)
    if s.nnz and (s.indices.min() < 0 or s.indices.max() >= s.shape[1]):
        raise IndexError("sparse_matmul: column index out of range")
    st = s.T.tocsr()
    return _emit("sparse_matmul", np.asarray(s @ x.data), (x,), lambda g: (np.asarray(st @ g),))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def add_row(a: Tensor, bias: Tensor) -> Tensor:
    """Add a length-``n`` vector to every row of an ``m x n`` matrix."""
    if a.data.ndim != 2 or bias.shape != (a.shape[1],):
        raise ShapeError(f"add_row: bias {bias.shape} does not fit {a.shape}")
    return _emit("add_row", a.data + bias.data, (a, bias), lambda g: (g, g.sum(axis=0)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(x))`` without overflow."""
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _emit("softplus", y, (a,), lambda g: (g * _sigmoid(x),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "hadamard": mul,
    "sigmoid": sigmoid,
    "relu": relu,
    "tanh": tanh,
    "scale": scale,
}


def elementwise(op: str, *args):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions / indexing

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))
    if a.data.ndim != 2 or axis != 1:
        raise ShapeError("sum: only full reduction or axis=1 on matrices")
    return _emit("row_sum", a.data.sum(axis=1), (a,), lambda g: (np.broadcast_to(g[:, None], shape),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum(a), 1.0 / n)


def rows(a: Tensor, index) -> Tensor:
    """Gather rows; repeated indices scatter-add in backward."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("rows", a.data[idx], (a,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return _emit("concat_rows", np.vstack([p.data for p in parts]), tuple(parts), back)


def diagonal(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diagonal: need a square matrix, got {a.shape}")
    n = a.shape[0]
    return _emit("diagonal", np.diag(a.data).copy(), (a,), lambda g: (np.diag(g),))


def upper_triangle(a: Tensor) -> Tensor:
    """Entries ``a[i, j]`` with ``i < j`` in row-major order."""
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"upper_triangle: need a square matrix, got {a.shape}")
    n = a.shape[0]
    iu = np.triu_indices(n, k=1)

    def back(g):
        out = np.zeros((n, n), dtype=DTYPE)
        out[iu] = g
        return (out,)

    return _emit("upper_triangle", a.data[iu], (a,), back)


def logsumexp_rows(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    soft = e / s
    return _emit("logsumexp_rows", (m + np.log(s))[:, 0], (a,), lambda g: (g[:, None] * soft,))


def norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries. Subgradient 0 at the origin."""
    x = a.data
    r = float(np.sqrt(np.sum(x * x)))

    def back(g):
        if r == 0.0:
            return (np.zeros_like(x),)
        return (g * x / r,)

    return _emit("norm", np.asarray(r), (a,), back)


def normalize_rows(a: Tensor) -> Tensor:
    x = a.data
    if x.ndim != 2:
        raise ShapeError(f"normalize_rows: need a matrix, got {a.shape}")
    n = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    zero = np.flatnonzero(n[:, 0] == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm row {int(zero[0])} cannot be normalized")
    y = x / n

    def back(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / n,)

    return _emit("normalize_rows", y, (a,), back)


def row_cosine(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "row_cosine")
    return sum(mul(normalize_rows(a), normalize_rows(b)), axis=1)


def cosine_matrix(a: Tensor, b: Tensor | None = None) -> Tensor:
    na = normalize_rows(a)
    nb = na if b is None else normalize_rows(b)
    return matmul(na, transpose(nb))


# ---------------------------------------------------------------- MLP

ACTIVATIONS = {"none": None, "relu": relu, "sigmoid": sigmoid, "tanh": tanh}


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: str = "none"


@dataclass
class MLPBlock:
    layers: list[Layer]

    @property
    def d_in(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.layers[-1].weight.shape[1]

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{prefix}{k}.weight"] = layer.weight
            out[f"{prefix}{k}.bias"] = layer.bias
        return out


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_mlp(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> MLPBlock:
    if len(activations) != len(dims) - 1:
        raise ShapeError("init_mlp: need one activation per layer")
    layers = []
    for d_in, d_out, act in zip(dims[:-1], dims[1:], activations):
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        layers.append(Layer(
            Tensor(xavier_uniform(d_in, d_out, rng), requires_grad=True),
            Tensor(np.zeros(d_out), requires_grad=True),
            act,
        ))
    return MLPBlock(layers)


def mlp_forward(m: MLPBlock, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != m.d_in:
        raise ShapeError(f"mlp_forward: input {x.shape} does not match d_in={m.d_in}")
    h = x
    for layer in m.layers:
        h = add_row(matmul(h, layer.weight), layer.bias)
        act = ACTIVATIONS[layer.activation]
        if act is not None:
            h = act(h)
    return h


# ---------------------------------------------------------------- gradient checking

def _as_named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {str(k): p for k, p in enumerate(params)}


def analytic_gradients(loss_fn: Callable[[], Tensor], params) -> dict[str, np.ndarray]:
    named = _as_named(params)
    for p in named.values():
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in named.items()}


def finite_difference_report(loss_fn: Callable[[], Tensor], params, h: float = 1e-5) -> dict[str, float]:
    """Relative error per parameter tensor between tape and central differences.

    The error is normwise over the tensor, ``max|a - n| / max|a| + max|n|``,
    so entries whose true gradient sits at the round-off floor cannot dominate.
    """
    named = _as_named(params)
    analytic = analytic_gradients(loss_fn, named)
    report = {}
    for key, p in named.items():
        flat = p.data.reshape(-1)
        ga = analytic[key].reshape(-1)
        numeric = np.empty_like(ga)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + h
            fp = float(loss_fn().data)
            flat[c] = orig - h
            fm = float(loss_fn().data)
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"loss is non-finite while perturbing {key}[{c}]")
            numeric[c] = (fp - fm) / (2.0 * h)
        scale = np.abs(ga).max(initial=0.0) + np.abs(numeric).max(initial=0.0)
        report[key] = float(np.abs(ga - numeric).max(initial=0.0) / max(1e-8, scale))
    return report


def finite_difference_check(loss_fn: Callable[[], Tensor], params, h: float = 1e-5) -> float:
    report = finite_difference_report(loss_fn, params, h)
    return max(report.values(), default=0.0)

