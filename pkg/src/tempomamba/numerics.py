"""Dense float64 tensors with a small reverse-mode tape.

Every differentiable operation in the package is built from the ops in this
module (or registers its own vector-Jacobian product through ``Tensor.from_op``),
so any scalar loss can be differentiated with ``loss.backward()`` and
cross-checked with :func:`grad_check`.

Also here: a one-sided Jacobi SVD, a multiply counter for cost audits, the
seeded generator used everywhere, and the little-endian tensor file format.
"""

from __future__ import annotations

import contextlib
import io
import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand extents do not conform."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


# ---------------------------------------------------------------------------
# random numbers

def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the same seed yields the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


# ---------------------------------------------------------------------------
# multiply counter

_counters: list[list[int]] = []


@contextlib.contextmanager
def count_multiplies():
    """Count scalar multiplies performed by :func:`matmul` inside the block.

    >>> with count_multiplies() as c:
    ...     _ = matmul(np.ones((2, 3)), np.ones((3, 4)))
    >>> c[0]
    24
    """
    box = [0]
    _counters.append(box)
    try:
        yield box
    finally:
        _counters.remove(box)


def _tally(a_shape, b_shape) -> None:
    if not _counters:
        return
    batch = np.broadcast_shapes(a_shape[:-2], b_shape[:-2]) if len(a_shape) > 2 or len(b_shape) > 2 else ()
    m, n = a_shape[-2], a_shape[-1]
    p = b_shape[-1]
    total = int(np.prod(batch, dtype=np.int64)) * m * n * p
    for box in _counters:
        box[0] += total


# ---------------------------------------------------------------------------
# tape

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus an optional adjoint buffer.

    Tensors produced by operations remember their parents and a
    vector-Jacobian product; ``backward`` walks that graph once in reverse
    topological order and accumulates into ``grad`` of every tensor with
    ``requires_grad``. Data is treated as immutable, except by
    :func:`grad_check` and optimizers, which need exclusive access.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")
    __array_ufunc__ = None  # make ndarray operators defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable) -> "Tensor":
        """Wrap the result of a custom op.

        ``vjp(g)`` must return one gradient (or None) per parent, each with the
        parent's shape.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        live = any(p.requires_grad for p in parents)
        out.requires_grad = live
        out._parents = tuple(parents) if live else ()
        out._vjp = vjp if live else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic sugar
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self):
        return mul(tsum(self), 1.0 / self.size)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data * b.data, (a, b),
                          lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b):
    """Matrix product with ``np.matmul`` semantics (batched over leading axes).

    Plain ndarrays in, ndarray out; any Tensor operand makes the result a Tensor.
    """
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
        _tally(a.shape, b.shape)
        return a @ b
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    _tally(a.shape, b.shape)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(a.data @ b.data, (a, b), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return Tensor.from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def flip(a: Tensor, axes) -> Tensor:
    return Tensor.from_op(np.flip(a.data, axes).copy(), (a,), lambda g: (np.flip(g, axes).copy(),))


def getitem(a: Tensor, index) -> Tensor:
    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return Tensor.from_op(np.array(a.data[index]), (a,), vjp)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the adjoint."""
    indices = np.asarray(indices)

    def vjp(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return Tensor.from_op(np.take(a.data, indices, axis=axis), (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    edges = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=axis), parts,
                          lambda g: tuple(np.split(g, edges, axis=axis)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def square(a: Tensor) -> Tensor:
    return Tensor.from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor.from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor.from_op(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    return Tensor.from_op(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return Tensor.from_op(p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor.from_op(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def rms_norm(a, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """``a / sqrt(mean(a^2, axis) + eps)``, no learned scale."""
    a = as_tensor(a)
    n = a.shape[axis]
    r = 1.0 / np.sqrt(np.mean(a.data * a.data, axis=axis, keepdims=True) + eps)
    y = a.data * r

    def vjp(g):
        return (r * (g - y * np.sum(g * y, axis=axis, keepdims=True) / n),)

    return Tensor.from_op(y, (a,), vjp)


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target)
    return square(diff).mean()


# ---------------------------------------------------------------------------
# SVD

def svd(a, tol: float = 1e-15) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``a = U @ diag(S) @ V.T`` by one-sided (Hestenes) Jacobi.

    Column pairs are rotated in round-robin order, n/2 disjoint pairs at a
    time, until every pair is orthogonal to ``tol`` relative to its norms.
    Singular values come back non-negative and non-increasing; U and V have
    orthonormal columns even when ``a`` is rank deficient.
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"svd needs a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("svd input has non-finite entries")
    m, n = a.shape
    if m < n:
        u, s, v = svd(a.T, tol)
        return v, s, u

    work = a.copy()
    v = np.eye(n)
    # round-robin tournament; a dummy player -1 pads odd n
    players = list(range(n)) + ([-1] if n % 2 else [])
    rounds = []
    for _ in range(len(players) - 1):
        half = len(players) // 2
        pairs = [(players[i], players[-1 - i]) for i in range(half)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]

    cap = 100 * max(m, n)
    for sweep in range(cap):
        rotated = False
        for p, q in rounds:
            wp, wq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (work, v):
                xp, xq = mat[:, p].copy(), mat[:, q].copy()
                mat[:, p] = c * xp - s * xq
                mat[:, q] = s * xp + c * xq
        if not rotated:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge after {cap} sweeps")

    sv = np.linalg.norm(work, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, work, v = sv[order], work[:, order], v[:, order]
    u = np.zeros_like(work)
    live = sv > 0
    u[:, live] = work[:, live] / sv[live]
    if not live.all():
        u = _complete_orthonormal(u, live)
    return u, sv, v


def _complete_orthonormal(u: np.ndarray, live: np.ndarray) -> np.ndarray:
    """Fill the columns of ``u`` not flagged live with an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(live)]
    out = u.copy()
    candidates = iter(np.eye(m))
    for j in np.flatnonzero(~live):
        while True:
            e = next(candidates).copy()
            for b in basis:
                e -= (b @ e) * b
            for b in basis:
                e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 1e-8:
                break
        e /= norm
        basis.append(e)
        out[:, j] = e
    return out


# ---------------------------------------------------------------------------
# gradient checking

def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                 coords: Iterable[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. ``x`` at the given flat coordinates."""
    # reshape(-1) must be a view so the perturbation reaches x
    x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    coords = np.arange(flat.size) if coords is None else np.asarray(list(coords), dtype=int)
    out = np.empty(coords.size)
    for i, j in enumerate(coords):
        keep = flat[j]
        flat[j] = keep + step
        fp = float(f(x).data)
        flat[j] = keep - step
        fm = float(f(x).data)
        flat[j] = keep
        out[i] = (fp - fm) / (2.0 * step)
    return coords, out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    The error at each coordinate is ``|analytic - numeric| / (|numeric| + 1e-8)``.
    ``x.data`` is perturbed in place while this runs. For large tensors,
    ``max_coords`` checks a random subset of coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not x.requires_grad:
        raise ValueError("x must require grad")
    x.grad = None
    value = f(x)
    if not np.all(np.isfinite(value.data)):
        raise NumericError("f(x) is not finite")
    value.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad = None
    coords = None
    if max_coords is not None and x.size > max_coords:
        rng = rng if rng is not None else make_rng(0)
        coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))
    coords, numeric = numeric_grad(f, x, step, coords)
    err = np.abs(analytic[coords] - numeric) / (np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# serialization
#
# tensor record:  b"TNSR" | u32 rank | rank x u64 extents | float64 payload (all little-endian)
# archive:        b"TARC" | u32 count | count x (u32 name_len | utf-8 name | tensor record)

TENSOR_MAGIC = b"TNSR"
ARCHIVE_MAGIC = b"TARC"


def _write_tensor(buf, array: np.ndarray) -> None:
    array = np.asarray(array, dtype="<f8", order="C")
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<I", array.ndim))
    buf.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    buf.write(array.tobytes())


def _read_exact(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise ValueError("truncated tensor data")
    return raw


def _read_tensor(buf) -> np.ndarray:
    if _read_exact(buf, 4) != TENSOR_MAGIC:
        raise ValueError("bad tensor magic")
    (rank,) = struct.unpack("<I", _read_exact(buf, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(buf, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    _write_tensor(buf, np.asarray(array.data if isinstance(array, Tensor) else array))
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    return _read_tensor(io.BytesIO(raw))


def save_tensor(path, array) -> None:
    _atomic_write(path, tensor_to_bytes(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return _read_tensor(fh)


def save_archive(path, entries: dict) -> None:
    """Write named tensors in sorted name order."""
    buf = io.BytesIO()
    buf.write(ARCHIVE_MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name in sorted(entries):
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        value = entries[name]
        _write_tensor(buf, np.asarray(value.data if isinstance(value, Tensor) else value))
    _atomic_write(path, buf.getvalue())


def load_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != ARCHIVE_MAGIC:
            raise ValueError("bad archive magic")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = _read_tensor(fh)
        return out
