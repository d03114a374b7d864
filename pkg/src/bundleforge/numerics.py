"""Dense tensor kernel: reverse-mode autodiff, seeded initialisation and Adam.

Everything numeric in the package goes through :class:`Tensor`.  Tensors hold a
numpy array (float32 by default) and, when any input requires a gradient, a
reference to the op that produced them.  The graph is rebuilt on every forward
pass and walked once by :func:`backward`.

Leading batch axes are allowed: matrix ops act on the last two axes, so a stack
of ``n`` items of shape ``3 x d`` is a ``n x 3 x d`` tensor.

Random numbers come from SplitMix64 used in counter mode.  For a 64-bit seed
``s`` the k-th output (k = 1, 2, ...) is::

    z = (s + k * 0x9E3779B97F4A7C15) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

A uniform double is ``(out >> 11) * 2**-53``.  Integers below ``h`` are
``floor(u * h)``; normals use Box-Muller on consecutive pairs ``(u1, u2)`` with
``r = sqrt(-2 ln(1 - u1))`` and angle ``2 pi u2``.  Permutations are the stable
argsort of ``n`` uniforms.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class MissingGradError(RuntimeError):
    pass


_DEFAULT_DTYPE = [np.float32]
_GRAD_ENABLED = [True]


def default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` inside the block (float64 for gradient checks)."""
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (evaluation, frozen teachers)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        return Tensor._result(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), grad_fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,))


# -- shape -----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), grad_fn)


def transpose(x: Tensor) -> Tensor:
    return Tensor._result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat_rows(vs: Sequence[Tensor]) -> Tensor:
    """Stack ``1 x d`` (or ``r x d``) tensors along the row axis."""
    if not vs:
        raise ShapeError("concat_rows of an empty list")
    width = vs[0].shape[-1]
    for v in vs:
        if v.shape[-1] != width or v.data.ndim != vs[0].data.ndim:
            raise ShapeError(f"concat_rows width mismatch: {[t.shape for t in vs]}")
    sizes = [v.shape[-2] for v in vs]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=-2))

    return Tensor._result(np.concatenate([v.data for v in vs], axis=-2), tuple(vs), grad_fn)


def stack_rows(vs: Sequence[Tensor]) -> Tensor:
    """``k`` tensors of shape ``(..., d)`` -> one tensor ``(..., k, d)``."""
    shape = vs[0].shape
    for v in vs:
        if v.shape != shape:
            raise ShapeError(f"stack_rows shape mismatch: {[t.shape for t in vs]}")

    def grad_fn(g):
        return tuple(g[..., j, :] for j in range(len(vs)))

    return Tensor._result(np.stack([v.data for v in vs], axis=-2), tuple(vs), grad_fn)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows of a 2-D tensor; ``index`` may have any shape."""
    index = np.asarray(index, dtype=np.int64)

    def grad_fn(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(out, index.reshape(-1), g.reshape(-1, x.shape[1]))
        return (out,)

    return Tensor._result(x.data[index], (x,), grad_fn)


# -- reductions ------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return Tensor._result(
        x.data.sum(dtype=x.data.dtype).reshape(1, 1),
        (x,),
        lambda g: (np.broadcast_to(g.reshape(()), x.shape).astype(x.data.dtype),),
    )


def mean_all(x: Tensor) -> Tensor:
    return sum_all(x) / x.data.size


def sum_squares(x: Tensor) -> Tensor:
    return Tensor._result(
        np.square(x.data).sum(dtype=x.data.dtype).reshape(1, 1),
        (x,),
        lambda g: (2.0 * g.reshape(()) * x.data,),
    )


def mean_rows(x: Tensor) -> Tensor:
    r = x.shape[-2]
    if r == 0:
        raise ContractError("mean_rows of an empty input")

    def grad_fn(g):
        return (np.broadcast_to(g / r, x.shape).astype(x.data.dtype),)

    return Tensor._result(x.data.mean(axis=-2, keepdims=True), (x,), grad_fn)


# -- softmax family --------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, (x,), grad_fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    top = x.data.argmax(axis=-1)[..., None]
    shifted = x.data - np.take_along_axis(x.data, top, axis=-1)
    e = np.exp(shifted)
    np.put_along_axis(e, top, 0.0, axis=-1)
    # log1p of the non-max mass keeps tiny log-probabilities accurate
    out = shifted - np.log1p(e.sum(axis=-1, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (x,), grad_fn)


def _xlogx(q: np.ndarray) -> np.ndarray:
    out = np.zeros_like(q)
    pos = q > 0
    out[pos] = q[pos] * np.log(q[pos])
    return out


def kl_div_rows(log_p: Tensor, q, tol: float = 1e-5) -> Tensor:
    """Per-row ``sum q (ln q - log_p)``; ``q`` is a constant target.

    Returns a ``B x 1`` tensor.  ``0 ln 0`` is taken as 0.
    """
    q = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=log_p.data.dtype)
    if q.shape != log_p.shape:
        raise ShapeError(f"kl_div shape mismatch: {log_p.shape} vs {q.shape}")
    p_mass = np.exp(log_p.data.astype(np.float64)).sum(axis=-1)
    q_mass = q.astype(np.float64).sum(axis=-1)
    if np.any(np.abs(p_mass - 1.0) > tol) or np.any(np.abs(q_mass - 1.0) > tol):
        raise ContractError("kl_div inputs must each sum to 1")
    safe_log_p = np.where(q > 0, log_p.data, 0.0)
    value = (_xlogx(q) - q * safe_log_p).sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (-q * g,)

    return Tensor._result(value.astype(log_p.data.dtype), (log_p,), grad_fn)


def kl_div(log_p: Tensor, q, tol: float = 1e-5) -> Tensor:
    """KL divergence of ``q`` from ``exp(log_p)``, gradient into ``log_p`` only."""
    return sum_all(kl_div_rows(log_p, q, tol))


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity, ``(..., d) x (..., d) -> (..., 1)``.

    A zero-norm row has similarity 0 and contributes no gradient.
    """
    if a.shape != b.shape:
        raise ShapeError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True))
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, dot / denom, 0.0).astype(a.data.dtype)

    def grad_fn(g):
        sa = np.where(ok, na, 1.0)
        sb = np.where(ok, nb, 1.0)
        ga = np.where(ok, g * (b.data / denom - cos * a.data / (sa * sa)), 0.0)
        gb = np.where(ok, g * (a.data / denom - cos * b.data / (sb * sb)), 0.0)
        return ga.astype(a.data.dtype), gb.astype(b.data.dtype)

    return Tensor._result(cos, (a, b), grad_fn)


# -- backward --------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- randomness ------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, key: int | str) -> int:
    """Sub-seed for an independent stream: ``seed XOR (key << 32)``.

    String keys are reduced with CRC32 first.
    """
    if isinstance(key, str):
        key = zlib.crc32(key.encode("utf-8"))
    return (int(seed) ^ (int(key) << 32)) & _MASK64


class SplitMix64:
    """Counter-mode SplitMix64 stream (see module docstring)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        z = np.full(n, self.seed, dtype=np.uint64) + k * _GAMMA
        return _mix64(z)

    def random(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return low + (high - low) * self.random(size)

    def integers(self, high: int, size=None):
        u = self.random(size)
        if size is None:
            return min(int(u * high), high - 1)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        u = self.random(2 * n).reshape(n, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return (r * np.cos(2.0 * math.pi * u[:, 1])).reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def choice(self, weights: np.ndarray, size: int) -> np.ndarray:
        """Draw indices with probability proportional to ``weights`` (inverse CDF)."""
        cdf = np.cumsum(np.asarray(weights, dtype=np.float64))
        cdf /= cdf[-1]
        idx = np.searchsorted(cdf, self.random(size), side="right")
        return np.minimum(idx, len(cdf) - 1)


# -- parameters ------------------------------------------------------------

class ParamTable(dict):
    """Ordered ``name -> Tensor`` map of trainable parameters."""

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self[name] = tensor
        return tensor

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self[k].data = v.copy()


def xavier_init(rows: int, cols: int, seed: int, name: str | None = None) -> Tensor:
    """Uniform Xavier/Glorot init on ``+-sqrt(6 / (rows + cols))``."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"xavier_init needs positive dimensions, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    values = SplitMix64(seed).uniform(-bound, bound, (rows, cols))
    t = Tensor(np.clip(values, -bound, bound), requires_grad=True, name=name)
    return t


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamTable, state: AdamState) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.data.dtype)
        p.grad = None


# -- gradient checking -----------------------------------------------------

def check_gradients(
    loss_fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Iterable[np.ndarray],
    eps: float = 1e-3,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64.  ``loss_fn`` maps fresh leaf tensors (one per input array)
    to a scalar loss.  The error for each input is
    ``max|analytic - numeric| / max(max|numeric|, 1e-8)``; the worst input wins.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with precision(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        backward(loss_fn(leaves))
        analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]
        worst = 0.0
        for k, base in enumerate(arrays):
            numeric = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                vals = []
                for sign in (1.0, -1.0):
                    trial = [a.copy() for a in arrays]
                    trial[k][idx] += sign * eps
                    vals.append(loss_fn([Tensor(a) for a in trial]).item())
                numeric[idx] = (vals[0] - vals[1]) / (2 * eps)
            scale = max(float(np.abs(numeric).max(initial=0.0)), 1e-8)
            worst = max(worst, float(np.abs(analytic[k] - numeric).max(initial=0.0)) / scale)
    return worst
