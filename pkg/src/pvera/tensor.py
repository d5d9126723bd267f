"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy float64 array plus an optional gradient accumulator.
Operations build a tape (a DAG of backward closures); backward() walks it in
reverse topological order and accumulates d(loss)/d(leaf) into every tensor
created with requires_grad=True. The tape is single-use: backward() clears
the closures it visits.

finite_difference_grad() is the independent oracle for everything on the
tape: it never touches the tape, only re-evaluates the forward function.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """A float64 array with an optional spot on the gradient tape."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[], None] | None = None
        self._parents: tuple["Tensor", ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the actual rules live in the module-level functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(value: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(value, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's stacked-matrix semantics.

    Both operands must have ndim >= 2; leading axes broadcast.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = _node(a.data @ b.data, (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
        out._backward = _bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = _node(a.data.reshape(shape), (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad.reshape(a.shape))
        out._backward = _bw
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = _node(np.swapaxes(a.data, ax1, ax2), (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(np.swapaxes(out.grad, ax1, ax2))
        out._backward = _bw
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))
        out._backward = _bw
    return out


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _node(np.exp(a.data), (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * out.data)
        out._backward = _bw
    return out


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive input")
    out = _node(np.log(a.data), (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad / a.data)
        out._backward = _bw
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit; smooth, so finite differences stay honest."""
    a = as_tensor(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = _node(a.data * phi, (a,))
    if out.requires_grad:
        def _bw():
            dens = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            a._accumulate(out.grad * (phi + a.data * dens))
        out._backward = _bw
    return out


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start:stop) along the last axis, with gradient scatter-back."""
    a = as_tensor(a)
    out = _node(a.data[..., start:stop].copy(), (a,))
    if out.requires_grad:
        def _bw():
            g = np.zeros(a.shape)
            g[..., start:stop] = out.grad
            a._accumulate(g)
        out._backward = _bw
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _node(s, (x,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            inner = (g * s).sum(axis=-1, keepdims=True)
            x._accumulate(s * (g - inner))
        out._backward = _bw
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row (last axis) standardization followed by an affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xn = centered * ivar
    out = _node(xn * gamma.data + beta.data, (x, gamma, beta))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if gamma.requires_grad:
                gamma._accumulate((g * xn).reshape(-1, d).sum(axis=0))
            if beta.requires_grad:
                beta._accumulate(g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                gx = g * gamma.data
                term = gx - gx.mean(axis=-1, keepdims=True) - xn * (gx * xn).mean(axis=-1, keepdims=True)
                x._accumulate(term * ivar)
        out._backward = _bw
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    loss = float((lse - logits.data[np.arange(n), labels]).mean())
    out = _node(np.asarray(loss), (logits,))
    if out.requires_grad:
        def _bw():
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            logits._accumulate(out.grad * p / n)
        out._backward = _bw
    return out


def gaussian_kl(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), summed over the last axis.

    The result is averaged over all leading axes, so its scale does not
    depend on batch or sequence length. Scalar inputs are treated as a
    latent of size one.
    """
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0.0):
        raise ValueError("gaussian_kl requires sigma > 0 elementwise")
    if mu.ndim == 0:
        mu, sigma = reshape(mu, (1,)), reshape(sigma, (1,))
    per_dim = add(add(mul(sigma, sigma), mul(mu, mu)), -1.0)
    per_dim = add(per_dim, mul(log(sigma), -2.0))
    summed = tensor_sum(mul(per_dim, 0.5), axis=-1)
    return tensor_mean(summed) if summed.ndim > 0 else summed


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad tensor on the tape.

    The tape is consumed: visited closures are dropped so a second call
    cannot silently double-count.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
        node._backward = None
        node._parents = ()


def finite_difference_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued f at x.

    f must be deterministic between calls (fix any RngStream it uses).
    """
    if h <= 0:
        raise ValueError("finite_difference_grad needs h > 0")

    def evaluate(arr: np.ndarray) -> float:
        r = f(Tensor(arr))
        return float(r.data) if isinstance(r, Tensor) else float(r)

    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(base)
        flat[i] = orig - h
        fm = evaluate(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_gradient_error(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative disagreement between tape gradients and finite differences.

    f() must rebuild the forward pass from scratch on each call (so that
    perturbing a parameter in place is observed) and be deterministic.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        ad = np.zeros(p.shape) if p.grad is None else p.grad

        def freeze_eval(t: Tensor, target=p) -> float:
            saved = target.data
            target.data = t.data
            try:
                return float(f().data)
            finally:
                target.data = saved

        fd = finite_difference_grad(freeze_eval, p, h=h)
        err = np.abs(ad - fd) / (np.abs(fd) + 1e-8)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
