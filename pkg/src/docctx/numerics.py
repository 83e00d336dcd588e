"""Dense float64 tensors with a dynamically recorded reverse-mode graph.

Every op returns a new :class:`Tensor` whose ``_backward`` closure knows how to
push an upstream gradient into its parents. ``Tensor.backward`` walks the graph
once in reverse topological order and then frees it.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class VocabularyError(ValueError):
    """A token id falls outside the vocabulary."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, decoding)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Counter-based generator for an independent named stream under ``seed``.

    Streams are keyed by their names, so e.g. parameter initialisation and
    random-context sampling never perturb each other.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for part in stream:
        if isinstance(part, str):
            words.append(zlib.crc32(part.encode("utf-8")))
        else:
            words.append(int(part) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -----------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _GRAD_ENABLED and any(_needs_grad(p) for p in parents):
        return Tensor(data, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _result(out, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _result(out, "mul", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return ((a, -g),)

    return _result(-a.data, "neg", (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return ((a, g * mask),)

    return _result(a.data * mask, "relu", (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return ((a, g * out),)

    return _result(out, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        return ((a, g / a.data),)

    return _result(np.log(a.data), "log", (a,), backward)


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape

    def backward(g):
        return ((a, g.reshape(src)),)

    return _result(a.data.reshape(shape), "reshape", (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return ((a, g.transpose(inverse)),)

    return _result(a.data.transpose(axes), "transpose", (a,), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape)),)

    return _result(out, "sum", (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            (t, np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i, t in enumerate(tensors)
        )

    return _result(out, "concat", tuple(tensors), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; out-of-range ids raise VocabularyError."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabularyError(f"token id outside [0, {vocab}) in embedding lookup")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return ((weight, gw),)

    return _result(weight.data[ids], "embedding", (weight,), backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            ga = g @ b.data.T
        else:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ((a, ga), (b, gb))

    return _result(out, "matmul", (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation and distributions -----------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((x, out * (g - (g * out).sum(axis=axis, keepdims=True))),)

    return _result(out, "softmax", (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return ((x, g - p * g.sum(axis=axis, keepdims=True)),)

    return _result(out, "log_softmax", (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n
        )
        return (
            (x, gx),
            (gain, _unbroadcast(g * xhat, gain.shape)),
            (bias, _unbroadcast(g, bias.shape)),
        )

    return _result(out, "layer_norm", (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    label_smoothing: float = 0.0,
    pad_id: int = 0,
    weights: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Mean label-smoothed NLL over non-pad targets.

    Returns ``(loss, token_logprobs)`` where ``token_logprobs[t] = log p(y_t)``
    (unsmoothed; 0 at pad positions). ``weights`` overrides the pad mask when
    only a subset of positions should count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    mask = (targets != pad_id).astype(DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE)
    live = targets[mask > 0]
    if live.size and (live.min() < 0 or live.max() >= vocab):
        raise VocabularyError(f"target id outside [0, {vocab})")
    safe = np.where(mask > 0, targets, 0)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    tok_logp = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    smooth = -logp.mean(axis=-1)
    per_token = (1.0 - label_smoothing) * (-tok_logp) + label_smoothing * smooth
    count = mask.sum()
    denom = count if count > 0 else 1.0
    loss = float((per_token * mask).sum() / denom)

    def backward(g):
        p = np.exp(logp)
        q = np.full_like(p, label_smoothing / vocab)
        np.put_along_axis(q, safe[..., None], label_smoothing / vocab + 1.0 - label_smoothing, axis=-1)
        return ((logits, g * (p - q) * (mask / denom)[..., None]),)

    return _result(np.asarray(loss), "cross_entropy", (logits,), backward), tok_logp * mask


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    passed: bool


def gradient_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare recorded gradients of scalar ``f`` at ``x`` to central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_entries`` only a random subset of coordinates is perturbed.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    if not np.all(np.isfinite(base)):
        raise NumericError("gradient_check input contains non-finite values")
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ShapeError(f"gradient_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("recorded gradient contains non-finite values")

    flat = base.reshape(-1)
    indices: Iterable[int] = range(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or make_rng(0, "gradcheck")
        indices = sorted(rng.choice(flat.size, size=max_entries, replace=False).tolist())
    max_rel = 0.0
    max_abs = 0.0
    count = 0
    with no_grad():
        for i in indices:
            old = flat[i]
            flat[i] = old + h
            fp = f(Tensor(base.copy())).item()
            flat[i] = old - h
            fm = f(Tensor(base.copy())).item()
            flat[i] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite function value near coordinate {i}")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(a), abs(numeric), floor))
            count += 1
    return GradCheckReport(max_rel, max_abs, count, max_rel < tol)
