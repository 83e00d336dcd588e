"""Random finite-difference cases for every differentiable op and the full model."""

from __future__ import annotations

import numpy as np

from docctx import numerics as nx
from docctx.numerics import Tensor


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()


def _case(op: str, rng):
    """Returns ``(f, x)`` with ``f`` scalar-valued in ``x``."""
    u = lambda *s: rng.uniform(-2.0, 2.0, size=s)
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    x = u(*shape)
    w = u(*shape)
    if op == "add":
        other = u(shape[1])
        return (lambda t: _weighted(nx.add(t, Tensor(other)), w)), x
    if op == "mul":
        other = u(*shape)
        return (lambda t: _weighted(nx.mul(t, t * other), w)), x
    if op == "neg":
        return (lambda t: _weighted(nx.neg(t) - t * 0.5, w)), x
    if op == "relu":
        return (lambda t: _weighted(nx.relu(t), w)), x
    if op == "exp":
        return (lambda t: _weighted(nx.exp(t), w)), x
    if op == "log":
        pos = rng.uniform(0.5, 2.0, size=shape)
        return (lambda t: _weighted(nx.log(t), w)), pos
    if op == "reshape":
        return (lambda t: _weighted(t.reshape(-1), w.reshape(-1))), x
    if op == "transpose":
        return (lambda t: _weighted(t.transpose(1, 0), w.T)), x
    if op == "sum":
        v = u(shape[0], 1)
        return (lambda t: _weighted(nx.tsum(t, axis=1, keepdims=True), v)), x
    if op == "mean":
        v = u(shape[1])
        return (lambda t: _weighted(nx.tmean(t, axis=0), v)), x
    if op == "concat":
        other = u(2, shape[1])
        w2 = u(shape[0] + 2, shape[1])
        return (lambda t: _weighted(nx.concat([t, Tensor(other)], axis=0), w2)), x
    if op == "embedding":
        table = u(5, 3)
        ids = rng.integers(0, 5, size=(2, 4))
        w3 = u(2, 4, 3)
        return (lambda t: _weighted(nx.embedding(t, ids), w3)), table
    if op == "matmul":
        b = u(2, shape[1], 3)
        w3 = u(2, shape[0], 3)
        return (lambda t: _weighted(nx.matmul(t, Tensor(b)), w3)), x
    if op == "linear":
        wt, bias = u(shape[1], 3), u(3)
        w3 = u(shape[0], 3)
        return (lambda t: _weighted(nx.linear(t, Tensor(wt), Tensor(bias)), w3)), x
    if op == "softmax":
        return (lambda t: _weighted(nx.softmax(t, axis=-1), w)), x
    if op == "log_softmax":
        return (lambda t: _weighted(nx.log_softmax(t, axis=-1), w)), x
    if op == "layer_norm":
        g, b = u(shape[1]), u(shape[1])
        x = u(shape[0], max(2, shape[1]))
        g, b, w = u(x.shape[1]), u(x.shape[1]), u(*x.shape)
        return (lambda t: _weighted(nx.layer_norm(t, Tensor(g), Tensor(b)), w)), x
    if op == "layer_norm_gain":
        x = u(3, 4)
        b, w = u(4), u(3, 4)
        return (lambda t: _weighted(nx.layer_norm(Tensor(x), t, Tensor(b)), w)), u(4)
    if op == "dropout":
        seed = int(rng.integers(1 << 30))
        return (lambda t: _weighted(nx.dropout(t, 0.3, nx.make_rng(seed, "drop")), w)), x
    if op == "cross_entropy":
        v = int(rng.integers(2, 6))
        logits = u(shape[0] + 1, v)
        targets = rng.integers(0, v, size=shape[0] + 1)
        targets[0] = 0
        return (lambda t: nx.cross_entropy(t, targets, label_smoothing=0.1, pad_id=0)[0]), logits
    raise KeyError(op)


OPS = (
    "add", "mul", "neg", "relu", "exp", "log", "reshape", "transpose", "sum", "mean", "concat",
    "embedding", "matmul", "linear", "softmax", "log_softmax", "layer_norm", "layer_norm_gain",
    "dropout", "cross_entropy",
)


def op_max_rel_error(op: str, n_instances: int, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, OPS.index(op)])
    worst = 0.0
    for _ in range(n_instances):
        f, x = _case(op, rng)
        worst = max(worst, nx.gradient_check(f, x).max_rel_error)
    return worst


def model_max_rel_error(model, batch, per_param: int = 6, seed: int = 0) -> tuple[float, int]:
    """Finite differences on a sample of every parameter of a full loss."""
    rng = nx.make_rng(seed, "model-gradcheck")
    worst, checked = 0.0, 0
    for name in list(model.params):
        original = model.params[name]

        def f(t, name=name):
            model.params[name] = t
            try:
                logits = model.forward(batch)
                loss, _ = nx.cross_entropy(logits, batch.tgt_out, label_smoothing=0.1)
                return loss
            finally:
                model.params[name] = original

        rep = nx.gradient_check(f, original.data, max_entries=per_param, rng=rng)
        worst = max(worst, rep.max_rel_error)
        checked += rep.n_checked
    return worst, checked
