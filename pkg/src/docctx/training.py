"""Adam, inverse-sqrt schedule, dynamic context sampling and early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import ParallelDocument, Vocabulary
from .metrics import fmt, perplexity
from .model import Transformer, collate, document_examples, token_batches

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Validation perplexity became non-finite; ``state`` holds the last good parameters."""

    def __init__(self, message: str, state: dict[str, np.ndarray] | None, log_lines: list[str]):
        super().__init__(message)
        self.state = state
        self.log_lines = log_lines


@dataclass
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    lr: float = 1e-3
    warmup: int = 400
    label_smoothing: float = 0.1
    batch_tokens: int = 512
    max_epochs: int = 40
    patience: int = 5
    evals_per_epoch: int = 2
    clip_norm: float = 1.0
    seed: int = 0
    max_steps: int = 0

    def validate(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.warmup < 1 or self.patience < 1 or self.evals_per_epoch < 1:
            raise ValueError("warmup, patience and evals_per_epoch must be >= 1")
        if self.batch_tokens < 1 or self.max_epochs < 1:
            raise ValueError("batch_tokens and max_epochs must be >= 1")

    @property
    def lr_scale(self) -> float:
        """Scale whose schedule peaks at ``lr`` when ``step == warmup``."""
        return self.lr * math.sqrt(self.warmup)


def lr_at(step: int, warmup: int, scale: float) -> float:
    if step < 1:
        raise ValueError("step counts from 1")
    return scale * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-8,
) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    if step < 1:
        raise ValueError("step counts from 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nx.NumericError(f"non-finite gradient for parameter {name}")
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise nx.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the norm before clipping."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def sample_context_sizes(n: int, max_context: int, rng) -> np.ndarray:
    return rng.integers(0, max_context + 1, size=n)


def epoch_batches(
    model: Transformer,
    docs: Sequence[ParallelDocument],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    config: TrainConfig,
    epoch: int,
):
    """Examples with freshly sampled context sizes, grouped by length and shuffled."""
    rng = nx.make_rng(config.seed, "epoch", epoch)
    K = model.config.max_context
    examples, ks = [], []
    for doc in docs:
        k = sample_context_sizes(len(doc), K, rng)
        ks.extend(k.tolist())
        examples.extend(document_examples(model.config.arch, doc, [int(x) for x in k], src_vocab, tgt_vocab))
    order = rng.permutation(len(examples))
    batches = token_batches(examples, config.batch_tokens, order)
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm], ks


@dataclass
class TrainResult:
    model: Transformer
    log_lines: list[str]
    best_ppl: float
    best_step: int
    steps: int
    context_sizes: list[int]


def train_step(model: Transformer, batch, config: TrainConfig, step: int, state: AdamState, rng) -> float:
    logits = model.forward(batch, rng=rng)
    # the 2-to-2 objective counts context-target tokens as well
    loss, _ = nx.cross_entropy(logits, batch.tgt_out, config.label_smoothing)
    params = model.parameters()
    for p in params.values():
        p.grad = None
    loss.backward()
    grads = {n: p.grad if p.grad is not None else np.zeros_like(p.data) for n, p in params.items()}
    clip_gradients(grads, config.clip_norm)
    lr = lr_at(step, config.warmup, config.lr_scale)
    adam_step({n: p.data for n, p in params.items()}, grads, state, step, lr,
              config.beta1, config.beta2, config.eps)
    for p in params.values():
        p.grad = None
    return float(loss.data)


def train(
    model: Transformer,
    train_docs: Sequence[ParallelDocument],
    valid_docs: Sequence[ParallelDocument],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    config: TrainConfig,
) -> TrainResult:
    """Train until validation perplexity stops improving for ``patience`` evaluations.

    Validation uses the full context window with gold target context. The
    returned model holds the best parameters.
    """
    config.validate()
    K = model.config.max_context
    state = AdamState()
    step = 0
    best_ppl, best_step, best_state = math.inf, 0, model.state_dict()
    bad_evals = 0
    lines: list[str] = []
    all_ks: list[int] = []
    drop_rng = nx.make_rng(config.seed, "dropout")
    running: list[float] = []
    done = False
    for epoch in range(config.max_epochs):
        batches, ks = epoch_batches(model, train_docs, src_vocab, tgt_vocab, config, epoch)
        all_ks.extend(ks)
        n = len(batches)
        marks = {max(1, round(n * (j + 1) / config.evals_per_epoch)) for j in range(config.evals_per_epoch)}
        for b_idx, examples in enumerate(batches, 1):
            step += 1
            running.append(train_step(model, collate(examples), config, step, state, drop_rng))
            at_cap = config.max_steps and step >= config.max_steps
            if b_idx not in marks and not at_cap:
                continue
            ppl = perplexity(model, valid_docs, K, src_vocab, tgt_vocab)
            lr = lr_at(step, config.warmup, config.lr_scale)
            line = f"{step}\t{lr:.6e}\t{fmt(float(np.mean(running)))}\t{fmt(ppl)}"
            lines.append(line)
            log.info(line)
            running = []
            if not math.isfinite(ppl):
                model.load_state_dict(best_state)
                raise TrainingDiverged(f"validation perplexity {ppl} at step {step}", best_state, lines)
            if ppl < best_ppl:
                best_ppl, best_step, best_state = ppl, step, model.state_dict()
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= config.patience:
                    done = True
            if done or at_cap:
                done = True
                break
        if done:
            break
    model.load_state_dict(best_state)
    return TrainResult(model, lines, best_ppl, best_step, step, all_ks)


def config_lines(config: TrainConfig) -> list[str]:
    return [f"{k}={v}" for k, v in asdict(config).items()]
