"""BLEU, perplexity, CXMI, contrastive accuracy and phenomena F1."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .corpus import KINDS, ContrastiveExample, ParallelDocument, Vocabulary
from .decoding import ContextBuilder, build_examples, gold_context, score_examples
from .model import Transformer, canonical_arch, make_example
from .tagger import ConfigError, Tagger, tagged_words


class PairingError(ValueError):
    pass


# -- BLEU -----------------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    hyp_len: int
    ref_len: int

    @property
    def precisions(self) -> list[float]:
        return [m / t if t else 0.0 for m, t in zip(self.matches, self.totals)]

    @property
    def brevity_penalty(self) -> float:
        if self.hyp_len == 0:
            return 0.0
        return math.exp(min(0.0, 1.0 - self.ref_len / self.hyp_len))

    @property
    def score(self) -> float:
        if self.hyp_len == 0 or min(self.matches) == 0:
            return 0.0
        log_p = sum(math.log(m / t) for m, t in zip(self.matches, self.totals)) / len(self.matches)
        return 100.0 * self.brevity_penalty * math.exp(log_p)


def bleu_stats(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_order: int = 4) -> BleuStats:
    if len(hypotheses) != len(references):
        raise PairingError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    return BleuStats(matches, totals, hyp_len, ref_len)


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU in [0, 100] without smoothing."""
    return bleu_stats(hypotheses, references).score


# -- likelihood based --------------------------------------------------------------


def perplexity(
    model: Transformer,
    docs: Sequence[ParallelDocument],
    k: int,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    layout: str | None = None,
    batch_size: int = 64,
) -> float:
    """exp of the mean cross-entropy over current-sentence target tokens (gold context)."""
    layout = canonical_arch(layout or model.config.arch)
    examples = build_examples(layout, docs, gold_context(k), src_vocab, tgt_vocab)
    scores = score_examples(model, examples, batch_size)
    total = sum(s.total for s in scores)
    count = sum(len(s.per_token) for s in scores)
    return math.exp(-total / count) if count else float("nan")


@dataclass
class CxmiResult:
    mean: float
    n_tokens: int
    per_sentence: list[float] = field(default_factory=list)
    sentence_tokens: list[int] = field(default_factory=list)


def cxmi(
    model: Transformer,
    docs: Sequence[ParallelDocument],
    with_context: ContextBuilder,
    without_context: ContextBuilder,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    layout: str | None = None,
    batch_size: int = 64,
) -> CxmiResult:
    """Mean per-token ``log p(y|x,C) - log p(y|x)`` in nats over reference tokens."""
    layout = canonical_arch(layout or model.config.arch)
    with_ex = build_examples(layout, docs, with_context, src_vocab, tgt_vocab)
    without_ex = build_examples(layout, docs, without_context, src_vocab, tgt_vocab)
    a = score_examples(model, with_ex, batch_size)
    b = score_examples(model, without_ex, batch_size)
    per_sentence, counts = [], []
    total, n = 0.0, 0
    for sa, sb in zip(a, b):
        delta = sa.per_token - sb.per_token
        per_sentence.append(float(delta.mean()))
        counts.append(len(delta))
        total += float(delta.sum())
        n += len(delta)
    return CxmiResult(total / n if n else 0.0, n, per_sentence, counts)


# -- contrastive ----------------------------------------------------------------------

Scorer = Callable[[ContrastiveExample, Sequence[str]], float]


def contrastive_scores(
    model: Transformer,
    examples: Sequence[ContrastiveExample],
    k: int,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    layout: str | None = None,
    batch_size: int = 64,
) -> list[list[float]]:
    """Per example: scores of the correct target followed by each incorrect variant."""
    layout = canonical_arch(layout or model.config.arch)
    flat, owners = [], []
    for n, ex in enumerate(examples):
        n_ctx = min(k, len(ex.src_context))
        sctx = ex.src_context[len(ex.src_context) - n_ctx :]
        tctx = ex.tgt_context[len(ex.tgt_context) - n_ctx :]
        for cand in [ex.target, *ex.incorrect]:
            flat.append(make_example(layout, sctx, tctx, ex.source, cand, src_vocab, tgt_vocab))
            owners.append(n)
    scores = score_examples(model, flat, batch_size)
    out: list[list[float]] = [[] for _ in examples]
    for n, s in zip(owners, scores):
        out[n].append(s.total)
    return out


def accuracy_from_scores(scores: Sequence[Sequence[float]]) -> float:
    """Share of examples whose first (correct) score beats every other; ties lose."""
    if not scores:
        raise ValueError("contrastive accuracy needs at least one example")
    wins = sum(1 for s in scores if s[0] > max(s[1:]))
    return wins / len(scores)


def contrastive_accuracy(
    model: Transformer | None,
    examples: Sequence[ContrastiveExample],
    k: int = 0,
    src_vocab: Vocabulary | None = None,
    tgt_vocab: Vocabulary | None = None,
    layout: str | None = None,
    scorer: Scorer | None = None,
) -> float:
    """Fraction in [0, 1]. A custom ``scorer`` replaces the model when given."""
    if not examples:
        raise ValueError("contrastive accuracy needs at least one example")
    if scorer is not None:
        scores = [[scorer(ex, c) for c in [ex.target, *ex.incorrect]] for ex in examples]
    else:
        scores = contrastive_scores(model, examples, k, src_vocab, tgt_vocab, layout)
    return accuracy_from_scores(scores)


# -- phenomena F1 ------------------------------------------------------------------------


@dataclass
class F1Result:
    precision: float
    recall: float
    f1: float
    matched: int
    n_hyp: int
    n_ref: int


def f1_from_counts(matched: int, n_hyp: int, n_ref: int) -> F1Result:
    if n_hyp == 0 and n_ref == 0:
        return F1Result(1.0, 1.0, 1.0, 0, 0, 0)
    p = matched / n_hyp if n_hyp else 0.0
    r = matched / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return F1Result(p, r, f, matched, n_hyp, n_ref)


def match_tagged(ref_words: Sequence[str], hyp_words: Sequence[str]) -> int:
    """Multiset intersection size: each hypothesis occurrence consumes one reference occurrence."""
    return sum((Counter(ref_words) & Counter(hyp_words)).values())


def phenomena_f1(
    references: Sequence[Sequence[Sequence[str]]],
    hypotheses: Sequence[Sequence[Sequence[str]]],
    tagger: Tagger,
    kinds: Sequence[str] = KINDS,
) -> dict[str, F1Result]:
    """Per-phenomenon F1 between tagged reference and hypothesis documents.

    Both arguments are lists of documents, each a list of token lists; the
    tagger runs on each side independently.
    """
    for kind in kinds:
        if kind not in KINDS:
            raise ConfigError(f"unknown phenomenon {kind!r}; expected one of {KINDS}")
    if len(references) != len(hypotheses):
        raise PairingError(f"{len(hypotheses)} hypothesis documents but {len(references)} references")
    counts = {k: [0, 0, 0] for k in kinds}
    for ref_doc, hyp_doc in zip(references, hypotheses):
        if len(ref_doc) != len(hyp_doc):
            raise PairingError("documents differ in sentence count")
        ref_tw = tagged_words(ref_doc, tagger.tag_document(ref_doc, "target"))
        hyp_tw = tagged_words(hyp_doc, tagger.tag_document(hyp_doc, "target"))
        for r, h in zip(ref_tw, hyp_tw):
            for k in kinds:
                counts[k][0] += match_tagged(r[k], h[k])
                counts[k][1] += len(h[k])
                counts[k][2] += len(r[k])
    return {k: f1_from_counts(*counts[k]) for k in kinds}


# -- report files ------------------------------------------------------------------------


def fmt(value: float) -> str:
    return f"{value:.6f}"


def write_metric_report(rows: Sequence[tuple[str, str, float]], path, summary_path=None) -> None:
    """``metric TAB configuration TAB value`` lines plus an optional key=value summary."""
    Path(path).write_text("".join(f"{m}\t{c}\t{fmt(v)}\n" for m, c, v in rows), encoding="utf-8")
    if summary_path is not None:
        Path(summary_path).write_text(
            "".join(f"{m}.{c}={fmt(v)}\n" for m, c, v in rows), encoding="utf-8"
        )


def read_summary(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = float(value)
    return out

