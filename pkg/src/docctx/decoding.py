"""Greedy and beam decoding, document-sequential translation and forced scoring."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import BOS, EOS, PAD, SEP, UNK, CorpusError, ParallelDocument, Vocabulary
from .model import (
    Example,
    SequenceBatch,
    Transformer,
    _pad,
    canonical_arch,
    collate,
    context_window,
    make_example,
)
from .numerics import Tensor

CONTEXT_MODES = ("correct", "random", "none")
BANNED = (PAD, BOS, UNK)


class DecodingConfigError(ValueError):
    pass


# -- scoring --------------------------------------------------------------------


def token_logprobs(model: Transformer, batch: SequenceBatch) -> np.ndarray:
    """Teacher-forced ``log p(y_t)`` at every target position ``(B, T)``."""
    with nx.no_grad():
        logits = model.forward(batch)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return np.take_along_axis(logp, batch.tgt_out[..., None], axis=-1)[..., 0]


@dataclass
class ForcedScore:
    total: float
    per_token: np.ndarray


def force_score(model: Transformer, batch: SequenceBatch) -> list[ForcedScore]:
    """Log-probability of each example's current target sentence plus EOS.

    Context-target tokens (2-to-2 layout) are excluded from the score.
    """
    lp = token_logprobs(model, batch)
    out = []
    for b in range(len(batch)):
        keep = batch.score_mask[b] > 0
        per = lp[b][keep]
        out.append(ForcedScore(float(per.sum()), per))
    return out


# -- search -----------------------------------------------------------------------


def _encode(model: Transformer, examples: Sequence[Example]):
    batch = collate([Example(e.layout, e.src, [], e.n_src_context, 0, e.src_ctx, e.tgt_ctx,
                             e.src_ctx_starts, e.tgt_ctx_starts) for e in examples])
    with nx.no_grad():
        enc, mask, _ = model.encode(batch)
    return enc.data, mask


def _step_logprobs(model: Transformer, enc: np.ndarray, mask: np.ndarray, seqs: Sequence[Sequence[int]]) -> np.ndarray:
    """Next-token log-probabilities after each prefix in ``seqs``."""
    tgt_in = _pad(seqs)
    with nx.no_grad():
        logits, _, _ = model.decode(Tensor(enc), mask, tgt_in)
    last = np.array([len(s) - 1 for s in seqs])
    z = logits.data[np.arange(len(seqs)), last]
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp[:, list(BANNED)] = -np.inf
    return logp


def greedy_decode(
    model: Transformer,
    examples: Sequence[Example],
    prefixes: Sequence[Sequence[int]],
    max_lens: Sequence[int],
) -> list[tuple[list[int], float]]:
    """Batched greedy search; returns generated ids (without EOS) and their log-prob sum.

    Ties go to the lowest token id.
    """
    enc, mask = _encode(model, examples)
    seqs = [list(p) for p in prefixes]
    gen: list[list[int]] = [[] for _ in examples]
    scores = np.zeros(len(examples))
    active = [i for i in range(len(examples)) if max_lens[i] > 0]
    while active:
        logp = _step_logprobs(model, enc[active], mask[active], [seqs[i] for i in active])
        best = logp.argmax(axis=-1)
        still = []
        for row, i in enumerate(active):
            tok = int(best[row])
            scores[i] += logp[row, tok]
            if tok == EOS:
                continue
            gen[i].append(tok)
            seqs[i].append(tok)
            if len(gen[i]) < max_lens[i]:
                still.append(i)
        active = still
    return [(g, float(s)) for g, s in zip(gen, scores)]


def _normalized(tokens: Sequence[int], logp: float, finished: bool) -> float:
    return logp / (len(tokens) + (1 if finished else 0))


def beam_decode(
    model: Transformer,
    example: Example,
    prefix: Sequence[int],
    max_len: int,
    beam: int,
) -> tuple[list[int], float]:
    """Beam search with length-normalised scores (log-prob / token count, EOS included).

    The greedy hypothesis is always a candidate, so the result never scores
    below greedy search.
    """
    if beam < 1:
        raise DecodingConfigError(f"beam must be >= 1, got {beam}")
    (greedy_tokens, greedy_lp), = greedy_decode(model, [example], [prefix], [max_len])
    greedy_finished = len(greedy_tokens) < max_len
    if beam == 1:
        return greedy_tokens, greedy_lp
    enc, mask = _encode(model, [example])
    beams: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[float, tuple[int, ...], float]] = [
        (_normalized(greedy_tokens, greedy_lp, greedy_finished), tuple(greedy_tokens), greedy_lp)
    ]
    for _ in range(max_len):
        if not beams:
            break
        seqs = [list(prefix) + toks for toks, _ in beams]
        logp = _step_logprobs(model, np.repeat(enc, len(beams), axis=0), np.repeat(mask, len(beams), axis=0), seqs)
        cands = []
        for (toks, lp), row in zip(beams, logp):
            top = np.argsort(-row, kind="stable")[:beam]
            for tok in top:
                if np.isfinite(row[tok]):
                    cands.append((toks + [int(tok)], lp + float(row[tok])))
        cands.sort(key=lambda c: (-c[1], c[0]))
        beams = []
        for toks, lp in cands:
            if toks[-1] == EOS:
                body = toks[:-1]
                finished.append((_normalized(body, lp, True), tuple(body), lp))
            elif len(toks) >= max_len:
                finished.append((_normalized(toks, lp, False), tuple(toks), lp))
            else:
                beams.append((toks, lp))
            if len(beams) == beam:
                break
    best = sorted(finished, key=lambda f: (-f[0], f[1]))[0]
    return list(best[1]), best[2]


# -- document translation -------------------------------------------------------------


def random_sentence(rng, vocab: Vocabulary, length: int) -> list[str]:
    ids = rng.choice(vocab.content_ids, size=length)
    return vocab.decode(ids.tolist())


def random_context(
    seed: int,
    doc_id: str,
    sent_idx: int,
    src_context: Sequence[Sequence[str]],
    tgt_context: Sequence[Sequence[str]],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
):
    """Same-length uniform token samples replacing every context sentence."""
    rng = nx.make_rng(seed, "random-context", doc_id, sent_idx)
    src = [random_sentence(rng, src_vocab, len(s)) for s in src_context]
    tgt = [random_sentence(rng, tgt_vocab, len(t)) for t in tgt_context]
    return src, tgt


def decode_prefix(example: Example) -> list[int]:
    if example.layout == "concat_2to2" and example.n_tgt_context:
        return [BOS] + example.tgt[: example.n_tgt_context]
    return [BOS]


def extract_current(tokens: Sequence[int]) -> list[int]:
    """Tokens after the last separator."""
    tokens = list(tokens)
    if SEP in tokens:
        last = len(tokens) - 1 - tokens[::-1].index(SEP)
        return tokens[last + 1 :]
    return tokens


@dataclass
class Translation:
    doc_id: str
    sent_idx: int
    tokens: list[str]
    logprob: float


def translate_corpus(
    model: Transformer,
    docs: Sequence[ParallelDocument],
    k: int,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    beam: int = 1,
    context_mode: str = "correct",
    seed: int = 0,
    layout: str | None = None,
) -> tuple[list[list[Translation]], dict]:
    """Translate documents sentence by sentence, batching across documents.

    Target context is always the model's own earlier output. ``layout`` lets a
    model read inputs built for another architecture (the sentence model fed
    concatenated inputs).
    """
    if beam < 1:
        raise DecodingConfigError(f"beam must be >= 1, got {beam}")
    if context_mode not in CONTEXT_MODES:
        raise DecodingConfigError(f"unknown context mode {context_mode!r}")
    if not 0 <= k <= model.config.max_context:
        raise DecodingConfigError(f"k={k} outside [0, {model.config.max_context}]")
    layout = canonical_arch(layout or model.config.arch)
    cache: dict[tuple[str, int], list[str]] = {}
    out: list[list[Translation]] = [[] for _ in docs]
    longest = max((len(d) for d in docs), default=0)
    for i in range(longest):
        live = [n for n, d in enumerate(docs) if i < len(d)]
        examples, prefixes, max_lens = [], [], []
        for n in live:
            doc = docs[n]
            window = context_window(doc, i, k) if context_mode != "none" else range(0)
            src_ctx = [doc.source(j) for j in window]
            tgt_ctx = [cache[(doc.doc_id, j)] for j in window]
            if context_mode == "random":
                src_ctx, tgt_ctx = random_context(seed, doc.doc_id, i, src_ctx, tgt_ctx, src_vocab, tgt_vocab)
            ex = make_example(layout, src_ctx, tgt_ctx, doc.source(i), [], src_vocab, tgt_vocab)
            examples.append(ex)
            prefixes.append(decode_prefix(ex))
            max_lens.append(2 * len(doc.source(i)) + 8)
        if beam == 1:
            results = greedy_decode(model, examples, prefixes, max_lens)
        else:
            results = [beam_decode(model, e, p, m, beam) for e, p, m in zip(examples, prefixes, max_lens)]
        for n, ex, (ids, lp) in zip(live, examples, results):
            tokens = tgt_vocab.decode(extract_current(ids) if layout == "concat_2to2" else ids)
            cache[(docs[n].doc_id, i)] = tokens
            out[n].append(Translation(docs[n].doc_id, i, tokens, lp))
    return out, cache


def translate_document(model, doc, k, src_vocab, tgt_vocab, beam=1, context_mode="correct", seed=0, layout=None):
    translations, cache = translate_corpus(model, [doc], k, src_vocab, tgt_vocab, beam, context_mode, seed, layout)
    return [t.tokens for t in translations[0]], cache


# -- context builders -------------------------------------------------------------------

ContextBuilder = Callable[[ParallelDocument, int], tuple[list[list[str]], list[list[str]]]]


def gold_context(k: int) -> ContextBuilder:
    def build(doc, i):
        w = context_window(doc, i, k)
        return [doc.source(j) for j in w], [doc.target(j) for j in w]
    return build


def generated_context(k: int, cache: dict) -> ContextBuilder:
    def build(doc, i):
        w = context_window(doc, i, k)
        return [doc.source(j) for j in w], [cache[(doc.doc_id, j)] for j in w]
    return build


def no_context() -> ContextBuilder:
    return lambda doc, i: ([], [])


def randomized(base: ContextBuilder, seed: int, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> ContextBuilder:
    def build(doc, i):
        s, t = base(doc, i)
        return random_context(seed, doc.doc_id, i, s, t, src_vocab, tgt_vocab)
    return build


def build_examples(
    layout: str,
    docs: Sequence[ParallelDocument],
    builder: ContextBuilder,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
) -> list[Example]:
    out = []
    for doc in docs:
        for i in range(len(doc)):
            s, t = builder(doc, i)
            out.append(make_example(layout, s, t, doc.source(i), doc.target(i), src_vocab, tgt_vocab))
    return out


def score_examples(model: Transformer, examples: Sequence[Example], batch_size: int = 64) -> list[ForcedScore]:
    """Forced scores in input order, evaluated in fixed-size chunks."""
    out: list[ForcedScore] = []
    for start in range(0, len(examples), batch_size):
        out.extend(force_score(model, collate(examples[start : start + batch_size])))
    return out


# -- files ---------------------------------------------------------------------------------


def save_translations(translations: Sequence[Sequence[Translation]], path) -> None:
    lines = [f"{t.doc_id}\t{t.sent_idx}\t{' '.join(t.tokens)}" for doc in translations for t in doc]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_translations(path) -> dict[tuple[str, int], list[str]]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated fields")
        out[(parts[0], int(parts[1]))] = parts[2].split()
    return out
