"""Contribution-matrix rollout over captured forward traces.

Each attention sublayer becomes a row-stochastic matrix: head-summed attention
weighted by the norm of the transformed value vectors, plus the residual
stream's norm on the diagonal. Encoder layers compose by matrix product; the
decoder mixes encoder paths (through cross-attention) with target-prefix paths
(through self-attention and residuals).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag

from .corpus import ContrastiveExample, Vocabulary
from .metrics import fmt
from .model import ForwardTrace, LayerTrace, Transformer, canonical_arch, collate, make_example
from .numerics import NumericError, ShapeError, no_grad

CONTEXT_SEGMENTS = ("src_ctx", "tgt_ctx")
CURRENT_SEGMENTS = ("src", "tgt_prefix")


class TraceError(ValueError):
    pass


class CoverageError(ValueError):
    pass


def _normalize_rows(c: np.ndarray) -> np.ndarray:
    sums = c.sum(axis=-1, keepdims=True)
    if c.size and np.any(sums <= 0):
        bad = int(np.flatnonzero(sums[..., 0] <= 0)[0])
        raise NumericError(f"contribution row {bad} has no mass")
    return c / sums if c.size else c


def layer_contribution(attn: np.ndarray, value_norms: np.ndarray, residual_norms: np.ndarray) -> np.ndarray:
    """Row-stochastic ``(Q, Q)`` matrix of one self-attention sublayer.

    ``attn`` is ``(H, Q, K)`` (or ``(Q, K)`` for one head), ``value_norms``
    ``(H, K)`` and ``residual_norms`` ``(Q,)``.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim == 2:
        attn = attn[None]
        value_norms = np.asarray(value_norms)[None]
    q, k = attn.shape[1:]
    if q != k:
        raise ShapeError(f"self-attention must be square, got {attn.shape}")
    c = np.einsum("hqk,hk->qk", attn, value_norms)
    c[np.diag_indices(q)] += residual_norms
    return _normalize_rows(c)


def cross_contribution(attn: np.ndarray, value_norms: np.ndarray, residual_norms: np.ndarray) -> np.ndarray:
    """``(Q, K + Q)``: mass on the K encoder states, then on each query's own residual."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim == 2:
        attn = attn[None]
        value_norms = np.asarray(value_norms)[None]
    q = attn.shape[1]
    enc = np.einsum("hqk,hk->qk", attn, value_norms)
    return _normalize_rows(np.concatenate([enc, np.diag(np.asarray(residual_norms, dtype=np.float64))], axis=1))


def _matrix(layer) -> np.ndarray:
    if isinstance(layer, LayerTrace):
        return layer_contribution(layer.attn, layer.value_norms, layer.residual_norms)
    return np.asarray(layer, dtype=np.float64)


def encoder_rollout(layers: Sequence, size: int | None = None) -> np.ndarray:
    """Product of per-layer matrices with the first layer rightmost."""
    if not layers:
        if size == 0:
            return np.zeros((0, 0))
        raise TraceError("encoder trace has no layers")
    mats = [_matrix(l) for l in layers]
    n = mats[0].shape[0]
    out = np.eye(n)
    for m in mats:
        if m.shape != (n, n):
            raise TraceError(f"layer matrix {m.shape} does not match ({n}, {n})")
        out = m @ out
    return out


def compose_multi_encoder(c_sc: np.ndarray, c_s: np.ndarray, c_tc: np.ndarray) -> np.ndarray:
    """Block-diagonal encoder matrix in block order ``[sc, s, tc]``."""
    blocks = [np.asarray(b, dtype=np.float64) for b in (c_sc, c_s, c_tc)]
    for name, b in zip(("src_ctx", "src", "tgt_ctx"), blocks):
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise ShapeError(f"{name} block must be square, got {b.shape}")
    return block_diag(*blocks)


def decoder_rollout(self_layers: Sequence, cross_layers: Sequence, c_enc: np.ndarray) -> np.ndarray:
    """``(T, N + T)`` attribution of each decoder position to encoder inputs and target prefix.

    Starting from the prefix embeddings ``[0 | I]``, every layer first mixes
    prefix states by self-attention, then routes cross-attention mass through
    ``c_enc`` while keeping the residual share on the mixed prefix paths.
    """
    if len(self_layers) != len(cross_layers) or not self_layers:
        raise TraceError("decoder trace needs matching, non-empty self and cross layers")
    n = c_enc.shape[0]
    s_mats = [_matrix(l) for l in self_layers]
    x_mats = [
        cross_contribution(l.attn, l.value_norms, l.residual_norms) if isinstance(l, LayerTrace) else np.asarray(l)
        for l in cross_layers
    ]
    t = s_mats[0].shape[0]
    r = np.concatenate([np.zeros((t, n)), np.eye(t)], axis=1)
    enc_part = np.concatenate([c_enc, np.zeros((n, t))], axis=1)
    for s, x in zip(s_mats, x_mats):
        if s.shape != (t, t) or x.shape != (t, n + t):
            raise TraceError(f"decoder layer shapes {s.shape}/{x.shape} do not fit T={t}, N={n}")
        mixed = s @ r
        r = x[:, :n] @ enc_part + x[:, n:] @ mixed
    return r


@dataclass
class AttributionReport:
    """Rows: decoder positions (one per emitted token); columns: labelled inputs."""

    matrix: np.ndarray
    segments: np.ndarray

    def shares(self, row: int) -> dict[str, float]:
        return {s: float(self.matrix[row, self.segments == s].sum()) for s in ("src_ctx", "src", "tgt_ctx", "tgt_prefix")}

    def context_share(self, row: int) -> float:
        sh = self.shares(row)
        return sh["src_ctx"] + sh["tgt_ctx"]


def trace_report(trace: ForwardTrace) -> AttributionReport:
    """Full attribution matrix for a single-example trace (see ``ForwardTrace.select``)."""
    if trace.segments is None:
        raise TraceError("select a single example before computing attribution")
    blocks = list(trace.encoder.items())
    mats = [encoder_rollout(layers, size) for (name, layers), size in zip(blocks, trace.block_sizes)]
    c_enc = compose_multi_encoder(*mats) if len(mats) == 3 else mats[0]
    return AttributionReport(decoder_rollout(trace.decoder_self, trace.decoder_cross, c_enc), trace.segments)


@dataclass
class SupportShare:
    example_id: str
    gender: str
    antecedent_pct: float
    context_pct: float
    current_pct: float


def antecedent_columns(layout: str, example, ctx: ContrastiveExample, n_ctx: int) -> list[int]:
    """Input columns of the source and target antecedent spans."""
    d = ctx.distance
    if layout == "sentence":
        return []
    if d > n_ctx:
        raise CoverageError(
            f"{ctx.example_id}: antecedent span src{ctx.src_span}/tgt{ctx.tgt_span} at distance {d} "
            f"is outside the {n_ctx}-sentence context"
        )
    idx = n_ctx - d
    s0 = example.src_ctx_starts[idx]
    t0 = example.tgt_ctx_starts[idx]
    cols = [s0 + j for j in range(*ctx.src_span)]
    if layout == "concat_2to2":
        n_enc = len(example.src)
        cols += [n_enc + 1 + t0 + j for j in range(*ctx.tgt_span)]
    else:
        n_enc = len(example.src_ctx) + len(example.src)
        cols += [n_enc + t0 + j for j in range(*ctx.tgt_span)]
    return cols


def supporting_context_share(report: AttributionReport, row: int, columns: Sequence[int], example_id: str = "", gender: str = "") -> SupportShare:
    attr = report.matrix[row]
    context = sum(attr[report.segments == s].sum() for s in CONTEXT_SEGMENTS)
    current = sum(attr[report.segments == s].sum() for s in CURRENT_SEGMENTS)
    ante = float(attr[list(columns)].sum()) if len(columns) else 0.0
    return SupportShare(example_id, gender, 100.0 * ante, 100.0 * float(context), 100.0 * float(current))


def attribute_examples(
    model: Transformer,
    examples: Sequence[ContrastiveExample],
    k: int,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    layout: str | None = None,
    batch_size: int = 32,
) -> list[SupportShare]:
    """Attribution shares at the step emitting each example's pronoun (reference forced)."""
    layout = canonical_arch(layout or model.config.arch)
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        built, n_ctxs = [], []
        for ex in chunk:
            n_ctx = 0 if layout == "sentence" else min(k, len(ex.src_context))
            sctx = ex.src_context[len(ex.src_context) - n_ctx :]
            tctx = ex.tgt_context[len(ex.tgt_context) - n_ctx :]
            built.append(make_example(layout, sctx, tctx, ex.source, ex.target, src_vocab, tgt_vocab))
            n_ctxs.append(n_ctx)
        with no_grad():
            _, trace = model.forward(collate(built), capture=True)
        for b, (ex, e, n_ctx) in enumerate(zip(chunk, built, n_ctxs)):
            report = trace_report(trace.select(b))
            row = e.n_tgt_context + ex.pronoun_idx
            cols = antecedent_columns(layout, e, ex, n_ctx)
            out.append(supporting_context_share(report, row, cols, ex.example_id, ex.gender))
    return out


def summarize(shares: Sequence[SupportShare]) -> dict[str, dict[str, float]]:
    """Example-level means under ``all`` plus per-gender means."""
    groups: dict[str, list[SupportShare]] = {"all": list(shares)}
    for s in shares:
        groups.setdefault(f"class_{s.gender}", []).append(s)
    out = {}
    for name in sorted(groups, key=lambda g: (g != "all", g)):
        rows = groups[name]
        if not rows:
            continue
        out[name] = {
            "antecedent_pct": float(np.mean([r.antecedent_pct for r in rows])),
            "context_pct": float(np.mean([r.context_pct for r in rows])),
            "current_pct": float(np.mean([r.current_pct for r in rows])),
            "n": float(len(rows)),
        }
    return out


def save_attribution(shares: Sequence[SupportShare], path) -> None:
    Path(path).write_text(
        "".join(f"{s.example_id}\t{fmt(s.antecedent_pct)}\t{fmt(s.context_pct)}\t{fmt(s.current_pct)}\n" for s in shares),
        encoding="utf-8",
    )


def save_matrices(reports: Sequence[tuple[str, AttributionReport]], path) -> None:
    """Sidecar dump of full matrices for inspection."""
    arrays = {}
    for example_id, rep in reports:
        arrays[f"{example_id}.matrix"] = rep.matrix
        arrays[f"{example_id}.segments"] = rep.segments.astype(str)
    np.savez(path, **arrays)
