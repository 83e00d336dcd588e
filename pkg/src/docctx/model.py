"""Encoder-decoder transformer in three document-level layouts.

* ``sentence``: plain sentence-to-sentence model.
* ``concat_2to2``: context sentences joined to the current one with ``<sep>``
  on both the source and the target side.
* ``multi_encoder``: separate encoders for source context, current source and
  target context; their outputs are concatenated before cross-attention.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import BOS, EOS, PAD, SEP, ParallelDocument, Vocabulary
from .numerics import Tensor

ARCHS = ("sentence", "concat_2to2", "multi_encoder")
ARCH_ALIASES = {
    "sentence": "sentence",
    "sent": "sentence",
    "concat": "concat_2to2",
    "concat_2to2": "concat_2to2",
    "multi": "multi_encoder",
    "multi_encoder": "multi_encoder",
}
SEGMENTS = ("src_ctx", "src", "tgt_ctx", "tgt_prefix")
NEG_INF = -1e9
CHECKPOINT_MAGIC = "DOCCTX-CHECKPOINT"
CHECKPOINT_VERSION = 1


class ArchitectureError(ValueError):
    """Batch layout does not match the model architecture."""


class LengthError(ValueError):
    """Sequence longer than the model's positional table."""


class MissingContextError(KeyError):
    """Generated target context requested but absent from the cache."""


class CheckpointError(ValueError):
    pass


def canonical_arch(name: str) -> str:
    try:
        return ARCH_ALIASES[name]
    except KeyError:
        raise ArchitectureError(f"unknown architecture {name!r}") from None


@dataclass
class ModelConfig:
    arch: str = "sentence"
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    dropout: float = 0.1
    src_vocab: int = 0
    tgt_vocab: int = 0
    max_positions: int = 256
    max_context: int = 5
    share_context_embeddings: bool = True

    def __post_init__(self):
        self.arch = canonical_arch(self.arch)

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_context < 0:
            raise ValueError("max_context must be >= 0")
        if self.n_layers < 1 or self.src_vocab < 5 or self.tgt_vocab < 5:
            raise ValueError("n_layers >= 1 and vocabularies including reserved symbols required")

    def to_lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in asdict(self).items()]

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in lines:
            key, _, raw = line.partition("=")
            if key not in types:
                raise CheckpointError(f"unknown config key {key!r}")
            kind = types[key]
            if kind in ("int", int):
                values[key] = int(raw)
            elif kind in ("float", float):
                values[key] = float(raw)
            elif kind in ("bool", bool):
                values[key] = raw == "True"
            else:
                values[key] = raw
        return cls(**values)


# -----------------------------------------------------------------------------
# Examples and batches
# -----------------------------------------------------------------------------


@dataclass
class Example:
    """One unpadded instance.

    ``src`` is the full encoder input for single-encoder layouts and the current
    sentence (plus EOS) for the multi-encoder one. ``tgt`` excludes BOS/EOS; its
    first ``n_tgt_context`` tokens are target context (including separators).
    ``*_ctx_starts`` hold the offset of each context sentence, oldest first,
    inside the sequence that carries it.
    """

    layout: str
    src: list[int]
    tgt: list[int]
    n_src_context: int = 0
    n_tgt_context: int = 0
    src_ctx: list[int] | None = None
    tgt_ctx: list[int] | None = None
    src_ctx_starts: tuple[int, ...] = ()
    tgt_ctx_starts: tuple[int, ...] = ()

    def context_size(self) -> int:
        return len(self.src_ctx_starts)


def _join(sentences: Sequence[Sequence[int]]) -> tuple[list[int], tuple[int, ...]]:
    out: list[int] = []
    starts = []
    for j, s in enumerate(sentences):
        if j:
            out.append(SEP)
        starts.append(len(out))
        out.extend(s)
    return out, tuple(starts)


def make_example(
    layout: str,
    src_context: Sequence[Sequence[str]],
    tgt_context: Sequence[Sequence[str]],
    source: Sequence[str],
    target: Sequence[str],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
) -> Example:
    layout = canonical_arch(layout)
    if len(src_context) != len(tgt_context):
        raise ValueError("source and target context must have the same number of sentences")
    src_ids = src_vocab.encode(source)
    tgt_ids = tgt_vocab.encode(target)
    sctx = [src_vocab.encode(s) for s in src_context]
    tctx = [tgt_vocab.encode(s) for s in tgt_context]
    if layout == "sentence" or not sctx:
        if layout == "multi_encoder":
            return Example(layout, src_ids + [EOS], tgt_ids, src_ctx=[], tgt_ctx=[])
        return Example(layout, src_ids + [EOS], tgt_ids)
    s_joined, s_starts = _join(sctx)
    t_joined, t_starts = _join(tctx)
    if layout == "concat_2to2":
        src = s_joined + [SEP] + src_ids + [EOS]
        tgt = t_joined + [SEP] + tgt_ids
        return Example(
            layout, src, tgt,
            n_src_context=len(s_joined) + 1,
            n_tgt_context=len(t_joined) + 1,
            src_ctx_starts=s_starts,
            tgt_ctx_starts=t_starts,
        )
    return Example(
        layout, src_ids + [EOS], tgt_ids,
        src_ctx=s_joined, tgt_ctx=t_joined,
        src_ctx_starts=s_starts, tgt_ctx_starts=t_starts,
    )


@dataclass
class SequenceBatch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    score_mask: np.ndarray
    examples: list[Example]
    src_ctx: np.ndarray | None = None
    tgt_ctx: np.ndarray | None = None

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def layout(self) -> str:
        return self.examples[0].layout

    @property
    def n_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())


def _pad(rows: Sequence[Sequence[int]], width: int | None = None) -> np.ndarray:
    width = max((len(r) for r in rows), default=0) if width is None else width
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def collate(examples: Sequence[Example]) -> SequenceBatch:
    if not examples:
        raise ValueError("cannot collate an empty list of examples")
    layouts = {e.layout for e in examples}
    if len(layouts) != 1:
        raise ArchitectureError(f"mixed layouts in one batch: {sorted(layouts)}")
    tgt_in = _pad([[BOS] + e.tgt for e in examples])
    tgt_out = _pad([e.tgt + [EOS] for e in examples])
    score = np.zeros(tgt_out.shape)
    for i, e in enumerate(examples):
        score[i, e.n_tgt_context : len(e.tgt) + 1] = 1.0
    multi = examples[0].layout == "multi_encoder"
    return SequenceBatch(
        src=_pad([e.src for e in examples]),
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        score_mask=score,
        examples=list(examples),
        src_ctx=_pad([e.src_ctx for e in examples]) if multi else None,
        tgt_ctx=_pad([e.tgt_ctx for e in examples]) if multi else None,
    )


def context_window(doc: ParallelDocument, i: int, k: int) -> range:
    return range(max(0, i - k), i)


def build_batch(
    arch: str,
    doc: ParallelDocument,
    i: int,
    k: int,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    target_context_source: str = "gold",
    cache: dict | None = None,
    max_context: int = 5,
) -> SequenceBatch:
    """Batch of one for sentence ``i`` of ``doc`` with up to ``k`` context sentences.

    In ``generated`` mode target context comes from ``cache[(doc_id, j)]``.
    """
    if not 0 <= k <= max_context:
        raise ValueError(f"context size {k} outside [0, {max_context}]")
    if not 0 <= i < len(doc):
        raise IndexError(f"sentence {i} outside document of length {len(doc)}")
    window = context_window(doc, i, k) if canonical_arch(arch) != "sentence" else range(0)
    src_ctx = [doc.source(j) for j in window]
    if target_context_source == "gold":
        tgt_ctx = [doc.target(j) for j in window]
    elif target_context_source == "generated":
        tgt_ctx = []
        for j in window:
            key = (doc.doc_id, j)
            if cache is None or key not in cache:
                raise MissingContextError(f"no generated translation cached for {key}")
            tgt_ctx.append(cache[key])
    else:
        raise ValueError(f"unknown target context source {target_context_source!r}")
    ex = make_example(arch, src_ctx, tgt_ctx, doc.source(i), doc.target(i), src_vocab, tgt_vocab)
    return collate([ex])


# -----------------------------------------------------------------------------
# Traces
# -----------------------------------------------------------------------------


@dataclass
class LayerTrace:
    """Attention weights ``(B, H, Q, K)``, per-head value-transform norms
    ``(B, H, K)`` and residual-stream norms ``(B, Q)`` of one sublayer."""

    attn: np.ndarray
    value_norms: np.ndarray
    residual_norms: np.ndarray

    def select(self, b: int, q_idx: np.ndarray, k_idx: np.ndarray) -> "LayerTrace":
        return LayerTrace(
            self.attn[b][:, q_idx][:, :, k_idx],
            self.value_norms[b][:, k_idx],
            self.residual_norms[b][q_idx],
        )


@dataclass
class ForwardTrace:
    """Everything attribution needs from one teacher-forced forward pass.

    ``encoder`` maps block name to per-layer traces; blocks appear in the order
    their outputs are concatenated. ``segments`` labels every input column
    (encoder inputs then target prefix) once a single example is selected.
    """

    encoder: dict[str, list[LayerTrace]]
    decoder_self: list[LayerTrace]
    decoder_cross: list[LayerTrace]
    batch: SequenceBatch
    segments: np.ndarray | None = None
    block_sizes: tuple[int, ...] = ()

    def select(self, b: int) -> "ForwardTrace":
        """Trace of example ``b`` with all padding removed."""
        bt = self.batch
        ex = bt.examples[b]
        blocks = {"src": bt.src}
        if bt.src_ctx is not None:
            blocks = {"src_ctx": bt.src_ctx, "src": bt.src, "tgt_ctx": bt.tgt_ctx}
        enc, key_cols, sizes, labels = {}, [], [], []
        offset = 0
        for name, ids in blocks.items():
            live = np.flatnonzero(ids[b] != PAD)
            enc[name] = [lt.select(b, live, live) for lt in self.encoder[name]]
            key_cols.append(live + offset)
            offset += ids.shape[1]
            sizes.append(len(live))
            if name == "src":
                lab = np.array(["src"] * len(live), dtype=object)
                lab[: ex.n_src_context] = "src_ctx"
            else:
                lab = np.array([name] * len(live), dtype=object)
            labels.append(lab)
        key_cols = np.concatenate(key_cols)
        t_live = np.arange(len(ex.tgt) + 1)
        prefix = np.array(["tgt_prefix"] * len(t_live), dtype=object)
        prefix[1 : 1 + ex.n_tgt_context] = "tgt_ctx"
        labels.append(prefix)
        one = SequenceBatch(
            src=bt.src[b : b + 1], tgt_in=bt.tgt_in[b : b + 1], tgt_out=bt.tgt_out[b : b + 1],
            score_mask=bt.score_mask[b : b + 1], examples=[ex],
            src_ctx=None if bt.src_ctx is None else bt.src_ctx[b : b + 1],
            tgt_ctx=None if bt.tgt_ctx is None else bt.tgt_ctx[b : b + 1],
        )
        return ForwardTrace(
            encoder=enc,
            decoder_self=[lt.select(b, t_live, t_live) for lt in self.decoder_self],
            decoder_cross=[lt.select(b, t_live, key_cols) for lt in self.decoder_cross],
            batch=one,
            segments=np.concatenate(labels),
            block_sizes=tuple(sizes),
        )


# -----------------------------------------------------------------------------
# Model
# -----------------------------------------------------------------------------


def sinusoidal_table(n_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_model)
    table = np.zeros((n_positions, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def _xavier(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Transformer:
    """Post-norm encoder-decoder; parameters live in a flat name -> Tensor dict."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        config.validate()
        self.config = config
        self.positions = sinusoidal_table(config.max_positions, config.d_model)
        shapes = self._param_shapes()
        if params is None:
            params = {name: self._init(name, shape, seed) for name, shape in shapes.items()}
        missing = set(shapes) - set(params)
        if missing:
            raise CheckpointError(f"missing parameters: {sorted(missing)[:5]}")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr.copy(), requires_grad=True)

    # -- parameters ---------------------------------------------------------
    @property
    def encoder_names(self) -> tuple[str, ...]:
        if self.config.arch == "multi_encoder":
            return ("enc_sc", "enc", "enc_tc")
        return ("enc",)

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        d, f = c.d_model, c.d_ffn
        shapes: dict[str, tuple[int, ...]] = {
            "src_embed": (c.src_vocab, d),
            "tgt_embed": (c.tgt_vocab, d),
        }
        if c.arch == "multi_encoder" and not c.share_context_embeddings:
            shapes["src_ctx_embed"] = (c.src_vocab, d)
            shapes["tgt_ctx_embed"] = (c.tgt_vocab, d)

        def attn(prefix):
            for m in ("q", "k", "v", "o"):
                shapes[f"{prefix}.w{m}"] = (d, d)
                shapes[f"{prefix}.b{m}"] = (d,)

        def norm(prefix):
            shapes[f"{prefix}.g"] = (d,)
            shapes[f"{prefix}.b"] = (d,)

        def ffn(prefix):
            shapes[f"{prefix}.w1"] = (d, f)
            shapes[f"{prefix}.b1"] = (f,)
            shapes[f"{prefix}.w2"] = (f, d)
            shapes[f"{prefix}.b2"] = (d,)

        for enc in self.encoder_names:
            for l in range(c.n_layers):
                attn(f"{enc}.{l}.self")
                norm(f"{enc}.{l}.ln1")
                ffn(f"{enc}.{l}.ffn")
                norm(f"{enc}.{l}.ln2")
        for l in range(c.n_layers):
            attn(f"dec.{l}.self")
            norm(f"dec.{l}.ln1")
            attn(f"dec.{l}.cross")
            norm(f"dec.{l}.ln2")
            ffn(f"dec.{l}.ffn")
            norm(f"dec.{l}.ln3")
        shapes["out.w"] = (d, c.tgt_vocab)
        shapes["out.b"] = (c.tgt_vocab,)
        return shapes

    def _init(self, name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
        rng = nx.make_rng(seed, "init", name)
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("embed"):
            w = rng.normal(0.0, self.config.d_model ** -0.5, size=shape)
            w[PAD] = 0.0
            return w
        if len(shape) == 2:
            return _xavier(rng, *shape)
        if leaf == "g":
            return np.ones(shape)
        return np.zeros(shape)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- building blocks ----------------------------------------------------
    def _embed(self, table: str, ids: np.ndarray, rng) -> Tensor:
        d = self.config.d_model
        if ids.shape[1] > self.config.max_positions:
            raise LengthError(f"sequence of length {ids.shape[1]} exceeds max_positions={self.config.max_positions}")
        x = nx.embedding(self.params[table], ids) * math.sqrt(d)
        x = x + self.positions[: ids.shape[1]][None]
        return nx.dropout(x, self.config.dropout, rng)

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _ffn(self, prefix: str, x: Tensor, rng) -> Tensor:
        p = self.params
        h = nx.relu(nx.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        h = nx.dropout(h, self.config.dropout, rng)
        return nx.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray, rng, capture: bool):
        p = self.params
        c = self.config
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        H, dh = c.n_heads, d // c.n_heads
        q = nx.linear(xq, p[f"{prefix}.wq"], p[f"{prefix}.bq"]).reshape(B, Tq, H, dh).transpose(0, 2, 1, 3)
        k = nx.linear(xkv, p[f"{prefix}.wk"], p[f"{prefix}.bk"]).reshape(B, Tk, H, dh).transpose(0, 2, 3, 1)
        v = nx.linear(xkv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]).reshape(B, Tk, H, dh).transpose(0, 2, 1, 3)
        scores = nx.matmul(q, k) * (1.0 / math.sqrt(dh)) + mask
        weights = nx.softmax(scores, axis=-1)
        ctx = nx.matmul(nx.dropout(weights, c.dropout, rng), v)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Tq, d)
        out = nx.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
        trace = None
        if capture:
            wo = p[f"{prefix}.wo"].data.reshape(H, dh, d)
            transformed = np.einsum("bhjd,hde->bhje", v.data, wo)
            trace = LayerTrace(
                attn=weights.data.copy(),
                value_norms=np.linalg.norm(transformed, axis=-1),
                residual_norms=np.linalg.norm(xq.data, axis=-1),
            )
        return out, trace

    def _encoder(self, name: str, embed: str, ids: np.ndarray, rng, capture: bool):
        B, S = ids.shape
        traces: list[LayerTrace] = []
        if S == 0:
            return Tensor(np.zeros((B, 0, self.config.d_model))), traces
        mask = np.where(ids == PAD, NEG_INF, 0.0)[:, None, None, :]
        x = self._embed(embed, ids, rng)
        for l in range(self.config.n_layers):
            pre = f"{name}.{l}"
            a, tr = self._attention(f"{pre}.self", x, x, mask, rng, capture)
            x = self._ln(f"{pre}.ln1", x + nx.dropout(a, self.config.dropout, rng))
            x = self._ln(f"{pre}.ln2", x + nx.dropout(self._ffn(f"{pre}.ffn", x, rng), self.config.dropout, rng))
            if capture:
                traces.append(tr)
        return x, traces

    # -- public API ---------------------------------------------------------
    def check_layout(self, batch: SequenceBatch) -> None:
        multi = self.config.arch == "multi_encoder"
        has_ctx = batch.src_ctx is not None or batch.tgt_ctx is not None
        if multi and (batch.src_ctx is None or batch.tgt_ctx is None):
            raise ArchitectureError("multi_encoder needs source-context and target-context matrices")
        if not multi and has_ctx:
            raise ArchitectureError(f"{self.config.arch} does not accept separate context matrices")
        for name in ("src", "tgt_in", "src_ctx", "tgt_ctx"):
            arr = getattr(batch, name)
            if arr is not None and arr.shape[1] > self.config.max_positions:
                raise LengthError(
                    f"{name} length {arr.shape[1]} exceeds max_positions={self.config.max_positions}"
                )

    def encode(self, batch: SequenceBatch, rng=None, capture: bool = False):
        """Encoder states ``(B, N, d)``, key mask ``(B, N)`` and per-block traces."""
        self.check_layout(batch)
        c = self.config
        if c.arch != "multi_encoder":
            e, tr = self._encoder("enc", "src_embed", batch.src, rng, capture)
            return e, batch.src != PAD, {"src": tr}
        src_ctx_table = "src_embed" if c.share_context_embeddings else "src_ctx_embed"
        tgt_ctx_table = "tgt_embed" if c.share_context_embeddings else "tgt_ctx_embed"
        e_sc, t_sc = self._encoder("enc_sc", src_ctx_table, batch.src_ctx, rng, capture)
        e_s, t_s = self._encoder("enc", "src_embed", batch.src, rng, capture)
        e_tc, t_tc = self._encoder("enc_tc", tgt_ctx_table, batch.tgt_ctx, rng, capture)
        states = nx.concat([e_sc, e_s, e_tc], axis=1)
        mask = np.concatenate([batch.src_ctx != PAD, batch.src != PAD, batch.tgt_ctx != PAD], axis=1)
        return states, mask, {"src_ctx": t_sc, "src": t_s, "tgt_ctx": t_tc}

    def decode(self, enc: Tensor, enc_mask: np.ndarray, tgt_in: np.ndarray, rng=None, capture: bool = False):
        c = self.config
        T = tgt_in.shape[1]
        causal = np.triu(np.full((T, T), NEG_INF), k=1)
        self_mask = causal[None, None] + np.where(tgt_in == PAD, NEG_INF, 0.0)[:, None, None, :]
        cross_mask = np.where(enc_mask, 0.0, NEG_INF)[:, None, None, :]
        x = self._embed("tgt_embed", tgt_in, rng)
        self_tr, cross_tr = [], []
        for l in range(c.n_layers):
            pre = f"dec.{l}"
            a, t1 = self._attention(f"{pre}.self", x, x, self_mask, rng, capture)
            x = self._ln(f"{pre}.ln1", x + nx.dropout(a, c.dropout, rng))
            a, t2 = self._attention(f"{pre}.cross", x, enc, cross_mask, rng, capture)
            x = self._ln(f"{pre}.ln2", x + nx.dropout(a, c.dropout, rng))
            x = self._ln(f"{pre}.ln3", x + nx.dropout(self._ffn(f"{pre}.ffn", x, rng), c.dropout, rng))
            if capture:
                self_tr.append(t1)
                cross_tr.append(t2)
        logits = nx.linear(x, self.params["out.w"], self.params["out.b"])
        return logits, self_tr, cross_tr

    def forward(self, batch: SequenceBatch, capture: bool = False, rng=None):
        """Teacher-forced logits ``(B, T, V)``; ``(logits, trace)`` when capturing.

        ``rng`` enables dropout (training); ``None`` is deterministic evaluation.
        """
        enc, mask, enc_tr = self.encode(batch, rng, capture)
        logits, self_tr, cross_tr = self.decode(enc, mask, batch.tgt_in, rng, capture)
        if not capture:
            return logits
        return logits, ForwardTrace(enc_tr, self_tr, cross_tr, batch)

    __call__ = forward


def forward(model: Transformer, batch: SequenceBatch, capture: bool = False):
    return model.forward(batch, capture=capture)


def encode_multi(model: Transformer, src_ctx: Sequence[int], src: Sequence[int], tgt_ctx: Sequence[int]):
    """Run the three encoders independently; return ``(states (N, d), block boundaries)``.

    Boundaries are the cumulative block lengths ``(0, |sc|, |sc|+|s|, N)``.
    """
    if model.config.arch != "multi_encoder":
        raise ArchitectureError("encode_multi requires a multi_encoder model")
    ex = Example("multi_encoder", list(src), [], src_ctx=list(src_ctx), tgt_ctx=list(tgt_ctx))
    with nx.no_grad():
        states, _, _ = model.encode(collate([ex]))
    a, b, c = len(src_ctx), len(src), len(tgt_ctx)
    return states.data[0], (0, a, a + b, a + b + c)


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------


def save_checkpoint(model: Transformer, path) -> None:
    """Text header (version, config, parameter manifest) + raw little-endian float64 data."""
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", "[config]"]
    lines += model.config.to_lines()
    lines.append("[params]")
    offset = 0
    blobs = []
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t{shape}\t{offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("[data]")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Transformer:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = raw[8 : 8 + hlen].decode("utf-8").split("\n")
    data = raw[8 + hlen :]
    magic = header[0].split()
    if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(magic[1]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {magic[1]}")
    section = None
    cfg_lines, manifest = [], []
    for line in header[1:]:
        if line in ("[config]", "[params]", "[data]"):
            section = line
            continue
        if not line:
            continue
        if section == "[config]":
            cfg_lines.append(line)
        elif section == "[params]":
            manifest.append(line.split("\t"))
    config = ModelConfig.from_lines(cfg_lines)
    params = {}
    for name, shape, offset in manifest:
        dims = tuple(int(s) for s in shape.split(",") if s)
        n = int(np.prod(dims)) if dims else 1
        start = int(offset)
        if start + 8 * n > len(data):
            raise CheckpointError(f"{path}: parameter {name} extends past end of file")
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=start).reshape(dims).astype(np.float64)
    return Transformer(config, params)


def document_examples(
    arch: str,
    doc: ParallelDocument,
    k: int | Sequence[int],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
) -> list[Example]:
    """Gold-context examples for every sentence of ``doc``.

    ``k`` is either one context size for all sentences or one per sentence.
    """
    ks = [k] * len(doc) if isinstance(k, int) else list(k)
    out = []
    for i, ki in enumerate(ks):
        window = context_window(doc, i, ki) if canonical_arch(arch) != "sentence" else range(0)
        out.append(make_example(
            arch,
            [doc.source(j) for j in window],
            [doc.target(j) for j in window],
            doc.source(i), doc.target(i), src_vocab, tgt_vocab,
        ))
    return out


def example_length(ex: Example) -> int:
    n = max(len(ex.src), len(ex.tgt) + 1)
    if ex.src_ctx is not None:
        n = max(n, len(ex.src_ctx), len(ex.tgt_ctx))
    return n


def token_batches(examples: Sequence[Example], max_tokens: int, order=None) -> list[list[Example]]:
    """Group examples into batches whose padded size stays under ``max_tokens``.

    Examples are sorted by length (stable, ties broken by ``order`` when given)
    so that padding stays small.
    """
    idx = list(range(len(examples))) if order is None else list(order)
    idx.sort(key=lambda i: example_length(examples[i]))
    batches, cur, width = [], [], 0
    for i in idx:
        n = example_length(examples[i])
        if cur and max(width, n) * (len(cur) + 1) > max_tokens:
            batches.append(cur)
            cur, width = [], 0
        cur.append(examples[i])
        width = max(width, n)
    if cur:
        batches.append(cur)
    return batches
