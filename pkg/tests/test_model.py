from __future__ import annotations

import numpy as np
import pytest

from conftest import tiny_model
from docctx.corpus import EOS, PAD, SEP
from docctx.model import (
    ArchitectureError,
    CheckpointError,
    LengthError,
    MissingContextError,
    build_batch,
    collate,
    encode_multi,
    load_checkpoint,
    make_example,
    save_checkpoint,
)
from docctx.numerics import no_grad

ARCHS = ("sentence", "concat_2to2", "multi_encoder")


def _batch(tiny, arch, k=3):
    ds, sv, tv = tiny
    doc = ds.train.documents[0]
    return build_batch(arch, doc, 4, k, sv, tv)


@pytest.mark.parametrize("arch", ARCHS)
def test_logit_shape_and_capture_invariance(tiny, models, arch):
    b = _batch(tiny, arch)
    m = models[arch]
    with no_grad():
        plain = m.forward(b)
        logits, trace = m.forward(b, capture=True)
    assert plain.shape == (1, b.tgt_in.shape[1], m.config.tgt_vocab)
    assert np.array_equal(plain.data, logits.data)
    assert len(trace.decoder_self) == m.config.n_layers


@pytest.mark.parametrize("arch", ARCHS)
def test_decoder_is_causal(tiny, models, arch):
    b = _batch(tiny, arch)
    m = models[arch]
    with no_grad():
        base = m.forward(b).data
        changed = b.tgt_in.copy()
        changed[0, -1] = 5 if changed[0, -1] != 5 else 6
        b.tgt_in = changed
        other = m.forward(b).data
    assert np.allclose(base[0, :-1], other[0, :-1], atol=1e-12)


@pytest.mark.parametrize("arch", ARCHS)
def test_padding_does_not_change_outputs(tiny, models, arch):
    ds, sv, tv = tiny
    doc = ds.train.documents[1]
    short = build_batch(arch, doc, 1, 1, sv, tv).examples[0]
    long = build_batch(arch, doc, 5, 5, sv, tv).examples[0]
    m = models[arch]
    with no_grad():
        alone = m.forward(collate([short])).data[0]
        padded = m.forward(collate([short, long])).data[0, : alone.shape[0]]
    assert np.allclose(alone, padded, atol=1e-9)


def test_multi_encoder_blocks_are_independent(tiny, models):
    m = models["multi_encoder"]
    states, bounds = encode_multi(m, [10, 11, 12], [7, 8, EOS], [9, 9])
    states2, _ = encode_multi(m, [13, 11], [7, 8, EOS], [5, 6, 7])
    assert bounds == (0, 3, 6, 8)
    assert np.array_equal(states[3:6], states2[2:5])


def test_encode_multi_requires_multi(models):
    with pytest.raises(ArchitectureError):
        encode_multi(models["concat_2to2"], [], [5, EOS], [])


@pytest.mark.parametrize("k", [0, 1, 3, 5])
def test_concat_separator_counts(tiny, k):
    ds, sv, tv = tiny
    doc = ds.train.documents[0]
    b = build_batch("concat_2to2", doc, 5, k, sv, tv)
    n_sep = int((b.src[0] == SEP).sum())
    assert n_sep == k
    assert int((b.tgt_in[0] == SEP).sum()) == k
    assert b.score_mask[0].sum() == len(doc.target(5)) + 1


def test_sentence_layout_ignores_context(tiny):
    ds, sv, tv = tiny
    doc = ds.train.documents[0]
    a = build_batch("sentence", doc, 3, 0, sv, tv)
    b = build_batch("sentence", doc, 3, 3, sv, tv)
    assert np.array_equal(a.src, b.src) and np.array_equal(a.tgt_in, b.tgt_in)


def test_generated_context_requires_cache(tiny):
    ds, sv, tv = tiny
    doc = ds.train.documents[0]
    with pytest.raises(MissingContextError):
        build_batch("concat_2to2", doc, 2, 2, sv, tv, target_context_source="generated", cache={})
    cache = {(doc.doc_id, j): doc.target(j) for j in range(2)}
    gen = build_batch("concat_2to2", doc, 2, 2, sv, tv, target_context_source="generated", cache=cache)
    gold = build_batch("concat_2to2", doc, 2, 2, sv, tv)
    assert np.array_equal(gen.tgt_in, gold.tgt_in)


def test_context_size_out_of_range(tiny):
    ds, sv, tv = tiny
    with pytest.raises(ValueError):
        build_batch("concat_2to2", ds.train.documents[0], 2, 6, sv, tv)


def test_layout_mismatch_raises(tiny, models):
    with pytest.raises(ArchitectureError):
        models["concat_2to2"].forward(_batch(tiny, "multi_encoder"))
    with pytest.raises(ArchitectureError):
        models["multi_encoder"].forward(_batch(tiny, "concat_2to2"))


def test_unknown_arch():
    with pytest.raises(ArchitectureError):
        make_example("lstm", [], [], ["a"], ["b"], None, None)


def test_sequence_too_long(tiny):
    ds, sv, tv = tiny
    m = tiny_model("concat_2to2", sv, tv, max_positions=16)
    with pytest.raises(LengthError):
        m.forward(_batch(tiny, "concat_2to2", k=5))


def test_padding_rows_are_pad(tiny):
    ds, sv, tv = tiny
    doc = ds.train.documents[0]
    exs = [build_batch("concat_2to2", doc, i, i, sv, tv).examples[0] for i in range(3)]
    b = collate(exs)
    for i, e in enumerate(exs):
        assert (b.src[i, len(e.src) :] == PAD).all()
        assert b.score_mask[i].sum() == len(e.tgt) + 1 - e.n_tgt_context


@pytest.mark.parametrize("arch", ARCHS)
def test_checkpoint_roundtrip_is_bit_exact(tmp_path, tiny, models, arch):
    m = models[arch]
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == m.config
    for name, p in m.params.items():
        assert p.data.tobytes() == back.params[name].data.tobytes()
    save_checkpoint(back, tmp_path / "m2.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
    b = _batch(tiny, arch)
    with no_grad():
        assert np.array_equal(m.forward(b).data, back.forward(b).data)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(b"abc")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_init_is_seeded(tiny):
    _, sv, tv = tiny
    a = tiny_model("sentence", sv, tv, seed=4)
    b = tiny_model("sentence", sv, tv, seed=4)
    c = tiny_model("sentence", sv, tv, seed=5)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    assert not np.array_equal(a.params["out.w"].data, c.params["out.w"].data)
    assert np.all(a.params["src_embed"].data[PAD] == 0)


@pytest.mark.parametrize("arch", ARCHS)
def test_no_context_means_empty_fields(tiny, arch):
    ds, sv, tv = tiny
    doc = ds.train.documents[0]
    b = build_batch(arch, doc, 3, 0, sv, tv)
    e = b.examples[0]
    assert e.n_src_context == e.n_tgt_context == 0 and not e.src_ctx and not e.tgt_ctx
    assert not (b.src == SEP).any()
    start = build_batch(arch, doc, 0, 5, sv, tv).examples[0]
    assert start.n_src_context == 0 and not start.src_ctx


def test_encode_multi_empty_contexts_collapse(models):
    m = models["multi_encoder"]
    states, bounds = encode_multi(m, [], [7, 8, 9, EOS], [])
    assert bounds == (0, 0, 4, 4) and states.shape[0] == 4
    with_ctx, _ = encode_multi(m, [10, 11], [7, 8, 9, EOS], [12])
    assert np.array_equal(states, with_ctx[2:6])


def test_multi_encoder_context_acts_only_through_cross_attention(tiny, models):
    # masking the context blocks out of cross-attention must give the no-context logits
    ds, sv, tv = tiny
    m = models["multi_encoder"]
    doc = ds.train.documents[0]
    with_ctx = build_batch("multi_encoder", doc, 3, 3, sv, tv)
    without = build_batch("multi_encoder", doc, 3, 0, sv, tv)
    with no_grad():
        enc, mask, _ = m.encode(with_ctx)
        n_sc = with_ctx.src_ctx.shape[1]
        n_s = with_ctx.src.shape[1]
        blocked = mask.copy()
        blocked[:, :n_sc] = False
        blocked[:, n_sc + n_s :] = False
        ablated, _, _ = m.decode(enc, blocked, with_ctx.tgt_in)
        plain = m.forward(without)
        full = m.forward(with_ctx)
    assert np.allclose(ablated.data, plain.data, atol=1e-12)
    assert not np.allclose(full.data, plain.data)


@pytest.mark.parametrize("arch", ARCHS)
def test_full_loss_gradient(tiny, arch):
    from gradsuite import model_max_rel_error

    ds, sv, tv = tiny
    doc = ds.train.documents[2]
    m = tiny_model(arch, sv, tv, seed=7, n_layers=1, d_model=8, d_ffn=12)
    batch = collate([build_batch(arch, doc, i, 1, sv, tv).examples[0] for i in (1, 2)])
    worst, n = model_max_rel_error(m, batch, per_param=3)
    assert n > 50 and worst < 1e-4
