from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from docctx.attribution import (
    CoverageError,
    antecedent_columns,
    attribute_examples,
    compose_multi_encoder,
    cross_contribution,
    decoder_rollout,
    encoder_rollout,
    layer_contribution,
    summarize,
    trace_report,
)
from docctx.model import LayerTrace, collate, make_example
from docctx.numerics import NumericError, ShapeError, no_grad


def _softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def random_layer(rng, q, k, heads=2, causal=False):
    logits = rng.normal(size=(heads, q, k))
    if causal:
        logits = logits + np.triu(np.full((q, k), -1e9), 1)
    return LayerTrace(_softmax(logits), rng.uniform(0.1, 3, size=(heads, k)), rng.uniform(0.1, 3, size=q))


def random_decoder(rng, n, t, layers=2):
    self_l = [random_layer(rng, t, t, causal=True) for _ in range(layers)]
    cross_l = [random_layer(rng, t, n) for _ in range(layers)]
    return self_l, cross_l


def test_closed_form_layer():
    c = layer_contribution(np.array([[1.0, 0.0], [0.5, 0.5]]), np.array([1.0, 1.0]), np.array([1.0, 1.0]))
    assert np.allclose(c, [[1.0, 0.0], [0.25, 0.75]])


def test_closed_form_decoder():
    x = cross_contribution(np.array([[1.0]]), np.array([3.0]), np.array([1.0]))
    assert np.allclose(x, [[0.75, 0.25]])
    r = decoder_rollout([np.eye(1)], [x], np.eye(1))
    assert np.allclose(r, [[0.75, 0.25]])


def test_identity_layers_roll_out_to_identity():
    eye = np.eye(4)
    assert np.array_equal(encoder_rollout([eye, eye]), eye)
    r = decoder_rollout([np.eye(3)], [np.concatenate([np.zeros((3, 2)), np.eye(3)], axis=1)], np.eye(2))
    assert np.array_equal(r, np.concatenate([np.zeros((3, 2)), np.eye(3)], axis=1))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 5), st.integers(0, 5), st.integers(1, 6))
def test_random_traces_are_row_stochastic_and_block_sparse(seed, s, sc, tc, t):
    rng = np.random.default_rng(seed)
    blocks = [encoder_rollout([random_layer(rng, n, n) for _ in range(2)], n) if n else np.zeros((0, 0))
              for n in (sc, s, tc)]
    c_enc = compose_multi_encoder(*blocks)
    n = sc + s + tc
    assert np.allclose(c_enc.sum(axis=1), 1.0, atol=1e-6) and (c_enc >= 0).all()
    off = np.ones((n, n), dtype=bool)
    start = 0
    for size in (sc, s, tc):
        off[start : start + size, start : start + size] = False
        start += size
    assert (c_enc[off] == 0.0).all()
    r = decoder_rollout(*random_decoder(rng, n, t), c_enc)
    assert r.shape == (t, n + t)
    assert np.allclose(r.sum(axis=1), 1.0, atol=1e-6) and (r >= 0).all()
    # causal self-attention: no mass on future prefix positions
    assert np.all(np.triu(r[:, n:], 1) == 0.0)


def test_zero_row_raises():
    with pytest.raises(NumericError):
        layer_contribution(np.zeros((1, 2, 2)), np.zeros((1, 2)), np.zeros(2))


def test_non_square_block_raises():
    with pytest.raises(ShapeError):
        compose_multi_encoder(np.eye(2), np.ones((2, 3)), np.eye(1))


@pytest.mark.parametrize("arch", ["sentence", "concat_2to2", "multi_encoder"])
def test_model_trace_reports(tiny, models, arch):
    ds, sv, tv = tiny
    doc = ds.train.documents[0]
    exs = [make_example(arch, [doc.source(j) for j in range(i)], [doc.target(j) for j in range(i)],
                        doc.source(i), doc.target(i), sv, tv) for i in (1, 3)]
    with no_grad():
        _, trace = models[arch].forward(collate(exs), capture=True)
    for b in range(2):
        rep = trace_report(trace.select(b))
        assert np.allclose(rep.matrix.sum(axis=1), 1.0, atol=1e-6) and (rep.matrix >= 0).all()
        if arch == "sentence":
            assert all(rep.context_share(row) == 0.0 for row in range(rep.matrix.shape[0]))
        if arch == "multi_encoder":
            n_enc = len(rep.segments) - rep.matrix.shape[0]
            assert rep.matrix.shape[1] == n_enc + rep.matrix.shape[0]


def test_attribute_examples(tiny, models):
    ds, sv, tv = tiny
    exs = ds.contrastive[:6]
    for arch, m in models.items():
        shares = attribute_examples(m, exs, 5, sv, tv)
        assert len(shares) == len(exs)
        for s in shares:
            assert s.context_pct + s.current_pct == pytest.approx(100.0, abs=1e-6)
            assert 0.0 <= s.antecedent_pct <= s.context_pct + 1e-9
            if arch == "sentence":
                assert s.context_pct == 0.0 and s.antecedent_pct == 0.0
        summary = summarize(shares)
        assert summary["all"]["n"] == len(exs)


def test_antecedent_outside_window(tiny):
    ds, sv, tv = tiny
    ex = next(e for e in ds.contrastive if e.distance >= 2)
    built = make_example("concat_2to2", ex.src_context[-1:], ex.tgt_context[-1:], ex.source, ex.target, sv, tv)
    with pytest.raises(CoverageError):
        antecedent_columns("concat_2to2", built, ex, 1)


def test_antecedent_columns_point_at_antecedent_tokens(tiny):
    ds, sv, tv = tiny
    ex = ds.contrastive[0]
    for layout in ("concat_2to2", "multi_encoder"):
        built = make_example(layout, ex.src_context, ex.tgt_context, ex.source, ex.target, sv, tv)
        cols = antecedent_columns(layout, built, ex, len(ex.src_context))
        src_ante = ex.src_context[len(ex.src_context) - ex.distance][slice(*ex.src_span)]
        tgt_ante = ex.tgt_context[len(ex.tgt_context) - ex.distance][slice(*ex.tgt_span)]
        if layout == "concat_2to2":
            enc = built.src
            dec = [1] + built.tgt
            n_enc = len(enc)
            picked = [enc[c] for c in cols if c < n_enc] + [dec[c - n_enc] for c in cols if c >= n_enc]
        else:
            enc = built.src_ctx + built.src
            dec = built.tgt_ctx
            n_enc = len(enc)
            picked = [enc[c] for c in cols if c < n_enc] + [dec[c - n_enc] for c in cols if c >= n_enc]
        assert picked == sv.encode(src_ante) + tv.encode(tgt_ante)


def test_uniform_attention_equal_norms():
    q = 4
    c = layer_contribution(np.full((q, q), 1 / q), np.ones(q), np.ones(q))
    expected = np.full((q, q), 0.25 / 2) + np.eye(q) * 0.5
    assert np.allclose(c, expected) and np.allclose(c.sum(axis=1), 1, atol=1e-12)


def test_identity_attention_is_identity(tiny):
    rng = np.random.default_rng(0)
    c = layer_contribution(np.eye(5), rng.uniform(0.1, 4, 5), rng.uniform(0.1, 4, 5))
    assert np.allclose(c, np.eye(5))
    r = layer_contribution(_softmax(rng.normal(size=(4, 4))), rng.uniform(size=4), rng.uniform(size=4))
    assert np.allclose(r.sum(axis=1), 1, atol=1e-12)


def test_rollout_layer_identities():
    rng = np.random.default_rng(1)
    a = layer_contribution(*_parts(random_layer(rng, 4, 4)))
    assert np.array_equal(encoder_rollout([a]), a)
    assert np.allclose(encoder_rollout([a, np.eye(4)]), a)


def _parts(layer):
    return layer.attn, layer.value_norms, layer.residual_norms


def test_empty_contexts_compose_to_current_block():
    rng = np.random.default_rng(2)
    c_s = encoder_rollout([random_layer(rng, 3, 3)])
    assert np.array_equal(compose_multi_encoder(np.zeros((0, 0)), c_s, np.zeros((0, 0))), c_s)


def test_decoder_degenerate_path_puts_mass_on_one_input():
    p = 2
    attn = np.zeros((1, 4))
    attn[0, p] = 1.0
    x = cross_contribution(attn, np.ones(4), np.zeros(1))
    r = decoder_rollout([np.eye(1)], [x], np.eye(4))
    expected = np.zeros(5)
    expected[p] = 1.0
    assert np.array_equal(r[0], expected)


def test_first_step_supported_on_inputs_and_bos():
    rng = np.random.default_rng(3)
    self_l, cross_l = random_decoder(rng, 5, 3)
    r = decoder_rollout(self_l, cross_l, np.eye(5))
    assert np.all(r[0, 6:] == 0.0) and r[0, 5] > 0


def test_two_token_closed_form():
    # the pronoun position attends one-hot to the antecedent; residual mass stays on itself
    res_mass = 0.3
    c = layer_contribution(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([1 - res_mass, 1.0]),
                           np.array([1.0, res_mass]))
    ante_pct = 100 * c[1, 0]
    assert ante_pct == pytest.approx(100 * (1 - res_mass))


def test_trace_report_is_deterministic(tiny, models):
    ds, sv, tv = tiny
    doc = ds.train.documents[0]
    ex = make_example("concat_2to2", [doc.source(0)], [doc.target(0)], doc.source(1), doc.target(1), sv, tv)
    reps = []
    for _ in range(2):
        with no_grad():
            _, trace = models["concat_2to2"].forward(collate([ex]), capture=True)
        reps.append(trace_report(trace.select(0)).matrix)
    assert reps[0].tobytes() == reps[1].tobytes()


@pytest.mark.parametrize("arch", ["concat_2to2", "multi_encoder"])
def test_report_ignores_padding(tiny, models, arch):
    ds, sv, tv = tiny
    doc = ds.train.documents[1]
    mk = lambda i: make_example(arch, [doc.source(j) for j in range(i)], [doc.target(j) for j in range(i)],
                                doc.source(i), doc.target(i), sv, tv)
    short, long = mk(1), mk(5)
    with no_grad():
        _, alone = models[arch].forward(collate([short]), capture=True)
        _, padded = models[arch].forward(collate([short, long]), capture=True)
    a, b = trace_report(alone.select(0)), trace_report(padded.select(0))
    assert np.allclose(a.matrix, b.matrix, atol=1e-9)
    assert list(a.segments) == list(b.segments)
