from __future__ import annotations

import pytest

from docctx.corpus import DatasetConfig, GenConfig, ParallelCorpus, build_vocab, make_dataset
from docctx.model import ModelConfig, Transformer

TINY_GEN = GenConfig(n_docs=12, sents_per_doc=6)
TINY_DATA = DatasetConfig(valid_docs=2, test_docs=2, aux_docs=4, challenge_docs=8)


@pytest.fixture(scope="session")
def tiny():
    ds = make_dataset(TINY_GEN, TINY_DATA, seed=3)
    both = ParallelCorpus(ds.full.documents + ds.challenge.documents, ds.lexicon)
    return ds, build_vocab(both, "source"), build_vocab(both, "target")


def tiny_model(arch: str, src_vocab, tgt_vocab, seed: int = 0, **kw) -> Transformer:
    cfg = dict(n_layers=2, d_model=16, n_heads=2, d_ffn=24, dropout=0.0, max_positions=128)
    cfg.update(kw)
    return Transformer(ModelConfig(arch=arch, src_vocab=len(src_vocab), tgt_vocab=len(tgt_vocab), **cfg), seed=seed)


@pytest.fixture(scope="session")
def models(tiny):
    _, sv, tv = tiny
    return {arch: tiny_model(arch, sv, tv, seed=1) for arch in ("sentence", "concat_2to2", "multi_encoder")}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
