"""Synthetic discourse corpus, vocabularies, contrastive sets and file formats.

The toy source language has a genderless pronoun ``it``; the toy target
language has gendered pronouns ``er``/``sie``/``es`` picked purely from the
gender of the antecedent noun. Second-person formality, entity renderings and
verb-form variants follow one document-level style, which the source marks
with a particle on the first sentence and only sporadically afterwards.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import make_rng

log = logging.getLogger(__name__)

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<s>", "</s>", "<sep>", "<unk>")
SEP_TOKEN = RESERVED[SEP]

GENDERS = ("m", "f", "n")
ARTICLE = {"m": "der", "f": "die", "n": "das"}
PRONOUN = {"m": "er", "f": "sie", "n": "es"}
SECOND_PERSON = {"informal": "du", "formal": "Sie"}
VERB_SUFFIX = {"A": "et", "B": "ax"}
KINDS = ("pronoun", "formality", "cohesion", "verb_form")
SIDES = ("source", "target")


class CorpusError(ValueError):
    """Invalid generator configuration or corpus content."""


class ParseError(CorpusError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


class AnnotationError(CorpusError):
    def __init__(self, record: str, message: str):
        super().__init__(f"annotation {record}: {message}")
        self.record = record


# -----------------------------------------------------------------------------
# Data types
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Annotation:
    """One tagged token. Antecedent span ``[ante_start, ante_end)`` is on the same side."""

    sent_idx: int
    tok_idx: int
    kind: str
    side: str
    ante_sent_idx: int | None = None
    ante_start: int | None = None
    ante_end: int | None = None

    @property
    def distance(self) -> int | None:
        if self.ante_sent_idx is None:
            return None
        return self.sent_idx - self.ante_sent_idx


@dataclass
class ParallelDocument:
    doc_id: str
    pairs: list[tuple[list[str], list[str]]]
    annotations: list[Annotation] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def source(self, i: int) -> list[str]:
        return self.pairs[i][0]

    def target(self, i: int) -> list[str]:
        return self.pairs[i][1]

    def annotations_for(self, sent_idx: int, kind: str | None = None, side: str | None = None):
        return [
            a
            for a in self.annotations
            if a.sent_idx == sent_idx and (kind is None or a.kind == kind) and (side is None or a.side == side)
        ]


@dataclass
class Lexicon:
    """Closed word lists of the synthetic language pair.

    ``nouns`` maps a source noun to ``(target forms, gender)``; a noun with two
    forms is a cohesion entity whose rendering is fixed per document.
    ``verbs`` maps a source verb to ``(target stem, cue gender or None)``.
    ``markers`` holds one ``(source, target)`` particle per document style.
    """

    nouns: dict[str, tuple[tuple[str, ...], str]]
    verbs: dict[str, tuple[str, str | None]]
    adjectives: dict[str, str]
    adverbs: dict[str, str]
    verb_variants: bool = True
    markers: tuple[tuple[str, str], ...] = ()

    def gender_of_target(self, form: str) -> str | None:
        for forms, gender in self.nouns.values():
            if form in forms:
                return gender
        return None

    def target_noun_entities(self) -> dict[str, str]:
        return {form: src for src, (forms, _) in self.nouns.items() for form in forms}

    def verb_forms(self, stem: str) -> tuple[str, ...]:
        if self.verb_variants:
            return tuple(stem + s for s in VERB_SUFFIX.values())
        return (stem + VERB_SUFFIX["A"],)

    def target_verb_forms(self) -> set[str]:
        return {f for stem, _ in self.verbs.values() for f in self.verb_forms(stem)}


@dataclass
class ParallelCorpus:
    documents: list[ParallelDocument]
    lexicon: Lexicon | None = None

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def n_sentences(self) -> int:
        return sum(len(d) for d in self.documents)


class Vocabulary:
    """Dense token <-> id map; ids 0..4 are the reserved symbols."""

    def __init__(self, tokens: Iterable[str]):
        self.itos: list[str] = list(RESERVED)
        for t in tokens:
            if t not in RESERVED:
                self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def content_ids(self) -> np.ndarray:
        return np.arange(len(RESERVED), len(self.itos))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[len(RESERVED):]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(t for t in text.split("\n") if t)


def build_vocab(corpus: ParallelCorpus | Sequence[ParallelDocument], side: str) -> Vocabulary:
    if side not in SIDES:
        raise CorpusError(f"unknown side {side!r}")
    docs = corpus.documents if isinstance(corpus, ParallelCorpus) else corpus
    col = 0 if side == "source" else 1
    tokens = {t for d in docs for pair in d.pairs for t in pair[col]}
    return Vocabulary(sorted(tokens))


# -----------------------------------------------------------------------------
# Generator
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class GenConfig:
    n_docs: int = 400
    sents_per_doc: int = 10
    n_nouns: int = 24
    n_verbs: int = 12
    n_cue_verbs: int = 2
    n_adjectives: int = 8
    n_adverbs: int = 8
    pronoun_rate: float = 0.6
    cue_rate: float = 0.98
    distance_distribution: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    cohesion_rate: float = 0.3
    marker_rate: float = 0.5
    pronouns: bool = True
    formality: bool = True
    cohesion: bool = True
    verb_form: bool = True

    def validate(self) -> None:
        if self.n_docs < 0 or self.sents_per_doc < 1:
            raise CorpusError("n_docs must be >= 0 and sents_per_doc >= 1")
        if len(self.distance_distribution) != 5 or min(self.distance_distribution) < 0:
            raise CorpusError("distance_distribution needs 5 nonnegative weights for distances 1..5")
        if not math.isclose(sum(self.distance_distribution), 1.0, abs_tol=1e-9):
            raise CorpusError(f"distance_distribution sums to {sum(self.distance_distribution)}, not 1")
        for name in ("pronoun_rate", "cue_rate", "cohesion_rate", "marker_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CorpusError(f"{name}={v} outside [0, 1]")
        if self.n_nouns < 3 or self.n_verbs < 1 or self.n_adjectives < 1 or self.n_adverbs < 1:
            raise CorpusError("lexicon sizes too small")


_SRC_ONSETS = "bdfgklmnprstvz"
_SRC_VOWELS = "aeiou"
_TGT_ONSETS = ["b", "ch", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "sch", "t", "w", "z"]
_TGT_VOWELS = ["a", "e", "i", "o", "u", "ei", "au", "ü", "ö"]
_TGT_CODAS = ["", "n", "r", "l", "s", "ck"]
_RESERVED_WORDS = {"the", "it", "you", "we", "der", "die", "das", "er", "sie", "es", "du", "Sie", "wir"}


def _pseudo_words(rng: np.random.Generator, n: int, target: bool, taken: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < n:
        if target:
            sylls = [rng.choice(_TGT_ONSETS) + rng.choice(_TGT_VOWELS) for _ in range(2)]
            w = "".join(sylls) + rng.choice(_TGT_CODAS)
        else:
            w = "".join(rng.choice(list(_SRC_ONSETS)) + rng.choice(list(_SRC_VOWELS)) for _ in range(2))
            w += rng.choice(["", "n", "t", "m"])
        if w in taken or w in _RESERVED_WORDS:
            continue
        taken.add(w)
        words.append(w)
    return words


def make_lexicon(config: GenConfig, seed: int) -> Lexicon:
    """Closed lexicon; noun genders are fixed here, once, by the seed."""
    rng = make_rng(seed, "lexicon")
    src_taken: set[str] = set()
    tgt_taken: set[str] = set()
    n_cue = 3 * config.n_cue_verbs
    src_nouns = _pseudo_words(rng, config.n_nouns, False, src_taken)
    src_verbs = _pseudo_words(rng, config.n_verbs + n_cue, False, src_taken)
    src_adjs = _pseudo_words(rng, config.n_adjectives, False, src_taken)
    src_advs = _pseudo_words(rng, config.n_adverbs, False, src_taken)
    tgt_nouns = _pseudo_words(rng, 2 * config.n_nouns, True, tgt_taken)
    tgt_verbs = _pseudo_words(rng, config.n_verbs + n_cue, True, tgt_taken)
    tgt_adjs = _pseudo_words(rng, config.n_adjectives, True, tgt_taken)
    tgt_advs = _pseudo_words(rng, config.n_adverbs, True, tgt_taken)
    styled = config.formality or config.verb_form or config.cohesion
    markers = ()
    if styled:
        markers = tuple(zip(_pseudo_words(rng, 2, False, src_taken), _pseudo_words(rng, 2, True, tgt_taken)))

    # balanced genders, shuffled
    genders = [GENDERS[i % 3] for i in range(config.n_nouns)]
    genders = [genders[i] for i in rng.permutation(config.n_nouns)]
    nouns = {}
    for i, src in enumerate(src_nouns):
        forms = (tgt_nouns[2 * i], tgt_nouns[2 * i + 1]) if config.cohesion else (tgt_nouns[2 * i],)
        nouns[src] = (forms, genders[i])
    verbs: dict[str, tuple[str, str | None]] = {}
    for i, src in enumerate(src_verbs):
        cue = None if i < config.n_verbs else GENDERS[(i - config.n_verbs) // config.n_cue_verbs]
        verbs[src] = (tgt_verbs[i], cue)
    return Lexicon(
        nouns=nouns,
        verbs=verbs,
        adjectives=dict(zip(src_adjs, tgt_adjs)),
        adverbs=dict(zip(src_advs, tgt_advs)),
        verb_variants=config.verb_form,
        markers=markers,
    )


class _DocBuilder:
    def __init__(self, doc_id: str, lex: Lexicon, cfg: GenConfig, rng: np.random.Generator):
        self.doc_id = doc_id
        self.lex = lex
        self.cfg = cfg
        self.rng = rng
        self.pairs: list[tuple[list[str], list[str]]] = []
        self.annotations: list[Annotation] = []
        # one document style fixes register, verb variant and entity renderings
        self.style = int(rng.integers(2)) if lex.markers else 0
        self.variant = ("A", "B")[self.style] if cfg.verb_form else "A"
        self.register = ("informal", "formal")[self.style] if cfg.formality else "informal"
        self.rendering: dict[str, str] = {}
        self.mentioned: list[str] = []
        self.unused = [list(lex.nouns)[i] for i in rng.permutation(len(lex.nouns))]
        self.generic_verbs = [v for v, (_, cue) in lex.verbs.items() if cue is None]
        self.cue_verbs = {g: [v for v, (_, cue) in lex.verbs.items() if cue == g] for g in GENDERS}

    def _pick(self, items):
        return items[int(self.rng.integers(len(items)))]

    def _verb(self, src: str) -> str:
        return self.lex.verbs[src][0] + VERB_SUFFIX[self.variant]

    def _append(self, src: list[str], tgt: list[str]) -> None:
        """Add the pair, marking the document style on the first sentence and sporadically after."""
        if self.lex.markers and (not self.pairs or self.rng.random() < self.cfg.marker_rate):
            m_src, m_tgt = self.lex.markers[self.style]
            src.insert(len(src) - 1, m_src)
            tgt.insert(len(tgt) - 1, m_tgt)
        self.pairs.append((src, tgt))

    def _verb_note(self, tgt: list[str], idx: int) -> None:
        if self.cfg.verb_form:
            self.annotations.append(Annotation(len(self.pairs), idx, "verb_form", "target"))

    def intro(self) -> tuple[int, tuple[int, int], tuple[int, int]]:
        """Mention an entity; returns (sentence index, source NP span, target NP span)."""
        repeat = self.cfg.cohesion and self.mentioned and self.rng.random() < self.cfg.cohesion_rate
        if repeat:
            noun = self._pick(self.mentioned)
        else:
            if not self.unused:
                raise CorpusError("not enough nouns for a document without repeated entities")
            noun = self.unused.pop()
        forms, gender = self.lex.nouns[noun]
        if noun not in self.rendering:
            self.rendering[noun] = forms[self.style % len(forms)]
        noun_t = self.rendering[noun]
        adv = self._pick(list(self.lex.adverbs))
        if self.rng.random() < 0.5:
            adj = self._pick(list(self.lex.adjectives))
            if self.cfg.pronouns and self.rng.random() < self.cfg.cue_rate:
                verb = self._pick(self.cue_verbs[gender])
            else:
                verb = self._pick(self.generic_verbs)
            src = ["the", adj, noun, verb, "."]
            tgt = [ARTICLE[gender], self.lex.adjectives[adj], noun_t, self._verb(verb), "."]
            src_span, tgt_span, noun_idx, verb_idx = (0, 3), (0, 3), 2, 3
        else:
            verb = self._pick(self.generic_verbs)
            src = ["we", verb, "the", noun, adv, "."]
            tgt = ["wir", self._verb(verb), ARTICLE[gender], noun_t, self.lex.adverbs[adv], "."]
            src_span, tgt_span, noun_idx, verb_idx = (2, 4), (2, 4), 3, 1
        i = len(self.pairs)
        if repeat:
            self.annotations.append(Annotation(i, noun_idx, "cohesion", "target"))
        self._verb_note(tgt, verb_idx)
        self._append(src, tgt)
        if noun not in self.mentioned:
            self.mentioned.append(noun)
        self._last_noun = noun
        return i, src_span, tgt_span

    def filler(self) -> None:
        verb = self._pick(self.generic_verbs)
        adv = self._pick(list(self.lex.adverbs))
        if self.cfg.formality and self.rng.random() < 0.5:
            subj_s, subj_t = "you", SECOND_PERSON[self.register]
            self.annotations.append(Annotation(len(self.pairs), 0, "formality", "target"))
        else:
            subj_s, subj_t = "we", "wir"
        tgt = [subj_t, self._verb(verb), self.lex.adverbs[adv], "."]
        self._verb_note(tgt, 1)
        self._append([subj_s, verb, adv, "."], tgt)

    def pronoun(self, ante: tuple[int, tuple[int, int], tuple[int, int]]) -> None:
        ante_idx, src_span, tgt_span = ante
        noun = self._last_noun
        gender = self.lex.nouns[noun][1]
        if self.rng.random() < self.cfg.cue_rate:
            verb = self._pick(self.cue_verbs[gender])
        else:
            verb = self._pick(self.generic_verbs)
        adv = self._pick(list(self.lex.adverbs))
        src = ["it", verb, adv, "."]
        tgt = [PRONOUN[gender], self._verb(verb), self.lex.adverbs[adv], "."]
        i = len(self.pairs)
        self.annotations.append(Annotation(i, 0, "pronoun", "source", ante_idx, *src_span))
        self.annotations.append(Annotation(i, 0, "pronoun", "target", ante_idx, *tgt_span))
        self._verb_note(tgt, 1)
        self._append(src, tgt)


def _generate_document(doc_id: str, lex: Lexicon, cfg: GenConfig, rng: np.random.Generator) -> ParallelDocument:
    b = _DocBuilder(doc_id, lex, cfg, rng)
    n = cfg.sents_per_doc
    dist = np.asarray(cfg.distance_distribution)
    while len(b.pairs) < n:
        if rng.random() < 0.35:
            b.filler()
            continue
        ante = b.intro()
        remaining = n - len(b.pairs)
        if cfg.pronouns and remaining > 0 and rng.random() < cfg.pronoun_rate:
            d = int(rng.choice(5, p=dist)) + 1
            if d <= remaining:
                for _ in range(d - 1):
                    b.filler()
                b.pronoun(ante)
    return ParallelDocument(doc_id, b.pairs, b.annotations)


def generate_corpus(config: GenConfig, seed: int, lexicon: Lexicon | None = None, prefix: str = "doc") -> ParallelCorpus:
    """Pure function of ``(config, seed)``; a shared ``lexicon`` may be passed in."""
    config.validate()
    lex = lexicon or make_lexicon(config, seed)
    docs = []
    for d in range(config.n_docs):
        rng = make_rng(seed, "document", prefix, d)
        docs.append(_generate_document(f"{prefix}{d:05d}", lex, config, rng))
    corpus = ParallelCorpus(docs, lex)
    if config.pronouns and config.pronoun_rate > 0 and config.n_docs > 0:
        if not any(a.kind == "pronoun" for doc in docs for a in doc.annotations):
            raise CorpusError("configuration produced zero pronoun instances")
    return corpus


def split_corpus(corpus: ParallelCorpus, valid_docs: int, test_docs: int) -> tuple[ParallelCorpus, ParallelCorpus, ParallelCorpus]:
    """Document-granularity split: last documents become test, those before valid."""
    docs = corpus.documents
    n_train = len(docs) - valid_docs - test_docs
    if n_train < 1:
        raise CorpusError("split leaves no training documents")
    lex = corpus.lexicon
    return (
        ParallelCorpus(docs[:n_train], lex),
        ParallelCorpus(docs[n_train : n_train + valid_docs], lex),
        ParallelCorpus(docs[n_train + valid_docs :], lex),
    )


# -----------------------------------------------------------------------------
# Contrastive sets
# -----------------------------------------------------------------------------


@dataclass
class ContrastiveExample:
    example_id: str
    doc_id: str
    sent_idx: int
    src_context: list[list[str]]
    tgt_context: list[list[str]]
    source: list[str]
    target: list[str]
    incorrect: list[list[str]]
    pronoun_idx: int
    distance: int
    src_span: tuple[int, int]
    tgt_span: tuple[int, int]

    @property
    def gender(self) -> str:
        return {v: k for k, v in PRONOUN.items()}[self.target[self.pronoun_idx]]

    def as_document(self) -> ParallelDocument:
        """Context plus current sentence as a standalone document."""
        pairs = [(list(s), list(t)) for s, t in zip(self.src_context, self.tgt_context)]
        pairs.append((list(self.source), list(self.target)))
        return ParallelDocument(self.example_id, pairs)


def make_contrastive_set(corpus: ParallelCorpus, seed: int, max_context: int = 5) -> list[ContrastiveExample]:
    """One correct plus one swapped-pronoun variant per wrong gender, class balanced.

    Pronouns with antecedent distance 0 or beyond ``max_context`` are skipped.
    """
    by_gender: dict[str, list[ContrastiveExample]] = {g: [] for g in GENDERS}
    inverse = {v: k for k, v in PRONOUN.items()}
    for doc in corpus.documents:
        for a in doc.annotations:
            if a.kind != "pronoun" or a.side != "target" or a.distance is None:
                continue
            if not 1 <= a.distance <= max_context:
                continue
            src = doc.source(a.sent_idx)
            tgt = doc.target(a.sent_idx)
            pron = tgt[a.tok_idx]
            if pron not in inverse:
                continue
            src_ann = [
                s for s in doc.annotations_for(a.sent_idx, "pronoun", "source") if s.ante_sent_idx == a.ante_sent_idx
            ]
            src_span = (src_ann[0].ante_start, src_ann[0].ante_end) if src_ann else (0, 0)
            lo = max(0, a.sent_idx - max_context)
            incorrect = []
            for g in GENDERS:
                if PRONOUN[g] != pron:
                    wrong = list(tgt)
                    wrong[a.tok_idx] = PRONOUN[g]
                    incorrect.append(wrong)
            by_gender[inverse[pron]].append(
                ContrastiveExample(
                    example_id=f"{doc.doc_id}-{a.sent_idx}",
                    doc_id=doc.doc_id,
                    sent_idx=a.sent_idx,
                    src_context=[list(doc.source(j)) for j in range(lo, a.sent_idx)],
                    tgt_context=[list(doc.target(j)) for j in range(lo, a.sent_idx)],
                    source=list(src),
                    target=list(tgt),
                    incorrect=incorrect,
                    pronoun_idx=a.tok_idx,
                    distance=a.distance,
                    src_span=src_span,
                    tgt_span=(a.ante_start, a.ante_end),
                )
            )
    sizes = [len(v) for v in by_gender.values() if v]
    if not sizes:
        log.warning("no eligible pronouns for a contrastive set")
        return []
    per_class = min(sizes)
    rng = make_rng(seed, "contrastive")
    chosen = []
    for g in GENDERS:
        pool = by_gender[g]
        keep = sorted(rng.permutation(len(pool))[:per_class].tolist())
        chosen.extend(pool[i] for i in keep)
    chosen.sort(key=lambda e: (e.doc_id, e.sent_idx))
    return chosen


@dataclass(frozen=True)
class DatasetConfig:
    """Splits of the plain corpus plus two pronoun-dense corpora.

    ``aux_docs`` pronoun-dense documents are appended to the training split;
    ``challenge_docs`` more are generated separately and feed the contrastive set.
    """

    valid_docs: int = 40
    test_docs: int = 40
    aux_docs: int = 150
    challenge_docs: int = 150
    dense_pronoun_rate: float = 1.0
    dense_cue_rate: float = 0.0


@dataclass
class Dataset:
    lexicon: Lexicon
    train: ParallelCorpus
    valid: ParallelCorpus
    test: ParallelCorpus
    challenge: ParallelCorpus
    contrastive: list[ContrastiveExample]

    @property
    def full(self) -> ParallelCorpus:
        docs = self.train.documents + self.valid.documents + self.test.documents
        return ParallelCorpus(docs, self.lexicon)


def make_dataset(gen: GenConfig, data: DatasetConfig, seed: int, max_context: int = 5) -> Dataset:
    if data.valid_docs + data.test_docs >= gen.n_docs:
        raise CorpusError("valid_docs + test_docs must leave training documents")
    lex = make_lexicon(gen, seed)
    train, valid, test = split_corpus(generate_corpus(gen, seed, lexicon=lex), data.valid_docs, data.test_docs)
    dense = replace(gen, pronoun_rate=data.dense_pronoun_rate, cue_rate=data.dense_cue_rate)
    if data.aux_docs:
        aux = generate_corpus(replace(dense, n_docs=data.aux_docs), seed, lexicon=lex, prefix="aux")
        train = ParallelCorpus(train.documents + aux.documents, lex)
    challenge = generate_corpus(replace(dense, n_docs=data.challenge_docs), seed, lexicon=lex, prefix="chal")
    return Dataset(lex, train, valid, test, challenge, make_contrastive_set(challenge, seed, max_context))


# -----------------------------------------------------------------------------
# File formats
# -----------------------------------------------------------------------------


def save_documents(corpus: ParallelCorpus | Sequence[ParallelDocument], path) -> None:
    docs = corpus.documents if isinstance(corpus, ParallelCorpus) else corpus
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            for i, (src, tgt) in enumerate(doc.pairs):
                fh.write(f"{doc.doc_id}\t{i}\t{' '.join(src)}\t{' '.join(tgt)}\n")


def load_documents(path) -> ParallelCorpus:
    docs: list[ParallelDocument] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(path, lineno, f"expected 4 tab-separated fields, got {len(parts)}")
            doc_id, idx, src, tgt = parts
            try:
                sent_idx = int(idx)
            except ValueError:
                raise ParseError(path, lineno, f"sentence index {idx!r} is not an integer") from None
            if not docs or docs[-1].doc_id != doc_id:
                if doc_id in seen:
                    raise ParseError(path, lineno, f"document {doc_id} is not contiguous")
                seen.add(doc_id)
                docs.append(ParallelDocument(doc_id, []))
            doc = docs[-1]
            if sent_idx != len(doc.pairs):
                raise ParseError(path, lineno, f"expected sentence index {len(doc.pairs)}, got {sent_idx}")
            doc.pairs.append((src.split(), tgt.split()))
    return ParallelCorpus(docs)


def _fmt_opt(v) -> str:
    return "-" if v is None else str(v)


def save_annotations(corpus: ParallelCorpus | Sequence[ParallelDocument], path) -> None:
    docs = corpus.documents if isinstance(corpus, ParallelCorpus) else corpus
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            for a in doc.annotations:
                fields = [
                    doc.doc_id, a.sent_idx, a.tok_idx, a.kind, a.side,
                    _fmt_opt(a.ante_sent_idx), _fmt_opt(a.ante_start), _fmt_opt(a.ante_end),
                ]
                fh.write("\t".join(str(f) for f in fields) + "\n")


def load_annotations(path, corpus: ParallelCorpus) -> ParallelCorpus:
    """Attach annotation records to ``corpus`` (returns a new corpus object)."""
    by_id = {d.doc_id: d for d in corpus.documents}
    extra: dict[str, list[Annotation]] = {d.doc_id: [] for d in corpus.documents}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 8:
                raise ParseError(path, lineno, f"expected 8 tab-separated fields, got {len(parts)}")
            doc_id, sent, tok, kind, side, a_sent, a_start, a_end = parts
            record = f"line {lineno} ({doc_id}:{sent})"
            try:
                sent_i, tok_i = int(sent), int(tok)
                ante = [None if v == "-" else int(v) for v in (a_sent, a_start, a_end)]
            except ValueError:
                raise ParseError(path, lineno, "non-integer index field") from None
            if kind not in KINDS:
                raise ParseError(path, lineno, f"unknown annotation kind {kind!r}")
            if side not in SIDES:
                raise ParseError(path, lineno, f"unknown side {side!r}")
            doc = by_id.get(doc_id)
            if doc is None:
                raise AnnotationError(record, f"unknown document {doc_id}")
            ann = Annotation(sent_i, tok_i, kind, side, *ante)
            _validate_annotation(doc, ann, record)
            extra[doc_id].append(ann)
    docs = [replace(d, annotations=list(d.annotations) + extra[d.doc_id]) for d in corpus.documents]
    return ParallelCorpus(docs, corpus.lexicon)


def _validate_annotation(doc: ParallelDocument, a: Annotation, record: str) -> None:
    col = 0 if a.side == "source" else 1
    if not 0 <= a.sent_idx < len(doc):
        raise AnnotationError(record, f"sentence index {a.sent_idx} beyond document length {len(doc)}")
    sent = doc.pairs[a.sent_idx][col]
    if not 0 <= a.tok_idx < len(sent):
        raise AnnotationError(record, f"token index {a.tok_idx} outside sentence of length {len(sent)}")
    if a.kind == "pronoun":
        if None in (a.ante_sent_idx, a.ante_start, a.ante_end):
            raise AnnotationError(record, "pronoun annotation without antecedent")
        if not 0 <= a.ante_sent_idx <= a.sent_idx:
            raise AnnotationError(record, f"antecedent sentence {a.ante_sent_idx} not at or before {a.sent_idx}")
        ante = doc.pairs[a.ante_sent_idx][col]
        if not 0 <= a.ante_start < a.ante_end <= len(ante):
            raise AnnotationError(record, f"antecedent span [{a.ante_start}, {a.ante_end}) outside sentence")


def save_lexicon(lex: Lexicon, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"verb_variants\t{int(lex.verb_variants)}\n")
        for src, (forms, gender) in lex.nouns.items():
            fh.write(f"noun\t{src}\t{'|'.join(forms)}\t{gender}\n")
        for src, (stem, cue) in lex.verbs.items():
            fh.write(f"verb\t{src}\t{stem}\t{_fmt_opt(cue)}\n")
        for src, tgt in lex.adjectives.items():
            fh.write(f"adj\t{src}\t{tgt}\t-\n")
        for src, tgt in lex.adverbs.items():
            fh.write(f"adv\t{src}\t{tgt}\t-\n")
        for style, (src, tgt) in enumerate(lex.markers):
            fh.write(f"marker\t{src}\t{tgt}\t{style}\n")


def load_lexicon(path) -> Lexicon:
    nouns, verbs, adjs, advs, markers = {}, {}, {}, {}, []
    variants = True
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if parts == [""]:
                continue
            if parts[0] == "verb_variants":
                variants = parts[1] == "1"
                continue
            if len(parts) != 4:
                raise ParseError(path, lineno, "expected 4 tab-separated fields")
            kind, src, tgt, attr = parts
            if kind == "noun":
                nouns[src] = (tuple(tgt.split("|")), attr)
            elif kind == "verb":
                verbs[src] = (tgt, None if attr == "-" else attr)
            elif kind == "adj":
                adjs[src] = tgt
            elif kind == "adv":
                advs[src] = tgt
            elif kind == "marker":
                markers.append((src, tgt))
            else:
                raise ParseError(path, lineno, f"unknown lexicon entry kind {kind!r}")
    return Lexicon(nouns, verbs, adjs, advs, variants, tuple(markers))


def _join_block(sentences: Sequence[Sequence[str]]) -> str:
    return f" {SEP_TOKEN} ".join(" ".join(s) for s in sentences) if sentences else "-"


def _split_block(field_: str) -> list[list[str]]:
    if field_ == "-":
        return []
    return [s.split() for s in field_.split(f" {SEP_TOKEN} ")]


def save_contrastive(examples: Sequence[ContrastiveExample], path) -> None:
    """Record: id, doc, sent, src ctx, tgt ctx, source, correct, incorrect (``||``), pronoun idx, antecedent."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in examples:
            ante = f"{e.distance}:{e.src_span[0]}-{e.src_span[1]}:{e.tgt_span[0]}-{e.tgt_span[1]}"
            fields = [
                e.example_id, e.doc_id, str(e.sent_idx),
                _join_block(e.src_context), _join_block(e.tgt_context),
                " ".join(e.source), " ".join(e.target),
                " || ".join(" ".join(t) for t in e.incorrect),
                str(e.pronoun_idx), ante,
            ]
            fh.write("\t".join(fields) + "\n")


def load_contrastive(path) -> list[ContrastiveExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 10:
                raise ParseError(path, lineno, f"expected 10 tab-separated fields, got {len(parts)}")
            try:
                d, src_span, tgt_span = parts[9].split(":")
                ss, se = (int(v) for v in src_span.split("-"))
                ts, te = (int(v) for v in tgt_span.split("-"))
                e = ContrastiveExample(
                    example_id=parts[0],
                    doc_id=parts[1],
                    sent_idx=int(parts[2]),
                    src_context=_split_block(parts[3]),
                    tgt_context=_split_block(parts[4]),
                    source=parts[5].split(),
                    target=parts[6].split(),
                    incorrect=[t.split() for t in parts[7].split(" || ")],
                    pronoun_idx=int(parts[8]),
                    distance=int(d),
                    src_span=(ss, se),
                    tgt_span=(ts, te),
                )
            except ValueError as exc:
                raise ParseError(path, lineno, f"malformed contrastive record: {exc}") from None
            if len(e.src_context) != len(e.tgt_context):
                raise ParseError(path, lineno, "source and target context blocks differ in length")
            out.append(e)
    return out


def contrastive_corpus(examples: Sequence[ContrastiveExample]) -> ParallelCorpus:
    return ParallelCorpus([e.as_document() for e in examples])


def token_counts(corpus: ParallelCorpus, side: str = "target") -> Counter:
    col = 0 if side == "source" else 1
    return Counter(t for d in corpus.documents for p in d.pairs for t in p[col])
