"""Rule-based discourse-phenomenon taggers over the synthetic languages."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import KINDS, PRONOUN, SECOND_PERSON, SIDES, Lexicon, ParallelCorpus, ParallelDocument


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class PhenomenonTag:
    sent_idx: int
    tok_idx: int
    kind: str


class Tagger:
    """Closed word-list rules.

    * pronoun: a gendered pronoun in a sentence without any noun, so its
      referent must come from an earlier sentence
    * formality: second-person forms
    * cohesion: a noun whose entity already appeared earlier in the document
    * verb_form: suffix-marked verb variants (only if the lexicon has them)
    """

    def __init__(self, lexicon: Lexicon):
        self.lexicon = lexicon
        self.entity = {
            "source": {src: src for src in lexicon.nouns},
            "target": lexicon.target_noun_entities(),
        }
        self.pronouns = {"source": {"it"}, "target": set(PRONOUN.values())}
        self.formality = {"source": {"you"}, "target": set(SECOND_PERSON.values())}
        self.verb_forms = {
            "source": set(),
            "target": lexicon.target_verb_forms() if lexicon.verb_variants else set(),
        }

    def tag_document(self, sentences: Sequence[Sequence[str]], side: str = "target") -> list[PhenomenonTag]:
        if side not in SIDES:
            raise ConfigError(f"unknown side {side!r}; expected one of {SIDES}")
        entity = self.entity[side]
        seen: set[str] = set()
        tags = []
        for i, sent in enumerate(sentences):
            has_noun = any(t in entity for t in sent)
            mentioned = []
            for j, tok in enumerate(sent):
                if tok in self.pronouns[side] and not has_noun:
                    tags.append(PhenomenonTag(i, j, "pronoun"))
                if tok in self.formality[side]:
                    tags.append(PhenomenonTag(i, j, "formality"))
                if tok in self.verb_forms[side]:
                    tags.append(PhenomenonTag(i, j, "verb_form"))
                if tok in entity:
                    if entity[tok] in seen:
                        tags.append(PhenomenonTag(i, j, "cohesion"))
                    mentioned.append(entity[tok])
            seen.update(mentioned)
        return tags

    def tag_corpus(self, corpus, side: str = "target") -> list[list[PhenomenonTag]]:
        """Tags per document. Accepts a corpus, documents, or lists of token lists."""
        if side not in SIDES:
            raise ConfigError(f"unknown side {side!r}; expected one of {SIDES}")
        docs = corpus.documents if isinstance(corpus, ParallelCorpus) else corpus
        out = []
        for doc in docs:
            if isinstance(doc, ParallelDocument):
                col = 0 if side == "source" else 1
                sents = [p[col] for p in doc.pairs]
            else:
                sents = doc
            out.append(self.tag_document(sents, side))
        return out


def tag_corpus(corpus, lexicon: Lexicon, side: str = "target") -> list[list[PhenomenonTag]]:
    return Tagger(lexicon).tag_corpus(corpus, side)


def tagged_words(sentences: Sequence[Sequence[str]], tags: Sequence[PhenomenonTag]) -> list[dict[str, list[str]]]:
    """Per sentence, surface forms of tagged tokens grouped by kind."""
    out: list[dict[str, list[str]]] = [{k: [] for k in KINDS} for _ in sentences]
    for t in tags:
        out[t.sent_idx][t.kind].append(sentences[t.sent_idx][t.tok_idx])
    return out


@dataclass
class PhenomenaStats:
    total_tokens: int
    counts: dict[str, int]

    @property
    def percentages(self) -> dict[str, float]:
        if not self.total_tokens:
            return {k: 0.0 for k in self.counts}
        return {k: 100.0 * v / self.total_tokens for k, v in self.counts.items()}


def phenomena_stats(corpus: ParallelCorpus, lexicon: Lexicon | None = None) -> PhenomenaStats:
    """Target-side tag counts and their share of all target tokens."""
    lexicon = lexicon or corpus.lexicon
    tags = Tagger(lexicon).tag_corpus(corpus, "target")
    counts = {k: 0 for k in KINDS}
    for doc_tags in tags:
        for t in doc_tags:
            counts[t.kind] += 1
    total = sum(len(tgt) for doc in corpus.documents for _, tgt in doc.pairs)
    return PhenomenaStats(total, counts)


def save_tags(doc_ids: Sequence[str], tags: Sequence[Sequence[PhenomenonTag]], path, side: str = "target") -> None:
    """Write tags in the annotations file layout (antecedent fields empty)."""
    lines = []
    for doc_id, doc_tags in zip(doc_ids, tags):
        for t in sorted(doc_tags):
            lines.append(f"{doc_id}\t{t.sent_idx}\t{t.tok_idx}\t{t.kind}\t{side}\t-\t-\t-")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
