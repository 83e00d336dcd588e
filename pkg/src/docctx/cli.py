"""Command-line pipeline: gen-data, train, translate, perturb, attribute, evaluate, report."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import attribution as attr
from . import corpus as cp
from . import decoding as dec
from . import metrics as mt
from .model import ModelConfig, Transformer, canonical_arch, load_checkpoint, save_checkpoint
from .tagger import Tagger, phenomena_stats, save_tags
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("docctx")

ARCH_CHOICES = ("sentence", "concat", "multi")


class UsageError(Exception):
    pass


@dataclass
class ArchConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    dropout: float = 0.1
    max_positions: int = 256
    max_context: int = 5
    share_context_embeddings: bool = True


@dataclass
class EvalConfig:
    batch_size: int = 64
    k: int = 5


SECTIONS = {
    "gen": cp.GenConfig,
    "data": cp.DatasetConfig,
    "model": ArchConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


# -- configuration -----------------------------------------------------------------


def _convert(kind, raw: str):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    if kind == "bool":
        if raw not in ("True", "False", "true", "false", "1", "0"):
            raise UsageError(f"expected a boolean, got {raw!r}")
        return raw in ("True", "true", "1")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind.startswith("tuple"):
        return tuple(float(x) for x in raw.split(","))
    return raw


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


class Settings:
    """Layered configuration: defaults, then files in order, then ``--set`` overrides."""

    def __init__(self):
        self.sections = {name: cls() for name, cls in SECTIONS.items()}

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        if section not in self.sections:
            raise UsageError(f"unknown config section in {key!r}")
        obj = self.sections[section]
        types = {f.name: f.type for f in dataclasses.fields(obj)}
        if name not in types:
            raise UsageError(f"unknown config key {key!r}")
        try:
            value = _convert(types[name], raw.strip())
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
        self.sections[section] = dataclasses.replace(obj, **{name: value})

    def load_file(self, path) -> None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            self.set(key.strip(), value)

    def lines(self) -> list[str]:
        out = []
        for name, obj in self.sections.items():
            for f in dataclasses.fields(obj):
                out.append(f"{name}.{f.name}={_format(getattr(obj, f.name))}")
        return out

    def __getattr__(self, name):
        try:
            return self.__dict__["sections"][name]
        except KeyError:
            raise AttributeError(name) from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, settings: Settings, inputs: Sequence[Path]) -> None:
    cfg = settings.lines()
    flags = [
        f"arg.{k}={v}"
        for k, v in sorted(vars(args).items())
        if k not in ("func", "config", "set", "out", "verbose") and not isinstance(v, (list, Path))
    ]
    digest = hashlib.sha256("\n".join(cfg + flags).encode("utf-8")).hexdigest()
    lines = [f"command={command}", f"seed={args.seed}", f"config_hash={digest}"]
    lines += flags + cfg
    for p in sorted(inputs, key=lambda p: p.name):
        lines.append(f"input.{p.name}={sha256_file(p)}")
    (out_dir / f"{command}.manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- data layout ---------------------------------------------------------------------------

DATA_FILES = {
    "train": "train.docs.tsv",
    "valid": "valid.docs.tsv",
    "test": "test.docs.tsv",
    "challenge": "challenge.docs.tsv",
}


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input file {path}")
    return path


def load_split(data_dir: Path, name: str) -> cp.ParallelCorpus:
    docs = cp.load_documents(_require(data_dir / DATA_FILES[name]))
    ann = data_dir / DATA_FILES[name].replace(".docs.tsv", ".ann.tsv")
    if ann.exists():
        docs = cp.load_annotations(ann, docs)
    return docs


def load_lexicon(data_dir: Path) -> cp.Lexicon:
    return cp.load_lexicon(_require(data_dir / "lexicon.tsv"))


@dataclass
class LoadedModel:
    model: Transformer
    src_vocab: cp.Vocabulary
    tgt_vocab: cp.Vocabulary
    files: list[Path]


def load_model_dir(model_dir: Path) -> LoadedModel:
    files = [_require(model_dir / n) for n in ("model.ckpt", "vocab.src.txt", "vocab.tgt.txt")]
    return LoadedModel(
        load_checkpoint(files[0]),
        cp.Vocabulary.load(files[1]),
        cp.Vocabulary.load(files[2]),
        files,
    )


def _layout(args, model: Transformer) -> str:
    return canonical_arch(args.layout) if getattr(args, "layout", None) else model.config.arch


# -- subcommands ------------------------------------------------------------------------------


def cmd_gen_data(args, settings: Settings) -> list[Path]:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ds = cp.make_dataset(settings.gen, settings.data, args.seed, settings.model.max_context)
    for name in DATA_FILES:
        c = getattr(ds, name)
        cp.save_documents(c, out / DATA_FILES[name])
        cp.save_annotations(c, out / DATA_FILES[name].replace(".docs.tsv", ".ann.tsv"))
    cp.save_lexicon(ds.lexicon, out / "lexicon.tsv")
    if not ds.contrastive:
        log.warning("no eligible pronouns: contrastive set is empty")
    cp.save_contrastive(ds.contrastive, out / "contrastive.tsv")
    both = cp.ParallelCorpus(ds.full.documents + ds.challenge.documents, ds.lexicon)
    cp.build_vocab(both, "source").save(out / "vocab.src.txt")
    cp.build_vocab(both, "target").save(out / "vocab.tgt.txt")
    rows = []
    for name, c in (("test", ds.test), ("contrastive", cp.contrastive_corpus(ds.contrastive))):
        for kind, pct in phenomena_stats(c, ds.lexicon).percentages.items():
            rows.append((f"phenomena_pct.{kind}", name, pct))
    mt.write_metric_report(rows, out / "phenomena.tsv")
    return []


def cmd_train(args, settings: Settings) -> list[Path]:
    data = args.data
    train_c = load_split(data, "train")
    valid_c = load_split(data, "valid")
    inputs = [_require(data / n) for n in ("vocab.src.txt", "vocab.tgt.txt")]
    src_vocab = cp.Vocabulary.load(inputs[0])
    tgt_vocab = cp.Vocabulary.load(inputs[1])
    a = settings.model
    cfg = ModelConfig(
        arch=args.arch, n_layers=a.n_layers, d_model=a.d_model, n_heads=a.n_heads, d_ffn=a.d_ffn,
        dropout=a.dropout, src_vocab=len(src_vocab), tgt_vocab=len(tgt_vocab),
        max_positions=a.max_positions, max_context=a.max_context,
        share_context_embeddings=a.share_context_embeddings,
    )
    tcfg = dataclasses.replace(settings.train, seed=args.seed)
    settings.sections["train"] = tcfg
    model = Transformer(cfg, seed=args.seed)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(model, train_c.documents, valid_c.documents, src_vocab, tgt_vocab, tcfg)
        lines = result.log_lines
    except TrainingDiverged as exc:
        save_checkpoint(model, out / "model.ckpt")
        (out / "train.log").write_text("".join(l + "\n" for l in exc.log_lines), encoding="utf-8")
        raise
    save_checkpoint(result.model, out / "model.ckpt")
    src_vocab.save(out / "vocab.src.txt")
    tgt_vocab.save(out / "vocab.tgt.txt")
    (out / "train.log").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return inputs + [data / DATA_FILES["train"], data / DATA_FILES["valid"]]


def cmd_translate(args, settings: Settings) -> list[Path]:
    lm = load_model_dir(args.model)
    docs = cp.load_documents(_require(args.data))
    translations, _ = dec.translate_corpus(
        lm.model, docs.documents, args.k, lm.src_vocab, lm.tgt_vocab,
        beam=args.beam, context_mode=args.context_mode, seed=args.seed, layout=_layout(args, lm.model),
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    dec.save_translations(translations, args.out)
    return lm.files + [args.data]


def _flat(docs):
    return [s for d in docs for s in d]


def _references(corpus: cp.ParallelCorpus):
    return [[d.target(i) for i in range(len(d))] for d in corpus.documents]


def cmd_perturb(args, settings: Settings) -> list[Path]:
    lm = load_model_dir(args.model)
    test = load_split(args.data, "test")
    refs = _references(test)
    layouts = [(lm.model.config.arch, _label(lm.model.config.arch))]
    if lm.model.config.arch == "sentence":
        layouts.append(("concat_2to2", "sentence-level*"))
    header = ["configuration"] + [f"BLEU.{m}" for m in dec.CONTEXT_MODES] + [f"CXMI.{m}" for m in dec.CONTEXT_MODES]
    table = ["\t".join(header)]
    rows = []
    bs = settings.eval.batch_size
    for layout, label in layouts:
        scores, cache = {}, None
        for mode in dec.CONTEXT_MODES:
            tr, c = dec.translate_corpus(lm.model, test.documents, args.k, lm.src_vocab, lm.tgt_vocab,
                                         beam=args.beam, context_mode=mode, seed=args.seed, layout=layout)
            if mode == "correct":
                cache = c
            scores[f"BLEU.{mode}"] = mt.bleu(_flat([[t.tokens for t in d] for d in tr]), _flat(refs))
        base = dec.generated_context(args.k, cache)
        builders = {
            "correct": base,
            "random": dec.randomized(base, args.seed, lm.src_vocab, lm.tgt_vocab),
            "none": dec.no_context(),
        }
        for mode, builder in builders.items():
            res = mt.cxmi(lm.model, test.documents, builder, dec.no_context(), lm.src_vocab, lm.tgt_vocab, layout, bs)
            scores[f"CXMI.{mode}"] = res.mean
        table.append("\t".join([label] + [mt.fmt(scores[h]) for h in header[1:]]))
        rows += [(h, label, scores[h]) for h in header[1:]]
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "perturb.tsv").write_text("\n".join(table) + "\n", encoding="utf-8")
    mt.write_metric_report(rows, args.out / "perturb.metrics.tsv", args.out / "perturb.summary")
    return lm.files + [args.data / DATA_FILES["test"]]


def _label(arch: str) -> str:
    return {"sentence": "sentence", "concat_2to2": "concat", "multi_encoder": "multi"}[arch]


def cmd_attribute(args, settings: Settings) -> list[Path]:
    lm = load_model_dir(args.model)
    examples = cp.load_contrastive(_require(args.contrastive))
    if not examples:
        raise cp.CorpusError("contrastive file holds no examples")
    shares = attr.attribute_examples(lm.model, examples, args.k, lm.src_vocab, lm.tgt_vocab, _layout(args, lm.model))
    args.out.mkdir(parents=True, exist_ok=True)
    attr.save_attribution(shares, args.out / "attribution.tsv")
    summary = attr.summarize(shares)
    lines = ["group\tantecedent_pct\tcontext_pct\tcurrent_pct\tn"]
    rows = []
    for group, vals in summary.items():
        lines.append("\t".join([group] + [mt.fmt(vals[k]) for k in ("antecedent_pct", "context_pct", "current_pct")] + [str(int(vals["n"]))]))
        rows += [(key, group, vals[key]) for key in ("antecedent_pct", "context_pct", "current_pct")]
    (args.out / "attribution.summary.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    mt.write_metric_report(rows, args.out / "attribute.metrics.tsv", args.out / "attribute.summary")
    return lm.files + [args.contrastive]


def cmd_evaluate(args, settings: Settings) -> list[Path]:
    lm = load_model_dir(args.model)
    test = load_split(args.data, "test")
    lex = load_lexicon(args.data)
    examples = cp.load_contrastive(_require(args.data / "contrastive.tsv"))
    layout = _layout(args, lm.model)
    tagger = Tagger(lex)
    bs = settings.eval.batch_size
    rows = []
    tr, _ = dec.translate_corpus(lm.model, test.documents, args.k, lm.src_vocab, lm.tgt_vocab,
                                 beam=args.beam, seed=args.seed, layout=layout)
    hyps = [[t.tokens for t in d] for d in tr]
    refs = _references(test)
    rows.append(("bleu", "test", mt.bleu(_flat(hyps), _flat(refs))))
    rows.append(("perplexity", "test", mt.perplexity(lm.model, test.documents, args.k, lm.src_vocab, lm.tgt_vocab, layout, bs)))
    for kind, res in mt.phenomena_f1(refs, hyps, tagger).items():
        rows.append((f"f1.{kind}", "test", 100.0 * res.f1))
    if examples:
        for k in sorted({0, args.k}):
            rows.append(("contrastive_acc", f"k{k}", 100.0 * mt.contrastive_accuracy(
                lm.model, examples, k, lm.src_vocab, lm.tgt_vocab, layout)))
        ccorp = cp.contrastive_corpus(examples)
        tr2, _ = dec.translate_corpus(lm.model, ccorp.documents, args.k, lm.src_vocab, lm.tgt_vocab,
                                      beam=args.beam, seed=args.seed, layout=layout)
        hyps2 = [[t.tokens for t in d] for d in tr2]
        for kind, res in mt.phenomena_f1(_references(ccorp), hyps2, tagger).items():
            rows.append((f"f1.{kind}", "contrastive", 100.0 * res.f1))
    args.out.mkdir(parents=True, exist_ok=True)
    dec.save_translations(tr, args.out / "test.hyp.tsv")
    save_tags([d.doc_id for d in test.documents], tagger.tag_corpus(hyps), args.out / "test.hyp.tags.tsv")
    mt.write_metric_report(rows, args.out / "evaluate.metrics.tsv", args.out / "evaluate.summary")
    return lm.files + [args.data / DATA_FILES["test"], args.data / "lexicon.tsv", args.data / "contrastive.tsv"]


def pareto_flags(points: Sequence[tuple[float, float]]) -> list[bool]:
    """True where another point is >= in both coordinates and > in one."""
    flags = []
    for i, (a, b) in enumerate(points):
        flags.append(any(
            j != i and c >= a and d >= b and (c > a or d > b) for j, (c, d) in enumerate(points)
        ))
    return flags


def cmd_report(args, settings: Settings) -> list[Path]:
    names, points, combined, inputs = [], [], [], []
    for rdir in args.results:
        ev = _require(rdir / "evaluate.summary")
        at = _require(rdir / "attribute.summary")
        inputs += [ev, at]
        e = mt.read_summary(ev)
        a = mt.read_summary(at)
        f1 = e.get("f1.pronoun.contrastive", e.get("f1.pronoun.test"))
        if f1 is None or "antecedent_pct.all" not in a:
            raise cp.CorpusError(f"{rdir}: summaries lack pronoun F1 or antecedent attribution")
        name = rdir.name
        names.append(name)
        points.append((f1, a["antecedent_pct.all"]))
        for key, value in sorted({**e, **a}.items()):
            combined.append(f"{name}\t{key}\t{mt.fmt(value)}")
    flags = pareto_flags(points)
    args.out.mkdir(parents=True, exist_ok=True)
    pareto = ["model\tF1_pronoun\tantecedent_pct\tdominated"]
    pareto += [f"{n}\t{mt.fmt(f)}\t{mt.fmt(p)}\t{int(d)}" for n, (f, p), d in zip(names, points, flags)]
    (args.out / "pareto.tsv").write_text("\n".join(pareto) + "\n", encoding="utf-8")
    (args.out / "report.tsv").write_text("\n".join(combined) + "\n", encoding="utf-8")
    return inputs


# -- parser --------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="docctx", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", action="append", default=[], type=Path, help="key=value file; later files win")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
    common.add_argument("--out", type=Path, required=True)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    def model_flags(p, k=True):
        p.add_argument("--model", type=Path, required=True, help="directory written by train")
        if k:
            p.add_argument("--k", type=int, default=None, help="context sentences (default eval.k)")
        p.add_argument("--layout", choices=ARCH_CHOICES, default=None,
                       help="feed inputs built for another architecture")

    add("gen-data", cmd_gen_data, "generate the synthetic corpus and contrastive set")
    p = add("train", cmd_train, "train one model")
    p.add_argument("--arch", choices=ARCH_CHOICES, required=True)
    p.add_argument("--data", type=Path, required=True)
    p = add("translate", cmd_translate, "translate a documents file")
    model_flags(p)
    p.add_argument("--data", type=Path, required=True, help="documents file")
    p.add_argument("--context-mode", choices=dec.CONTEXT_MODES, default="correct")
    p.add_argument("--beam", type=int, default=1)
    p = add("perturb", cmd_perturb, "BLEU and CXMI under correct, random and no context")
    model_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--beam", type=int, default=1)
    p = add("attribute", cmd_attribute, "attribution of pronouns to their antecedents")
    model_flags(p)
    p.add_argument("--contrastive", type=Path, required=True)
    p = add("evaluate", cmd_evaluate, "BLEU, perplexity, contrastive accuracy, phenomena F1")
    model_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--beam", type=int, default=1)
    p = add("report", cmd_report, "combine result directories and emit Pareto data")
    p.add_argument("results", type=Path, nargs="+")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    settings = Settings()
    try:
        for path in args.config:
            settings.load_file(_require(path))
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            settings.set(*item.split("=", 1))
        if hasattr(args, "k") and args.k is None:
            args.k = settings.eval.k
        if getattr(args, "k", 0) < 0:
            raise UsageError("--k must be >= 0")
        if getattr(args, "beam", 1) < 1:
            raise UsageError("--beam must be >= 1")
    except UsageError as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        parser.error(str(exc))
    try:
        inputs = args.func(args, settings)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, ArithmeticError, KeyError, OSError, RuntimeError) as exc:
        print(f"docctx {args.command}: error: {exc}", file=sys.stderr)
        return 1
    out_dir = args.out if args.command != "translate" else args.out.parent
    write_manifest(out_dir, args.command.replace("-", "_"), args, settings, [Path(p) for p in inputs])
    return 0


if __name__ == "__main__":
    sys.exit(main())
