"""Command-line entry point: ``marvel <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from marvel import analysis, forge
from marvel.ablation import GRIDS, Harness, Schedule, degrades_on_every_seed, desk_schedule, format_table
from marvel.autodiff import ContractError, NumericError, set_precision
from marvel.data import (IMAGE, DataError, load_corpus, load_pairs, load_qrels, load_queries, save_corpus,
                         save_pairs, save_qrels, save_queries)
from marvel.encoder import FUSIONS, Ablation, MarvelModel
from marvel.index import FlatIndex, RunFormatError, build_index, read_run, search, write_run
from marvel.metrics import evaluate_run, format_report, significance_matrix
from marvel.params import CheckpointError, load_checkpoint, save_checkpoint
from marvel.text import Vocab, build_vocab
from marvel.training import (ConfigError, TrainConfig, TrainData, format_config, load_config, load_negatives,
                             mine_hard_negatives, paper_faithful, save_negatives, train)
from marvel.vision import ImageFormatError, write_image

logger = logging.getLogger("marvel")

COMMANDS = ("build-vocab", "gen-data", "build-dataset", "pretrain", "finetune", "mine-negatives", "encode",
            "index", "search", "eval", "verbalize", "attn-stats", "replace-study", "ablate")

# default file names inside a --data directory
DATA_FILES = {
    "corpus": "corpus.jsonl",
    "train_queries": "queries_train.jsonl",
    "dev_queries": "queries_dev.jsonl",
    "qrels": "qrels.txt",
    "pairs": "pairs_train.jsonl",
    "dev_pairs": "pairs_dev.jsonl",
    "vocab": "vocab.txt",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        valid = sorted(o for a in self._actions for o in a.option_strings)
        raise UsageError(f"{self.prog}: {message}\nvalid flags: {' '.join(valid)}")


# -- helpers ---------------------------------------------------------------------------

def blob_hash(path) -> str:
    """Git-style blob id of a file's bytes."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _log_inputs(paths) -> None:
    for p in paths:
        if p and Path(p).is_file():
            logger.info("input %s blob %s", p, blob_hash(p))


def _path(args, name: str, required: bool = True):
    value = getattr(args, name, None)
    if value is None and getattr(args, "data", None):
        candidate = Path(args.data) / DATA_FILES[name]
        if candidate.exists() or required:
            value = str(candidate)
    if value is None and required:
        raise UsageError(f"--{name.replace('_', '-')} (or --data) is required")
    return value


def _out(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _ablation(args) -> Ablation:
    return Ablation(args.no_caption, args.no_feature, args.no_prompt)


def _load_model(path) -> MarvelModel:
    params, cfg = load_checkpoint(path)
    vocab_file = Path(str(path) + ".vocab")
    if not vocab_file.exists():
        raise CheckpointError(f"missing vocabulary file {vocab_file}")
    return MarvelModel(cfg, params, Vocab.load(vocab_file))


def _save_model(path, model: MarvelModel) -> None:
    out = _out(path)
    save_checkpoint(out, model.params, model.cfg)
    model.vocab.save(str(out) + ".vocab")


def save_embeddings(path, ids, matrix: np.ndarray, digits: int = 9) -> None:
    with open(_out(path), "w", encoding="utf-8") as fh:
        for i, did in enumerate(ids):
            fh.write(did + "\t" + " ".join(f"{v:.{digits}g}" for v in matrix[i]) + "\n")


def load_embeddings(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                did, values = line.rstrip("\n").split("\t")
                vec = np.array([float(v) for v in values.split()])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: expected 'id<TAB>values'") from exc
            if did in out:
                raise DataError(f"{path}:{lineno}: duplicate id {did}")
            out[did] = vec
    return out


def _write(path, text: str) -> None:
    if path:
        _out(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- commands ------------------------------------------------------------------------------

def cmd_build_vocab(args) -> None:
    texts = []
    files = []
    for p in args.corpus or []:
        texts += [d.text for d in load_corpus(p).values()]
        files.append(p)
    for p in args.queries or []:
        texts += [q.text for q in load_queries(p)]
        files.append(p)
    for p in args.pairs or []:
        texts += [pr.caption for pr in load_pairs(p)]
        files.append(p)
    if not files:
        raise UsageError("build-vocab needs at least one --corpus, --queries or --pairs file")
    _log_inputs(files)
    vocab = build_vocab(texts, args.min_count)
    vocab.save(_out(args.out))
    logger.info("vocabulary of %d tokens -> %s", len(vocab), args.out)


def cmd_gen_data(args) -> None:
    s = forge.gen_synthetic(args.seed, args.n_queries, args.text_docs, args.image_docs, args.vocab_size,
                            args.image_size, 3, args.topics, args.pairs, args.noise, None, args.query_words)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for d in s.corpus.values():
        if d.image is not None:
            write_image(out / d.image_path, d.image)
    for p in s.pairs:
        write_image(out / p.image_path, p.image)
    save_corpus(out / DATA_FILES["corpus"], s.corpus.values())
    parts = forge.split([q.id for q in s.queries], args.dev, args.test, args.seed)
    qmap = {q.id: q for q in s.queries}
    for name, ids in parts.items():
        if ids:
            save_queries(out / f"queries_{name}.jsonl", [qmap[i] for i in ids])
    save_qrels(out / DATA_FILES["qrels"], s.qrels)
    pair_parts = forge.split([p.id for p in s.pairs], args.dev_pairs, 0, args.seed)
    pmap = {p.id: p for p in s.pairs}
    save_pairs(out / DATA_FILES["pairs"], [pmap[i] for i in pair_parts["train"]])
    save_pairs(out / DATA_FILES["dev_pairs"], [pmap[i] for i in pair_parts["dev"]])
    with open(out / "topics.tsv", "w", encoding="utf-8") as fh:
        for key in sorted(s.topics):
            fh.write(f"{key}\t{s.topics[key]}\n")
        for t, words in enumerate(s.topic_words):
            fh.write(f"topic{t}\t{' '.join(words)}\n")
    texts = [d.text for d in s.corpus.values()] + [q.text for q in s.queries] + [p.caption for p in s.pairs]
    build_vocab(texts, 1).save(out / DATA_FILES["vocab"])
    logger.info("synthetic set: %d docs, %d queries (%s), %d pairs -> %s", len(s.corpus), len(s.queries),
                ", ".join(f"{k} {len(v)}" for k, v in parts.items()), len(s.pairs), out)


def load_scores(path) -> dict[str, float]:
    """Alignment scores TSV: ``candidate-id-or-url<TAB>cosine``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'id<TAB>score'")
            try:
                out[parts[0]] = float(parts[1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad score {parts[1]!r}") from exc
    return out


def cmd_build_dataset(args) -> None:
    _log_inputs([args.input, args.scores])
    pages = forge.read_pages(args.input)
    if not pages:
        raise DataError(f"no pages found in {args.input}")
    scores = load_scores(args.scores) if args.scores else None
    encoder = None
    if not args.no_relevance_filter:
        if args.checkpoint:
            encoder = forge.ModelTextEncoder(_load_model(args.checkpoint))
        else:
            texts = [forge.page_text(h) for h in pages.values()]
            texts += [c.alt for h in pages.values() for c in forge.extract_images(h)]
            texts += [a.text for h in pages.values() for a in forge.extract_anchors(h)]
            encoder = forge.BagOfWordsEncoder(texts)
    res = forge.build_dataset(pages, scores, args.threshold, args.alt_min, args.alt_min_unit, encoder,
                              args.relevance_cutoff, args.image_size)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for d in res.documents:
        if d.image is not None:
            write_image(out / d.image_path, d.image)
    save_corpus(out / DATA_FILES["corpus"], res.documents)
    save_qrels(out / DATA_FILES["qrels"], res.qrels)
    ids = [q.id for q in res.queries]
    dev_n, test_n = args.dev, args.test
    if dev_n + test_n and dev_n + test_n < len(ids):
        parts = forge.split(ids, dev_n, test_n, args.seed)
    else:
        parts = {"train": ids, "dev": [], "test": []}
    qmap = {q.id: q for q in res.queries}
    for name, part in parts.items():
        save_queries(out / f"queries_{name}.jsonl", [qmap[i] for i in part])
    with open(out / "filter_audit.tsv", "w", encoding="utf-8") as fh:
        fh.write("candidate\tverdict\trule\n")
        for d in res.decisions:
            fh.write(f"{d.candidate_id}\t{d.verdict}\t{d.rule}\n")
    (out / "summary.json").write_text(json.dumps(res.summary(), indent=1, sort_keys=True, ensure_ascii=False) + "\n",
                                      encoding="utf-8")
    logger.info("%d pages, %d anchors, %d/%d images kept, %d documents, %d queries, %d skipped anchors",
                len(pages), len(res.anchors), sum(d.verdict == "keep" for d in res.decisions),
                len(res.decisions), len(res.documents), len(res.queries),
                res.stats.get("skipped_anchors", 0))


def _train_config(args, phase: str) -> TrainConfig:
    cfg = TrainConfig(phase=phase)
    if args.config:
        _log_inputs([args.config])
        cfg = load_config(args.config, cfg)
    if args.paper_faithful:
        cfg = paper_faithful(cfg)
    updates = {"phase": phase, "seed": args.seed}
    for name in ("lr", "tau", "batch_size", "max_steps", "eval_every", "early_stop", "hard_neg_top_k",
                 "per_modality", "negative_mode", "freeze", "stage", "fusion"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    for flag, key in (("no_caption", "drop_caption"), ("no_feature", "drop_features"), ("no_prompt", "drop_prompt"),
                      ("no_clip_pretrain", "no_clip_pretrain")):
        if getattr(args, flag, False):
            updates[key] = True
    cfg = dataclasses.replace(cfg, **updates)
    cfg.validate()
    return cfg


def _train_data(args, need_pairs: bool) -> TrainData:
    corpus_p = _path(args, "corpus", not need_pairs)
    qrels_p = _path(args, "qrels", not need_pairs)
    train_p = _path(args, "train_queries", not need_pairs)
    dev_p = _path(args, "dev_queries", False)
    pairs_p = _path(args, "pairs", need_pairs)
    dev_pairs_p = _path(args, "dev_pairs", False)
    _log_inputs([corpus_p, qrels_p, train_p, dev_p, pairs_p, dev_pairs_p])
    corpus = load_corpus(corpus_p) if corpus_p and Path(corpus_p).exists() else {}
    qrels = load_qrels(qrels_p) if qrels_p and Path(qrels_p).exists() else {}
    train_q = load_queries(train_p) if train_p and Path(train_p).exists() else []
    dev_q = load_queries(dev_p) if dev_p else []
    pairs = load_pairs(pairs_p) if pairs_p else []
    dev_pairs = load_pairs(dev_pairs_p) if dev_pairs_p else []
    if not need_pairs and not dev_q:
        logger.warning("no dev queries: selecting checkpoints on the training queries")
        dev_q = train_q
    return TrainData(corpus, train_q, dev_q, qrels, pairs, dev_pairs)


def _init_model(args) -> MarvelModel:
    if args.checkpoint:
        _log_inputs([args.checkpoint])
        return _load_model(args.checkpoint)
    vocab_p = _path(args, "vocab")
    _log_inputs([vocab_p])
    return MarvelModel.create(Vocab.load(vocab_p), seed=args.seed)


def cmd_pretrain(args) -> None:
    cfg = _train_config(args, "pretrain")
    logger.info("config:\n%s", format_config(cfg))
    data = _train_data(args, need_pairs=True)
    model = _init_model(args)
    res = train(model, data, cfg, log_path=_out(args.log) if args.log else None)
    _save_model(args.out, model)
    logger.info("pretraining: best dev MRR@10 %.4f at step %d of %d -> %s", res.best_metric, res.best_step,
                res.steps, args.out)


def cmd_finetune(args) -> None:
    cfg = _train_config(args, "finetune")
    if not args.checkpoint:
        if cfg.stage == "ance":
            raise UsageError("finetune --stage ance needs --checkpoint (the in-batch stage result)")
        if not cfg.no_clip_pretrain:
            raise UsageError("finetune needs --checkpoint from pretraining; pass --no-clip-pretrain to start "
                             "from a fresh vision module")
    logger.info("config:\n%s", format_config(cfg))
    data = _train_data(args, need_pairs=False)
    model = _init_model(args)
    negatives = None
    if args.negatives:
        _log_inputs([args.negatives])
        negatives = load_negatives(args.negatives)
        missing = [q.id for q in data.train_queries if q.id not in negatives]
        if missing:
            raise DataError(f"no mined negatives for {len(missing)} training queries (e.g. {missing[0]})")
    res = train(model, data, cfg, negatives, log_path=_out(args.log) if args.log else None)
    _save_model(args.out, model)
    logger.info("finetuning (%s): best dev MRR@10 %.4f at step %d of %d -> %s", cfg.stage, res.best_metric,
                res.best_step, res.steps, args.out)


def cmd_mine_negatives(args) -> None:
    model = _init_model(args)
    corpus_p, qrels_p = _path(args, "corpus"), _path(args, "qrels")
    queries_p = args.queries or _path(args, "train_queries")
    _log_inputs([corpus_p, qrels_p, queries_p])
    negs = mine_hard_negatives(model, load_queries(queries_p), load_corpus(corpus_p), load_qrels(qrels_p),
                               args.top_k, args.per_modality, args.seed, args.fusion, _ablation(args), args.mode)
    save_negatives(_out(args.out), negs)
    n_fb = sum(bool(a.fallback) for a in negs.values())
    logger.info("mined negatives for %d queries (%d used corpus-wide fallback) -> %s", len(negs), n_fb, args.out)


def cmd_encode(args) -> None:
    model = _init_model(args)
    if bool(args.corpus) == bool(args.queries):
        raise UsageError("encode needs exactly one of --corpus or --queries")
    src = args.corpus or args.queries
    _log_inputs([src])
    items = sorted(load_corpus(src).values(), key=lambda d: d.id) if args.corpus else load_queries(src)
    emb = model.encode_numpy(items, args.fusion, _ablation(args))
    save_embeddings(args.out, [it.id for it in items], emb)
    logger.info("encoded %d items -> %s", len(items), args.out)


def cmd_index(args) -> None:
    _log_inputs([args.embeddings])
    index = build_index(load_embeddings(args.embeddings))
    save_embeddings(args.out, index.ids, index.matrix, digits=17)
    logger.info("index of %d documents -> %s", len(index), args.out)


def load_index(path) -> FlatIndex:
    return build_index(load_embeddings(path))


def cmd_search(args) -> None:
    _log_inputs([args.index, args.queries, args.query_embeddings])
    index = load_index(args.index)
    if args.query_embeddings:
        qemb = load_embeddings(args.query_embeddings)
    else:
        if not args.queries:
            raise UsageError("search needs --queries (with --checkpoint) or --query-embeddings")
        model = _init_model(args)
        queries = load_queries(args.queries)
        emb = model.encode_numpy(queries, args.fusion)
        qemb = {q.id: emb[i] for i, q in enumerate(queries)}
    results = {qid: search(index, v, args.k) for qid, v in qemb.items()}
    write_run(_out(args.out), results, args.tag)
    logger.info("searched %d queries over %d documents -> %s", len(results), len(index), args.out)


def cmd_eval(args) -> None:
    _log_inputs(args.run + [args.qrels])
    qrels = load_qrels(args.qrels)
    names, reports = [], []
    text = ""
    for path in args.run:
        rep = evaluate_run(read_run(path), qrels)
        names.append(Path(path).name)
        reports.append(rep)
        text += format_report(Path(path).name, rep, args.format)
    if len(reports) > 1:
        text += significance_matrix(names, reports, "mrr10", args.iterations, args.seed, args.format)
    _write(args.out, text)


def _image_docs(args) -> list:
    corpus_p = _path(args, "corpus")
    _log_inputs([corpus_p])
    corpus = load_corpus(corpus_p)
    docs = [corpus[d] for d in sorted(corpus) if corpus[d].modality == IMAGE]
    if args.docs:
        wanted = args.docs.split(",")
        unknown = [d for d in wanted if d not in corpus or corpus[d].modality != IMAGE]
        if unknown:
            raise DataError(f"not image documents of the corpus: {', '.join(unknown)}")
        docs = [corpus[d] for d in wanted]
    return docs[: args.limit] if args.limit else docs


def cmd_verbalize(args) -> None:
    model = _init_model(args)
    docs = _image_docs(args)
    results = [analysis.verbalize(d, model, args.k) for d in docs]
    _write(args.out, analysis.format_verbalization(results, {d.id: d.text for d in docs}, args.format,
                                                   args.positions))


def cmd_attn_stats(args) -> None:
    model = _init_model(args)
    stats = analysis.attention_stats(_image_docs(args), model, _ablation(args))
    _write(args.out, analysis.format_attention(stats, args.format))


def cmd_replace_study(args) -> None:
    model = _init_model(args)
    corpus_p, qrels_p = _path(args, "corpus"), _path(args, "qrels")
    queries_p = args.queries or _path(args, "dev_queries")
    _log_inputs([corpus_p, qrels_p, queries_p])
    study = analysis.replacement_study(model, load_queries(queries_p), load_corpus(corpus_p), load_qrels(qrels_p),
                                       args.seed)
    _write(args.out, analysis.format_replacement(study, args.format))


def cmd_ablate(args) -> None:
    schedule = desk_schedule(pretrain=not args.no_clip_pretrain)
    if args.config:
        _log_inputs([args.config])
        schedule = Schedule(load_config(args.config, schedule.dpr),
                            load_config(args.config, schedule.ance) if schedule.ance else None,
                            schedule.pretrain)
    if args.paper_faithful:
        schedule = Schedule(paper_faithful(schedule.dpr),
                            paper_faithful(schedule.ance) if schedule.ance else None, schedule.pretrain)
    steps = {"dpr": args.dpr_steps, "ance": args.ance_steps, "pretrain": args.pretrain_steps}
    schedule = Schedule(*(dataclasses.replace(getattr(schedule, k), max_steps=v) if v is not None and
                          getattr(schedule, k) is not None else getattr(schedule, k)
                          for k, v in steps.items()))
    if args.ance_steps == 0:
        schedule.ance = None
    for phase in (schedule.pretrain, schedule.dpr, schedule.ance):
        if phase is not None:
            logger.info("schedule %s/%s:\n%s", phase.phase, phase.stage, format_config(phase))
    data = _train_data(args, need_pairs=False)
    vocab_p = _path(args, "vocab")
    _log_inputs([vocab_p])
    base = {}
    if args.fusion != "plugin":
        base["fusion"] = args.fusion
    harness = Harness(data, Vocab.load(vocab_p), schedule, base=base)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    grids = list(GRIDS) if args.grid == "all" else [args.grid]
    text = ""
    for g in grids:
        table = harness.run_grid(g, seeds)
        text += format_table(table, args.format)
        if g == "caption" and args.format == "text":
            ok = degrades_on_every_seed(table, "w/o caption", "full")
            text += f"w/o caption below full on image MRR@10 for every seed: {'yes' if ok else 'no'}\n"
        text += "\n" if args.format == "text" else ""
    _write(args.out, text)


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    data = _Parser(add_help=False)
    data.add_argument("--data", help="directory holding the default-named data files")
    data.add_argument("--corpus")
    data.add_argument("--train-queries", dest="train_queries")
    data.add_argument("--dev-queries", dest="dev_queries")
    data.add_argument("--qrels")
    data.add_argument("--pairs")
    data.add_argument("--dev-pairs", dest="dev_pairs")
    data.add_argument("--vocab")

    model = _Parser(add_help=False)
    model.add_argument("--checkpoint")
    model.add_argument("--fusion", choices=FUSIONS, default="plugin")
    model.add_argument("--no-caption", action="store_true")
    model.add_argument("--no-feature", action="store_true")
    model.add_argument("--no-prompt", action="store_true")

    fmt = _Parser(add_help=False)
    fmt.add_argument("--format", choices=("text", "tsv"), default="text")
    fmt.add_argument("--out")

    training = _Parser(add_help=False)
    training.add_argument("--config")
    training.add_argument("--paper-faithful", action="store_true")
    training.add_argument("--no-clip-pretrain", action="store_true")
    training.add_argument("--lr", type=float)
    training.add_argument("--tau", type=float)
    training.add_argument("--batch-size", type=int, dest="batch_size")
    training.add_argument("--max-steps", type=int, dest="max_steps")
    training.add_argument("--eval-every", type=int, dest="eval_every")
    training.add_argument("--early-stop", type=int, dest="early_stop")
    training.add_argument("--log", help="JSON-lines dev metrics log")

    parser = _Parser(prog="marvel", description="Multi-modal dense retrieval with a visual plugin.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("build-vocab", parents=[common], help="build a vocabulary from corpus/query/pair files")
    p.add_argument("--corpus", action="append")
    p.add_argument("--queries", action="append")
    p.add_argument("--pairs", action="append")
    p.add_argument("--min-count", type=int, default=1, dest="min_count")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the seeded synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-queries", type=int, default=96, dest="n_queries")
    p.add_argument("--dev", type=int, default=32)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--text-docs", type=int, default=128, dest="text_docs")
    p.add_argument("--image-docs", type=int, default=128, dest="image_docs")
    p.add_argument("--vocab-size", type=int, default=160, dest="vocab_size")
    p.add_argument("--topics", type=int, default=16)
    p.add_argument("--query-words", type=int, default=4, dest="query_words")
    p.add_argument("--pairs", type=int, default=256)
    p.add_argument("--dev-pairs", type=int, default=32, dest="dev_pairs")
    p.add_argument("--image-size", type=int, default=28, dest="image_size")
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("build-dataset", parents=[common], help="mine queries and documents from HTML pages")
    p.add_argument("--input", required=True, help="directory of .html files or a WARC-like text file")
    p.add_argument("--out", required=True)
    p.add_argument("--scores", help="alignment scores TSV (candidate id or url, cosine)")
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--alt-min", type=int, default=5, dest="alt_min")
    p.add_argument("--alt-min-unit", choices=("chars", "words"), default="chars", dest="alt_min_unit")
    p.add_argument("--relevance-cutoff", type=int, default=10, dest="relevance_cutoff")
    p.add_argument("--no-relevance-filter", action="store_true", dest="no_relevance_filter")
    p.add_argument("--checkpoint", help="score relevance with this model instead of word overlap")
    p.add_argument("--dev", type=int, default=0)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--image-size", type=int, default=28, dest="image_size")

    p = sub.add_parser("pretrain", parents=[common, data, training], help="image-caption contrastive pretraining")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", parents=[common, data, model, training], help="query-document training")
    p.add_argument("--stage", choices=("dpr", "ance"))
    p.add_argument("--negatives", help="mined negatives JSONL (ance stage)")
    p.add_argument("--hard-neg-top-k", type=int, dest="hard_neg_top_k")
    p.add_argument("--per-modality", type=int, dest="per_modality")
    p.add_argument("--negative-mode", choices=("balanced", "text_only", "image_only"), dest="negative_mode")
    p.add_argument("--freeze", choices=("both", "lm", "vision", "none"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("mine-negatives", parents=[common, data, model], help="mine hard negatives")
    p.add_argument("--queries")
    p.add_argument("--top-k", type=int, default=100, dest="top_k")
    p.add_argument("--per-modality", type=int, default=1, dest="per_modality")
    p.add_argument("--mode", choices=("balanced", "text_only", "image_only"), default="balanced")
    p.add_argument("--out", required=True)

    p = sub.add_parser("encode", parents=[common, model], help="embed a corpus or a query set")
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)

    p = sub.add_parser("index", parents=[common], help="build a flat index from document embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("search", parents=[common, model], help="exact top-k search, written as a run file")
    p.add_argument("--index", required=True)
    p.add_argument("--queries")
    p.add_argument("--query-embeddings", dest="query_embeddings")
    p.add_argument("--vocab")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--tag", default="marvel")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common, fmt], help="score run files against qrels")
    p.add_argument("--run", action="append", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--iterations", type=int, default=10000)

    for name, helptext in (("verbalize", "nearest tokens of projected image features"),
                           ("attn-stats", "decoder cross-attention mass and entropy")):
        p = sub.add_parser(name, parents=[common, data, model, fmt], help=helptext)
        p.add_argument("--docs", help="comma-separated image document ids")
        p.add_argument("--limit", type=int)
        if name == "verbalize":
            p.add_argument("--k", type=int, default=10)
            p.add_argument("--positions", action="store_true", help="also list every feature position")

    p = sub.add_parser("replace-study", parents=[common, data, model, fmt],
                       help="retrieval with image features replaced by token embeddings")
    p.add_argument("--queries")

    p = sub.add_parser("ablate", parents=[common, data, fmt], help="fusion, caption and freeze ablation grids")
    p.add_argument("--grid", choices=(*GRIDS, "all"), required=True)
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p.add_argument("--fusion", choices=FUSIONS, default="plugin")
    p.add_argument("--config", help="overrides for both finetuning stages")
    p.add_argument("--paper-faithful", action="store_true")
    p.add_argument("--no-clip-pretrain", action="store_true")
    p.add_argument("--dpr-steps", type=int, dest="dpr_steps")
    p.add_argument("--ance-steps", type=int, dest="ance_steps")
    p.add_argument("--pretrain-steps", type=int, dest="pretrain_steps")
    parser.commands = sub.choices
    return parser


HANDLERS = {
    "build-vocab": cmd_build_vocab,
    "gen-data": cmd_gen_data,
    "build-dataset": cmd_build_dataset,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "mine-negatives": cmd_mine_negatives,
    "encode": cmd_encode,
    "index": cmd_index,
    "search": cmd_search,
    "eval": cmd_eval,
    "verbalize": cmd_verbalize,
    "attn-stats": cmd_attn_stats,
    "replace-study": cmd_replace_study,
    "ablate": cmd_ablate,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip() + f"\ncommands: {', '.join(COMMANDS)}")
        if extra:
            # report against the subcommand so the valid-flag list is the useful one
            parser.commands[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
        logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                            force=True)
        set_precision(args.precision)
        logger.info("%s seed=%d precision=%s argv=%s", args.command, args.seed, args.precision,
                    " ".join(argv if argv is not None else sys.argv[1:]))
        start = time.perf_counter()
        HANDLERS[args.command](args)
        logger.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
        return 0
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, ConfigError, CheckpointError, RunFormatError, ImageFormatError, ContractError,
            FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        set_precision("f32")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
