"""Encode a corpus with a model, search it, and score the run."""

from __future__ import annotations

import numpy as np

from marvel.data import Document, Query, Qrels, relevant
from marvel.encoder import NO_ABLATION, Ablation, MarvelModel
from marvel.index import FlatIndex, build_index, search
from marvel.metrics import MetricReport, evaluate_run


def encode_corpus(model: MarvelModel, docs: list[Document], fusion: str = "plugin",
                  ablation: Ablation = NO_ABLATION, overrides: dict | None = None) -> dict[str, np.ndarray]:
    docs = sorted(docs, key=lambda d: d.id)
    emb = model.encode_numpy(docs, fusion, ablation, overrides=overrides)
    return {d.id: emb[i] for i, d in enumerate(docs)}


def index_corpus(model: MarvelModel, docs, fusion="plugin", ablation=NO_ABLATION, overrides=None) -> FlatIndex:
    return build_index(encode_corpus(model, list(docs), fusion, ablation, overrides))


def retrieve(model: MarvelModel, queries: list[Query], index: FlatIndex, k: int = 100,
             fusion: str = "plugin") -> dict[str, list[tuple[str, float]]]:
    emb = model.encode_numpy(queries, fusion)
    return {q.id: search(index, emb[i], k) for i, q in enumerate(queries)}


def evaluate_model(model: MarvelModel, queries: list[Query], docs, qrels: Qrels, fusion: str = "plugin",
                   ablation: Ablation = NO_ABLATION, index: FlatIndex | None = None,
                   overrides: dict | None = None) -> dict[str, MetricReport]:
    if index is None:
        index = index_corpus(model, docs, fusion, ablation, overrides)
    results = retrieve(model, queries, index, 100, fusion)
    return evaluate_run(results, qrels)


def modality_split(queries: list[Query], corpus: dict[str, Document], qrels: Qrels) -> dict[str, list[Query]]:
    """Queries grouped by the modality of their (first) relevant document."""
    out: dict[str, list[Query]] = {"text": [], "image": []}
    for q in queries:
        rel = [d for d in relevant(qrels, q.id) if d in corpus]
        if rel:
            out[corpus[rel[0]].modality].append(q)
    return out


def evaluate_by_modality(model: MarvelModel, queries: list[Query], corpus: dict[str, Document], qrels: Qrels,
                         fusion: str = "plugin", ablation: Ablation = NO_ABLATION,
                         overrides: dict | None = None) -> dict[str, dict[str, MetricReport]]:
    """Text/Image: single-modality collections and their queries. Multi: everything."""
    docs = list(corpus.values())
    full = index_corpus(model, docs, fusion, ablation, overrides)
    out = {}
    groups = modality_split(queries, corpus, qrels)
    for modality, qs in (("Text", groups["text"]), ("Image", groups["image"])):
        sub_ids = {d.id for d in docs if d.modality == modality.lower()}
        rows = [i for i, did in enumerate(full.ids) if did in sub_ids]
        sub = FlatIndex([full.ids[i] for i in rows], full.matrix[rows])
        out[modality] = evaluate_model(model, qs, None, qrels, fusion, ablation, index=sub)
    out["Multi"] = evaluate_model(model, queries, None, qrels, fusion, ablation, index=full)
    return out


def routing_accuracy(model: MarvelModel, queries: list[Query], corpus: dict[str, Document], qrels: Qrels,
                     fusion: str = "plugin", index: FlatIndex | None = None) -> float:
    """Fraction of queries whose top-1 result has the modality of their relevant document."""
    if index is None:
        index = index_corpus(model, corpus.values(), fusion)
    results = retrieve(model, queries, index, 1, fusion)
    hits = total = 0
    for q in queries:
        rel = [d for d in relevant(qrels, q.id) if d in corpus]
        if not rel or not results[q.id]:
            continue
        total += 1
        hits += corpus[results[q.id][0][0]].modality == corpus[rel[0]].modality
    return hits / total if total else 0.0
