"""MRR@10, NDCG@10, Recall@100 with binary relevance, plus a paired permutation test."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from marvel.index import RunRecord, run_to_rankings

logger = logging.getLogger(__name__)


@dataclass
class MetricReport:
    metric: str
    per_query: dict[str, float]
    excluded: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        if not self.per_query:
            return 0.0
        return math.fsum(self.per_query.values()) / len(self.per_query)

    @property
    def n(self) -> int:
        return len(self.per_query)


def _rankings(run) -> dict[str, list[str]]:
    if isinstance(run, Mapping):
        return {q: [d if isinstance(d, str) else d[0] for d in docs] for q, docs in run.items()}
    return run_to_rankings(run)


def _judged(rankings, qrels, metric):
    """Yield (qid, ranked docs, relevant set), skipping queries without judgments."""
    excluded = []
    out = []
    for qid in sorted(rankings):
        rel = {d for d, r in qrels.get(qid, {}).items() if r > 0}
        if not rel:
            excluded.append(qid)
            continue
        out.append((qid, rankings[qid], rel))
    if excluded:
        logger.warning("%s: %d queries without relevant judgments excluded", metric, len(excluded))
    return out, excluded


def mrr_at_k(run, qrels, k: int = 10) -> MetricReport:
    rankings = _rankings(run)
    scored, excluded = _judged(rankings, qrels, f"MRR@{k}")
    per = {}
    for qid, docs, rel in scored:
        per[qid] = next((1.0 / r for r, d in enumerate(docs[:k], 1) if d in rel), 0.0)
    return MetricReport(f"MRR@{k}", per, excluded)


def ndcg_at_k(run, qrels, k: int = 10) -> MetricReport:
    rankings = _rankings(run)
    scored, excluded = _judged(rankings, qrels, f"NDCG@{k}")
    per = {}
    for qid, docs, rel in scored:
        dcg = math.fsum(1.0 / math.log2(r + 1) for r, d in enumerate(docs[:k], 1) if d in rel)
        idcg = math.fsum(1.0 / math.log2(r + 1) for r in range(1, min(len(rel), k) + 1))
        per[qid] = dcg / idcg
    return MetricReport(f"NDCG@{k}", per, excluded)


def recall_at_k(run, qrels, k: int = 100) -> MetricReport:
    rankings = _rankings(run)
    scored, excluded = _judged(rankings, qrels, f"Recall@{k}")
    per = {qid: len(rel & set(docs[:k])) / len(rel) for qid, docs, rel in scored}
    return MetricReport(f"Recall@{k}", per, excluded)


def evaluate_run(run, qrels) -> dict[str, MetricReport]:
    return {
        "mrr10": mrr_at_k(run, qrels, 10),
        "ndcg10": ndcg_at_k(run, qrels, 10),
        "recall100": recall_at_k(run, qrels, 100),
    }


def permutation_test(a: Sequence[float], b: Sequence[float], iterations: int = 10000, seed: int = 42) -> float:
    """Two-sided paired sign-flip permutation test on the mean difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    if a.size == 0:
        return 1.0
    diff = a - b
    observed = abs(diff.mean())
    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(iterations, diff.size))
    perm = np.abs(signs @ diff / diff.size)
    # tolerance keeps exact ties (e.g. all-zero differences) counted despite rounding
    count = int(np.sum(perm >= observed - 1e-12))
    return (count + 1) / (iterations + 1)


def paired_values(ra: MetricReport, rb: MetricReport) -> tuple[list[float], list[float]]:
    qids = sorted(set(ra.per_query) & set(rb.per_query))
    return [ra.per_query[q] for q in qids], [rb.per_query[q] for q in qids]


def format_report(name: str, reports: dict[str, MetricReport], fmt: str = "text") -> str:
    keys = ("mrr10", "ndcg10", "recall100")
    n = reports["mrr10"].n
    if fmt == "tsv":
        return "".join(f"{name}\t{reports[k].metric}\t{reports[k].mean:.6f}\t{n}\n" for k in keys)
    lines = [f"== {name} ({n} queries) =="]
    lines += [f"{reports[k].metric:<11}{reports[k].mean:.4f}" for k in keys]
    return "\n".join(lines) + "\n"


def significance_matrix(names: list[str], reports: list[dict[str, MetricReport]], metric: str = "mrr10",
                        iterations: int = 10000, seed: int = 42, fmt: str = "text") -> str:
    rows = []
    for i, ri in enumerate(reports):
        row = []
        for j, rj in enumerate(reports):
            if i == j:
                row.append(None)
                continue
            a, b = paired_values(ri[metric], rj[metric])
            row.append(permutation_test(a, b, iterations, seed))
        rows.append(row)
    if fmt == "tsv":
        out = ["run\t" + "\t".join(names) + "\n"]
        for name, row in zip(names, rows):
            out.append(name + "\t" + "\t".join("-" if p is None else f"{p:.4f}" for p in row) + "\n")
        return "".join(out)
    width = max(len(n) for n in names) + 2
    out = [f"permutation test p-values ({metric}, {iterations} iterations)\n"]
    out.append(" " * width + "".join(f"{n:>{width}}" for n in names) + "\n")
    for name, row in zip(names, rows):
        cells = "".join(f"{'-' if p is None else f'{p:.4f}':>{width}}" for p in row)
        out.append(f"{name:<{width}}{cells}\n")
    return "".join(out)


__all__ = [
    "MetricReport",
    "RunRecord",
    "evaluate_run",
    "format_report",
    "mrr_at_k",
    "ndcg_at_k",
    "permutation_test",
    "recall_at_k",
    "significance_matrix",
]
