"""Exact flat cosine-similarity index and TREC run files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from marvel.autodiff import NumericError


class RunFormatError(ValueError):
    pass


@dataclass
class FlatIndex:
    ids: list[str]
    matrix: np.ndarray  # [N, d], unit rows, ascending doc id order

    def __len__(self) -> int:
        return len(self.ids)


def _normalize_rows(x: np.ndarray, names) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    bad = np.flatnonzero((norms[..., 0] == 0) | ~np.isfinite(norms[..., 0]))
    if bad.size:
        raise NumericError(f"zero-norm or non-finite embedding for {names[bad[0]]}")
    return x / norms


def build_index(embeddings: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> FlatIndex:
    """Normalise and store embeddings sorted by doc id."""
    items = list(embeddings.items()) if isinstance(embeddings, Mapping) else list(embeddings)
    seen: set[str] = set()
    for did, _ in items:
        if did in seen:
            raise ValueError(f"duplicate document id {did!r}")
        seen.add(did)
    items.sort(key=lambda kv: kv[0])
    if not items:
        return FlatIndex([], np.zeros((0, 0)))
    dims = {np.shape(v) for _, v in items}
    if len(dims) != 1:
        raise ValueError(f"embeddings have mixed shapes {sorted(dims)}")
    ids = [k for k, _ in items]
    mat = np.stack([np.asarray(v, dtype=np.float64) for _, v in items])
    return FlatIndex(ids, _normalize_rows(mat, ids))


def search(index: FlatIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by cosine; ties go to the smaller doc id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not index.ids:
        return []
    q = _normalize_rows(np.asarray(query, dtype=np.float64)[None, :], ["query"])[0]
    scores = index.matrix @ q
    # rows are in ascending id order, so a stable sort on -score breaks ties by id
    order = np.argsort(-scores, kind="stable")[:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def search_many(index: FlatIndex, queries: Mapping[str, np.ndarray], k: int) -> dict[str, list[tuple[str, float]]]:
    return {qid: search(index, q, k) for qid, q in queries.items()}


class RunRecord(NamedTuple):
    qid: str
    docid: str
    rank: int
    score: float
    tag: str


def to_run(results: Mapping[str, list[tuple[str, float]]], tag: str) -> list[RunRecord]:
    """Ranked results -> run records with scores rounded as they will be written."""
    out = []
    for qid in sorted(results):
        for rank, (did, sc) in enumerate(results[qid], 1):
            out.append(RunRecord(qid, did, rank, round(float(sc), 6), tag))
    return out


def write_run(path, results: Mapping[str, list[tuple[str, float]]], tag: str = "marvel") -> list[RunRecord]:
    """Write ``qid Q0 docid rank score tag`` lines; returns the records as written."""
    if any(c.isspace() for c in tag) or not tag:
        raise ValueError("run tag must be a non-empty token without whitespace")
    records = to_run(results, tag)
    lines = [f"# run tag={tag}\n"]
    lines += [f"{r.qid} Q0 {r.docid} {r.rank} {r.score:.6f} {r.tag}\n" for r in records]
    Path(path).write_text("".join(lines), encoding="utf-8")
    return records


def read_run(path) -> list[RunRecord]:
    records = []
    last: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 6 or parts[1] != "Q0":
                raise RunFormatError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag'")
            qid, _, did, rank, sc, tag = parts
            try:
                rank_i, score = int(rank), float(sc)
            except ValueError as exc:
                raise RunFormatError(f"{path}:{lineno}: bad rank or score") from exc
            if rank_i != last.get(qid, 0) + 1:
                raise RunFormatError(f"{path}:{lineno}: rank {rank_i} for {qid} is not contiguous")
            last[qid] = rank_i
            records.append(RunRecord(qid, did, rank_i, score, tag))
    return records


def run_to_rankings(records: Iterable[RunRecord]) -> dict[str, list[str]]:
    out: dict[str, list[tuple[int, str]]] = {}
    for r in records:
        out.setdefault(r.qid, []).append((r.rank, r.docid))
    return {q: [d for _, d in sorted(v)] for q, v in out.items()}
