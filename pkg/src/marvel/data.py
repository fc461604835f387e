"""Queries, documents and the corpus / queries / qrels / pair file formats."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from marvel.vision import GridImage, read_image

TEXT, IMAGE = "text", "image"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Query:
    id: str
    text: str


@dataclass(eq=False)
class Document:
    id: str
    modality: str
    text: str
    image: GridImage | None = None
    image_path: str | None = None

    def __post_init__(self):
        if self.modality not in (TEXT, IMAGE):
            raise DataError(f"document {self.id}: unknown modality {self.modality!r}")
        if (self.modality == IMAGE) != (self.image is not None):
            raise DataError(f"document {self.id}: image must be present iff modality is image")


@dataclass(frozen=True)
class PretrainPair:
    id: str
    image: GridImage
    caption: str
    image_path: str | None = None


Qrels = dict  # qid -> {docid: rel}


def _read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc.msg}") from exc
    return out


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n"


def load_corpus(path) -> dict[str, Document]:
    """Corpus JSONL: {id, modality, text, image_path?}; image paths are relative to the file."""
    base = Path(path).parent
    corpus: dict[str, Document] = {}
    for rec in _read_jsonl(path):
        try:
            did, modality, text = str(rec["id"]), rec["modality"], rec["text"]
        except KeyError as exc:
            raise DataError(f"{path}: record missing field {exc}") from exc
        if did in corpus:
            raise DataError(f"{path}: duplicate document id {did}")
        image = None
        if rec.get("image_path"):
            image = read_image(base / rec["image_path"])
        corpus[did] = Document(did, modality, text, image, rec.get("image_path"))
    return corpus


def save_corpus(path, docs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in sorted(docs, key=lambda d: d.id):
            rec = {"id": d.id, "modality": d.modality, "text": d.text}
            if d.image_path:
                rec["image_path"] = d.image_path
            fh.write(_dump(rec))


def load_queries(path) -> list[Query]:
    out = []
    seen = set()
    for rec in _read_jsonl(path):
        q = Query(str(rec["id"]), rec["text"])
        if q.id in seen:
            raise DataError(f"{path}: duplicate query id {q.id}")
        seen.add(q.id)
        out.append(q)
    return out


def save_queries(path, queries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(_dump({"id": q.id, "text": q.text}))


def load_qrels(path) -> Qrels:
    """TREC qrels: ``qid 0 docid rel`` per line."""
    qrels: Qrels = defaultdict(dict)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 'qid 0 docid rel'")
            qid, _, did, rel = parts
            try:
                rel_i = int(rel)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: relevance {rel!r} is not an integer") from exc
            if rel_i not in (0, 1):
                raise DataError(f"{path}:{lineno}: relevance must be 0 or 1")
            qrels[qid][did] = rel_i
    return dict(qrels)


def save_qrels(path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for did in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {did} {qrels[qid][did]}\n")


def relevant(qrels: Qrels, qid: str) -> list[str]:
    return sorted(d for d, r in qrels.get(qid, {}).items() if r > 0)


def load_pairs(path) -> list[PretrainPair]:
    """Image-caption pairs JSONL: {id, image_path, caption}."""
    base = Path(path).parent
    return [PretrainPair(str(r["id"]), read_image(base / r["image_path"]), r["caption"], r["image_path"])
            for r in _read_jsonl(path)]


def save_pairs(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(_dump({"id": p.id, "image_path": p.image_path, "caption": p.caption}))
