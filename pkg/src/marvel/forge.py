"""
Dataset construction: anchor/image mining from HTML, the image filter chain,
caption alignment and anchor relevance filters, seeded splits, and the
synthetic multi-modal corpus used for desk-scale experiments.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path, PurePosixPath
from typing import Callable, Iterable
from urllib.parse import urlsplit

import numpy as np

from marvel.data import IMAGE, TEXT, Document, PretrainPair, Qrels, Query
from marvel.index import build_index, search
from marvel.text import split_words
from marvel.vision import GridImage

IMAGE_EXTENSIONS = ("jpg", "png", "jpeg")
URL_KEYWORDS = ("logo", "button", "icon", "plugin", "widget")
NO_ALT_MARKER = "no alt attribute"

# -- HTML mining --------------------------------------------------------------------


@dataclass(frozen=True)
class AnchorPair:
    text: str
    target: str
    source: str = ""


@dataclass(frozen=True)
class ImageCandidate:
    url: str
    alt: str
    page_id: str = ""
    index: int = 0
    missing_alt: bool = False

    @property
    def id(self) -> str:
        return f"{self.page_id}#{self.index}"


@dataclass(frozen=True)
class FilterDecision:
    candidate_id: str
    verdict: str   # keep | reject
    rule: str      # first failing rule, or "pass"


def _collapse(text: str) -> str:
    return " ".join(text.split())


def page_id_from_href(href: str) -> str:
    """Last path segment without query, fragment or .html/.htm suffix."""
    path = urlsplit(href.strip()).path.rstrip("/")
    name = PurePosixPath(path).name if path else ""
    for suffix in (".html", ".htm"):
        if name.lower().endswith(suffix):
            name = name[: -len(suffix)]
    return name


class _PageParser(HTMLParser):
    """Tolerant single-pass scan for anchors, images and visible text."""

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.anchors: list[tuple[str, str]] = []
        self.images: list[tuple[str, str | None]] = []
        self.text: list[str] = []
        self.skipped = 0
        self._href: str | None = None
        self._buf: list[str] = []
        self._in_anchor = False
        self._hidden = 0

    def _close_anchor(self):
        if not self._in_anchor:
            return
        text = _collapse("".join(self._buf))
        if self._href is None or not self._href.strip() or not text:
            self.skipped += 1
        else:
            self.anchors.append((text, self._href))
        self._in_anchor = False
        self._href = None
        self._buf = []

    def handle_starttag(self, tag, attrs):
        a = dict(attrs)
        if tag == "a":
            self._close_anchor()   # an unclosed <a> ends where the next one begins
            self._in_anchor = True
            self._href = a.get("href")
        elif tag == "img":
            self.images.append((a.get("src") or "", a.get("alt")))
        elif tag in ("script", "style"):
            self._hidden += 1

    def handle_startendtag(self, tag, attrs):
        self.handle_starttag(tag, attrs)
        if tag in ("script", "style"):
            self._hidden -= 1

    def handle_endtag(self, tag):
        if tag == "a":
            self._close_anchor()
        elif tag in ("script", "style") and self._hidden:
            self._hidden -= 1

    def handle_data(self, data):
        if self._hidden:
            return
        if self._in_anchor:
            self._buf.append(data)
        self.text.append(data)

    def close(self):
        super().close()
        self._close_anchor()


def _parse(html: str) -> _PageParser:
    p = _PageParser()
    p.feed(html)
    p.close()
    return p


def extract_anchors(html: str, source: str = "", stats: dict | None = None) -> list[AnchorPair]:
    """One pair per anchor with non-empty text; inline markup stripped, whitespace collapsed."""
    p = _parse(html)
    if stats is not None:
        stats["skipped_anchors"] = stats.get("skipped_anchors", 0) + p.skipped
    return [AnchorPair(text, page_id_from_href(href), source) for text, href in p.anchors]


def extract_images(html: str, page_id: str = "") -> list[ImageCandidate]:
    """One candidate per <img>, in document order; a missing alt is flagged."""
    return [ImageCandidate(src, "" if alt is None else _collapse(alt), page_id, i, alt is None)
            for i, (src, alt) in enumerate(_parse(html).images)]


def page_text(html: str) -> str:
    return _collapse(" ".join(_parse(html).text))


def url_extension(url: str) -> str:
    path = urlsplit(url).path
    name = PurePosixPath(path).name
    return name.rsplit(".", 1)[1].lower() if "." in name else ""


def check_image(c: ImageCandidate, alt_min: int = 5, alt_unit: str = "chars") -> str:
    """Name of the first failing rule, or "pass"."""
    if url_extension(c.url) not in IMAGE_EXTENSIONS:
        return "extension"
    low = c.url.lower()
    if any(k in low for k in URL_KEYWORDS):
        return "keyword"
    alt = c.alt.strip()
    if not alt:
        return "empty-alt"
    if alt.lower() == NO_ALT_MARKER:
        return "no-alt-attribute"
    size = len(alt.split()) if alt_unit == "words" else len(alt)
    if size < alt_min:
        return "short-alt"
    return "pass"


def filter_images(candidates: Iterable[ImageCandidate], alt_min: int = 5, alt_unit: str = "chars"
                  ) -> tuple[list[ImageCandidate], list[FilterDecision]]:
    if alt_unit not in ("chars", "words"):
        raise ValueError(f"alt unit must be chars or words, got {alt_unit!r}")
    kept, decisions = [], []
    for c in candidates:
        rule = check_image(c, alt_min, alt_unit)
        decisions.append(FilterDecision(c.id, "keep" if rule == "pass" else "reject", rule))
        if rule == "pass":
            kept.append(c)
    return kept, decisions


def filter_by_alignment(pairs: Iterable, scorer: Callable[[object], float], threshold: float = 0.3) -> list:
    """Keep pairs whose image-caption cosine is not lower than ``threshold``."""
    kept = []
    for pair in pairs:
        s = float(scorer(pair))
        if not -1.0 <= s <= 1.0:
            raise ValueError(f"alignment score {s} outside [-1, 1]")
        if s >= threshold:
            kept.append(pair)
    return kept


class BagOfWordsEncoder:
    """Term-count vectors over a fixed word list; a lexical stand-in scorer."""

    def __init__(self, texts: Iterable[str]):
        words = sorted({w for t in texts for w in split_words(t)})
        self.index = {w: i for i, w in enumerate(words)}

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), max(len(self.index), 1)))
        for i, t in enumerate(texts):
            for w in split_words(t):
                if w in self.index:
                    out[i, self.index[w]] += 1
        return out


class ModelTextEncoder:
    """Adapter: encode plain texts (queries, captions) with a MarvelModel."""

    def __init__(self, model):
        self.model = model

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        return self.model.encode_numpy([Query(f"t{i}", t) for i, t in enumerate(texts)])


def relevance_filter(queries: list[tuple[str, str, str]], image_docs: dict[str, str], encoder,
                     cutoff: int = 10) -> list[str]:
    """Keep query ids whose paired image document ranks within ``cutoff``.

    ``queries`` are (qid, text, paired doc id); ``image_docs`` maps doc id -> caption.
    """
    for qid, _, did in queries:
        if did not in image_docs:
            raise ValueError(f"query {qid}: paired document {did} is not in the image corpus")
    ids = sorted(image_docs)
    doc_vecs = encoder.encode_texts([image_docs[d] for d in ids])
    index = build_index({d: doc_vecs[i] for i, d in enumerate(ids)})
    q_vecs = encoder.encode_texts([t for _, t, _ in queries])
    kept = []
    for (qid, _, did), vec in zip(queries, q_vecs):
        if not np.any(vec):
            continue
        ranked = [d for d, _ in search(index, vec, min(cutoff, len(ids)))]
        if did in ranked:
            kept.append(qid)
    return kept


def split(ids: list[str], dev_n: int, test_n: int, seed: int = 42) -> dict[str, list[str]]:
    """Seeded disjoint dev/test samples; the remainder (original order) is train."""
    if dev_n < 0 or test_n < 0 or dev_n + test_n >= len(ids):
        raise ValueError(f"cannot take {dev_n} dev + {test_n} test from {len(ids)} items")
    perm = np.random.default_rng(seed).permutation(len(ids))
    dev = sorted(perm[:dev_n].tolist())
    test = sorted(perm[dev_n:dev_n + test_n].tolist())
    taken = set(dev) | set(test)
    return {"train": [x for i, x in enumerate(ids) if i not in taken],
            "dev": [ids[i] for i in dev], "test": [ids[i] for i in test]}


_PAGE_SEP = re.compile(r"^WARC-Target-ID:\s*(\S+)\s*$", re.MULTILINE)


def read_pages(path) -> dict[str, str]:
    """Pages by id from a directory of .html files or a concatenated WARC-like file.

    In the single-file form each page starts with a ``WARC-Target-ID: <id>`` line.
    """
    path = Path(path)
    if path.is_dir():
        return {f.stem: f.read_text(encoding="utf-8", errors="replace")
                for f in sorted(path.glob("*.htm*"))}
    text = path.read_text(encoding="utf-8", errors="replace")
    marks = list(_PAGE_SEP.finditer(text))
    pages = {}
    for m, nxt in itertools.zip_longest(marks, marks[1:]):
        end = nxt.start() if nxt else len(text)
        pages[m.group(1)] = text[m.end():end]
    return pages


@dataclass
class ForgeResult:
    anchors: list[AnchorPair]
    candidates: list[ImageCandidate]
    decisions: list[FilterDecision]
    documents: list[Document]
    queries: list[Query]
    qrels: Qrels
    pairs: dict[str, str]          # qid -> paired doc id
    dropped_by_alignment: list[str] = field(default_factory=list)
    dropped_by_relevance: list[str] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def summary(self) -> dict:
        """Plain-data view used for audits and fixture comparison."""
        return {
            "anchors": [[a.source, a.text, a.target] for a in self.anchors],
            "images": [[c.id, c.url, c.alt, c.missing_alt] for c in self.candidates],
            "decisions": [[d.candidate_id, d.verdict, d.rule] for d in self.decisions],
            "dropped_by_alignment": self.dropped_by_alignment,
            "documents": [[d.id, d.modality, d.text] for d in self.documents],
            "queries": [[q.id, q.text, self.pairs[q.id]] for q in self.queries],
            "dropped_by_relevance": self.dropped_by_relevance,
        }


def placeholder_image(size: int = 28, channels: int = 3) -> GridImage:
    """Uniform grey stand-in; image bytes are never fetched."""
    return GridImage(size, size, channels, np.full((size, size, channels), 0.5, dtype=np.float32))


def build_dataset(pages: dict[str, str], alignment_scores: dict[str, float] | None = None,
                  threshold: float = 0.3, alt_min: int = 5, alt_unit: str = "chars",
                  encoder=None, cutoff: int = 10, image_size: int = 28, channels: int = 3) -> ForgeResult:
    """Mine anchor queries and image/text documents from linked pages.

    Order of filters: extension, keyword, alt-text rules, then alignment score
    (when ``alignment_scores`` maps candidate id or url to a cosine), then the
    anchor relevance filter on image-paired queries (when ``encoder`` is given).
    """
    stats: dict = {}
    anchors: list[AnchorPair] = []
    candidates: list[ImageCandidate] = []
    for pid in sorted(pages):
        anchors += extract_anchors(pages[pid], pid, stats)
        candidates += extract_images(pages[pid], pid)
    kept, decisions = filter_images(candidates, alt_min, alt_unit)
    dropped_align: list[str] = []
    if alignment_scores is not None:
        def score_of(c):
            if c.id in alignment_scores:
                return alignment_scores[c.id]
            return alignment_scores.get(c.url, 1.0)
        survivors = filter_by_alignment(kept, score_of, threshold)
        ids = {c.id for c in survivors}
        dropped_align = [c.id for c in kept if c.id not in ids]
        kept = survivors
        # one verdict per candidate: the alignment rule overrides an earlier pass
        gone = set(dropped_align)
        decisions = [FilterDecision(d.candidate_id, "reject", "alignment") if d.candidate_id in gone else d
                     for d in decisions]

    targets = sorted({a.target for a in anchors if a.target in pages})
    docs: dict[str, Document] = {}
    images_of: dict[str, list[str]] = {}
    for pid in targets:
        body = page_text(pages[pid])
        if split_words(body):
            docs[f"{pid}-text"] = Document(f"{pid}-text", TEXT, body)
        for c in kept:
            if c.page_id == pid and split_words(c.alt):
                did = f"{pid}-img{c.index}"
                docs[did] = Document(did, IMAGE, c.alt, placeholder_image(image_size, channels),
                                     f"images/{did}.imgf")
                images_of.setdefault(pid, []).append(did)

    queries: list[Query] = []
    pairs: dict[str, str] = {}
    for a in anchors:
        if a.target not in pages:
            continue
        paired = (images_of.get(a.target) or [None])[0] or (f"{a.target}-text" if f"{a.target}-text" in docs else None)
        if paired is None or not split_words(a.text):
            continue
        qid = f"q{len(queries):04d}"
        queries.append(Query(qid, a.text))
        pairs[qid] = paired

    dropped_rel: list[str] = []
    if encoder is not None:
        image_q = [(q.id, q.text, pairs[q.id]) for q in queries if docs[pairs[q.id]].modality == IMAGE]
        if image_q:
            captions = {d.id: d.text for d in docs.values() if d.modality == IMAGE}
            keep = set(relevance_filter(image_q, captions, encoder, cutoff))
            dropped_rel = [qid for qid, _, _ in image_q if qid not in keep]
            queries = [q for q in queries if q.id not in set(dropped_rel)]
    qrels = {q.id: {pairs[q.id]: 1} for q in queries}
    return ForgeResult(anchors, candidates, decisions, [docs[k] for k in sorted(docs)], queries, qrels,
                       {q.id: pairs[q.id] for q in queries}, dropped_align, dropped_rel, stats)


# -- synthetic corpus -----------------------------------------------------------------

IMAGE_CUES = ("photo", "picture", "image", "shown")
TEXT_CUES = ("article", "describe", "facts", "explain")
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(rng: np.random.Generator, n: int) -> list[str]:
    syll = [c + v for c in _CONSONANTS for v in _VOWELS]
    words = [a + b + c for a in syll for b in syll for c in ("", "n", "r", "s")]
    reserved = set(IMAGE_CUES) | set(TEXT_CUES)
    pick = rng.choice(len(words), size=n + len(reserved), replace=False)
    return [w for w in (words[i] for i in pick) if w not in reserved][:n]


@dataclass
class SyntheticSet:
    corpus: dict[str, Document]
    queries: list[Query]
    qrels: Qrels
    pairs: list[PretrainPair]
    topics: dict[str, int]              # doc / pair id -> topic
    topic_words: list[list[str]]
    filler: list[str]


def _topic_image(rng, proto: np.ndarray, size: int, noise: float) -> GridImage:
    cell = size // proto.shape[0]
    base = np.repeat(np.repeat(proto, cell, axis=0), cell, axis=1)
    pixels = np.clip(base + noise * rng.standard_normal(base.shape), 0.0, 1.0)
    return GridImage.from_array(pixels.astype(np.float32))


def gen_synthetic(seed: int = 42, n_queries: int = 96, n_text_docs: int = 128, n_image_docs: int = 128,
                  vocab_size: int = 160, image_size: int = 28, channels: int = 3, n_topics: int = 16,
                  n_pairs: int = 256, noise: float = 0.05, visual_classes: int | None = None,
                  query_words: int = 4) -> SyntheticSet:
    """Topic-structured corpus with topic-level relevance.

    Every document belongs to one latent topic and is written with that
    topic's words. A query names a topic (``query_words`` of its words) and a wanted
    modality (a cue word); its relevant documents are all documents of that
    topic and modality. Image pixels are a 7x7 colour grid shared by
    ``n_topics // visual_classes`` topics plus noise, so an image alone
    narrows the topic down and its caption settles it.
    """
    if min(n_queries, n_text_docs, n_image_docs, vocab_size, n_topics) < 1:
        raise ValueError("sizes must be >= 1")
    if min(n_text_docs, n_image_docs) < n_topics:
        raise ValueError("need at least one document of each modality per topic")
    visual_classes = visual_classes or max(1, n_topics // 2)
    rng = np.random.default_rng(seed)
    n_filler = max(8, vocab_size // 20)
    words = _pseudo_words(rng, vocab_size)
    filler = words[:n_filler]
    per_topic = (vocab_size - n_filler) // n_topics
    if per_topic < 8:
        raise ValueError("vocab_size too small for the number of topics")
    topic_words = [words[n_filler + t * per_topic: n_filler + (t + 1) * per_topic] for t in range(n_topics)]
    protos = rng.uniform(0.1, 0.9, size=(visual_classes, 7, 7, channels))

    def sample(pool, n):
        return [pool[j] for j in rng.choice(len(pool), size=n, replace=False)]

    corpus: dict[str, Document] = {}
    topics: dict[str, int] = {}
    for i in range(n_text_docs):
        t = i % n_topics
        body = sample(topic_words[t], 8) + sample(filler, 3)
        rng.shuffle(body)
        did = f"t{i:04d}"
        corpus[did] = Document(did, TEXT, " ".join(body))
        topics[did] = t
    for i in range(n_image_docs):
        t = i % n_topics
        cap = sample(topic_words[t], 4) + sample(filler, 1)
        rng.shuffle(cap)
        did = f"i{i:04d}"
        corpus[did] = Document(did, IMAGE, " ".join(cap),
                               _topic_image(rng, protos[t % visual_classes], image_size, noise), f"images/{did}.imgf")
        topics[did] = t

    queries, qrels = [], {}
    for n in range(n_queries):
        t = int(rng.integers(n_topics))
        modality = IMAGE if n % 2 == 0 else TEXT
        cues = IMAGE_CUES if modality == IMAGE else TEXT_CUES
        words_q = sample(topic_words[t], query_words) + [cues[int(rng.integers(len(cues)))]]
        rng.shuffle(words_q)
        qid = f"q{n:04d}"
        queries.append(Query(qid, " ".join(words_q)))
        qrels[qid] = {d: 1 for d, doc in corpus.items() if topics[d] == t and doc.modality == modality}

    pairs = []
    for n in range(n_pairs):
        t = int(rng.integers(n_topics))
        pid = f"p{n:04d}"
        pairs.append(PretrainPair(pid, _topic_image(rng, protos[t % visual_classes], image_size, noise),
                                  " ".join(sample(topic_words[t], 4)), f"images/{pid}.imgf"))
        topics[pid] = t
    return SyntheticSet(corpus, queries, qrels, pairs, topics, topic_words, filler)


__all__ = [
    "AnchorPair",
    "BagOfWordsEncoder",
    "FilterDecision",
    "ImageCandidate",
    "build_dataset",
    "extract_anchors",
    "extract_images",
    "filter_by_alignment",
    "filter_images",
    "gen_synthetic",
    "read_pages",
    "relevance_filter",
    "split",
]
