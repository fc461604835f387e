"""Interpretability probes: token verbalization of projected image features,
decoder cross-attention statistics, and the feature-replacement study."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from marvel.autodiff import NumericError, no_grad
from marvel.data import IMAGE, Document, Qrels, Query
from marvel.encoder import FEATURE, NO_ABLATION, PROMPT, TOKEN, Ablation, MarvelModel
from marvel.metrics import MetricReport
from marvel.retrieval import evaluate_by_modality

GROUPS = (FEATURE, PROMPT, TOKEN)
GROUP_LABELS = {FEATURE: "feature", PROMPT: "prompt", TOKEN: "caption"}
REPLACE_MODES = ("knn1", "knn5_mean", "random")


def _image_doc(doc: Document) -> None:
    if doc.modality != IMAGE or doc.image is None:
        raise ValueError(f"{doc.id} is not an image document")


def token_table(model: MarvelModel) -> tuple[list[str], np.ndarray]:
    """Non-special vocabulary tokens and their input embeddings (float64)."""
    v = model.vocab
    ids = np.arange(v.n_special, len(v))
    return [v.tokens[i] for i in ids], model.params["lm.tok_emb"].data[ids].astype(np.float64)


def _unit(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError(f"zero-norm {what} vector")
    return x / norms


def similarity_to_tokens(vectors: np.ndarray, model: MarvelModel) -> tuple[list[str], np.ndarray]:
    """Cosine of each row of ``vectors`` against every non-special token -> [n, |V'|]."""
    tokens, E = token_table(model)
    V = _unit(np.asarray(vectors, dtype=np.float64), "feature")
    return tokens, V @ _unit(E, "token").T


def _top(scores: np.ndarray, k: int) -> np.ndarray:
    # stable on -score: equal scores keep vocabulary order
    return np.argsort(-scores, kind="stable")[:k]


@dataclass
class VerbalizationResult:
    doc_id: str
    per_position: list[list[tuple[str, float]]]
    pooled: list[tuple[str, float]]


def projected(doc: Document, model: MarvelModel, overrides: dict | None = None) -> np.ndarray:
    """The 49 projected features [49, d_model] of an image document."""
    _image_doc(doc)
    with no_grad():
        return model.projected_features([doc.id], {doc.id: doc.image.pixels}, overrides).data[0]


def verbalize(doc: Document, model: MarvelModel, k: int = 10, overrides: dict | None = None) -> VerbalizationResult:
    """Nearest vocabulary tokens of each projected feature, plus a pooled top-k.

    The pooled list ranks every token by its best cosine over the 49 positions.
    """
    n_tokens = len(model.vocab) - model.vocab.n_special
    if not 1 <= k <= n_tokens:
        raise ValueError(f"k={k} outside [1, {n_tokens}] (vocabulary without special tokens)")
    tokens, S = similarity_to_tokens(projected(doc, model, overrides), model)
    per = [[(tokens[j], float(row[j])) for j in _top(row, k)] for row in S]
    best = S.max(axis=0)
    pooled = [(tokens[j], float(best[j])) for j in _top(best, k)]
    return VerbalizationResult(doc.id, per, pooled)


def topic_overlap(result: VerbalizationResult, topic_words) -> int:
    """How many pooled tokens belong to the given word set."""
    words = set(topic_words)
    return sum(tok in words for tok, _ in result.pooled)


# -- cross-attention statistics -------------------------------------------------------

def attention_profile(weights: np.ndarray, kinds) -> tuple[np.ndarray, np.ndarray]:
    """Per head: mass and within-group entropy for feature/prompt/caption positions.

    ``weights`` is [heads, n_pos]. Entropy uses the natural log of the
    renormalised within-group distribution; a group that is absent or gets no
    mass has entropy NaN.
    """
    w = np.asarray(weights, dtype=np.float64)
    kinds = np.asarray(kinds)
    mass = np.zeros((w.shape[0], len(GROUPS)))
    ent = np.full((w.shape[0], len(GROUPS)), np.nan)
    for g, kind in enumerate(GROUPS):
        sel = w[:, kinds == kind]
        mass[:, g] = sel.sum(axis=1)
        for h in range(w.shape[0]):
            if sel.shape[1] and mass[h, g] > 0:
                p = sel[h] / mass[h, g]
                p = p[p > 0]
                ent[h, g] = max(0.0, float(-(p * np.log(p)).sum()))
    return mass, ent


@dataclass
class AttentionStats:
    n_docs: int
    head_mass: np.ndarray      # [heads, 3], mean over documents
    head_entropy: np.ndarray   # [heads, 3], mean over documents where the group is present
    group_sizes: np.ndarray    # [3], mean number of positions per group

    @property
    def mass(self) -> dict[str, float]:
        return {GROUP_LABELS[k]: float(self.head_mass[:, g].mean()) for g, k in enumerate(GROUPS)}

    @property
    def entropy(self) -> dict[str, float]:
        out = {}
        for g, k in enumerate(GROUPS):
            col = self.head_entropy[:, g]
            out[GROUP_LABELS[k]] = float(np.nanmean(col)) if np.any(~np.isnan(col)) else math.nan
        return out


def attention_stats(docs: list[Document], model: MarvelModel, ablation: Ablation = NO_ABLATION) -> AttentionStats:
    """Decoder->encoder attention mass and entropy by position group, averaged over documents."""
    docs = [d for d in docs]
    if not docs:
        raise ValueError("attention statistics need at least one image document")
    masses, ents, sizes = [], [], []
    for doc in docs:
        _image_doc(doc)
        w, seq = model.cross_attention_map(doc, "plugin", ablation)
        m, e = attention_profile(w, seq.kinds)
        masses.append(m)
        ents.append(e)
        sizes.append([sum(k == kind for k in seq.kinds) for kind in GROUPS])
    E = np.stack(ents)
    present = ~np.isnan(E)
    with np.errstate(invalid="ignore"):
        head_ent = np.where(present.any(axis=0), np.nansum(E, axis=0) / np.maximum(present.sum(axis=0), 1), np.nan)
    return AttentionStats(len(docs), np.mean(masses, axis=0), head_ent, np.mean(sizes, axis=0))


# -- feature replacement ----------------------------------------------------------------

def replacement_features(doc: Document, model: MarvelModel, mode: str, seed: int = 42, k: int = 5) -> np.ndarray:
    """Token embeddings standing in for the 49 projected features of ``doc``."""
    if mode not in REPLACE_MODES:
        raise ValueError(f"unknown replacement mode {mode!r}; expected one of {REPLACE_MODES}")
    _, E = token_table(model)
    if mode == "random":
        rng = np.random.default_rng(seed)
        pick = rng.integers(len(E), size=model.cfg.n_patches)
        return E[pick]
    _, S = similarity_to_tokens(projected(doc, model), model)
    if mode == "knn1":
        return E[np.array([_top(row, 1)[0] for row in S])]
    return np.stack([E[_top(row, k)].mean(axis=0) for row in S])


def replace_features(doc: Document, model: MarvelModel, mode: str, seed: int = 42) -> np.ndarray:
    """Plugin embedding of ``doc`` with its projected features swapped for token embeddings."""
    feats = replacement_features(doc, model, mode, seed)
    return model.encode_numpy([doc], "plugin", overrides={doc.id: feats})[0]


def replacement_study(model: MarvelModel, queries: list[Query], corpus: dict[str, Document], qrels: Qrels,
                      seed: int = 42) -> dict[str, dict[str, dict[str, MetricReport]]]:
    """Retrieval with original features and with each replacement mode, by modality.

    Random replacements are seeded per document from ``seed`` and the document's position.
    """
    images = [corpus[d] for d in sorted(corpus) if corpus[d].modality == IMAGE]
    out = {"original": evaluate_by_modality(model, queries, corpus, qrels)}
    for mode in REPLACE_MODES:
        overrides = {d.id: replacement_features(d, model, mode, seed + i) for i, d in enumerate(images)}
        out[mode] = evaluate_by_modality(model, queries, corpus, qrels, overrides=overrides)
    return out


# -- reports -----------------------------------------------------------------------------

def format_verbalization(results: list[VerbalizationResult], captions: dict[str, str] | None = None,
                         fmt: str = "text", positions: bool = False) -> str:
    captions = captions or {}
    if fmt == "tsv":
        rows = ["doc\tview\tposition\trank\ttoken\tscore\n"]
        for r in results:
            rows += [f"{r.doc_id}\tpooled\t-\t{i}\t{t}\t{s:.6f}\n" for i, (t, s) in enumerate(r.pooled, 1)]
            if positions:
                for p, lst in enumerate(r.per_position):
                    rows += [f"{r.doc_id}\tposition\t{p}\t{i}\t{t}\t{s:.6f}\n" for i, (t, s) in enumerate(lst, 1)]
        return "".join(rows)
    out = []
    for r in results:
        out.append(f"== {r.doc_id} ==\n")
        if r.doc_id in captions:
            out.append(f"caption: {captions[r.doc_id]}\n")
        out.append("tokens:  " + " ".join(f"{t}({s:.3f})" for t, s in r.pooled) + "\n")
        if positions:
            for p, lst in enumerate(r.per_position):
                out.append(f"  [{p // 7},{p % 7}] " + " ".join(f"{t}({s:.3f})" for t, s in lst) + "\n")
    return "".join(out)


def format_attention(stats: AttentionStats, fmt: str = "text") -> str:
    labels = [GROUP_LABELS[k] for k in GROUPS]
    if fmt == "tsv":
        rows = ["head\tgroup\tmass\tentropy\n"]
        for h in range(stats.head_mass.shape[0]):
            rows += [f"{h}\t{lab}\t{stats.head_mass[h, g]:.6f}\t{stats.head_entropy[h, g]:.6f}\n"
                     for g, lab in enumerate(labels)]
        rows += [f"mean\t{lab}\t{stats.mass[lab]:.6f}\t{stats.entropy[lab]:.6f}\n" for lab in labels]
        return "".join(rows)
    out = [f"decoder cross-attention over {stats.n_docs} image documents\n",
           f"{'head':<6}" + "".join(f"{lab + ' mass':>15}{lab + ' H':>12}" for lab in labels) + "\n"]
    for h in range(stats.head_mass.shape[0]):
        out.append(f"{h:<6}" + "".join(f"{stats.head_mass[h, g]:>15.4f}{stats.head_entropy[h, g]:>12.4f}"
                                       for g in range(len(labels))) + "\n")
    out.append(f"{'mean':<6}" + "".join(f"{stats.mass[lab]:>15.4f}{stats.entropy[lab]:>12.4f}" for lab in labels) + "\n")
    out.append("positions per group: " + ", ".join(f"{lab} {n:.1f}" for lab, n in zip(labels, stats.group_sizes)) + "\n")
    return "".join(out)


def format_replacement(study: dict[str, dict[str, dict[str, MetricReport]]], fmt: str = "text") -> str:
    cols = ("Text", "Image", "Multi")
    if fmt == "tsv":
        rows = ["features\t" + "\t".join(f"{c}_mrr10" for c in cols) + "\n"]
        rows += [name + "\t" + "\t".join(f"{study[name][c]['mrr10'].mean:.6f}" for c in cols) + "\n" for name in study]
        return "".join(rows)
    out = [f"{'features':<12}" + "".join(f"{c + ' MRR@10':>14}" for c in cols) + "\n"]
    out += [f"{name:<12}" + "".join(f"{study[name][c]['mrr10'].mean:>14.4f}" for c in cols) + "\n" for name in study]
    return "".join(out)


__all__ = [
    "AttentionStats",
    "VerbalizationResult",
    "attention_profile",
    "attention_stats",
    "format_attention",
    "format_replacement",
    "format_verbalization",
    "replace_features",
    "replacement_features",
    "replacement_study",
    "topic_overlap",
    "verbalize",
]
