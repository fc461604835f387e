"""
Unified query/document encoder.

Every item becomes a sequence of input rows drawn from one pool: token
embeddings, the two prompt embeddings, and the projected grid features of the
images in the batch. The encoder stack runs over the padded batch, then a single
decoder step from DEC_START cross-attends over the encoder states; its output
is the embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from marvel.autodiff import (
    Tensor,
    check_finite,
    concat,
    cosine_sim,
    layer_norm,
    matmul,
    no_grad,
    take_rows,
)
from marvel.data import IMAGE, Document, Query
from marvel.layers import decoder_block, encoder_block
from marvel.params import ModelConfig, ModelParams
from marvel.text import Vocab, tokenize
from marvel.vision import grid_features, project

FUSIONS = ("plugin", "sum", "concat", "text_only")

FEATURE, PROMPT, TOKEN = "feature", "prompt", "text"


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class Ablation:
    drop_caption: bool = False
    drop_features: bool = False
    drop_prompt: bool = False


NO_ABLATION = Ablation()


@dataclass
class InputSequence:
    """Symbolic input layout: one (kind, ref) per position.

    ``ref`` is a token id for text positions, 0/1 for the start/end prompt, and
    the grid row for feature positions. ``image_key`` names the image whose
    features are referenced.
    """

    kinds: list[str] = field(default_factory=list)
    refs: list[int] = field(default_factory=list)
    image_key: str | None = None

    @property
    def n_pos(self) -> int:
        return len(self.kinds)

    def positions(self, kind: str) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == kind]


@dataclass
class FusionPlan:
    """Sum/concat layout: caption and image sides are encoded separately."""

    mode: str
    caption: InputSequence | None
    image: InputSequence | None


def _text_sequence(ids: list[int]) -> InputSequence:
    return InputSequence([TOKEN] * len(ids), list(ids))


def _image_sequence(key: str, n_patches: int, caption_ids: list[int], ablation: Ablation) -> InputSequence:
    seq = InputSequence(image_key=key)
    if not ablation.drop_features:
        if not ablation.drop_prompt:
            seq.kinds.append(PROMPT)
            seq.refs.append(0)
        seq.kinds += [FEATURE] * n_patches
        seq.refs += list(range(n_patches))
        if not ablation.drop_prompt:
            seq.kinds.append(PROMPT)
            seq.refs.append(1)
    if not ablation.drop_caption:
        seq.kinds += [TOKEN] * len(caption_ids)
        seq.refs += caption_ids
    return seq


def assemble_input(item, vocab: Vocab, fusion: str = "plugin", ablation: Ablation = NO_ABLATION,
                   n_patches: int = 49, max_len: int = 128):
    """Lay out the input of a query or document.

    Plugin layout for an image document is [IMG_START, features, IMG_END, caption].
    Queries and text documents only ever contain text tokens.
    """
    if fusion not in FUSIONS:
        raise ValueError(f"unknown fusion {fusion!r}")
    ids = tokenize(item.text, vocab, max_len)
    if not (isinstance(item, Document) and item.modality == IMAGE):
        if not ids:
            raise EmptyInputError(f"{item.id}: no tokens")
        return _text_sequence(ids)

    caption = [] if ablation.drop_caption else ids
    if not caption and ablation.drop_features:
        raise EmptyInputError(f"{item.id}: caption and features both dropped")
    if fusion == "text_only":
        if not caption:
            raise EmptyInputError(f"{item.id}: text-only fusion with no caption tokens")
        return _text_sequence(caption)
    if fusion == "plugin":
        return _image_sequence(item.id, n_patches, caption, ablation)
    cap_seq = _text_sequence(caption) if caption else None
    img_seq = None
    if not ablation.drop_features:
        img_seq = _image_sequence(item.id, n_patches, [], Ablation(drop_caption=True,
                                                                    drop_prompt=ablation.drop_prompt))
    return FusionPlan(fusion, cap_seq, img_seq)


class MarvelModel:
    def __init__(self, cfg: ModelConfig, params: ModelParams, vocab: Vocab):
        if cfg.vocab_size != len(vocab):
            raise ValueError(f"config vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}")
        self.cfg = cfg
        self.params = params
        self.vocab = vocab
        # grid features by image key; only valid while the vision group is frozen
        self.grid_cache: dict[str, np.ndarray] | None = None

    @classmethod
    def create(cls, vocab: Vocab, seed: int = 42, **overrides) -> "MarvelModel":
        cfg = ModelConfig(vocab_size=len(vocab), **overrides)
        return cls(cfg, ModelParams.initialize(cfg, seed), vocab)

    # -- plumbing -----------------------------------------------------------
    def assemble(self, item, fusion="plugin", ablation=NO_ABLATION):
        return assemble_input(item, self.vocab, fusion, ablation, self.cfg.n_patches, self.cfg.max_text_len)

    def projected_features(self, keys: list[str], images: dict[str, np.ndarray],
                           overrides: dict | None = None) -> Tensor:
        """Projected grid features [len(keys), 49, d_model] for the named images.

        ``overrides`` maps an image key to replacement projected features [49, d_model].
        """
        p = self.params
        dtype = p["proj.w"].data.dtype
        overrides = overrides or {}
        todo = [k for k in keys if k not in overrides]
        proj = None
        if todo:
            if self.grid_cache is not None:
                missing = [k for k in todo if k not in self.grid_cache]
                if missing:
                    with no_grad():
                        feats = grid_features(np.stack([images[k] for k in missing]), p, self.cfg)
                    self.grid_cache.update(zip(missing, feats.data))
                grid = Tensor(np.stack([self.grid_cache[k] for k in todo]), dtype=dtype)
            else:
                grid = grid_features(np.stack([images[k] for k in todo]), p, self.cfg)
            proj = project(grid, p)
            if len(todo) == len(keys):
                return proj
        shape = (1, self.cfg.n_patches, self.cfg.d_model)
        rows = []
        for k in keys:
            if k in overrides:
                o = overrides[k]
                rows.append((o if isinstance(o, Tensor) else Tensor(o, dtype=dtype)).reshape(shape))
            else:
                i = todo.index(k)
                rows.append(proj[i:i + 1])
        return concat(rows, axis=0)

    def run_lm(self, seqs: list[InputSequence], images: dict[str, np.ndarray] | None = None,
               overrides: dict | None = None, keep_cross: list | None = None) -> Tensor:
        """Encoder + one decoder step over a padded batch -> [len(seqs), d_model]."""
        cfg, p = self.cfg, self.params
        d, V, P = cfg.d_model, cfg.vocab_size, cfg.n_patches
        keys: list[str] = []
        slot: dict[str, int] = {}
        for s in seqs:
            if s.image_key is not None and FEATURE in s.kinds and s.image_key not in slot:
                slot[s.image_key] = len(keys)
                keys.append(s.image_key)
        tok = p["lm.tok_emb"]
        dtype = tok.data.dtype
        parts = [tok, p["prompts.emb"]]
        if keys:
            feats = self.projected_features(keys, images or {}, overrides)
            parts.append(feats.reshape(len(keys) * P, d))
        zero_row = V + 2 + len(keys) * P
        parts.append(Tensor(np.zeros((1, d)), dtype=dtype))
        pool = concat(parts, axis=0)

        n = len(seqs)
        L = max(s.n_pos for s in seqs)
        if L > cfg.max_positions:
            raise ValueError(f"sequence of {L} positions exceeds {cfg.max_positions}")
        idx = np.full((n, L), zero_row, dtype=np.intp)
        mask = np.zeros((n, L), dtype=bool)
        for i, s in enumerate(seqs):
            refs = np.asarray(s.refs, dtype=np.intp)
            kinds = np.asarray(s.kinds)
            row = refs.copy()
            row[kinds == PROMPT] += V
            if s.image_key in slot:
                row[kinds == FEATURE] += V + 2 + slot[s.image_key] * P
            idx[i, : s.n_pos] = row
            mask[i, : s.n_pos] = True

        x = take_rows(pool, idx) + p["lm.pos_emb"][:L]
        for i in range(cfg.n_enc_layers):
            x = encoder_block(x, p, f"lm.enc.{i}", cfg.n_heads, mask)
        memory = layer_norm(x, p["lm.enc_ln.g"], p["lm.enc_ln.b"])
        y = take_rows(tok, np.full((n, 1), self.vocab.dec_id, dtype=np.intp))
        for i in range(cfg.n_dec_layers):
            y = decoder_block(y, memory, p, f"lm.dec.{i}", cfg.n_heads, mask,
                              keep_cross if i == cfg.n_dec_layers - 1 else None)
        y = layer_norm(y, p["lm.dec_ln.g"], p["lm.dec_ln.b"])
        return check_finite(y.reshape(n, d), "embedding")

    # -- public API ---------------------------------------------------------
    def encode(self, items, fusion: str = "plugin", ablation: Ablation = NO_ABLATION,
               overrides: dict | None = None) -> Tensor:
        """Embed queries/documents -> Tensor [len(items), d_model] (differentiable)."""
        items = list(items)
        plans = [self.assemble(it, fusion, ablation) for it in items]
        images = {it.id: it.image.pixels for it in items
                  if isinstance(it, Document) and it.image is not None}
        if fusion in ("plugin", "text_only"):
            return self.run_lm(plans, images, overrides)

        seqs: list[InputSequence] = []
        ia, ib, is_image = [], [], []
        for plan in plans:
            if isinstance(plan, FusionPlan):
                is_image.append(True)
                for side, target in ((plan.caption, ia), (plan.image, ib)):
                    if side is None:
                        target.append(-1)
                    else:
                        target.append(len(seqs))
                        seqs.append(side)
            else:
                is_image.append(False)
                ia.append(len(seqs))
                ib.append(-1)
                seqs.append(plan)
        E = self.run_lm(seqs, images, overrides)
        base = concat([E, Tensor(np.zeros((1, self.cfg.d_model)), dtype=E.data.dtype)], axis=0)
        zero = len(seqs)
        A = take_rows(base, np.array([zero if i < 0 else i for i in ia]))
        B = take_rows(base, np.array([zero if i < 0 else i for i in ib]))
        if fusion == "sum":
            return A + B
        m = np.asarray(is_image, dtype=E.data.dtype)[:, None]
        C = matmul(concat([A, B], axis=1), self.params["lm.concat_w"])
        return A * (1.0 - m) + C * m

    def encode_numpy(self, items, fusion: str = "plugin", ablation: Ablation = NO_ABLATION,
                     batch_size: int = 64, overrides: dict | None = None) -> np.ndarray:
        """Inference embeddings [n, d]; batches are formed by sequence length then position."""
        items = list(items)
        if not items:
            return np.zeros((0, self.cfg.d_model), dtype=self.params["lm.tok_emb"].data.dtype)
        lengths = []
        for it in items:
            plan = self.assemble(it, fusion, ablation)
            if isinstance(plan, FusionPlan):
                lengths.append(max(s.n_pos for s in (plan.caption, plan.image) if s is not None))
            else:
                lengths.append(plan.n_pos)
        order = sorted(range(len(items)), key=lambda i: (lengths[i], i))
        out = np.zeros((len(items), self.cfg.d_model), dtype=self.params["lm.tok_emb"].data.dtype)
        with no_grad():
            for start in range(0, len(order), batch_size):
                chunk = order[start:start + batch_size]
                emb = self.encode([items[i] for i in chunk], fusion, ablation, overrides)
                out[chunk] = emb.data
        return out

    def cross_attention_map(self, doc: Document, fusion: str = "plugin",
                            ablation: Ablation = NO_ABLATION, overrides: dict | None = None
                            ) -> tuple[np.ndarray, InputSequence]:
        """Per-head decoder->encoder attention [heads, n_pos] for one image document."""
        if fusion != "plugin":
            raise ValueError("cross-attention maps are defined for plugin fusion only")
        if doc.modality != IMAGE:
            raise ValueError(f"{doc.id} is not an image document")
        seq = self.assemble(doc, fusion, ablation)
        kept: list[np.ndarray] = []
        with no_grad():
            self.run_lm([seq], {doc.id: doc.image.pixels}, overrides, keep_cross=kept)
        return kept[0][0, :, 0, : seq.n_pos].copy(), seq


def score(q: Tensor, d: Tensor) -> Tensor:
    """Relevance of document embedding ``d`` to query embedding ``q`` (cosine)."""
    if isinstance(q, np.ndarray):
        q = Tensor(q)
    if isinstance(d, np.ndarray):
        d = Tensor(d)
    return cosine_sim(q, d)


__all__ = [
    "Ablation",
    "EmptyInputError",
    "FusionPlan",
    "InputSequence",
    "MarvelModel",
    "NO_ABLATION",
    "Query",
    "assemble_input",
    "score",
]
