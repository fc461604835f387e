"""
Two-phase training: image-caption contrastive adaption of the visual module,
then modality-balanced contrastive finetuning of the language model.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from marvel.autodiff import NumericError, Tensor, l2_normalize, logsumexp, matmul
from marvel.data import IMAGE, TEXT, Document, PretrainPair, Qrels, Query, relevant
from marvel.encoder import FUSIONS, Ablation, MarvelModel
from marvel.index import build_index, search
from marvel.metrics import evaluate_run
from marvel.params import GROUPS
from marvel.retrieval import encode_corpus, evaluate_model

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.01


class ConfigError(ValueError):
    pass


# -- freeze policies ------------------------------------------------------------

PHASE_GROUPS = {
    "pretrain": frozenset({"vision", "projection"}),
    "finetune": frozenset({"lm", "projection", "prompts"}),
}

# Finetuning cells of the freeze grid; projection and prompts always train.
FREEZE_GRID = {
    "both": frozenset({"lm", "vision", "projection", "prompts"}),
    "lm": frozenset({"lm", "projection", "prompts"}),
    "vision": frozenset({"vision", "projection", "prompts"}),
    "none": frozenset({"projection", "prompts"}),
}


@dataclass(frozen=True)
class FreezePolicy:
    phase: str
    trainable: frozenset

    @property
    def frozen(self) -> frozenset:
        return frozenset(GROUPS) - self.trainable


def freeze_policy(phase: str, cell: str | None = None) -> FreezePolicy:
    if phase not in PHASE_GROUPS:
        raise ConfigError(f"unknown phase {phase!r}")
    if cell is None:
        return FreezePolicy(phase, PHASE_GROUPS[phase])
    if phase != "finetune":
        raise ConfigError("freeze-grid overrides only apply to finetuning")
    if cell not in FREEZE_GRID:
        raise ConfigError(f"unknown freeze cell {cell!r}; expected one of {sorted(FREEZE_GRID)}")
    return FreezePolicy("ablation", FREEZE_GRID[cell])


# -- losses -------------------------------------------------------------------------

@dataclass
class LossValue:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return self.total.item()


def image_caption_loss(image_emb: Tensor, caption_emb: Tensor, tau: float = DEFAULT_TAU) -> LossValue:
    """Symmetric in-batch contrastive loss: image->caption plus caption->image."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    I = l2_normalize(image_emb)
    C = l2_normalize(caption_emb)
    S = matmul(I, C.T) * (1.0 / tau)
    diag = np.arange(S.shape[0])
    pos = S[diag, diag]
    l_ic = (logsumexp(S, axis=1) - pos).mean()
    l_ci = (logsumexp(S, axis=0) - pos).mean()
    total = l_ic + l_ci
    return LossValue(total, {"ic": l_ic.item(), "ci": l_ci.item()})


def pretrain_loss(pairs: list[PretrainPair], model: MarvelModel, tau: float = DEFAULT_TAU,
                  ablation: Ablation = Ablation()) -> LossValue:
    """Image side = prompts + features; caption side = caption text alone."""
    ids = [p.id for p in pairs]
    if not pairs:
        raise ValueError("empty pretraining batch")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate pair ids in batch make degenerate negatives")
    image_docs = [Document(p.id, IMAGE, p.caption, p.image) for p in pairs]
    image_side = Ablation(drop_caption=True, drop_prompt=ablation.drop_prompt)
    img = model.encode(image_docs, "plugin", image_side)
    cap = model.encode([Query(p.id, p.caption) for p in pairs], "plugin")
    return image_caption_loss(img, cap, tau)


@dataclass
class TrainExample:
    query: Query
    positive: Document
    negatives: list[Document] = field(default_factory=list)


@dataclass
class TrainBatch:
    examples: list[TrainExample]
    in_batch: bool = True
    balanced: bool = False
    in_batch_balance: str = "free"

    def validate(self) -> None:
        for ex in self.examples:
            if any(n.id == ex.positive.id for n in ex.negatives):
                raise ValueError(f"query {ex.query.id}: positive {ex.positive.id} is among its negatives")
            if self.balanced:
                n_img = sum(n.modality == IMAGE for n in ex.negatives)
                n_txt = sum(n.modality == TEXT for n in ex.negatives)
                if n_img != 1 or n_txt != 1:
                    raise ValueError(f"query {ex.query.id}: balanced batch needs one image and one "
                                     f"text negative, got {n_img} and {n_txt}")


def candidate_layout(batch: TrainBatch, qrels: Qrels | None = None):
    """Unique batch documents, the positive column per query, and the candidate mask."""
    batch.validate()
    docs: list[Document] = []
    col: dict[str, int] = {}
    for ex in batch.examples:
        for d in [ex.positive, *ex.negatives]:
            if d.id not in col:
                col[d.id] = len(docs)
                docs.append(d)
    B, M = len(batch.examples), len(docs)
    pos = np.array([col[ex.positive.id] for ex in batch.examples])
    mask = np.zeros((B, M), dtype=bool)
    for b, ex in enumerate(batch.examples):
        own = {ex.positive.id, *(n.id for n in ex.negatives)}
        for did in own:
            mask[b, col[did]] = True
        if not batch.in_batch:
            continue
        judged = set(relevant(qrels, ex.query.id)) if qrels else set()
        others = [d for d in docs if d.id not in own and d.id not in judged]
        if batch.in_batch_balance == "balanced":
            imgs = [d for d in others if d.modality == IMAGE]
            txts = [d for d in others if d.modality == TEXT]
            n = min(len(imgs), len(txts))
            others = imgs[:n] + txts[:n]
        for d in others:
            mask[b, col[d.id]] = True
    return docs, pos, mask


def contrastive_loss(q_emb: Tensor, d_emb: Tensor, pos: np.ndarray, mask: np.ndarray,
                     modalities: list[str], tau: float = DEFAULT_TAU) -> LossValue:
    """Mean over queries of -log softmax(f/tau) at the positive, over each query's candidates.

    Components: mean positive logit f(q,d+)/tau and the softmax mass that falls on
    image and on text negatives.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    Q = l2_normalize(q_emb)
    D = l2_normalize(d_emb)
    S = matmul(Q, D.T) * (1.0 / tau)
    rows = np.arange(S.shape[0])
    if not np.all(mask[rows, pos]):
        raise ValueError("each positive must be among its query's candidates")
    pos_logit = S[rows, pos]
    loss = (logsumexp(S, axis=1, mask=mask) - pos_logit).mean()
    s = S.data.astype(np.float64)
    z = np.where(mask, s, -np.inf)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    negmask = mask.copy()
    negmask[rows, pos] = False
    is_img = np.array([m == IMAGE for m in modalities])
    comps = {
        "align": float(s[rows, pos].mean()),
        "image_neg_mass": float((p * (negmask & is_img)).sum(axis=1).mean()),
        "text_neg_mass": float((p * (negmask & ~is_img)).sum(axis=1).mean()),
    }
    return LossValue(loss, comps)


def finetune_loss(batch: TrainBatch, model: MarvelModel, tau: float = DEFAULT_TAU, fusion: str = "plugin",
                  ablation: Ablation = Ablation(), qrels: Qrels | None = None) -> LossValue:
    docs, pos, mask = candidate_layout(batch, qrels)
    q = model.encode([ex.query for ex in batch.examples], fusion)
    d = model.encode(docs, fusion, ablation)
    return contrastive_loss(q, d, pos, mask, [x.modality for x in docs], tau)


# -- optimiser ----------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        bad = [p.name for p in self.params if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            raise NumericError(f"non-finite gradient in {bad[:5]} at step {self.t + 1}")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = self.m[id(p)], self.v[id(p)]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def optimizer_step(params: list[Tensor], opt: AdamW | None = None, **config) -> AdamW:
    """One AdamW update of ``params`` from their ``.grad``; returns the optimiser state."""
    opt = opt or AdamW(params, **config)
    opt.step()
    return opt


# -- hard negatives -----------------------------------------------------------

@dataclass
class NegativeAssignment:
    qid: str
    image: list[str]
    text: list[str]
    fallback: list[str] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return self.image + self.text


def mining_candidates(ranked: list[tuple[str, float]], qrels: Qrels, qid: str) -> list[str]:
    judged = set(relevant(qrels, qid))
    return [did for did, _ in ranked if did not in judged]


def mine_hard_negatives(model: MarvelModel, queries: list[Query], corpus: dict[str, Document], qrels: Qrels,
                        k: int = 100, per_modality: int = 1, seed: int = 42, fusion: str = "plugin",
                        ablation: Ablation = Ablation(), mode: str = "balanced",
                        doc_embeddings: dict[str, np.ndarray] | None = None) -> dict[str, NegativeAssignment]:
    """Sample negatives from each query's top-k, per modality, excluding judged-relevant docs.

    ``mode``: "balanced" (per_modality image + per_modality text), "text_only" or
    "image_only" (2 * per_modality of one modality). An exhausted modality falls
    back to a corpus-wide random sample of that modality.
    """
    quota = {"balanced": {IMAGE: per_modality, TEXT: per_modality},
             "text_only": {IMAGE: 0, TEXT: 2 * per_modality},
             "image_only": {IMAGE: 2 * per_modality, TEXT: 0}}
    if mode not in quota:
        raise ValueError(f"unknown negative mode {mode!r}")
    if doc_embeddings is None:
        doc_embeddings = encode_corpus(model, list(corpus.values()), fusion, ablation)
    index = build_index(doc_embeddings)
    q_emb = model.encode_numpy(queries, fusion)
    rng = np.random.default_rng(seed)
    by_modality = {m: sorted(d.id for d in corpus.values() if d.modality == m) for m in (IMAGE, TEXT)}
    out: dict[str, NegativeAssignment] = {}
    order = sorted(range(len(queries)), key=lambda i: queries[i].id)
    for i in order:
        q = queries[i]
        cands = mining_candidates(search(index, q_emb[i], k), qrels, q.id)
        judged = set(relevant(qrels, q.id))
        picked: dict[str, list[str]] = {}
        fallback = []
        for m in (IMAGE, TEXT):
            need = quota[mode][m]
            part = [d for d in cands if corpus[d].modality == m]
            take = min(need, len(part))
            chosen = [part[j] for j in rng.choice(len(part), size=take, replace=False)] if take else []
            if take < need:
                pool = [d for d in by_modality[m] if d not in judged and d not in chosen]
                extra = min(need - take, len(pool))
                chosen += [pool[j] for j in rng.choice(len(pool), size=extra, replace=False)] if extra else []
                fallback.append(m)
            picked[m] = chosen
        out[q.id] = NegativeAssignment(q.id, picked[IMAGE], picked[TEXT], fallback)
    return out


def save_negatives(path, negs: dict[str, NegativeAssignment]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(negs):
            a = negs[qid]
            fh.write(json.dumps({"qid": qid, "image": a.image, "text": a.text, "fallback": a.fallback},
                                sort_keys=True) + "\n")


def load_negatives(path) -> dict[str, NegativeAssignment]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out[r["qid"]] = NegativeAssignment(r["qid"], r["image"], r["text"], r.get("fallback", []))
    return out


# -- configuration ------------------------------------------------------------

@dataclass
class TrainConfig:
    phase: str = "finetune"           # pretrain | finetune
    stage: str = "dpr"                # dpr (in-batch) | ance (mined hard negatives)
    fusion: str = "plugin"
    tau: float = DEFAULT_TAU
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_steps: int = 300
    eval_every: int = 25
    early_stop: int = 5
    hard_neg_top_k: int = 100
    per_modality: int = 1
    negative_mode: str = "balanced"
    in_batch: bool = True
    in_batch_balance: str = "free"
    freeze: str | None = None
    drop_caption: bool = False
    drop_features: bool = False
    drop_prompt: bool = False
    no_clip_pretrain: bool = False
    require_pretrain: bool = False
    seed: int = 42

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.drop_caption, self.drop_features, self.drop_prompt)

    def validate(self) -> None:
        if self.phase not in PHASE_GROUPS:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.stage not in ("dpr", "ance"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.tau <= 0 or self.lr <= 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("tau, lr, batch_size and eval_every must be positive")
        if self.in_batch_balance not in ("free", "balanced"):
            raise ConfigError(f"unknown in_batch_balance {self.in_batch_balance!r}")
        if self.negative_mode not in ("balanced", "text_only", "image_only"):
            raise ConfigError(f"unknown negative_mode {self.negative_mode!r}")
        freeze_policy(self.phase, self.freeze)


FULL_SCALE_VALUES = {"batch_size": 64, "lr": 5e-6, "tau": 0.01, "hard_neg_top_k": 100,
                "eval_every": 500, "early_stop": 5}


def paper_faithful(cfg: TrainConfig) -> TrainConfig:
    return dataclasses.replace(cfg, **FULL_SCALE_VALUES)


def _coerce(value: str, default):
    if isinstance(default, bool) or default is None and value.lower() in ("true", "false"):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if value.lower() in ("none", ""):
        return None
    return value


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    base = base or TrainConfig()
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _coerce(value, known[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    cfg = dataclasses.replace(base, **updates)
    cfg.validate()
    return cfg


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


# -- training loop ------------------------------------------------------------

@dataclass
class TrainData:
    corpus: dict[str, Document]
    train_queries: list[Query]
    dev_queries: list[Query]
    qrels: Qrels
    pairs: list[PretrainPair] = field(default_factory=list)
    dev_pairs: list[PretrainPair] = field(default_factory=list)


@dataclass
class TrainResult:
    best_step: int
    best_metric: float
    steps: int
    stopped_early: bool
    history: list[dict]


class EarlyStopper:
    """Track the best dev metric; stop after ``patience`` evaluations without improvement."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = -np.inf
        self.best_step = 0
        self.stale = 0

    def update(self, step: int, value: float) -> bool:
        """Record an evaluation; returns True when it is a new best."""
        if value > self.best:
            self.best, self.best_step, self.stale = value, step, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def pair_retrieval_metrics(model: MarvelModel, pairs: list[PretrainPair]) -> dict[str, float]:
    """Image->caption retrieval over a set of pairs (pretraining dev signal)."""
    image_docs = [Document(p.id, IMAGE, p.caption, p.image) for p in pairs]
    img = model.encode_numpy(image_docs, "plugin", Ablation(drop_caption=True))
    cap = model.encode_numpy([Query(p.id, p.caption) for p in pairs], "plugin")
    index = build_index({p.id: cap[i] for i, p in enumerate(pairs)})
    run = {p.id: search(index, img[i], 100) for i, p in enumerate(pairs)}
    qrels = {p.id: {p.id: 1} for p in pairs}
    rep = evaluate_run(run, qrels)
    return {"dev_mrr10": rep["mrr10"].mean, "dev_ndcg10": rep["ndcg10"].mean,
            "dev_recall100": rep["recall100"].mean}


def dev_metrics(model: MarvelModel, data: TrainData, cfg: TrainConfig) -> dict[str, float]:
    if cfg.phase == "pretrain":
        return pair_retrieval_metrics(model, data.dev_pairs or data.pairs)
    rep = evaluate_model(model, data.dev_queries, list(data.corpus.values()), data.qrels,
                         cfg.fusion, cfg.ablation)
    return {"dev_mrr10": rep["mrr10"].mean, "dev_ndcg10": rep["ndcg10"].mean,
            "dev_recall100": rep["recall100"].mean}


def _positive(qrels: Qrels, qid: str, corpus: dict[str, Document], rng: np.random.Generator | None) -> Document:
    """A relevant document: sampled when ``rng`` is given, else the smallest id."""
    rel = sorted(d for d in relevant(qrels, qid) if d in corpus)
    if not rel:
        raise ValueError(f"query {qid} has no relevant document in the corpus")
    return corpus[rel[int(rng.integers(len(rel)))] if rng is not None else rel[0]]


def make_batch(queries: list[Query], data: TrainData, cfg: TrainConfig,
               negatives: dict[str, NegativeAssignment] | None, rng: np.random.Generator | None = None) -> TrainBatch:
    examples = []
    for q in queries:
        negs = []
        if cfg.stage == "ance":
            negs = [data.corpus[d] for d in negatives[q.id].ids]
        examples.append(TrainExample(q, _positive(data.qrels, q.id, data.corpus, rng), negs))
    balanced = cfg.stage == "ance" and cfg.negative_mode == "balanced" and cfg.per_modality == 1
    return TrainBatch(examples, cfg.in_batch, balanced, cfg.in_batch_balance)


def train(model: MarvelModel, data: TrainData, cfg: TrainConfig,
          negatives: dict[str, NegativeAssignment] | None = None,
          log_path=None, on_eval=None) -> TrainResult:
    """Run one phase; the model ends up holding the best dev checkpoint.

    Evaluates every ``eval_every`` steps and stops after ``early_stop``
    non-improving evaluations or ``max_steps`` steps.
    """
    cfg.validate()
    policy = freeze_policy(cfg.phase, cfg.freeze)
    model.params.set_trainable(policy.trainable)
    model.grid_cache = None if "vision" in policy.trainable else {}
    if cfg.phase == "finetune" and cfg.stage == "ance" and negatives is None:
        negatives = mine_hard_negatives(model, data.train_queries, data.corpus, data.qrels, cfg.hard_neg_top_k,
                                        cfg.per_modality, cfg.seed, cfg.fusion, cfg.ablation, cfg.negative_mode)
    items = data.pairs if cfg.phase == "pretrain" else data.train_queries
    if not items:
        raise ConfigError(f"no training data for phase {cfg.phase}")
    opt = AdamW(model.params.trainable_tensors(), cfg.lr, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopper(cfg.early_stop)
    best_state = model.params.state()
    history: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        while step < cfg.max_steps and not stopper.should_stop:
            order = rng.permutation(len(items))
            for start in range(0, len(order), cfg.batch_size):
                chunk = [items[i] for i in order[start:start + cfg.batch_size]]
                if cfg.phase == "pretrain":
                    loss = pretrain_loss(chunk, model, cfg.tau, cfg.ablation)
                else:
                    batch = make_batch(chunk, data, cfg, negatives, rng)
                    loss = finetune_loss(batch, model, cfg.tau, cfg.fusion, cfg.ablation, data.qrels)
                loss.total.backward()
                opt.step()
                opt.zero_grad()
                step += 1
                if step % cfg.eval_every == 0 or step == cfg.max_steps:
                    metrics = dev_metrics(model, data, cfg)
                    row = {"step": step, **metrics}
                    history.append(row)
                    if log_fh:
                        log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                    if stopper.update(step, metrics["dev_mrr10"]):
                        best_state = model.params.state()
                    logger.info("step %d loss %.4f dev_mrr10 %.4f", step, loss.item(), metrics["dev_mrr10"])
                    if on_eval:
                        on_eval(row)
                if step >= cfg.max_steps or stopper.should_stop:
                    break
    finally:
        if log_fh:
            log_fh.close()
        model.grid_cache = None
    model.params.load_state(best_state)
    return TrainResult(stopper.best_step, float(stopper.best), step, stopper.should_stop, history)


def train_mrr(model: MarvelModel, data: TrainData, fusion: str = "plugin", ablation: Ablation = Ablation()) -> float:
    rep = evaluate_model(model, data.train_queries, list(data.corpus.values()), data.qrels, fusion, ablation)
    return rep["mrr10"].mean


__all__ = [
    "AdamW",
    "FreezePolicy",
    "LossValue",
    "TrainBatch",
    "TrainConfig",
    "TrainData",
    "TrainExample",
    "contrastive_loss",
    "finetune_loss",
    "freeze_policy",
    "image_caption_loss",
    "mine_hard_negatives",
    "pretrain_loss",
    "train",
]
