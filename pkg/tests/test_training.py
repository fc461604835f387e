import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marvel.autodiff import NumericError, Tensor, precision
from marvel.data import IMAGE, TEXT, Document, Query
from marvel.encoder import MarvelModel
from marvel.forge import gen_synthetic, split
from marvel.index import build_index, search
from marvel.text import build_vocab
from marvel.training import (
    FREEZE_GRID,
    AdamW,
    ConfigError,
    EarlyStopper,
    TrainBatch,
    TrainConfig,
    TrainData,
    TrainExample,
    candidate_layout,
    contrastive_loss,
    finetune_loss,
    freeze_policy,
    image_caption_loss,
    load_negatives,
    mine_hard_negatives,
    mining_candidates,
    optimizer_step,
    paper_faithful,
    parse_config,
    pretrain_loss,
    save_negatives,
    train,
    train_mrr,
)

from conftest import TINY


# -- scalar oracles -----------------------------------------------------------------

def cos(u, v):
    return sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u) * sum(b * b for b in v))


def oracle_pretrain(I, C, tau):
    n = len(I)
    s = [[cos(I[i], C[j]) / tau for j in range(n)] for i in range(n)]
    l_ic = sum(-s[i][i] + math.log(sum(math.exp(s[i][j]) for j in range(n))) for i in range(n)) / n
    l_ci = sum(-s[i][i] + math.log(sum(math.exp(s[j][i]) for j in range(n))) for i in range(n)) / n
    return l_ic, l_ci


def oracle_finetune(Q, D, pos, mask, tau):
    total = 0.0
    for b in range(len(Q)):
        s = [cos(Q[b], D[j]) / tau for j in range(len(D))]
        denom = sum(math.exp(s[j]) for j in range(len(D)) if mask[b][j])
        total += -math.log(math.exp(s[pos[b]]) / denom)
    return total / len(Q)


def test_image_caption_loss_matches_oracle():
    rng = np.random.default_rng(0)
    with precision("f64"):
        I, C = rng.standard_normal((3, 6)), rng.standard_normal((3, 6))
        lv = image_caption_loss(Tensor(I), Tensor(C), tau=0.5)
    ic, ci = oracle_pretrain(I.tolist(), C.tolist(), 0.5)
    assert lv.components["ic"] == pytest.approx(ic, abs=1e-9)
    assert lv.components["ci"] == pytest.approx(ci, abs=1e-9)
    assert lv.item() == pytest.approx(ic + ci, abs=1e-9)


def test_single_pair_loss_is_zero():
    lv = image_caption_loss(Tensor(np.ones((1, 4))), Tensor(np.arange(4.0)[None]), 0.01)
    assert lv.item() == 0.0


def test_equal_scores_give_ln2_each_way():
    with precision("f64"):
        lv = image_caption_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), 0.01)
    assert lv.components["ic"] == pytest.approx(math.log(2))
    assert lv.item() == pytest.approx(1.3863, abs=1e-4)


def test_swapping_roles_swaps_directions():
    rng = np.random.default_rng(1)
    with precision("f64"):
        I, C = Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal((4, 5)))
        a, b = image_caption_loss(I, C, 0.1), image_caption_loss(C, I, 0.1)
    assert a.components["ic"] == pytest.approx(b.components["ci"], abs=1e-12)
    assert a.components["ci"] == pytest.approx(b.components["ic"], abs=1e-12)


def test_pretrain_loss_rejects_duplicate_ids(small_set, tiny_model):
    p = small_set.pairs[0]
    with pytest.raises(ValueError):
        pretrain_loss([p, p], tiny_model)


def test_contrastive_loss_matches_oracle_with_mask():
    rng = np.random.default_rng(2)
    Q, D = rng.standard_normal((3, 5)), rng.standard_normal((6, 5))
    pos = np.array([0, 2, 4])
    mask = rng.random((3, 6)) > 0.4
    mask[np.arange(3), pos] = True
    with precision("f64"):
        lv = contrastive_loss(Tensor(Q), Tensor(D), pos, mask, [IMAGE, TEXT] * 3, tau=0.2)
    assert lv.item() == pytest.approx(oracle_finetune(Q.tolist(), D.tolist(), pos, mask.tolist(), 0.2), abs=1e-9)


def test_uniform_scores_give_ln_n():
    n = 7
    Q, D = np.ones((1, 4)), np.ones((n, 4))
    with precision("f64"):
        lv = contrastive_loss(Tensor(Q), Tensor(D), np.array([0]), np.ones((1, n), bool), [TEXT] * n, 0.01)
    assert abs(lv.item() - math.log(n)) < 1e-9


def test_saturated_positive_gives_zero_loss():
    Q = np.array([[1.0, 0.0]])
    D = np.array([[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    with precision("f64"):
        lv = contrastive_loss(Tensor(Q), Tensor(D), np.array([0]), np.ones((1, 3), bool), [TEXT] * 3, 0.01)
    assert lv.item() < 1e-80


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_finetune_loss_shift_invariant(seed, c):
    # adding c to every candidate logit leaves the loss unchanged
    rng = np.random.default_rng(seed)
    from marvel.autodiff import logsumexp
    S = rng.standard_normal((2, 4))
    mask = np.ones((2, 4), bool)
    with precision("f64"):
        a = (logsumexp(Tensor(S), mask=mask) - Tensor(S[[0, 1], [0, 1]])).data
        b = (logsumexp(Tensor(S + c), mask=mask) - Tensor(S[[0, 1], [0, 1]] + c)).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_neg_mass_components_split_by_modality():
    Q = np.array([[1.0, 0.0]])
    D = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    with precision("f64"):
        lv = contrastive_loss(Tensor(Q), Tensor(D), np.array([0]), np.ones((1, 3), bool), [TEXT, IMAGE, TEXT], 1.0)
    e = math.e
    assert lv.components["image_neg_mass"] == pytest.approx(1 / (e + 2))
    assert lv.components["text_neg_mass"] == pytest.approx(1 / (e + 2))


# -- batches ------------------------------------------------------------------------

def docs3():
    from conftest import random_image
    rng = np.random.default_rng(0)
    return (Document("a", TEXT, "x"), Document("b", IMAGE, "y", random_image(rng)), Document("c", TEXT, "z"))


def test_positive_in_negatives_rejected():
    a, b, c = docs3()
    batch = TrainBatch([TrainExample(Query("q", "x"), a, [a, b])])
    with pytest.raises(ValueError):
        candidate_layout(batch)


def test_balanced_batch_needs_one_of_each():
    a, b, c = docs3()
    with pytest.raises(ValueError):
        candidate_layout(TrainBatch([TrainExample(Query("q", "x"), a, [c])], balanced=True))
    docs, pos, mask = candidate_layout(TrainBatch([TrainExample(Query("q", "x"), a, [b, c])], balanced=True))
    assert [d.id for d in docs] == ["a", "b", "c"] and mask.all()


def test_in_batch_candidates_skip_judged_relevant():
    a, b, c = docs3()
    ex = [TrainExample(Query("q1", "x"), a), TrainExample(Query("q2", "y"), b), TrainExample(Query("q3", "z"), c)]
    qrels = {"q1": {"a": 1, "c": 1}, "q2": {"b": 1}, "q3": {"c": 1}}
    _, pos, mask = candidate_layout(TrainBatch(ex), qrels)
    assert pos.tolist() == [0, 1, 2]
    assert mask.tolist() == [[True, True, False], [True, True, True], [True, True, True]]
    _, _, mask = candidate_layout(TrainBatch(ex, in_batch=False), qrels)
    assert mask.tolist() == np.eye(3, dtype=bool).tolist()


def test_finetune_loss_through_model(small_set, tiny_model):
    q = small_set.queries[0]
    pos = small_set.corpus[sorted(small_set.qrels[q.id])[0]]
    negs = [d for d in small_set.corpus.values() if d.id not in small_set.qrels[q.id]]
    img = next(d for d in negs if d.modality == IMAGE)
    txt = next(d for d in negs if d.modality == TEXT)
    batch = TrainBatch([TrainExample(q, pos, [img, txt])], balanced=True)
    with precision("f64"):
        tiny_model.params.astype(np.float64)
        lv = finetune_loss(batch, tiny_model, 0.05)
        E = tiny_model.encode_numpy([q, pos, img, txt])
    expect = oracle_finetune([E[0].tolist()], E[1:].tolist(), [0], [[True] * 3], 0.05)
    assert lv.item() == pytest.approx(expect, abs=1e-6)
    assert lv.item() >= 0


# -- freeze policies ----------------------------------------------------------------

def test_freeze_policies():
    assert freeze_policy("pretrain").trainable == {"vision", "projection"}
    assert freeze_policy("finetune").trainable == {"lm", "projection", "prompts"}
    assert freeze_policy("finetune").frozen == {"vision"}
    assert set(FREEZE_GRID) == {"both", "lm", "vision", "none"}
    assert freeze_policy("finetune", "none").trainable == {"projection", "prompts"}
    with pytest.raises(ConfigError):
        freeze_policy("pretrain", "lm")
    with pytest.raises(ConfigError):
        freeze_policy("warmup")


# -- optimiser ----------------------------------------------------------------------

def test_zero_grad_leaves_params():
    with precision("f64"):
        w = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
        w.grad = np.zeros_like(w.data)
        optimizer_step([w], lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(w.data, [[1.0, -2.0]])


def test_descent_on_square():
    with precision("f64"):
        w = Tensor(np.array([1.0]), requires_grad=True)
        (w * w).sum().backward()
        optimizer_step([w], lr=1e-3)
    assert w.data[0] < 1.0


def adam_reference(w, grads_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    w = list(w)
    for t in range(1, steps + 1):
        g = grads_fn(w)
        for i in range(len(w)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            w[i] -= lr * (m[i] / (1 - b1 ** t)) / (math.sqrt(v[i] / (1 - b2 ** t)) + eps)
    return w


def test_quadratic_converges_to_minimizer():
    # f(w) = (w0 - 3)^2 + 2 (w1 + 1)^2, minimised at (3, -1)
    target = np.array([3.0, -1.0])
    with precision("f64"):
        w = Tensor(np.zeros(2), requires_grad=True)
        opt = AdamW([w], lr=0.05, weight_decay=0.0)
        for _ in range(200):
            d = w - Tensor(target)
            (d * d * Tensor([1.0, 2.0])).sum().backward()
            opt.step()
            opt.zero_grad()
    ref = adam_reference([0.0, 0.0], lambda x: [2 * (x[0] - 3), 4 * (x[1] + 1)], 200, 0.05)
    np.testing.assert_allclose(w.data, ref, atol=1e-9)
    np.testing.assert_allclose(w.data, target, atol=1e-3)


def test_weight_decay_is_decoupled_and_skips_vectors():
    with precision("f64"):
        W = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        W.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
        optimizer_step([W, b], lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(W.data, 0.95)
    np.testing.assert_array_equal(b.data, 1.0)


def test_nan_gradient_aborts():
    w = Tensor(np.ones(2), requires_grad=True)
    w.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError):
        optimizer_step([w])


# -- hard-negative mining -----------------------------------------------------------

def test_mining_candidates_drop_relevant_and_keep_order():
    rng = np.random.default_rng(0)
    embs = {f"d{i}": rng.standard_normal(4) for i in range(5)}
    q = embs["d3"] + 0.01
    ranked = search(build_index(embs), q, 3)
    assert ranked[0][0] == "d3"
    brute = sorted(embs, key=lambda d: -float(embs[d] @ q / np.linalg.norm(embs[d]) / np.linalg.norm(q)))
    assert mining_candidates(ranked, {"q": {"d3": 1}}, "q") == brute[1:3]


def test_mining_balanced_and_deterministic(small_set, tiny_model, tmp_path):
    s = small_set
    a = mine_hard_negatives(tiny_model, s.queries, s.corpus, s.qrels, k=10, seed=4)
    b = mine_hard_negatives(tiny_model, s.queries, s.corpus, s.qrels, k=10, seed=4)
    assert a == b
    for q in s.queries:
        neg = a[q.id]
        assert len(neg.image) == 1 and len(neg.text) == 1
        assert s.corpus[neg.image[0]].modality == IMAGE and s.corpus[neg.text[0]].modality == TEXT
        assert not set(neg.ids) & set(s.qrels[q.id])
    save_negatives(tmp_path / "n.jsonl", a)
    assert load_negatives(tmp_path / "n.jsonl") == a


def test_mining_falls_back_when_a_modality_is_missing(small_set, tiny_model):
    s = small_set
    neg = mine_hard_negatives(tiny_model, s.queries[:2], s.corpus, s.qrels, k=1, seed=0)
    for a in neg.values():
        assert len(a.image) == 1 and len(a.text) == 1
        assert a.fallback  # top-1 cannot hold both modalities


def test_text_only_mode(small_set, tiny_model):
    s = small_set
    neg = mine_hard_negatives(tiny_model, s.queries, s.corpus, s.qrels, k=20, mode="text_only")
    assert all(len(a.text) == 2 and not a.image for a in neg.values())


# -- configuration ------------------------------------------------------------------

def test_parse_config():
    cfg = parse_config("phase = pretrain\n# comment\ntau = 0.05\nbatch-size = 4\ndrop_caption = true\nfreeze = none\n")
    assert (cfg.phase, cfg.tau, cfg.batch_size, cfg.drop_caption, cfg.freeze) == ("pretrain", 0.05, 4, True, None)
    with pytest.raises(ConfigError):
        parse_config("nonsense = 1")
    with pytest.raises(ConfigError):
        parse_config("tau = -1")
    with pytest.raises(ConfigError):
        parse_config("just words")


def test_paper_faithful_values():
    cfg = paper_faithful(TrainConfig())
    assert (cfg.batch_size, cfg.lr, cfg.tau, cfg.hard_neg_top_k, cfg.eval_every, cfg.early_stop) == \
        (64, 5e-6, 0.01, 100, 500, 5)
    assert TrainConfig().tau == 0.01 and TrainConfig().batch_size == 8


def test_early_stopper_counts_five_after_best():
    es = EarlyStopper(5)
    evals = 0
    for step, value in enumerate([0.1, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.9]):
        es.update(step, value)
        evals += 1
        if es.should_stop:
            break
    assert es.best == 0.3 and es.best_step == 1 and evals == 7


def test_train_stops_five_evals_after_frozen_metric(small_set, small_vocab):
    s = small_set
    model = MarvelModel.create(small_vocab, seed=1, **TINY)
    data = TrainData(s.corpus, s.queries[:4], s.queries[4:], s.qrels)
    cfg = TrainConfig(lr=1e-12, max_steps=100, eval_every=1, batch_size=4)
    res = train(model, data, cfg)
    assert res.stopped_early
    assert len(res.history) == res.history.index(next(h for h in res.history if h["step"] == res.best_step)) + 6


def test_train_restores_best_and_logs(small_set, small_vocab, tmp_path):
    s = small_set
    model = MarvelModel.create(small_vocab, seed=1, **TINY)
    data = TrainData(s.corpus, s.queries[:4], s.queries[4:], s.qrels)
    res = train(model, data, TrainConfig(max_steps=6, eval_every=2, batch_size=4), log_path=tmp_path / "log")
    lines = (tmp_path / "log").read_text().splitlines()
    assert len(lines) == 3
    assert set(__import__("json").loads(lines[0])) == {"step", "dev_mrr10", "dev_ndcg10", "dev_recall100"}
    assert res.best_metric == max(h["dev_mrr10"] for h in res.history)


def test_freeze_contract_after_short_runs(small_set, small_vocab):
    s = small_set
    model = MarvelModel.create(small_vocab, seed=1, **TINY)
    data = TrainData(s.corpus, s.queries[:4], s.queries[4:], s.qrels, s.pairs)
    before = {g: model.params.group_bytes(g) for g in ("lm", "vision", "projection")}
    train(model, data, TrainConfig(phase="pretrain", max_steps=2, eval_every=1, lr=1e-2, batch_size=4))
    assert model.params.group_bytes("lm") == before["lm"]
    assert model.params.group_bytes("projection") != before["projection"]
    mid = model.params.group_bytes("vision")
    train(model, data, TrainConfig(max_steps=2, eval_every=1, lr=1e-2, batch_size=4))
    assert model.params.group_bytes("vision") == mid


def test_overfit_32_queries():
    s = gen_synthetic(seed=42, n_queries=32, n_text_docs=64, n_image_docs=64, n_pairs=0)
    vocab = build_vocab([d.text for d in s.corpus.values()] + [q.text for q in s.queries])
    model = MarvelModel.create(vocab, seed=42)
    data = TrainData(s.corpus, s.queries, s.queries, s.qrels)
    train(model, data, TrainConfig(lr=3e-3, tau=0.1, max_steps=300, eval_every=25))
    assert train_mrr(model, data) >= 0.95
