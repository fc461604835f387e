import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marvel.autodiff import NumericError, Tensor
from marvel.data import IMAGE, TEXT, Document, Query
from marvel.encoder import (
    FEATURE,
    PROMPT,
    TOKEN,
    Ablation,
    EmptyInputError,
    FusionPlan,
    MarvelModel,
    assemble_input,
    score,
)
from marvel.text import build_vocab

from conftest import TINY, random_image

CAPTION = "one two three four five six seven eight nine ten"


@pytest.fixture
def vocab():
    return build_vocab([CAPTION, "a b c d e f g", "red fox photo"])


@pytest.fixture
def image_doc():
    return Document("i1", IMAGE, CAPTION, random_image(np.random.default_rng(0)))


def test_plugin_layout(vocab, image_doc):
    seq = assemble_input(image_doc, vocab)
    assert seq.n_pos == 61
    assert seq.kinds[0] == PROMPT and seq.kinds[50] == PROMPT
    assert seq.kinds[1:50] == [FEATURE] * 49
    assert seq.kinds[51:] == [TOKEN] * 10


def test_layout_ablations(vocab, image_doc):
    assert assemble_input(image_doc, vocab, ablation=Ablation(drop_prompt=True)).n_pos == 59
    assert assemble_input(image_doc, vocab, ablation=Ablation(drop_caption=True)).n_pos == 51
    seq = assemble_input(image_doc, vocab, ablation=Ablation(drop_features=True))
    assert seq.kinds == [TOKEN] * 10
    with pytest.raises(EmptyInputError):
        assemble_input(image_doc, vocab, ablation=Ablation(drop_caption=True, drop_features=True))


def test_text_items_hold_tokens_only(vocab):
    seq = assemble_input(Document("t", TEXT, "a b c d e f g"), vocab)
    assert seq.n_pos == 7 and set(seq.kinds) == {TOKEN}
    assert set(assemble_input(Query("q", "red fox photo"), vocab).kinds) == {TOKEN}
    with pytest.raises(EmptyInputError):
        assemble_input(Query("q", "..."), vocab)


def test_caption_truncated_alone(vocab):
    long = Document("i", IMAGE, " ".join(["one"] * 300), random_image(np.random.default_rng(0)))
    assert assemble_input(long, vocab).n_pos == 51 + 128


def test_sum_plan_splits_sides(vocab, image_doc):
    plan = assemble_input(image_doc, vocab, "sum")
    assert isinstance(plan, FusionPlan)
    assert plan.caption.n_pos == 10 and plan.image.n_pos == 51


def test_unknown_fusion(vocab, image_doc):
    with pytest.raises(ValueError):
        assemble_input(image_doc, vocab, "average")


def make_model(vocab, seed=5):
    return MarvelModel.create(vocab, seed=seed, **TINY)


def test_encode_shape_finite_deterministic(vocab, image_doc):
    m = make_model(vocab)
    items = [image_doc, Query("q", "red fox photo"), Document("t", TEXT, "a b c")]
    a = m.encode(items).data
    b = m.encode(items).data
    assert a.shape == (3, 8) and np.all(np.isfinite(a))
    assert np.array_equal(a, b)


def test_text_doc_equals_image_doc_without_image_side(vocab, image_doc):
    m = make_model(vocab)
    txt = Document("t", TEXT, CAPTION)
    a = m.encode([txt]).data
    b = m.encode([image_doc], ablation=Ablation(drop_features=True, drop_prompt=True)).data
    np.testing.assert_allclose(a, b, atol=1e-6)


@pytest.mark.parametrize("fusion", ["sum", "concat"])
def test_plugin_differs_from_other_fusions(vocab, image_doc, fusion):
    m = make_model(vocab)
    assert not np.allclose(m.encode([image_doc]).data, m.encode([image_doc], fusion).data)


def test_sum_fusion_is_sum_of_sides(vocab, image_doc):
    m = make_model(vocab)
    cap = m.encode([Query("c", CAPTION)]).data
    img = m.encode([image_doc], ablation=Ablation(drop_caption=True)).data
    np.testing.assert_allclose(m.encode([image_doc], "sum").data, cap + img, atol=1e-5)


def test_batching_does_not_change_embeddings(vocab, image_doc):
    m = make_model(vocab)
    items = [Query("q", "red fox photo"), image_doc, Document("t", TEXT, "a b c d e f g")]
    alone = np.concatenate([m.encode([it]).data for it in items])
    np.testing.assert_allclose(m.encode(items).data, alone, atol=1e-5)
    np.testing.assert_allclose(m.encode_numpy(items, batch_size=2), alone, atol=1e-5)


def test_duplicate_document_same_embedding(vocab, image_doc):
    m = make_model(vocab)
    twin = Document("i2", IMAGE, image_doc.text, image_doc.image)
    e = m.encode([image_doc, twin]).data
    np.testing.assert_allclose(e[0], e[1], atol=1e-6)


def test_cross_attention_rows_sum_to_one(vocab, image_doc):
    m = make_model(vocab)
    w, seq = m.cross_attention_map(image_doc)
    assert w.shape == (2, 61) and seq.n_pos == 61
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        m.cross_attention_map(image_doc, "sum")


def test_zeroed_features_get_uniform_attention(vocab, image_doc):
    m = make_model(vocab)
    m.params["lm.pos_emb"].data[:] = 0
    w, seq = m.cross_attention_map(image_doc, overrides={"i1": np.zeros((49, 8))})
    feat = w[:, seq.positions(FEATURE)]
    np.testing.assert_allclose(feat, feat[:, :1].repeat(49, axis=1), rtol=1e-5)


def test_score_is_cosine():
    q, d = np.array([1.0, 2.0, 0.0]), np.array([2.0, 4.0, 0.0])
    assert score(q, d).item() == pytest.approx(1.0)
    with pytest.raises(NumericError):
        score(np.zeros(3), d)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100))
def test_ranking_invariant_to_query_scale(alpha):
    rng = np.random.default_rng(0)
    q, D = rng.standard_normal(8), rng.standard_normal((10, 8))
    s1 = [score(q, d).item() for d in D]
    s2 = [score(q * alpha, d).item() for d in D]
    assert int(np.argmax(s1)) == int(np.argmax(s2))


def test_vocab_size_must_match(vocab):
    from marvel.params import ModelConfig, ModelParams
    cfg = ModelConfig(vocab_size=len(vocab) + 1)
    with pytest.raises(ValueError):
        MarvelModel(cfg, ModelParams.initialize(cfg), vocab)


def test_tensor_overrides_keep_gradients(vocab, image_doc):
    m = make_model(vocab)
    m.params.set_trainable({"lm"})
    feats = Tensor(np.ones((49, 8)), requires_grad=True)
    (m.encode([image_doc], overrides={"i1": feats}) * Tensor(np.arange(8.0))).sum().backward()
    assert feats.grad is not None and np.any(feats.grad != 0)
