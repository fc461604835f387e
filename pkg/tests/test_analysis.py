import math

import numpy as np
import pytest

from marvel.analysis import (
    attention_profile,
    attention_stats,
    format_attention,
    format_replacement,
    format_verbalization,
    replace_features,
    replacement_features,
    replacement_study,
    topic_overlap,
    verbalize,
)
from marvel.autodiff import NumericError
from marvel.data import IMAGE
from marvel.encoder import FEATURE, PROMPT, TOKEN, MarvelModel
from marvel.forge import gen_synthetic
from marvel.text import build_vocab
from marvel.training import TrainConfig, TrainData, train


def image_docs(s, n=None):
    docs = [d for d in s.corpus.values() if d.modality == IMAGE]
    return docs[:n] if n else docs


def test_feature_equal_to_token_embedding_verbalizes_to_it(small_set, tiny_model):
    doc = image_docs(small_set)[0]
    v = tiny_model.vocab
    word = v.tokens[v.n_special + 3]
    feats = np.tile(tiny_model.params["lm.tok_emb"].data[v.id(word)], (49, 1))
    res = verbalize(doc, tiny_model, k=3, overrides={doc.id: feats})
    assert res.per_position[0][0][0] == word
    assert res.per_position[0][0][1] == pytest.approx(1.0, abs=1e-6)
    assert res.pooled[0][0] == word
    assert all(t not in ("<pad>", "<unk>", "<dec>", "<img>", "</img>") for t, _ in res.pooled)


def test_scores_non_increasing_and_scale_invariant(small_set, tiny_model):
    doc = image_docs(small_set)[1]
    res = verbalize(doc, tiny_model, k=8)
    for lst in res.per_position + [res.pooled]:
        scores = [s for _, s in lst]
        assert scores == sorted(scores, reverse=True)
    from marvel.analysis import projected
    scaled = verbalize(doc, tiny_model, k=8, overrides={doc.id: 3.5 * projected(doc, tiny_model)})
    assert [t for t, _ in scaled.pooled] == [t for t, _ in res.pooled]


def test_zero_feature_is_an_error(small_set, tiny_model):
    doc = image_docs(small_set)[0]
    with pytest.raises(NumericError):
        verbalize(doc, tiny_model, overrides={doc.id: np.zeros((49, 8))})


def test_k_bounds(small_set, tiny_model):
    doc = image_docs(small_set)[0]
    n = len(tiny_model.vocab) - tiny_model.vocab.n_special
    assert len(verbalize(doc, tiny_model, k=n).pooled) == n
    with pytest.raises(ValueError):
        verbalize(doc, tiny_model, k=n + 1)
    with pytest.raises(ValueError):
        verbalize(doc, tiny_model, k=0)


def test_entropy_examples():
    kinds = [PROMPT, FEATURE, FEATURE, PROMPT, TOKEN, TOKEN, TOKEN, TOKEN]
    w = np.array([[0, 0, 0, 0, 0.25, 0.25, 0.25, 0.25],
                  [0, 1.0, 0, 0, 0, 0, 0, 0]])
    mass, ent = attention_profile(w, kinds)
    assert ent[0, 2] == pytest.approx(math.log(4))
    assert ent[1, 0] == 0.0
    assert math.isnan(ent[0, 0])
    np.testing.assert_allclose(mass.sum(axis=1), 1.0)


def test_attention_stats_bounds(small_set, tiny_model):
    docs = image_docs(small_set, 4)
    st = attention_stats(docs, tiny_model)
    np.testing.assert_allclose(st.head_mass.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(st.head_mass >= 0)
    sizes = st.group_sizes
    for g in range(3):
        col = st.head_entropy[:, g]
        assert np.all((col >= 0) & (col <= math.log(sizes[g]) + 1e-9))
    assert "feature mass" in format_attention(st)
    assert format_attention(st, "tsv").startswith("head\tgroup")
    with pytest.raises(ValueError):
        attention_stats([], tiny_model)


def test_knn1_is_identity_on_token_features(small_set, tiny_model):
    doc = image_docs(small_set)[0]
    E = tiny_model.params["lm.tok_emb"].data
    rows = E[tiny_model.vocab.n_special + np.arange(49) % 10]
    base = tiny_model.encode_numpy([doc], overrides={doc.id: rows})[0]
    from marvel import analysis
    swapped = analysis.replacement_features(doc, _with_features(tiny_model, doc, rows), "knn1")
    np.testing.assert_allclose(swapped, rows, atol=1e-6)
    again = tiny_model.encode_numpy([doc], overrides={doc.id: swapped})[0]
    np.testing.assert_allclose(again, base, atol=1e-6)


class _with_features:
    """Model proxy whose projected features are fixed rows (for replacement tests)."""

    def __init__(self, model, doc, rows):
        self._m, self._doc, self._rows = model, doc, rows

    def __getattr__(self, name):
        return getattr(self._m, name)

    def projected_features(self, keys, images, overrides=None):
        return self._m.projected_features(keys, images, {self._doc.id: self._rows})


def test_knn1_then_verbalize_returns_replacing_tokens(small_set, tiny_model):
    doc = image_docs(small_set)[2]
    feats = replacement_features(doc, tiny_model, "knn1")
    res = verbalize(doc, tiny_model, k=1, overrides={doc.id: feats})
    E = tiny_model.params["lm.tok_emb"].data
    v = tiny_model.vocab
    for pos, lst in enumerate(res.per_position):
        tok = lst[0][0]
        np.testing.assert_allclose(E[v.id(tok)], feats[pos], atol=1e-6)


def test_random_mode_seeded(small_set, tiny_model):
    doc = image_docs(small_set)[0]
    a = replace_features(doc, tiny_model, "random", seed=3)
    b = replace_features(doc, tiny_model, "random", seed=3)
    c = replace_features(doc, tiny_model, "random", seed=4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    with pytest.raises(ValueError):
        replace_features(doc, tiny_model, "nearest")


def test_knn5_mean_rows_average_five_tokens(small_set, tiny_model):
    doc = image_docs(small_set)[0]
    feats = replacement_features(doc, tiny_model, "knn5_mean")
    assert feats.shape == (49, 8) and np.all(np.isfinite(feats))


@pytest.fixture(scope="module")
def pretrained():
    s = gen_synthetic(seed=42)
    vocab = build_vocab([d.text for d in s.corpus.values()] + [q.text for q in s.queries] +
                        [p.caption for p in s.pairs])
    untrained = MarvelModel.create(vocab, seed=42)
    model = MarvelModel.create(vocab, seed=42)
    data = TrainData(s.corpus, s.queries[:64], s.queries[64:], s.qrels, s.pairs[:224], s.pairs[224:])
    train(model, data, TrainConfig(phase="pretrain", lr=1e-3, tau=0.1, batch_size=16, max_steps=150))
    return s, untrained, model


def test_pretraining_moves_features_toward_topic_words(pretrained):
    s, untrained, model = pretrained
    imgs = image_docs(s, 50)

    def overlap(m):
        return sum(topic_overlap(verbalize(d, m, 10), s.topic_words[s.topics[d.id]]) for d in imgs)

    assert overlap(model) > overlap(untrained)


def test_replacement_study_reports_every_mode(pretrained):
    s, _, model = pretrained
    study = replacement_study(model, s.queries[64:80], s.corpus, s.qrels)
    assert list(study) == ["original", "knn1", "knn5_mean", "random"]
    for rep in study.values():
        assert set(rep) == {"Text", "Image", "Multi"}
    text = format_replacement(study)
    assert "knn5_mean" in text and "random" in text
    assert format_replacement(study, "tsv").count("\n") == 5


def test_verbalization_report(pretrained):
    s, _, model = pretrained
    doc = image_docs(s)[0]
    res = verbalize(doc, model, 5)
    text = format_verbalization([res], {doc.id: doc.text}, positions=True)
    assert text.startswith(f"== {doc.id} ==") and "caption:" in text and "[6,6]" in text
    assert format_verbalization([res], fmt="tsv").count("\tpooled\t") == 5
