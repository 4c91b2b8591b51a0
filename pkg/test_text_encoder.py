import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import DataValidationError
from gradcheck import run_gradcheck
from nn import ParameterStore, make_rng
from synthetic_data import generator_vocabulary
from tensor import Tensor
from text_encoder import UNK_ID, GruTextEncoder, Query, Vocabulary, WordFeatures, build_embedding, tokenize


@pytest.fixture
def vocab():
    return Vocabulary(generator_vocabulary())


def _encoder(seed=0, hidden=4, vocab_size=8, embed=3, prefix="text.spatial.gru"):
    store = ParameterStore(make_rng(seed))
    table = build_embedding(store, vocab_size, embed)
    return store, GruTextEncoder(store, prefix, table, hidden)


def test_generator_query_has_no_unknown_words(vocab):
    query = tokenize("red square is moving left", vocab)
    assert len(query.ids) == 5
    assert UNK_ID not in query.ids


def test_unknown_word_maps_to_unk(vocab):
    assert tokenize("xyzzy circle", vocab).ids == (UNK_ID, vocab.lookup("circle"))


def test_lowercases(vocab):
    assert tokenize("RED Circle", vocab).ids == tokenize("red circle", vocab).ids


def test_truncates_to_n_max(vocab):
    assert len(tokenize(" ".join(["red"] * 25), vocab, n_max=20).ids) == 20


def test_empty_query(vocab):
    with pytest.raises(DataValidationError):
        tokenize("   ", vocab)


def test_vocabulary_file(tmp_path, vocab):
    path = vocab.to_file(tmp_path / "vocab.txt")
    assert path.read_text(encoding="utf-8").splitlines()[0] == "red"
    loaded = Vocabulary.from_file(path)
    assert loaded.id_to_token == vocab.id_to_token
    assert loaded.lookup("red") == 2


def test_duplicate_vocabulary_tokens():
    with pytest.raises(DataValidationError):
        Vocabulary(["red", "red"])


def test_zero_parameters_give_zero_states():
    store, encoder = _encoder()
    for p in store:
        p.data[...] = 0.0
    L = encoder.encode(Query("a b c", (2, 3, 4))).L.data
    assert L.shape == (3, 4)
    assert np.all(L == 0.0)


def test_single_word_pooling_is_that_row():
    _, encoder = _encoder()
    words = encoder.encode(Query("a", (5,)))
    assert words.n_words == 1
    assert_allclose(words.pooled.data, words.L.data[0], atol=0)


def test_pooled_is_row_mean():
    words = WordFeatures(L=Tensor(make_rng(1).standard_normal((4, 6))))
    assert_allclose(words.pooled.data, words.L.data.mean(axis=0), atol=1e-12)


def test_recurrence_matches_direct_formula():
    _, enc = _encoder(seed=2)
    ids = (3, 6)
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    h = np.zeros(4)
    rows = []
    for i in ids:
        x = enc.embedding.data[i]
        z = sig(x @ enc.w_z.data + h @ enc.u_z.data + enc.b_z.data)
        r = sig(x @ enc.w_r.data + h @ enc.u_r.data + enc.b_r.data)
        cand = np.tanh(x @ enc.w_h.data + (r * h) @ enc.u_h.data + enc.b_h.data)
        h = (1 - z) * h + z * cand
        rows.append(h)
    assert_allclose(enc.encode(Query("a b", ids)).L.data, np.stack(rows), atol=1e-12)


def test_word_order_matters():
    _, encoder = _encoder(seed=3)
    forward = encoder.encode(Query("a b", (2, 5))).L.data
    backward = encoder.encode(Query("b a", (5, 2))).L.data
    assert not np.allclose(forward, backward)


def test_branch_encoders_share_only_the_embedding():
    store = ParameterStore(make_rng(0))
    table = build_embedding(store, 8, 3)
    spatial = GruTextEncoder(store, "text.spatial.gru", table, 4)
    temporal = GruTextEncoder(store, "text.temporal.gru", build_embedding(store, 8, 3), 4)
    assert spatial.embedding is temporal.embedding
    assert spatial.w_z is not temporal.w_z
    assert len(store.with_prefix(["text.spatial."])) == len(store.with_prefix(["text.temporal."])) == 9


def test_gru_gradients():
    assert run_gradcheck("text-encoder", seed=1).passed
