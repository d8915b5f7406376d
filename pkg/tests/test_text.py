import pytest
import torch
from hypothesis import given, settings, strategies as st

from latrack.errors import RangeError
from latrack.text import (
    NULL, PAD, UNK, TextEncoder, default_vocabulary, encode_text, null_condition,
    tokenize,
)


@pytest.fixture(scope="module")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="module")
def encoder(vocab):
    torch.manual_seed(1)
    return TextEncoder(vocab.size, d_cond=64, length=8)


def test_tokenize_caption(vocab):
    ids = tokenize("track the red circle", vocab)
    expect = [vocab.index["track"], vocab.index["the"], vocab.index["red"],
              vocab.index["circle"], PAD, PAD, PAD, PAD]
    assert ids.tolist() == expect


def test_tokenize_empty_is_null(vocab):
    assert tokenize("", vocab).tolist() == [NULL] + [PAD] * 7
    assert tokenize("   ", vocab).tolist() == [NULL] + [PAD] * 7


def test_tokenize_unknown_word(vocab):
    ids = tokenize("track the zephyr circle", vocab)
    assert ids.tolist()[2] == UNK
    assert ids.tolist()[3] == vocab.index["circle"]


def test_tokenize_case_and_truncation(vocab):
    assert tokenize("TRACK The RED circle", vocab).tolist() == \
        tokenize("track the red circle", vocab).tolist()
    long = tokenize("track " * 30, vocab)
    assert len(long) == 8


@settings(max_examples=60, deadline=None)
@given(st.text(max_size=40))
def test_tokenize_total_function(caption):
    vocab = default_vocabulary()
    ids = tokenize(caption, vocab)
    assert len(ids) == 8
    assert int(ids.max()) < vocab.size and int(ids.min()) >= 0


def test_reserved_ids_stable_under_vocab_extension():
    base = default_vocabulary()
    extended = default_vocabulary(extra_words=("zeppelin", "aardvark"))
    for tok, idx in (("<pad>", PAD), ("<null>", NULL), ("<unk>", UNK)):
        assert base.index[tok] == idx
        assert extended.index[tok] == idx
    assert extended.size == base.size + 2


def test_encode_shape_and_determinism(vocab, encoder):
    ids = tokenize("track the red circle", vocab)
    a = encode_text(ids, encoder)
    assert tuple(a.embeddings.shape) == (8, 64)
    b = encode_text(ids, encoder)
    assert torch.equal(a.embeddings, b.embeddings)
    assert not a.is_null


def test_encode_sensitive_to_one_word(vocab, encoder):
    a = encode_text(tokenize("track the red circle", vocab), encoder)
    b = encode_text(tokenize("track the blue circle", vocab), encoder)
    assert float((a.embeddings - b.embeddings).abs().max()) > 0


def test_encode_rejects_out_of_vocab_ids(vocab, encoder):
    ids = torch.full((8,), vocab.size + 5, dtype=torch.long)
    with pytest.raises(RangeError):
        encode_text(ids, encoder)


def test_null_condition(vocab, encoder):
    n1 = null_condition(encoder, vocab)
    n2 = null_condition(encoder, vocab)
    assert n1.is_null and tuple(n1.embeddings.shape) == (8, 64)
    assert torch.equal(n1.embeddings, n2.embeddings)
    caption = encode_text(tokenize("track the red circle", vocab), encoder)
    assert float((n1.embeddings - caption.embeddings).abs().max()) > 0
