import pytest
from hypothesis import given, strategies as st

from slotgen.tokenizer import (
    BOS,
    EOS,
    NONE,
    PAD,
    SPECIALS,
    WORD_END,
    Vocabulary,
    build_vocab,
    normalize,
)


def toks(v, ids):
    return [v.token(i) for i in ids]


def test_build_vocab_single_word():
    v = build_vocab(["hi"])
    assert {"h", "i" + WORD_END} <= set(v.tokens)
    assert tuple(v.tokens[:4]) == SPECIALS


def test_build_vocab_two_words():
    v = build_vocab(["so ha"])
    assert {"s", "o" + WORD_END, "h", "a" + WORD_END} <= set(v.tokens)


def test_build_vocab_duplicates_collapse():
    assert build_vocab(["ab", "ab"]).tokens == build_vocab(["ab"]).tokens


def test_build_vocab_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab([])
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab(["   "])


def test_encode_word_suffix_scheme():
    v = build_vocab(["soha mario a"])
    assert toks(v, v.encode_word("soha")) == ["s", "o", "h", "a" + WORD_END]
    assert toks(v, v.encode_word("a")) == ["a" + WORD_END]
    assert toks(v, v.encode_word("mario")) == ["m", "a", "r", "i", "o" + WORD_END]


def test_encode_word_unknown_char():
    v = build_vocab(["hi"])
    with pytest.raises(ValueError, match="'z'"):
        v.encode_word("ziti")


def test_encode_text_and_decode():
    v = build_vocab(["so ha"])
    assert toks(v, v.encode_text("so ha")) == ["s", "o" + WORD_END, "h", "a" + WORD_END]
    assert v.decode(v.encode_text("so ha")) == "so ha"


def test_decode_partial_word_no_trailing_space():
    v = build_vocab(["mario"])
    ids = v.encode_word("mario")
    assert v.decode(ids[:3]) == "mar"


def test_is_word_end():
    v = build_vocab(["so"])
    assert v.is_word_end(v.index["o" + WORD_END])
    assert not v.is_word_end(v.index["s"])


def test_specials_have_fixed_ids():
    v = build_vocab(["abc"])
    assert v.token(0) == BOS and v.token(1) == EOS
    assert v.token(2) == PAD and v.token(3) == NONE


def test_save_load_roundtrip(tmp_path):
    v = build_vocab(["hello world"])
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == v


words = st.lists(
    st.text(alphabet="abcdefgh", min_size=1, max_size=6), min_size=1, max_size=6
)


@given(words)
def test_roundtrip_property(ws):
    text = " ".join(ws)
    v = build_vocab([text])
    assert v.decode(v.encode_text(text)) == text


@given(words)
def test_word_end_count_property(ws):
    text = " ".join(ws)
    v = build_vocab([text])
    ends = [i for i in v.encode_text(text) if v.is_word_end(i)]
    assert len(ends) == len(ws)


def test_normalize():
    assert normalize("  Hello,   WORLD!! ") == "hello world"
    assert normalize("Café 42") == "caf"
