import pytest
from hypothesis import given, settings, strategies as st

from prefixmm.text_tokenizer import BOS, EOS, PAD, UNK, Vocabulary, VocabError, build_vocab, decode, encode

CAPTIONS = ["a red square above a blue circle", "a green triangle left of a yellow square",
            "a blue circle below a red triangle"]


def test_specials_have_fixed_ids():
    v = build_vocab(CAPTIONS, 64)
    assert v.pieces[:4] == ["[PAD]", "[BOS]", "[EOS]", "[UNK]"]
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)


def test_small_corpus_hand_trace():
    v = build_vocab(["aa aa", "ab"], 10)
    assert {"a", "##a", "##b"} <= set(v.pieces)
    # pairs: (a,##a) x2, (a,##b) x1 -> "aa" merged first, then "ab"
    assert v.pieces[-2:] == ["aa", "ab"]
    # specials, a, b, ##a, ##b, then "aa" (count 2) before "ab" (count 1)
    assert len(v) == 10


def test_empty_corpus_rejected():
    with pytest.raises(VocabError):
        build_vocab([], 32)
    with pytest.raises(VocabError):
        build_vocab(["   "], 32)


def test_target_too_small_rejected():
    with pytest.raises(VocabError):
        build_vocab(["abc"], 10)  # 4 specials + 3 chars + 3 continuations


def test_build_is_deterministic():
    assert build_vocab(CAPTIONS, 80).pieces == build_vocab(CAPTIONS, 80).pieces


def test_every_seen_character_has_a_piece():
    v = build_vocab(CAPTIONS, 48)
    for ch in set("".join(CAPTIONS)) - {" "}:
        assert ch in v.index and "##" + ch in v.index


def test_longest_match_toy_vocab():
    v = Vocabulary(["[PAD]", "[BOS]", "[EOS]", "[UNK]", "c", "##a", "##t", "cat"])
    assert encode("cat", v) == [7]
    assert encode("ca", v) == [4, 5]


def test_empty_text_encodes_to_nothing():
    assert encode("", build_vocab(CAPTIONS, 64)) == []


def test_unseen_character_is_unk():
    v = build_vocab(CAPTIONS, 64)
    ids = encode("a red zube", v)
    assert UNK in ids
    assert ids.count(UNK) == 1


def test_decode_drops_specials_and_joins_continuations():
    v = Vocabulary(["[PAD]", "[BOS]", "[EOS]", "[UNK]", "a", "##b"])
    assert decode([BOS, EOS], v) == ""
    assert decode([4, 5], v) == "ab"
    assert decode([BOS, 4, 5, 4, EOS, PAD], v) == "ab a"


def test_decode_out_of_range():
    v = build_vocab(CAPTIONS, 64)
    with pytest.raises(IndexError):
        decode([len(v)], v)


def test_normalization_before_encoding():
    v = build_vocab(CAPTIONS, 64)
    assert encode("  A  Red\tSQUARE ", v) == encode("a red square", v)


def test_save_load_roundtrip(tmp_path):
    v = build_vocab(CAPTIONS, 64)
    v.save(tmp_path / "v.txt")
    w = Vocabulary.load(tmp_path / "v.txt")
    assert w.pieces == v.pieces
    assert (tmp_path / "v.txt").read_text(encoding="utf-8").splitlines() == v.pieces


def test_held_out_sentence_round_trip():
    v = build_vocab(CAPTIONS, 64)
    s = "a yellow circle below a green square"
    assert decode(encode(s, v), v) == s


@settings(max_examples=50, deadline=None, derandomize=True)
@given(st.lists(st.text(alphabet="abcdeflnorqstuy", min_size=1, max_size=8), min_size=1, max_size=6))
def test_round_trip_property(words):
    v = build_vocab(CAPTIONS + ["q"], 60)
    s = " ".join(words)
    assert decode(encode(s, v), v) == s


def test_encoding_independent_of_context():
    v = build_vocab(CAPTIONS, 64)
    batch = [encode(s, v) for s in CAPTIONS]
    assert batch[1] == encode(CAPTIONS[1], v)
