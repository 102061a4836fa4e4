import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridrl.vocab import (
    GridImage,
    TokenSeq,
    Vocabulary,
    VocabularyError,
    build_vocabulary,
    decode_image,
    decode_text,
    encode_image,
    encode_text,
)


def test_codebook_sizes():
    objs = [f"o{i}" for i in range(160)]
    cols = [f"c{i}" for i in range(10)]
    assert build_vocabulary(objs[:12], cols[:8]).image_codebook_size == 97
    assert build_vocabulary(objs[:1], cols[:1]).image_codebook_size == 2
    assert build_vocabulary(objs, cols).image_codebook_size == 1601


def test_ranges_disjoint_and_contiguous(vocab):
    ranges = [vocab.special_range, vocab.text_range, vocab.image_range]
    assert ranges[0].start == 0
    assert ranges[0].stop == ranges[1].start and ranges[1].stop == ranges[2].start
    assert ranges[2].stop == vocab.size
    for i in range(vocab.size):
        assert sum((vocab.is_special(i), vocab.is_text(i), vocab.is_image(i))) == 1


def test_every_word_is_one_token(vocab):
    words = list(vocab.object_names) + list(vocab.color_names) + list(vocab.number_words) + list(vocab.relation_words)
    ids = [vocab.word_id(w) for w in words]
    assert len(set(ids)) == len(ids)
    assert all(vocab.is_text(i) for i in ids)


def test_lexical_ids_are_stable():
    a = build_vocabulary(["b", "a"], ["y", "x"])
    b = build_vocabulary(["a", "b"], ["x", "y"])
    assert a.manifest() == b.manifest()


def test_manifest_round_trip(vocab):
    assert Vocabulary.from_manifest(vocab.manifest()).manifest() == vocab.manifest()


def test_encode_empty_grid(vocab):
    seq = encode_image(GridImage.empty(4), vocab)
    assert seq.ids == (vocab.empty_id,) * 16


def test_encode_single_cell(vocab):
    bench = vocab.object_names.index("bench")
    green = vocab.color_names.index("green")
    seq = encode_image(GridImage.from_dict(4, {(0, 0): (bench, green)}), vocab)
    assert seq.ids[0] == vocab.cell_id(bench, green)
    assert seq.ids[1:] == (vocab.empty_id,) * 15
    assert vocab.id_cell(seq.ids[0]) == (bench, green)


def test_decode_empty(vocab):
    assert decode_image([vocab.empty_id] * 16, vocab) == GridImage.empty(4)


def test_decode_rejects_text_token(vocab):
    ids = [vocab.empty_id] * 16
    ids[5] = vocab.word_id("bench")
    with pytest.raises(VocabularyError, match="5"):
        decode_image(ids, vocab)


def test_decode_rejects_wrong_length(vocab):
    with pytest.raises(VocabularyError):
        decode_image([vocab.empty_id] * 15, vocab)


def test_image_round_trip_1000(vocab):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        cells = []
        for _ in range(16):
            if rng.random() < 0.5:
                cells.append(None)
            else:
                cells.append((int(rng.integers(12)), int(rng.integers(8))))
        img = GridImage(4, tuple(cells))
        assert decode_image(encode_image(img, vocab), vocab) == img


def test_text_examples(vocab):
    words = ["a", "photo", "of", "a", "bench"]
    seq = encode_text(words, vocab)
    assert len(seq) == 5 and isinstance(seq, TokenSeq)
    assert decode_text(seq, vocab) == words
    assert len(encode_text([], vocab)) == 0
    with pytest.raises(VocabularyError, match="xyzzy"):
        encode_text(["xyzzy"], vocab)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=200), max_size=20))
def test_text_round_trip_property(vocab, idx):
    words = [vocab.text_words[i % vocab.n_text] for i in idx]
    assert decode_text(encode_text(words, vocab), vocab) == words
