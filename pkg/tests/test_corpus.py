import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlm.corpus import (EOS, UNK, Corpus, Vocabulary, batchify, bptt_slice, build_vocabulary,
                        encode, tokenize_lines)


def abcd_vocab():
    return Vocabulary.from_tokens(["a", "b", EOS, UNK])


class TestVocabulary:
    def test_counting(self):
        v = build_vocabulary(["a", "b", "a"])
        assert len(v) == 4
        assert v.id_to_token == ["a", "b", EOS, UNK]

    def test_empty(self):
        with pytest.raises(ValueError):
            build_vocabulary([])

    def test_only_reserved(self):
        with pytest.raises(ValueError):
            build_vocabulary([EOS, EOS])

    def test_reserved_in_text_not_duplicated(self):
        v = build_vocabulary(["x", UNK, "y", EOS])
        assert len(v) == 4 and v.unk_id == 1 and v.eos_id == 3

    def test_round_trip(self, tiny_corpus):
        v = tiny_corpus.vocab
        for w in v.id_to_token:
            assert v.id_to_token[v.token_to_id[w]] == w
        assert sorted(v.token_to_id.values()) == list(range(len(v)))

    def test_from_tokens_rejects_duplicates(self):
        with pytest.raises(ValueError):
            Vocabulary.from_tokens(["a", "a", EOS, UNK])

    def test_case_preserved(self):
        assert len(build_vocabulary(["The", "the"])) == 4


class TestEncode:
    def test_direct_mapping(self):
        np.testing.assert_array_equal(encode(["a b"], abcd_vocab()), [0, 1, 2])

    def test_unknown(self):
        np.testing.assert_array_equal(encode(["a z"], abcd_vocab()), [0, 3, 2])

    def test_eos_per_line(self):
        ids = encode(["a", "b a"], abcd_vocab())
        assert np.sum(ids == 2) == 2

    def test_decode_inverse(self, tiny_text, tiny_corpus):
        lines = tiny_text.splitlines()[:5]
        toks = tiny_corpus.vocab.decode(encode(lines, tiny_corpus.vocab))
        assert [t for t in toks if t != EOS] == " ".join(lines).split()

    def test_tokenize_whitespace(self):
        assert tokenize_lines(["  a\tb  "]) == ["a", "b", EOS]


class TestBatchify:
    def test_trim(self):
        bc = batchify(np.arange(11), 2)
        assert bc.data.shape == (5, 2)
        np.testing.assert_array_equal(bc.data[:, 0], [0, 1, 2, 3, 4])
        np.testing.assert_array_equal(bc.data[:, 1], [5, 6, 7, 8, 9])
        assert 10 not in bc.data

    def test_single_column(self):
        np.testing.assert_array_equal(batchify(np.arange(7), 1).data[:, 0], np.arange(7))

    def test_too_short(self):
        with pytest.raises(ValueError):
            batchify([1, 2], 3)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=1, max_size=300), st.integers(1, 25))
    def test_round_trip(self, ids, bs):
        if len(ids) < bs:
            return
        bc = batchify(ids, bs)
        n = len(ids) // bs
        assert bc.n_steps == n
        np.testing.assert_array_equal(bc.data.T.reshape(-1), ids[: n * bs])


class TestBpttSlice:
    def test_first_slice(self):
        bc = batchify(np.arange(200), 2)
        x, y = bptt_slice(bc, 0, 35)
        assert x.shape == (35, 2)
        np.testing.assert_array_equal(y, bc.data[1:36])

    def test_short_final_slice(self):
        bc = batchify(np.arange(200), 2)
        x, y = bptt_slice(bc, 98, 35)
        assert x.shape == (1, 2)
        np.testing.assert_array_equal(y[0], bc.data[99])

    @pytest.mark.parametrize("offset", [-1, 99, 100])
    def test_out_of_range(self, offset):
        with pytest.raises(IndexError):
            bptt_slice(batchify(np.arange(200), 2), offset, 35)

    def test_coverage(self):
        bc = batchify(np.arange(200), 2)
        rows = []
        for off in bc.offsets(35):
            x, y = bptt_slice(bc, off, 35)
            rows.extend(range(off + 1, off + 1 + len(y)))
        assert rows == list(range(1, 100))


class TestCorpus:
    def test_tiny_size(self, tiny_corpus):
        assert 900 <= len(tiny_corpus.train) <= 1200

    def test_valid_uses_train_vocab(self):
        c = Corpus.from_text("a b\nb c", valid="a q")
        np.testing.assert_array_equal(c.valid, [0, c.vocab.unk_id, c.vocab.eos_id])

    def test_from_files(self, tmp_path):
        (tmp_path / "train.txt").write_text("x y\ny z\n", encoding="utf-8")
        (tmp_path / "test.txt").write_text("z\n", encoding="utf-8")
        c = Corpus.from_files(tmp_path / "train.txt", test=tmp_path / "test.txt")
        assert c.valid is None
        assert c.vocab.decode(c.test) == ["z", EOS]

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            Corpus.from_files(tmp_path / "nope.txt")
