"""Tests for the synthetic datasets, the tokenizer and BND1 files."""

import numpy as np
import pytest

from binorm.data import (
    FOLLOW_PROB,
    UNK,
    ImageDataset,
    TokenDataset,
    build_tokenizer,
    decode,
    encode,
    gen_images,
    gen_tokens,
    load_dataset,
    parse_data_spec,
    save_dataset,
    split_dataset,
)
from binorm.errors import DataError, FormatError


class TestImages:
    def test_deterministic(self):
        a, b = gen_images(4, 20, 8, 8, seed=3), gen_images(4, 20, 8, 8, seed=3)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, gen_images(4, 20, 8, 8, seed=4).images)

    def test_balanced_and_in_range(self):
        data = gen_images(5, 50, 8, 8, seed=0, channels=2)
        assert data.images.shape == (50, 8, 8, 2)
        assert data.images.dtype == np.float32
        assert data.images.min() >= 0.0 and data.images.max() <= 1.0
        np.testing.assert_array_equal(np.bincount(data.labels), [10] * 5)

    def test_nearest_centroid_separates_classes(self):
        train = gen_images(4, 200, 16, 16, seed=0)
        test = gen_images(4, 200, 16, 16, seed=1)
        centroids = np.stack([train.images[train.labels == k].mean(axis=0) for k in range(4)])
        distances = ((test.images[:, None] - centroids[None]) ** 2).sum(axis=(2, 3, 4))
        assert (distances.argmin(axis=1) == test.labels).mean() >= 0.8

    def test_n_must_divide(self):
        with pytest.raises(DataError):
            gen_images(3, 10, 8, 8, seed=0)

    def test_unlabeled_has_no_targets(self):
        data = ImageDataset(np.zeros((2, 4, 4, 3), dtype=np.float32), None, num_classes=3)
        assert data.inputs.shape == (2, 4, 4, 3)
        with pytest.raises(DataError):
            data.targets


class TestTokens:
    def test_deterministic_and_in_range(self):
        a, b = gen_tokens(6, 30, 10, seed=5), gen_tokens(6, 30, 10, seed=5)
        np.testing.assert_array_equal(a.sequences, b.sequences)
        assert a.sequences.min() >= 0 and a.sequences.max() < 6

    def test_targets_are_shifted_inputs(self):
        data = gen_tokens(6, 4, 10, seed=0)
        np.testing.assert_array_equal(data.inputs[:, 1:], data.targets[:, :-1])
        assert data.inputs.shape == data.targets.shape == (4, 9)

    def test_transitions_match_grammar(self):
        data = gen_tokens(4, 20_000, 33, seed=0)
        seq = data.sequences
        a, b, c = seq[:, :-2].ravel(), seq[:, 1:-1].ravel(), seq[:, 2:].ravel()
        counts = np.zeros((4, 4, 4))
        np.add.at(counts, (a, b, c), 1)
        context = counts.sum(axis=2, keepdims=True)
        expected = data.transition_probs()
        tolerance = 5 * np.sqrt(expected * (1 - expected) / context)
        assert np.all(np.abs(counts / context - expected) <= tolerance)
        followed = (c == data.successor[a, b]).mean()
        assert abs(followed - FOLLOW_PROB) < 0.01

    def test_second_token_is_deterministic(self):
        data = gen_tokens(5, 100, 4, seed=2)
        np.testing.assert_array_equal(data.sequences[:, 1], data.first_successor[data.sequences[:, 0]])

    def test_optimal_accuracy(self):
        data = gen_tokens(8, 2, 17, seed=0)
        assert data.optimal_accuracy() == pytest.approx(13 / 16)

    def test_vocab_too_small(self):
        with pytest.raises(DataError):
            gen_tokens(3, 10, 5, seed=0)


class TestSplit:
    def test_disjoint_and_exhaustive(self):
        data = TokenDataset(np.arange(300).reshape(100, 3), vocab_size=300)
        train, val = split_dataset(data, 0.95, seed=1)
        assert (len(train), len(val)) == (95, 5)
        ids = np.concatenate([train.sequences[:, 0], val.sequences[:, 0]])
        np.testing.assert_array_equal(np.sort(ids), np.arange(0, 300, 3))

    def test_both_parts_non_empty(self):
        data = gen_images(2, 4, 4, 4, seed=0)
        train, val = split_dataset(data, 0.95)
        assert (len(train), len(val)) == (3, 1)


class TestTokenizer:
    def test_encode(self):
        tok = build_tokenizer(["a b a"])
        assert tok.vocabulary == [UNK, "a", "b"]
        assert encode(tok, "a b a") == [1, 2, 1]

    def test_unknown_word(self):
        tok = build_tokenizer(["a b"])
        assert encode(tok, "a zebra") == [1, tok.unk_id]
        assert decode(tok, [0]) == UNK

    def test_roundtrip_over_corpus(self):
        corpus = ["the cat sat", "on  the mat", "the end"]
        tok = build_tokenizer(corpus)
        for line in corpus:
            normalized = " ".join(line.split())
            assert decode(tok, encode(tok, line)) == normalized

    def test_size_cap_keeps_most_frequent(self):
        tok = build_tokenizer(["x y y z z z"], max_size=3)
        assert tok.vocabulary == [UNK, "z", "y"]
        assert tok.size == 3


class TestDatasetFiles:
    def test_labeled_images(self, tmp_path):
        data = gen_images(3, 6, 4, 4, seed=0)
        save_dataset(data, tmp_path / "img.bnd")
        loaded = load_dataset(tmp_path / "img.bnd")
        np.testing.assert_array_equal(loaded.images, data.images)
        np.testing.assert_array_equal(loaded.labels, data.labels)
        assert loaded.num_classes == 3

    def test_unlabeled_images(self, tmp_path):
        data = ImageDataset(np.full((2, 4, 4, 1), 0.5, dtype=np.float32), None, num_classes=5)
        save_dataset(data, tmp_path / "img.bnd")
        assert load_dataset(tmp_path / "img.bnd").labels is None

    def test_tokens(self, tmp_path):
        data = gen_tokens(7, 5, 6, seed=0)
        save_dataset(data, tmp_path / "tok.bnd")
        loaded = load_dataset(tmp_path / "tok.bnd")
        np.testing.assert_array_equal(loaded.sequences, data.sequences)
        assert loaded.vocab_size == 7

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bnd"
        path.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(FormatError) as excinfo:
            load_dataset(path)
        assert excinfo.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "tok.bnd"
        save_dataset(gen_tokens(7, 5, 6, seed=0), path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError, match="payload"):
            load_dataset(path)

    def test_empty_and_missing(self, tmp_path):
        (tmp_path / "empty.bnd").write_bytes(b"")
        with pytest.raises(DataError):
            load_dataset(tmp_path / "empty.bnd")
        with pytest.raises(DataError):
            load_dataset(tmp_path / "missing.bnd")


class TestDataSpec:
    def test_synthetic_images(self):
        data = parse_data_spec("synthetic:images:classes=3,n=6,size=16,channels=1", seed=2)
        assert data.images.shape == (6, 16, 16, 1)
        np.testing.assert_array_equal(data.images, gen_images(3, 6, 16, 16, seed=2, channels=1).images)

    def test_synthetic_tokens_defaults(self):
        data = parse_data_spec("synthetic:tokens")
        assert data.sequences.shape == (1024, 17)

    def test_seed_option_overrides(self):
        a = parse_data_spec("synthetic:tokens:n=4,seed=9", seed=0)
        np.testing.assert_array_equal(a.sequences, gen_tokens(16, 4, 17, seed=9).sequences)

    @pytest.mark.parametrize("spec", ["synthetic:audio", "synthetic:tokens:depth=3", "synthetic:tokens:n=many"])
    def test_bad_specs(self, spec):
        with pytest.raises(DataError):
            parse_data_spec(spec)

    def test_path(self, tmp_path):
        save_dataset(gen_tokens(5, 3, 4, seed=0), tmp_path / "t.bnd")
        assert isinstance(parse_data_spec(str(tmp_path / "t.bnd")), TokenDataset)
