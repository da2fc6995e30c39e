import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gedi.cclm import Vocab
from gedi.errors import ConfigError, DataError, FormatVersionError, ParseError, TokenOutOfRangeError
from gedi.synth import (
    LabeledCorpus,
    SourceSpec,
    assign_splits,
    half_split,
    load_corpus,
    load_source,
    oracle_posterior,
    s1,
    s2,
    sample_corpus,
    save_corpus,
    save_source,
    split_sizes,
)
from gedi.train import class_posterior_offline

A, B = 0, 1


def test_sampling_is_deterministic():
    assert sample_corpus(s1(), 4, 1) == sample_corpus(s1(), 4, 1)
    assert sample_corpus(s1(), 50, 1) != sample_corpus(s1(), 50, 2)


def test_sampling_prefix_stable():
    # each sequence has its own generator, so a larger corpus extends a smaller one
    small, large = sample_corpus(s2(0), 20, 5), sample_corpus(s2(0), 40, 5)
    assert large.sequences[:20] == small.sequences and large.labels[:20] == small.labels


def test_s1_statistics():
    corpus = sample_corpus(s1(), 10000, 2)
    labels = np.array(corpus.labels)
    assert abs(np.mean(labels == 0) - 0.5) <= 0.02
    class0 = [t for seq, c in corpus for t in seq if c == 0]
    assert abs(np.mean(np.array(class0) == A) - 0.8) <= 0.02
    lengths = [len(seq) for seq in corpus.sequences]
    assert min(lengths) == 8 and max(lengths) == 16


def test_s2_shape_and_lengths():
    spec = s2(3)
    assert spec.order == 1 and spec.vocab.size == 8 and spec.n_classes == 4
    np.testing.assert_allclose(spec.probs.sum(-1), 1.0, atol=1e-12)
    corpus = sample_corpus(spec, 500, 3)
    lengths = [len(seq) for seq in corpus.sequences]
    assert min(lengths) >= 4 and max(lengths) <= 20
    assert s2(3).digest() == spec.digest() != s2(4).digest()


def test_source_validation():
    with pytest.raises((ConfigError, DataError)):
        SourceSpec(Vocab(("a", "b")), ("x",), 0, np.array([[[0.5, 0.6]]]), 1, 2)
    with pytest.raises((ConfigError, DataError)):
        SourceSpec(Vocab(("a", "b")), ("x",), 0, np.array([[[0.5, 0.5]]]), 3, 2)


def test_oracle_posterior_examples():
    np.testing.assert_allclose(oracle_posterior(s1(), [A, A]), [0.941176, 0.058824], atol=1e-6)
    np.testing.assert_allclose(oracle_posterior(s1(), []), [0.5, 0.5])
    flat = SourceSpec(Vocab(("a", "b", "c")), ("x", "y", "z"), 1,
                      np.full((3, 4, 3), 1 / 3), 1, 4)
    np.testing.assert_allclose(oracle_posterior(flat, [0, 2, 1]), 1 / 3, atol=1e-12)
    with pytest.raises(TokenOutOfRangeError):
        oracle_posterior(s1(), [2])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 1000), tokens=st.lists(st.integers(0, 7), min_size=1, max_size=12))
def test_oracle_matches_model_posterior(seed, tokens):
    spec = s2(seed)
    model = spec.to_model(alpha=float(len(tokens)))
    np.testing.assert_allclose(oracle_posterior(spec, tokens),
                               class_posterior_offline(model, tokens), atol=1e-12)


def test_split_sizes():
    assert split_sizes(100) == (45, 45, 10)
    assert split_sizes(101) == (46, 45, 10)
    with pytest.raises(DataError):
        split_sizes(2)
    with pytest.raises(DataError):
        assign_splits(sample_corpus(s1(), 2, 0), 0)


def test_half_split_disjoint_and_deterministic():
    corpus = sample_corpus(s1(), 100, 0)
    split_a, split_b, val = half_split(corpus, 4)
    assert (len(split_a), len(split_b), len(val)) == (45, 45, 10)
    assert assign_splits(corpus, 4) == assign_splits(corpus, 4)
    tagged = assign_splits(corpus, 4)
    assert sorted(tagged.splits) == sorted(["A"] * 45 + ["B"] * 45 + ["val"] * 10)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 400), seed=st.integers(0, 10**6))
def test_split_stratification(n, seed):
    corpus = sample_corpus(s2(seed % 7), n, seed)
    tagged = assign_splits(corpus, seed)
    labels = np.array(tagged.labels)
    tags = np.array(tagged.splits)
    for c in range(4):
        class_share = np.mean(labels == c)
        for tag in ("A", "B", "val"):
            in_split = tags == tag
            expected = class_share * in_split.sum()
            assert abs(np.sum(labels[in_split] == c) - expected) <= 1.0 + 1e-9


def test_corpus_round_trip(tmp_path):
    corpus = assign_splits(sample_corpus(s2(1), 200, 1), 1)
    save_corpus(corpus, tmp_path / "c.txt")
    assert load_corpus(tmp_path / "c.txt") == corpus
    save_corpus(corpus, tmp_path / "d.txt")
    assert (tmp_path / "c.txt").read_bytes() == (tmp_path / "d.txt").read_bytes()


def test_corpus_with_eos_round_trip(tmp_path):
    vocab = Vocab(("a", "b", "<e>"), eos="<e>")
    corpus = LabeledCorpus(vocab, ("x", "y"), [(0, 2), (1,)], [1, 0], ["A", "val"],
                           {"note": "two words"})
    save_corpus(corpus, tmp_path / "c.txt")
    assert load_corpus(tmp_path / "c.txt") == corpus


def test_truncated_corpus(tmp_path):
    save_corpus(sample_corpus(s1(), 10, 0), tmp_path / "c.txt")
    lines = (tmp_path / "c.txt").read_text().splitlines()
    (tmp_path / "t.txt").write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(ParseError, match="truncated") as err:
        load_corpus(tmp_path / "t.txt")
    assert err.value.line is not None


def test_malformed_record(tmp_path):
    save_corpus(sample_corpus(s1(), 5, 0), tmp_path / "c.txt")
    lines = (tmp_path / "c.txt").read_text().splitlines()
    bad = next(i for i, line in enumerate(lines) if not line.startswith("#"))
    lines[bad] = "class0 A A Z"
    (tmp_path / "m.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as err:
        load_corpus(tmp_path / "m.txt")
    assert err.value.line == bad + 1
    assert f":{bad + 1}:" in str(err.value)


def test_unknown_corpus_version(tmp_path):
    save_corpus(sample_corpus(s1(), 5, 0), tmp_path / "c.txt")
    text = (tmp_path / "c.txt").read_text().replace("#gedi-corpus 1", "#gedi-corpus 2", 1)
    (tmp_path / "v.txt").write_text(text)
    with pytest.raises(FormatVersionError):
        load_corpus(tmp_path / "v.txt")


def test_source_round_trip(tmp_path):
    for spec in (s1(), s2(5)):
        save_source(spec, tmp_path / "s.json")
        loaded = load_source(tmp_path / "s.json")
        assert loaded.digest() == spec.digest()
        np.testing.assert_array_equal(loaded.probs, spec.probs)
    (tmp_path / "bad.json").write_text('{"format": "gedi-source", "version": 7}')
    with pytest.raises(FormatVersionError):
        load_source(tmp_path / "bad.json")
