import itertools
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from asrmerge import kernels
from asrmerge.metrics import (
    ComparisonReport,
    MetricError,
    TokenCountVector,
    average_ranks,
    cosine_similarity,
    edit_distance,
    normalize_and_tokenize,
    pearson,
    spearman,
    wer,
)


@lru_cache(maxsize=None)
def lev_oracle(a: tuple, b: tuple) -> int:
    """Plain recursive definition of edit distance."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        lev_oracle(a[:-1], b) + 1,
        lev_oracle(a, b[:-1]) + 1,
        lev_oracle(a[:-1], b[:-1]) + (a[-1] != b[-1]),
    )


def test_tokenize_examples():
    assert normalize_and_tokenize("  The   cat ") == ["the", "cat"]
    assert normalize_and_tokenize("") == []
    assert normalize_and_tokenize("é") == normalize_and_tokenize("é") == ["é"]


@pytest.mark.parametrize("impl", [kernels.levenshtein_numpy, kernels.levenshtein_numba], ids=["numpy", "numba"])
def test_kernels_match_oracle(impl):
    seqs = [s for n in range(5) for s in itertools.product(range(3), repeat=n)]
    for a in seqs:
        for b in seqs[::7]:
            got = impl(np.array(a, dtype=np.int64), np.array(b, dtype=np.int64))
            assert got == lev_oracle(a, b), (a, b)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=12), st.lists(st.integers(0, 4), max_size=12))
def test_kernel_paths_agree(a, b):
    a = np.array(a, dtype=np.int64)
    b = np.array(b, dtype=np.int64)
    assert kernels.levenshtein_numpy(a, b) == kernels.levenshtein_numba(a, b)


def test_wer_examples():
    assert wer([("1", "a b c")], [("1", "a b c")]).wer == 0.0
    r = wer([("1", "the cat sat")], [("1", "the cat")])
    assert r.total_edits == 1 and r.wer == pytest.approx(1 / 3)
    r = wer([("1", "a")], [("1", "b c")])
    assert r.total_edits == 2 and r.wer == 2.0


def test_wer_errors():
    with pytest.raises(MetricError, match="missing hypothesis"):
        wer([("1", "a")], [("2", "a")])
    with pytest.raises(MetricError, match="empty"):
        wer([("1", "  ")], [("1", "a")])


def test_corpus_wer_not_mean_of_utterances():
    refs = [("1", "a"), ("2", "a b c d e f g h i j")]
    hyps = [("1", "b"), ("2", "a b c d e f g h i j")]
    r = wer(refs, hyps)
    assert r.wer == pytest.approx(1 / 11)
    mean_of_utts = np.mean([u.edits / u.ref_len for u in r.per_utterance])
    assert mean_of_utts == pytest.approx(0.5)
    assert sum(u.edits for u in r.per_utterance) == r.total_edits
    assert sum(u.ref_len for u in r.per_utterance) == r.total_ref_words


def test_wer_permutation_invariant_and_self_zero(rng):
    words = ["a", "b", "c", "d"]
    refs = [(str(i), " ".join(rng.choice(words, size=rng.integers(1, 6)))) for i in range(20)]
    hyps = [(str(i), " ".join(rng.choice(words, size=rng.integers(0, 6)))) for i in range(20)]
    base = wer(refs, hyps).wer
    perm = rng.permutation(20)
    assert wer([refs[i] for i in perm], [hyps[i] for i in perm]).wer == base
    assert wer(refs, refs).wer == 0.0


def test_report_json_fields():
    d = wer([("u", "x y")], [("u", "x")]).to_dict()
    assert set(d) == {"total_ref_words", "total_edits", "wer", "per_utterance"}
    assert d["per_utterance"] == [{"id": "u", "edits": 1, "ref_len": 2}]


def test_edit_distance_words():
    assert edit_distance(["kitten"], ["sitting"]) == 1
    assert edit_distance([], ["a", "b"]) == 2


# ------------------------------------------------------------ similarity


def vec(**counts):
    return TokenCountVector(counts)


def test_cosine_examples():
    assert cosine_similarity(vec(a=2, b=1), vec(a=2, b=1)) == 1.0
    assert cosine_similarity(vec(a=1), vec(b=1)) == 0.0
    assert cosine_similarity(vec(a=1, b=1), vec(a=1)) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_cosine_errors():
    with pytest.raises(MetricError, match="zero"):
        cosine_similarity(vec(a=0), vec(a=1))
    other = TokenCountVector({"a": 1}, "different-vocab")
    with pytest.raises(MetricError, match="vocabularies"):
        cosine_similarity(vec(a=1), other)


def test_cosine_symmetric_and_scale_invariant(rng):
    for _ in range(50):
        u = {f"t{i}": int(c) for i, c in enumerate(rng.integers(0, 20, size=15)) if c}
        v = {f"t{i}": int(c) for i, c in enumerate(rng.integers(0, 20, size=15)) if c}
        if not u or not v:
            continue
        c = int(rng.integers(2, 50))
        s = cosine_similarity(vec(**u), vec(**v))
        assert cosine_similarity(vec(**v), vec(**u)) == pytest.approx(s, abs=1e-12)
        assert cosine_similarity(vec(**{k: c * x for k, x in u.items()}), vec(**v)) == pytest.approx(s, abs=1e-12)


def test_from_tokens():
    v = TokenCountVector.from_tokens("a b a".split())
    assert v.counts == {"a": 2, "b": 1}


# ----------------------------------------------------------- correlation


def test_pearson_hand_expansion():
    # dx = (-1.5,-.5,.5,1.5), dy = (-1.75,.25,-.75,2.25): sum dxdy = 5.5, sxx = 5, syy = 8.75
    r, p = pearson([1, 2, 3, 4], [1, 3, 2, 5])
    assert r == pytest.approx(5.5 / math.sqrt(5 * 8.75), abs=1e-12)
    assert p == pytest.approx(stats.pearsonr([1, 2, 3, 4], [1, 3, 2, 5]).pvalue, rel=1e-9)


def test_pearson_perfect():
    xs = [0.3, 1.0, 2.5, 7.0]
    assert pearson(xs, xs)[0] == pytest.approx(1.0, abs=1e-15)
    assert pearson(xs, [-x for x in xs])[0] == pytest.approx(-1.0, abs=1e-15)
    assert pearson(xs, [3 * x + 2 for x in xs])[0] == pytest.approx(1.0, abs=1e-12)


def test_correlation_errors():
    with pytest.raises(MetricError, match="zero variance"):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(MetricError, match="length"):
        pearson([1, 2, 3], [1, 2])
    with pytest.raises(MetricError, match="at least 3"):
        spearman([1, 2], [2, 1])


def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 1000])[0] == pytest.approx(1.0, abs=1e-15)
    assert spearman([1, 2, 3], [3, 1, 2])[0] == pytest.approx(-0.5, abs=1e-15)
    np.testing.assert_array_equal(average_ranks([1, 2, 2, 3]), [1, 2.5, 2.5, 4])


def test_pvalues_match_scipy(rng):
    for _ in range(20):
        x, y = rng.normal(size=(2, 12))
        r, p = pearson(x, y)
        ref = stats.pearsonr(x, y)
        assert r == pytest.approx(ref.statistic, abs=1e-12)
        assert p == pytest.approx(ref.pvalue, rel=1e-8)
        rho, ps = spearman(x, y)
        ref = stats.spearmanr(x, y)
        assert rho == pytest.approx(ref.statistic, abs=1e-12)
        assert ps == pytest.approx(ref.pvalue, rel=1e-8)


def test_comparison_report_sign():
    c = ComparisonReport(wer_target_only=0.5, wer_merged=0.4)
    assert c.delta_wer == pytest.approx(-0.1)
    assert c.to_dict()["delta_wer"] < 0
