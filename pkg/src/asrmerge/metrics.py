"""Word error rate, token-count similarity and correlation statistics."""

from __future__ import annotations

import hashlib
import json
import math
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from asrmerge.kernels import encode_pair, levenshtein


class MetricError(ValueError):
    pass


def normalize_and_tokenize(text: str) -> list[str]:
    """NFC-normalise, lowercase and split on whitespace."""
    return unicodedata.normalize("NFC", text).lower().split()


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    a, b = encode_pair(ref, hyp)
    return levenshtein(a, b)


@dataclass
class UtteranceScore:
    id: str
    edits: int
    ref_len: int


@dataclass
class WerReport:
    total_ref_words: int
    total_edits: int
    wer: float
    per_utterance: list[UtteranceScore] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


def wer(refs: Iterable[tuple[str, str]], hyps: Iterable[tuple[str, str]]) -> WerReport:
    """Corpus WER: total word edits over total reference words.

    Every reference id needs a hypothesis; extra hypotheses are ignored.
    The result is not clamped and can exceed 1 when the hypotheses insert
    many words.
    """
    hyp_map = dict(hyps)
    per = []
    for uid, ref_text in refs:
        if uid not in hyp_map:
            raise MetricError(f"missing hypothesis for utterance {uid!r}")
        ref = normalize_and_tokenize(ref_text)
        hyp = normalize_and_tokenize(hyp_map[uid])
        per.append(UtteranceScore(uid, edit_distance(ref, hyp), len(ref)))
    total_ref = sum(u.ref_len for u in per)
    if total_ref == 0:
        raise MetricError("all references are empty after tokenization")
    total_edits = sum(u.edits for u in per)
    return WerReport(total_ref, total_edits, total_edits / total_ref, per)


# ------------------------------------------------------------------ similarity


def vocab_fingerprint(tokenizer_name: str) -> str:
    return hashlib.sha256(tokenizer_name.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class TokenCountVector:
    counts: Mapping[str, int]
    vocab_fingerprint: str = vocab_fingerprint("whitespace")

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], tokenizer_name: str = "whitespace") -> TokenCountVector:
        return cls(dict(Counter(tokens)), vocab_fingerprint(tokenizer_name))


def cosine_similarity(u: TokenCountVector, v: TokenCountVector) -> float:
    if u.vocab_fingerprint != v.vocab_fingerprint:
        raise MetricError("token count vectors come from different vocabularies")
    # counts are integers: dot product and squared norms are exact
    suu = sum(int(c) * int(c) for c in u.counts.values())
    svv = sum(int(c) * int(c) for c in v.counts.values())
    if suu == 0 or svv == 0:
        raise MetricError("cosine similarity is undefined for a zero vector")
    small, large = (u.counts, v.counts) if len(u.counts) <= len(v.counts) else (v.counts, u.counts)
    dot = sum(int(c) * int(large.get(t, 0)) for t, c in small.items())
    return min(1.0, max(0.0, dot / math.sqrt(suu * svv)))


# ----------------------------------------------------------------- correlation


def _check_pair(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise MetricError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 3:
        raise MetricError("need at least 3 paired observations")
    return x, y


def _t_pvalue(r: float, n: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Product-moment correlation with a two-sided Student-t p-value."""
    x, y = _check_pair(xs, ys)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0 or syy == 0:
        raise MetricError("correlation undefined: zero variance")
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    return r, _t_pvalue(r, x.size)


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    return stats.rankdata(np.asarray(values, dtype=np.float64), method="average")


def spearman(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    x, y = _check_pair(xs, ys)
    return pearson(average_ranks(x), average_ranks(y))


@dataclass
class ComparisonReport:
    wer_target_only: float
    wer_merged: float
    lam: float | None = None

    @property
    def delta_wer(self) -> float:
        return self.wer_merged - self.wer_target_only

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "wer_target_only": self.wer_target_only,
            "wer_merged": self.wer_merged,
            "delta_wer": self.delta_wer,
        }
