"""Caption evaluation: BLEU, ROUGE-L, CIDEr, METEOR, rubric scaling, and the
composite report arithmetic.

All metrics are implemented from scratch over token lists, deterministic, and
pinned down by brute-force oracles in the tests. METEOR runs its exact-match
alignment stage only (no stemming or synonym resources); reports note this.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import ValidationError
from .kernels import lcs_length

RUBRIC_DIMENSIONS = ("informativeness", "relevance", "creativity", "humor")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: list[str], references: list[list[str]], max_n: int = 4) -> float:
    """Clipped n-gram precision geometric mean times the brevity penalty.

    Zero higher-order precisions get add-one smoothing so short captions
    (five tokens is a legitimate caption here) still score; a zero unigram
    precision means no overlap at all and scores 0. An empty candidate scores
    0 with a warning rather than raising.
    """
    if not candidate:
        warnings.warn("empty candidate scores 0 BLEU", stacklevel=2)
        return 0.0
    if not references or any(not r for r in references):
        raise ValidationError("references must be non-empty")
    c = len(candidate)
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        total = max(0, c - n + 1)
        clipped = 0
        if cand:
            best = Counter()
            for ref in references:
                for gram, count in _ngrams(ref, n).items():
                    best[gram] = max(best[gram], count)
            clipped = sum(min(count, best[gram]) for gram, count in cand.items())
        if n == 1:
            p = clipped / total
            if p == 0.0:
                return 0.0
        elif clipped == 0 or total == 0:
            p = (clipped + 1) / (total + 1)
        else:
            p = clipped / total
        log_sum += np.log(p)
    ref_len = min((len(r) for r in references), key=lambda L: (abs(L - c), L))
    brevity = 1.0 if c >= ref_len else float(np.exp(1.0 - ref_len / c))
    return float(brevity * np.exp(log_sum / max_n))


def rouge_l(candidate: list[str], reference: list[str], beta: float = 1.2) -> float:
    """LCS F-measure with recall weighted by beta."""
    if not candidate or not reference:
        raise ValidationError("both sequences must be non-empty")
    ids = {}
    for tok in candidate + reference:
        ids.setdefault(tok, len(ids))
    lcs = lcs_length(
        np.array([ids[t] for t in candidate]), np.array([ids[t] for t in reference])
    )
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    b2 = beta * beta
    return float((1 + b2) * recall * precision / (recall + b2 * precision))


def cider(candidates: list[list[str]], references: list[list[str]], max_n: int = 4) -> list[float]:
    """Per-meme tf-idf n-gram cosine, averaged over n = 1..max_n, times 10.

    Document frequencies come from the evaluation corpus's references, so at
    least two memes are required for the idf to be defined.
    """
    if len(candidates) != len(references):
        raise ValidationError("candidate and reference lists must be the same length")
    if len(references) < 2:
        raise ValidationError("CIDEr needs a corpus of at least two memes for idf")
    n_docs = len(references)
    doc_freq: list[Counter] = []
    for n in range(1, max_n + 1):
        df = Counter()
        for ref in references:
            for gram in set(_ngrams(ref, n)):
                df[gram] += 1
        doc_freq.append(df)

    def tfidf(tokens: list[str], n: int) -> dict:
        counts = _ngrams(tokens, n)
        df = doc_freq[n - 1]
        return {g: c * np.log(n_docs / max(1, df[g])) for g, c in counts.items()}

    scores = []
    for cand, ref in zip(candidates, references):
        total = 0.0
        for n in range(1, max_n + 1):
            v_c = tfidf(cand, n)
            v_r = tfidf(ref, n)
            dot = sum(v_c[g] * v_r[g] for g in v_c.keys() & v_r.keys())
            norm_c = np.sqrt(sum(v * v for v in v_c.values()))
            norm_r = np.sqrt(sum(v * v for v in v_r.values()))
            if norm_c > 0 and norm_r > 0:
                total += dot / (norm_c * norm_r)
        scores.append(10.0 * total / max_n)
    return scores


def _meteor_alignment(candidate: list[str], reference: list[str]) -> list[tuple[int, int]]:
    """Left-to-right greedy exact-match alignment; each token used once."""
    used = [False] * len(reference)
    matches = []
    for ci, tok in enumerate(candidate):
        for rj, rtok in enumerate(reference):
            if not used[rj] and rtok == tok:
                used[rj] = True
                matches.append((ci, rj))
                break
    return matches


def meteor(candidate: list[str], reference: list[str], alpha: float = 0.9) -> float:
    """Exact-match stage METEOR: harmonic-mean F times the chunk penalty
    1 - 0.5 * (chunks / matches)^3."""
    if not candidate or not reference:
        raise ValidationError("both sequences must be non-empty")
    matches = _meteor_alignment(candidate, reference)
    m = len(matches)
    if m == 0:
        return 0.0
    chunks = 1
    for (ci, rj), (ci2, rj2) in zip(matches, matches[1:]):
        if ci2 != ci + 1 or rj2 != rj + 1:
            chunks += 1
    precision = m / len(candidate)
    recall = m / len(reference)
    f_mean = precision * recall / (alpha * precision + (1 - alpha) * recall)
    penalty = 0.5 * (chunks / m) ** 3
    return float(f_mean * (1.0 - penalty))


# ---------------------------------------------------------------------------
# score containers and report arithmetic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AutoScores:
    """Raw automatic metrics; bleu/rouge_l/meteor in [0,1], cider in [0,10]."""

    bleu: float
    rouge_l: float
    cider: float
    meteor: float

    def __post_init__(self):
        for name in ("bleu", "rouge_l", "cider", "meteor"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValidationError(f"{name} is not finite")

    def scaled(self) -> dict[str, float]:
        """Report scale: 0-100 for every metric (cider's x10 form maps to
        0-100 by one more factor of 10)."""
        return {
            "bleu": self.bleu * 100.0,
            "rouge_l": self.rouge_l * 100.0,
            "cider": self.cider * 10.0,
            "meteor": self.meteor * 100.0,
        }


@dataclass(frozen=True)
class RubricScores:
    informativeness: int
    relevance: int
    creativity: int
    humor: int

    def __post_init__(self):
        for name in RUBRIC_DIMENSIONS:
            v = getattr(self, name)
            if not isinstance(v, int) or not 1 <= v <= 5:
                raise ValidationError(f"rubric {name} must be an integer in 1..5, got {v!r}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return tuple(getattr(self, n) for n in RUBRIC_DIMENSIONS)


def rubric_scale(raw: RubricScores) -> dict[str, int]:
    """Map each 1-5 rubric score onto the 100-point report scale (x20)."""
    return {name: getattr(raw, name) * 20 for name in RUBRIC_DIMENSIONS}


def _round2(value: Decimal) -> float:
    return float(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def composite_score(human: list[float], auto: list[float]) -> dict[str, float]:
    """HAverage / MAverage / Average of four human and four automatic scores.

    Averaging runs in exact decimal arithmetic and rounds half-up to two
    decimals only at the end, so printed report cells are reproducible.
    """
    if len(human) != 4 or len(auto) != 4:
        raise ValidationError("composite score needs 4 human and 4 automatic values")
    for v in list(human) + list(auto):
        if not 0.0 <= v <= 100.0:
            raise ValidationError(f"score {v} outside [0, 100]")
    h = [Decimal(repr(float(v))) for v in human]
    a = [Decimal(repr(float(v))) for v in auto]
    h_avg = sum(h) / 4
    m_avg = sum(a) / 4
    return {
        "HAverage": _round2(h_avg),
        "MAverage": _round2(m_avg),
        "Average": _round2((h_avg + m_avg) / 2),
    }
