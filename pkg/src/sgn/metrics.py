"""Text-generation metrics: perplexity, corpus BLEU, ROUGE-L, average length."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass

from .errors import ComparabilityError, InputError


def perplexity(log_probs) -> float:
    """exp(-mean) of per-token log-probabilities over the corpus."""
    log_probs = list(log_probs)
    if not log_probs:
        raise InputError("perplexity needs at least one token log-probability")
    if any(not math.isfinite(lp) for lp in log_probs):
        raise InputError("log-probabilities must be finite")
    return math.exp(-sum(log_probs) / len(log_probs))


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n: int = 4, mean: str = "geometric") -> float:
    """Corpus-level BLEU over token sequences, no smoothing.

    Modified n-gram precisions for n = 1..max_n are pooled over the corpus,
    combined by their geometric mean (or arithmetic with mean="arithmetic"),
    and scaled by the brevity penalty.
    """
    candidates, references = list(candidates), list(references)
    if not candidates or len(candidates) != len(references):
        raise InputError("need equally many candidates and references, at least one pair")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cand_counts = _ngram_counts(cand, n)
            ref_counts = _ngram_counts(ref, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if cand_len == 0:
        return 0.0
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    if mean == "geometric":
        if any(p == 0.0 for p in precisions):
            return 0.0
        combined = math.exp(sum(math.log(p) for p in precisions) / max_n)
    elif mean == "arithmetic":
        combined = sum(precisions) / max_n
    else:
        raise InputError(f"unknown BLEU mean {mean!r}")
    return brevity * combined


def sentence_bleu(candidates, references, **kw) -> float:
    """Mean of per-pair BLEU scores (each pair scored as a one-item corpus)."""
    candidates, references = list(candidates), list(references)
    if not candidates or len(candidates) != len(references):
        raise InputError("need equally many candidates and references, at least one pair")
    return sum(bleu([c], [r], **kw) for c, r in zip(candidates, references)) / len(candidates)


def _lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references) -> float:
    """Mean per-pair LCS F-measure (harmonic mean of LCS/|ref| and LCS/|cand|)."""
    candidates, references = list(candidates), list(references)
    if not candidates or len(candidates) != len(references):
        raise InputError("need equally many candidates and references, at least one pair")
    scores = []
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        if not cand or not ref:
            scores.append(0.0)
            continue
        lcs = _lcs_length(cand, ref)
        if lcs == 0:
            scores.append(0.0)
            continue
        precision = lcs / len(cand)
        recall = lcs / len(ref)
        scores.append(2 * precision * recall / (precision + recall))
    return sum(scores) / len(scores)


def avg_length(recipes) -> float:
    recipes = list(recipes)
    if not recipes:
        raise InputError("need at least one recipe")
    return sum(len(r) for r in recipes) / len(recipes)


@dataclass(frozen=True)
class EvalReport:
    perplexity: float
    bleu: float
    rouge_l: float
    avg_length: float
    sample_count: int
    split: str
    ref_avg_length: float
    bleu_sentence: float = 0.0

    def __post_init__(self):
        if self.sample_count <= 0:
            raise InputError("sample count must be positive")
        values = (self.perplexity, self.bleu, self.rouge_l, self.avg_length)
        if any(not math.isfinite(v) for v in values):
            raise InputError("report fields must be finite")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def table_row(self, label: str) -> str:
        return (
            f"{label:<24s} perplexity={self.perplexity:7.3f}  "
            f"BLEU={100 * self.bleu:6.2f}  ROUGE-L={100 * self.rouge_l:6.2f}  "
            f"avg-len={self.avg_length:6.1f}"
        )


@dataclass(frozen=True)
class ReportDelta:
    perplexity: float
    bleu: float
    rouge_l: float
    avg_length: float
    length_gap_a: float
    length_gap_b: float

    @property
    def length_gap_improvement(self) -> float:
        """How much closer report B sits to the ground-truth average length."""
        return self.length_gap_a - self.length_gap_b


def compare_reports(a: EvalReport, b: EvalReport) -> ReportDelta:
    """Signed metric deltas (b - a) plus the distance-to-reference-length gaps."""
    if a.split != b.split:
        raise ComparabilityError(f"reports cover different splits: {a.split} vs {b.split}")
    return ReportDelta(
        perplexity=b.perplexity - a.perplexity,
        bleu=b.bleu - a.bleu,
        rouge_l=b.rouge_l - a.rouge_l,
        avg_length=b.avg_length - a.avg_length,
        length_gap_a=abs(a.avg_length - a.ref_avg_length),
        length_gap_b=abs(b.avg_length - b.ref_avg_length),
    )
