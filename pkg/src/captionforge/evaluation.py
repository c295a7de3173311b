"""Corpus BLEU-1..4 with brevity penalty and paragraph-wise scoring.

Modified n-gram precision clips each candidate n-gram count at the
maximum count seen in any reference of that pair; precisions aggregate
corpus-wide. No smoothing by default, so any zero precision zeroes the
score; an epsilon flag exists for sentence-level diagnostics.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError

SMOOTH_EPS = 1e-9


@dataclass
class EvalPair:
    candidate: list
    references: list  # one or more token lists

    def __post_init__(self):
        if not self.references:
            raise DataError("an evaluation pair needs at least one reference")


@dataclass
class BleuReport:
    scores: list  # BLEU-1..max_n
    precisions: list  # corpus-level p_1..p_max_n
    bp: float
    candidate_len: int
    reference_len: int
    n_pairs: int

    def to_dict(self) -> dict:
        d = {f"bleu{i + 1}": s for i, s in enumerate(self.scores)}
        d.update(
            precisions=self.precisions,
            bp=self.bp,
            candidate_len=self.candidate_len,
            reference_len=self.reference_len,
            n_pairs=self.n_pairs,
        )
        return d


def ngram_counts(tokens, n: int) -> Counter:
    """Multiset of all contiguous n-grams; empty when the sequence is short."""
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = list(tokens)
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(pairs, n: int):
    """Corpus totals (clipped matches, candidate n-gram count) at order n."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("no evaluation pairs")
    clipped = 0
    total = 0
    for pair in pairs:
        cand = ngram_counts(pair.candidate, n)
        max_ref = Counter()
        for ref in pair.references:
            for gram, count in ngram_counts(ref, n).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        clipped += sum(min(count, max_ref[gram]) for gram, count in cand.items())
        total += sum(cand.values())
    return clipped, total


def _effective_ref_len(pair: EvalPair) -> int:
    c = len(pair.candidate)
    return min((len(r) for r in pair.references), key=lambda L: (abs(L - c), L))


def corpus_bleu(pairs, max_n: int = 4, smooth: bool = False) -> BleuReport:
    """BLEU-1..max_n over the corpus.

    BLEU-n = BP * exp(mean of ln p_i for i <= n); BP = 1 when total
    candidate length exceeds the effective reference length, else
    exp(1 - r/c). Reference length per pair is the closest to the
    candidate's (shorter wins ties).
    """
    pairs = list(pairs)
    if not pairs:
        raise DataError("no evaluation pairs")
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    c = sum(len(p.candidate) for p in pairs)
    r = sum(_effective_ref_len(p) for p in pairs)
    if c == 0:
        bp = 0.0
    elif c > r:
        bp = 1.0
    else:
        bp = math.exp(1.0 - r / c)
    precisions = []
    for n in range(1, max_n + 1):
        clipped, total = modified_precision(pairs, n)
        p = clipped / total if total else 0.0
        if smooth and p == 0.0:
            p = SMOOTH_EPS
        precisions.append(p)
    scores = []
    for n in range(1, max_n + 1):
        if any(p == 0.0 for p in precisions[:n]):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in precisions[:n]) / n))
    return BleuReport(
        scores=scores,
        precisions=precisions,
        bp=bp,
        candidate_len=c,
        reference_len=r,
        n_pairs=len(pairs),
    )


def paragraph_bleu(pred_paragraphs: dict, ref_paragraphs: dict, max_n: int = 4, smooth: bool = False) -> BleuReport:
    """Paragraph-wise BLEU: concatenate each video's sentences (without
    separators) and score the resulting pairs corpus-wide."""
    pred_ids = set(pred_paragraphs)
    ref_ids = set(ref_paragraphs)
    if pred_ids != ref_ids:
        missing = sorted(ref_ids - pred_ids)
        extra = sorted(pred_ids - ref_ids)
        raise DataError(f"paragraph id mismatch: missing={missing} extra={extra}")
    pairs = []
    for vid in sorted(pred_ids):
        cand = [tok for sent in pred_paragraphs[vid] for tok in sent]
        ref = [tok for sent in ref_paragraphs[vid] for tok in sent]
        pairs.append(EvalPair(candidate=cand, references=[ref]))
    return corpus_bleu(pairs, max_n=max_n, smooth=smooth)


def write_report(path, report: BleuReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def format_table(report: BleuReport) -> str:
    lines = ["metric    value", "-" * 22]
    for i, s in enumerate(report.scores):
        lines.append(f"BLEU-{i + 1}    {s:.4f}")
    lines.append(f"BP        {report.bp:.4f}")
    lines.append(f"pairs     {report.n_pairs}")
    return "\n".join(lines)
