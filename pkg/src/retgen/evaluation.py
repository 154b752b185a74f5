"""Automatic evaluation: corpus BLEU, unigram entropy, reply length.

``evaluate_systems`` runs a set of responders over a shared test set and
emits one report row per system, as JSON and as an aligned text table.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import TokenSeq, Vocabulary
from .ensemble import ChatResponse, selection_stats

REPORT_FORMAT_VERSION = 1

# Added to a zero clipped-count numerator so a missing n-gram order does
# not annihilate the geometric mean.
BLEU_SMOOTHING = 1e-9


def _ngram_counts(seq: TokenSeq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def modified_precisions(candidates: list[TokenSeq], references: list[TokenSeq],
                        max_n: int) -> list[float]:
    """Corpus-level clipped n-gram precisions for orders 1..max_n.

    A zero numerator is smoothed to BLEU_SMOOTHING; an order with no
    candidate n-grams at all scores BLEU_SMOOTHING.
    """
    precisions = []
    for n in range(1, max_n + 1):
        matched = 0
        total = 0
        for cand, ref in zip(candidates, references):
            cand_counts = _ngram_counts(cand, n)
            ref_counts = _ngram_counts(ref, n)
            matched += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            total += max(0, len(cand) - n + 1)
        if total == 0:
            precisions.append(BLEU_SMOOTHING)
        else:
            num = matched if matched > 0 else BLEU_SMOOTHING
            precisions.append(num / total)
    return precisions


def brevity_penalty(candidates: list[TokenSeq], references: list[TokenSeq]) -> float:
    """exp(min(0, 1 - ref_len/cand_len)) over corpus totals; 0 if no output."""
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    return math.exp(min(0.0, 1.0 - ref_len / cand_len))


def bleu(candidates: list[TokenSeq], references: list[TokenSeq], max_n: int = 4) -> float:
    """Cumulative corpus BLEU-``max_n`` on the 0-100 scale.

    Geometric mean of the modified precisions for orders 1..max_n times
    the brevity penalty, both over corpus totals.
    """
    if not candidates:
        raise ValueError("bleu needs a non-empty corpus")
    if len(candidates) != len(references):
        raise ValueError("need exactly one reference per candidate")
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be between 1 and 4")
    precisions = modified_precisions(candidates, references, max_n)
    if brevity_penalty(candidates, references) == 0.0:
        return 0.0
    log_mean = sum(math.log(p) for p in precisions) / max_n
    return 100.0 * brevity_penalty(candidates, references) * math.exp(log_mean)


@dataclass
class UnigramModel:
    """Additively smoothed token distribution over a decoder vocabulary."""

    probs: np.ndarray          # (vocab_size,)
    vocab: Vocabulary
    alpha: float

    def log_prob(self, token: str) -> float:
        return float(np.log(self.probs[self.vocab.id_of(token)]))


def build_unigram(train_replies: list[TokenSeq], vocab: Vocabulary,
                  alpha: float = 1.0) -> UnigramModel:
    """p(w) = (count(w) + α) / (total + α·V); out-of-vocabulary mass goes to UNK."""
    if not train_replies:
        raise ValueError("unigram model needs a non-empty reply corpus")
    counts = np.zeros(vocab.size)
    for reply in train_replies:
        for tok in reply:
            counts[vocab.id_of(tok)] += 1
    total = counts.sum()
    # alpha=0 degenerates to plain MLE; unseen rows then carry zero mass
    probs = (counts + alpha) / (total + alpha * vocab.size)
    return UnigramModel(probs=probs, vocab=vocab, alpha=alpha)


def corpus_entropy(replies: list[TokenSeq], unigram: UnigramModel,
                   denominator: str = "per_token") -> float:
    """Mean negative log unigram probability of reply tokens.

    ``per_token`` divides by the total token count, ``per_reply`` by the
    number of replies.
    """
    if not replies:
        raise ValueError("corpus_entropy needs a non-empty reply list")
    if denominator not in ("per_token", "per_reply"):
        raise ValueError(f"unknown denominator {denominator!r}")
    total = 0.0
    n_tokens = 0
    for reply in replies:
        for tok in reply:
            total -= unigram.log_prob(tok)
            n_tokens += 1
    if denominator == "per_token":
        if n_tokens == 0:
            raise ValueError("per-token entropy of an all-empty reply corpus")
        return total / n_tokens
    return total / len(replies)


def mean_length(replies: list[TokenSeq]) -> float:
    if not replies:
        raise ValueError("mean_length needs a non-empty reply list")
    return sum(len(r) for r in replies) / len(replies)


# ---------------------------------------------------------------------------
# Multi-system comparison
# ---------------------------------------------------------------------------

@dataclass
class SystemReport:
    name: str
    sample_count: int
    failures: int
    bleu: list[float]                      # cumulative BLEU-1..4, 0-100
    precisions: list[float]                # modified n-gram precisions, 0-100
    entropy_per_token: float
    entropy_per_reply: float
    mean_length: float
    selection: dict[str, float] | None     # reranker proportions, ensembles only


@dataclass
class EvalReport:
    systems: list[SystemReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "version": REPORT_FORMAT_VERSION,
            "systems": [
                {
                    "name": s.name,
                    "sample_count": s.sample_count,
                    "failures": s.failures,
                    "bleu": s.bleu,
                    "precisions": s.precisions,
                    "entropy_per_token": s.entropy_per_token,
                    "entropy_per_reply": s.entropy_per_reply,
                    "mean_length": s.mean_length,
                    "selection": s.selection,
                }
                for s in self.systems
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True,
                          separators=(",", ":")) + "\n"

    def to_text(self) -> str:
        """Aligned comparison table, one row per system."""
        headers = ["system", "n", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4",
                   "entropy", "length", "sel(retr/gen)", "fail"]
        rows = []
        for s in self.systems:
            sel = "-"
            if s.selection is not None:
                sel = (f"{100 * s.selection['retrieved']:.1f}%/"
                       f"{100 * s.selection['generated']:.1f}%")
            rows.append([
                s.name, str(s.sample_count),
                *(f"{b:.3f}" for b in s.bleu),
                f"{s.entropy_per_token:.3f}", f"{s.mean_length:.2f}",
                sel, str(s.failures),
            ])
        widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) if rows
                  else len(headers[i]) for i in range(len(headers))]
        lines = [
            "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
            "  ".join("-" * w for w in widths),
        ]
        for r in rows:
            lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(r))))
        return "\n".join(lines) + "\n"


def evaluate_systems(
    test_pairs: list[tuple[TokenSeq, TokenSeq]],
    systems: list[tuple[str, object]],
    unigram: UnigramModel,
) -> EvalReport:
    """Run each (name, responder) over every test query and score it.

    A responder maps a query token sequence to a ChatResponse.  Per-query
    failures are counted and excluded from that system's metrics.
    Selection proportions are reported for systems that ever presented two
    candidates to the reranker.
    """
    if not test_pairs:
        raise ValueError("evaluate_systems needs a non-empty test set")
    report = EvalReport()
    for name, fn in systems:
        replies: list[TokenSeq] = []
        refs: list[TokenSeq] = []
        responses: list[ChatResponse] = []
        failures = 0
        for query, reference in test_pairs:
            try:
                resp = fn(query)
            except Exception:
                failures += 1
                continue
            responses.append(resp)
            replies.append(resp.reply)
            refs.append(reference)
        if not replies:
            raise ValueError(f"system {name!r} failed on every query")

        is_ensemble = any(len(r.candidates) == 2 for r in responses)
        selection = selection_stats(responses) if is_ensemble else None
        report.systems.append(SystemReport(
            name=name,
            sample_count=len(replies),
            failures=failures,
            bleu=[bleu(replies, refs, n) for n in range(1, 5)],
            precisions=[100.0 * p for p in modified_precisions(replies, refs, 4)],
            entropy_per_token=corpus_entropy(replies, unigram, "per_token"),
            entropy_per_reply=corpus_entropy(replies, unigram, "per_reply"),
            mean_length=mean_length(replies),
            selection=selection,
        ))
    return report
