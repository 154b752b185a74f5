"""Coarse candidate retrieval over an inverted index of pair queries.

Queries are bag-of-words; each candidate pair is scored by the sum of
smoothed idf weights of the distinct non-stopword terms it shares with the
input query.  Scores accumulate in sorted-term order so results are exactly
reproducible by a brute-force scan.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import QueryReplyPair, TokenSeq

INDEX_FORMAT_VERSION = 1
DEFAULT_CANDIDATE_CAP = 1000


@dataclass
class CandidateSet:
    """Coarse candidates as (pair id, score), best first; ties by lower id."""

    entries: list[tuple[int, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> list[int]:
        return [pid for pid, _ in self.entries]


class InvertedIndex:
    """Term -> sorted posting list of pair ids, query side only."""

    def __init__(self, postings: dict[str, list[int]], n_docs: int,
                 stopwords: frozenset[str]):
        self.postings = postings
        self.n_docs = n_docs
        self.stopwords = stopwords

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        """Smoothed inverse document frequency, strictly positive.

        ln((1 + N) / (1 + df)) + 1; an unseen term gets the maximum
        ln(1 + N) + 1.
        """
        return math.log((1 + self.n_docs) / (1 + self.df(term))) + 1.0


def build_index(pairs: list[QueryReplyPair], stopwords=()) -> InvertedIndex:
    """Index the query side of ``pairs`` with set-of-words semantics."""
    if not pairs:
        raise ValueError("cannot index an empty pair list")
    stop = frozenset(stopwords)
    postings: dict[str, list[int]] = {}
    for pair in pairs:
        for term in sorted(set(pair.query) - stop):
            postings.setdefault(term, []).append(pair.id)
    return InvertedIndex(postings=postings, n_docs=len(pairs), stopwords=stop)


def coarse_retrieve(index: InvertedIndex, query: TokenSeq,
                    k: int = DEFAULT_CANDIDATE_CAP) -> CandidateSet:
    """Top-k pairs by summed idf of shared distinct non-stopword terms.

    Pairs sharing no term are excluded; an empty or all-stopword query
    yields an empty set.  Per-pair scores sum term weights in sorted-term
    order, so a brute-force scan reproduces them bit for bit.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    scores: dict[int, float] = {}
    for term in sorted(set(query) - index.stopwords):
        posting = index.postings.get(term)
        if not posting:
            continue
        weight = index.idf(term)
        for pid in posting:
            scores[pid] = scores.get(pid, 0.0) + weight
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return CandidateSet(entries=ranked[:k])


def tfidf_vector(seq: TokenSeq, index: InvertedIndex) -> dict[str, float]:
    """Sparse term -> tf*idf map over non-stopword tokens of ``seq``."""
    weights: dict[str, float] = {}
    for term in seq:
        if term in index.stopwords:
            continue
        weights[term] = weights.get(term, 0.0) + 1.0
    for term in weights:
        weights[term] *= index.idf(term)
    return weights


def top_stopwords(pairs: list[QueryReplyPair], n: int = 25) -> list[str]:
    """The ``n`` query-side terms with the highest document frequency.

    Ties break lexicographically.  This is the default stopword list when
    none is supplied.
    """
    df: dict[str, int] = {}
    for pair in pairs:
        for term in set(pair.query):
            df[term] = df.get(term, 0) + 1
    ranked = sorted(df, key=lambda t: (-df[t], t))
    return ranked[:n]


def save_index(index: InvertedIndex, path: str | Path) -> None:
    """Write the index as a JSON header line plus one sorted term line each.

    The format round-trips byte-identically: loading and saving again
    produces the same file.
    """
    header = {
        "version": INDEX_FORMAT_VERSION,
        "n_docs": index.n_docs,
        "stopwords": sorted(index.stopwords),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(json.dumps(header, ensure_ascii=False, sort_keys=True,
                                separators=(",", ":")) + "\n")
        for term in sorted(index.postings):
            ids = " ".join(str(i) for i in index.postings[term])
            handle.write(f"{term}\t{ids}\n")


def load_index(path: str | Path) -> InvertedIndex:
    with open(path, encoding="utf-8") as handle:
        header = json.loads(handle.readline())
        if header.get("version") != INDEX_FORMAT_VERSION:
            raise ValueError(f"unsupported index version in {path}")
        n_docs = header["n_docs"]
        postings: dict[str, list[int]] = {}
        for lineno, line in enumerate(handle, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            term, _, ids = line.partition("\t")
            posting = [int(tok) for tok in ids.split()]
            if any(pid >= n_docs or pid < 0 for pid in posting):
                raise ValueError(f"{path}: line {lineno}: pair id out of range")
            postings[term] = posting
    return InvertedIndex(postings=postings, n_docs=n_docs,
                         stopwords=frozenset(header["stopwords"]))
