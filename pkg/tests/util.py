"""Shared toy-corpus builders and independent oracles for the test suite.

The oracles here are deliberately written from the definitions (plain
loops, no shared code with the implementation) so tests can check the
package against them.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from retgen.corpus import QueryReplyPair

WH_WORDS = ["what", "where", "when", "who", "how"]
NOUNS = ["cat", "dog", "bird", "tree", "river", "moon", "code", "song",
         "book", "road", "fish", "star", "boat", "cloud", "stone"]
VERBS = ["runs", "sings", "sleeps", "grows", "shines", "flows", "waits",
         "jumps", "reads", "sails"]
EXTRAS = ["today", "again", "slowly", "maybe", "indeed", "together"]


def make_random_pairs(n: int, seed: int = 0, vocab_size: int = 30,
                      min_len: int = 2, max_len: int = 6) -> list[QueryReplyPair]:
    """Pairs of random w## tokens; useful for retrieval oracles."""
    rng = np.random.default_rng(seed)
    tokens = [f"w{i:02d}" for i in range(vocab_size)]
    pairs = []
    for i in range(n):
        q = [tokens[j] for j in rng.integers(0, vocab_size, rng.integers(min_len, max_len + 1))]
        r = [tokens[j] for j in rng.integers(0, vocab_size, rng.integers(min_len, max_len + 1))]
        pairs.append(QueryReplyPair(id=i, query=q, reply=r))
    return pairs


def make_chat_corpus(n: int, seed: int = 0) -> list[QueryReplyPair]:
    """Templated English-ish pairs; each query carries a unique topic token.

    The unique token makes self-retrieval unambiguous, which the desk-scale
    pipeline tests rely on.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        noun = NOUNS[int(rng.integers(len(NOUNS)))]
        verb = VERBS[int(rng.integers(len(VERBS)))]
        wh = WH_WORDS[int(rng.integers(len(WH_WORDS)))]
        extra = EXTRAS[int(rng.integers(len(EXTRAS)))]
        topic = f"topic{i:03d}"
        query = [wh, "does", "the", noun, verb, topic]
        reply = ["the", noun, verb, extra, f"answer{i:03d}"]
        pairs.append(QueryReplyPair(id=i, query=query, reply=reply))
    return pairs


def random_token_seq(rng, vocab_size: int, min_len: int = 1, max_len: int = 6):
    n = int(rng.integers(min_len, max_len + 1))
    return [f"w{int(j):02d}" for j in rng.integers(0, vocab_size, n)]


def brute_force_scores(pairs, stopwords, query):
    """Oracle for coarse retrieval: scan every pair, summing idf over
    sorted distinct shared terms."""
    n = len(pairs)
    df = {}
    for p in pairs:
        for term in set(p.query):
            if term not in stopwords:
                df[term] = df.get(term, 0) + 1
    scores = {}
    for p in pairs:
        s = 0.0
        hit = False
        for term in sorted(set(query)):
            if term in stopwords:
                continue
            if term in set(p.query) and term in df:
                s += math.log((1 + n) / (1 + df[term])) + 1.0
                hit = True
        if hit:
            scores[p.id] = s
    return scores


def bleu_oracle(candidates, references, max_n):
    """Oracle for corpus BLEU: enumerate n-grams, clip, smooth, combine."""
    log_sum = 0.0
    for n in range(1, max_n + 1):
        matched, total = 0, 0
        for cand, ref in zip(candidates, references):
            cand_grams = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
            ref_grams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
            ref_counts = Counter(ref_grams)
            used = Counter()
            for gram in cand_grams:
                if used[gram] < ref_counts.get(gram, 0):
                    matched += 1
                used[gram] += 1
            total += len(cand_grams)
        if total == 0:
            p = 1e-9
        else:
            p = (matched if matched > 0 else 1e-9) / total
        log_sum += math.log(p)
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return 100.0 * bp * math.exp(log_sum / max_n)
