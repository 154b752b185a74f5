"""Corpus ingestion: tokenization, vocabularies, integer encoding, splits.

A corpus is a list of :class:`QueryReplyPair` with dense ids.  Everything in
this module is deterministic; vocabularies and splits are reproducible
byte-for-byte from the same inputs.
"""

from __future__ import annotations

import json
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Reserved vocabulary rows.  Fixed so checkpoints stay stable.
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD_TOKEN = "⟨pad⟩"
BOS_TOKEN = "⟨bos⟩"
EOS_TOKEN = "⟨eos⟩"
UNK_TOKEN = "⟨unk⟩"

RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)

VOCAB_FORMAT_VERSION = 1

# A token sequence is a plain list of non-empty, whitespace-free strings.
TokenSeq = list[str]


class CorpusFormatError(ValueError):
    """Raised when a corpus file contains a malformed record."""


@dataclass(frozen=True)
class QueryReplyPair:
    """One ⟨query, reply⟩ unit of the pair database."""

    id: int
    query: TokenSeq
    reply: TokenSeq


@dataclass
class DatasetSplit:
    train: list[int]
    validation: list[int]
    test: list[int]


def tokenize(text: str, lowercase: bool = True) -> TokenSeq:
    """Split ``text`` on whitespace runs after NFC normalization.

    Empty input yields an empty sequence.  Lowercasing is on by default.
    """
    text = unicodedata.normalize("NFC", text)
    if lowercase:
        text = text.lower()
    return text.split()


class Vocabulary:
    """Token/id bijection with the four reserved rows prepended.

    ``id_to_token[0:4]`` are always PAD, BOS, EOS, UNK; corpus tokens start
    at id 4.
    """

    def __init__(self, tokens: list[str]):
        self.id_to_token: list[str] = list(RESERVED_TOKENS) + list(tokens)
        self.token_to_id: dict[str, int] = {
            tok: i for i, tok in enumerate(self.id_to_token)
        }
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens, in id order."""
        return self.id_to_token[len(RESERVED_TOKENS):]

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, seq: TokenSeq, add_bos_eos: bool = False) -> list[int]:
        """Map tokens to ids, unknown tokens to UNK; optionally frame with BOS/EOS."""
        ids = [self.token_to_id.get(tok, UNK_ID) for tok in seq]
        if add_bos_eos:
            return [BOS_ID] + ids + [EOS_ID]
        return ids

    def decode(self, ids: list[int]) -> TokenSeq:
        """Back to tokens, dropping PAD/BOS/EOS and rendering UNK literally.

        Ids outside the vocabulary are an error.
        """
        out: TokenSeq = []
        for i in ids:
            if i < 0 or i >= self.size:
                raise ValueError(f"token id {i} out of range for vocabulary of size {self.size}")
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(UNK_TOKEN if i == UNK_ID else self.id_to_token[i])
        return out

    def save(self, path: str | Path) -> None:
        doc = {
            "version": VOCAB_FORMAT_VERSION,
            "reserved": list(RESERVED_TOKENS),
            "tokens": self.tokens,
        }
        data = json.dumps(doc, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
        Path(path).write_text(data + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("version") != VOCAB_FORMAT_VERSION:
            raise ValueError(f"unsupported vocabulary version in {path}")
        if tuple(doc.get("reserved", ())) != RESERVED_TOKENS:
            raise ValueError(f"unexpected reserved token set in {path}")
        return cls(doc["tokens"])


def build_vocabulary(
    pairs: list[QueryReplyPair],
    side: str = "both",
    max_size: int = 100_000,
    min_count: int = 1,
) -> Vocabulary:
    """Frequency-ranked vocabulary over the chosen side of the corpus.

    Ties in frequency break lexicographically so the result is deterministic.
    ``max_size`` counts the four reserved rows.
    """
    if not pairs:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_size < len(RESERVED_TOKENS) + 1:
        raise ValueError(f"max_size must be at least {len(RESERVED_TOKENS) + 1}")
    if side not in ("query", "reply", "both"):
        raise ValueError(f"unknown side {side!r}")

    counts: Counter[str] = Counter()
    for pair in pairs:
        if side in ("query", "both"):
            counts.update(pair.query)
        if side in ("reply", "both"):
            counts.update(pair.reply)

    candidates = [
        tok
        for tok, c in counts.items()
        if c >= min_count and tok not in RESERVED_TOKENS
    ]
    candidates.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(candidates[: max_size - len(RESERVED_TOKENS)])


def load_pairs(
    path: str | Path,
    format: str = "tsv",
    lowercase: bool = True,
    min_tokens: int = 1,
) -> tuple[list[QueryReplyPair], int]:
    """Read a pair corpus from ``path``.

    TSV records are ``query<TAB>reply``; JSONL records are
    ``{"q": ..., "r": ...}``.  Records whose query or reply tokenizes to
    fewer than ``min_tokens`` tokens are dropped.  Returns the kept pairs
    (with dense ids in file order) and the drop count.
    """
    if format not in ("tsv", "jsonl"):
        raise ValueError(f"unknown corpus format {format!r}")

    pairs: list[QueryReplyPair] = []
    dropped = 0
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if format == "tsv":
                cols = line.split("\t")
                if len(cols) != 2:
                    raise CorpusFormatError(
                        f"{path}: line {lineno}: expected exactly one tab, got {len(cols) - 1}"
                    )
                raw_q, raw_r = cols
            else:
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusFormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
                if not isinstance(record, dict) or "q" not in record or "r" not in record:
                    raise CorpusFormatError(f"{path}: line {lineno}: record must have 'q' and 'r' keys")
                raw_q, raw_r = str(record["q"]), str(record["r"])
            query = tokenize(raw_q, lowercase=lowercase)
            reply = tokenize(raw_r, lowercase=lowercase)
            if len(query) < min_tokens or len(reply) < min_tokens:
                dropped += 1
                continue
            pairs.append(QueryReplyPair(id=len(pairs), query=query, reply=reply))
    return pairs, dropped


def save_pairs(pairs: list[QueryReplyPair], path: str | Path) -> None:
    """Write pairs as TSV (``query<TAB>reply``, UTF-8, LF)."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for pair in pairs:
            handle.write(" ".join(pair.query) + "\t" + " ".join(pair.reply) + "\n")


def split_dataset(
    pairs: list[QueryReplyPair],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Deterministic disjoint train/validation/test partition of pair ids.

    Train and validation sizes are floors of their ratios; the remainder
    goes to test, so the three sets always cover every pair exactly once.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(pairs)
    if n < 3:
        raise ValueError(f"need at least 3 pairs to split, got {n}")

    order = np.random.default_rng(seed).permutation(n)
    n_train = int(ratios[0] * n)
    n_val = int(ratios[1] * n)
    ids = [pairs[i].id for i in order]
    return DatasetSplit(
        train=ids[:n_train],
        validation=ids[n_train:n_train + n_val],
        test=ids[n_train + n_val:],
    )
