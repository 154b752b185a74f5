"""Fine-grained query/reply relevance scoring.

A logistic classifier over a fixed 8-feature vector judges how well a
candidate ⟨q*, r*⟩ pair answers the query q; its confidence is the match
score.  The same q-r scorer is reused to post-rerank retrieved vs.
generated candidates, in which case the q*-dependent features are zeroed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import QueryReplyPair, TokenSeq
from .retrieval import CandidateSet, InvertedIndex, tfidf_vector

MATCHER_FORMAT_VERSION = 1

# Fixed, versioned feature order.  Changing this invalidates saved models.
FEATURE_NAMES = (
    "overlap_qq",
    "overlap_qr",
    "tfidf_cos_qq",
    "tfidf_cos_qr",
    "emb_cos_qq",
    "emb_cos_qr",
    "len_ratio",
    "bias",
)
N_FEATURES = len(FEATURE_NAMES)
_BIAS_INDEX = FEATURE_NAMES.index("bias")

Embeddings = dict[str, np.ndarray]


@dataclass
class LabeledExample:
    features: np.ndarray
    label: int


@dataclass
class MatcherModel:
    weights: np.ndarray
    feature_names: tuple[str, ...] = FEATURE_NAMES
    metadata: dict = field(default_factory=dict)

    def score(self, features: np.ndarray) -> float:
        """sigmoid(w·f): the classifier's confidence, in (0, 1)."""
        return _sigmoid(float(self.weights @ features))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def jaccard(a: TokenSeq, b: TokenSeq) -> float:
    """|A ∩ B| / |A ∪ B| over token sets; 0 when both are empty."""
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 0.0
    return len(sa & sb) / len(union)


def sparse_cosine(a: dict[str, float], b: dict[str, float]) -> float:
    """Cosine of two sparse vectors; 0 if either has zero norm."""
    norm_a = math.sqrt(sum(v * v for v in a.values()))
    norm_b = math.sqrt(sum(v * v for v in b.values()))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    if len(b) < len(a):
        a, b = b, a
    dot = sum(v * b[k] for k, v in a.items() if k in b)
    return dot / (norm_a * norm_b)


def _mean_embedding(seq: TokenSeq, embeddings: Embeddings) -> np.ndarray | None:
    vecs = [embeddings[tok] for tok in seq if tok in embeddings]
    if not vecs:
        return None
    return np.mean(vecs, axis=0)


def _dense_cosine(a: np.ndarray | None, b: np.ndarray | None) -> float:
    if a is None or b is None:
        return 0.0
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def extract_features(
    q: TokenSeq,
    q_star: TokenSeq | None,
    r_star: TokenSeq,
    index: InvertedIndex,
    embeddings: Embeddings | None = None,
) -> np.ndarray:
    """The 8-feature vector for (q, q*, r*), in FEATURE_NAMES order.

    q*-dependent features are 0 when ``q_star`` is None (the generated
    candidate has no source query); embedding features are 0 when no
    embedding table is supplied.
    """
    if not r_star:
        raise ValueError("r_star must be non-empty")
    f = np.zeros(N_FEATURES)
    tf_q = tfidf_vector(q, index)
    f[1] = jaccard(q, r_star)
    f[3] = sparse_cosine(tf_q, tfidf_vector(r_star, index))
    if embeddings is not None:
        emb_q = _mean_embedding(q, embeddings)
        f[5] = _dense_cosine(emb_q, _mean_embedding(r_star, embeddings))
    if q_star is not None:
        f[0] = jaccard(q, q_star)
        f[2] = sparse_cosine(tf_q, tfidf_vector(q_star, index))
        if embeddings is not None:
            f[4] = _dense_cosine(emb_q, _mean_embedding(q_star, embeddings))
        if q and q_star:
            f[6] = min(len(q), len(q_star)) / max(len(q), len(q_star))
    f[7] = 1.0
    return f


def generate_negatives(
    pairs: list[QueryReplyPair],
    ratio: int,
    seed: int,
    index: InvertedIndex,
    embeddings: Embeddings | None = None,
) -> list[LabeledExample]:
    """Self-match positives plus ``ratio`` sampled negatives per pair.

    A positive is (q, q, r) from a true pair; each negative swaps in the
    query and reply of a uniformly drawn *different* pair.  Deterministic
    for a fixed seed.
    """
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs for negative sampling")
    rng = np.random.default_rng(seed)
    examples: list[LabeledExample] = []
    n = len(pairs)
    for pair in pairs:
        examples.append(LabeledExample(
            features=extract_features(pair.query, pair.query, pair.reply,
                                      index, embeddings),
            label=1,
        ))
        for _ in range(ratio):
            j = int(rng.integers(0, n - 1))
            if j >= pair.id:
                j += 1
            other = pairs[j]
            examples.append(LabeledExample(
                features=extract_features(pair.query, other.query, other.reply,
                                          index, embeddings),
                label=0,
            ))
    return examples


def logistic_loss_and_grad(
    weights: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    l2: float,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus L2 penalty (bias weight excluded) and its gradient."""
    margins = (2.0 * labels - 1.0) * (features @ weights)
    loss = float(np.mean(np.logaddexp(0.0, -margins)))
    probs = 1.0 / (1.0 + np.exp(-(features @ weights)))
    grad = features.T @ (probs - labels) / len(labels)
    reg_mask = np.ones_like(weights)
    reg_mask[_BIAS_INDEX] = 0.0
    loss += 0.5 * l2 * float(np.sum((reg_mask * weights) ** 2))
    grad = grad + l2 * reg_mask * weights
    return loss, grad


def train_matcher(
    examples: list[LabeledExample],
    epochs: int = 500,
    learning_rate: float = 0.5,
    l2: float = 1e-4,
    seed: int = 0,
) -> MatcherModel:
    """Full-batch gradient descent on the logistic loss, from zero weights."""
    labels = np.array([ex.label for ex in examples], dtype=np.float64)
    if len(set(labels.tolist())) < 2:
        raise ValueError("training needs both positive and negative examples")
    features = np.stack([ex.features for ex in examples])

    weights = np.zeros(features.shape[1])
    history: list[float] = []
    for _ in range(epochs):
        loss, grad = logistic_loss_and_grad(weights, features, labels, l2)
        history.append(loss)
        weights = weights - learning_rate * grad
    final_loss, _ = logistic_loss_and_grad(weights, features, labels, l2)

    model = MatcherModel(
        weights=weights,
        metadata={
            "seed": seed,
            "epochs": epochs,
            "learning_rate": learning_rate,
            "l2": l2,
            "final_loss": final_loss,
        },
    )
    model.loss_history = history  # kept on the object, not persisted
    return model


def rank_candidates(
    q: TokenSeq,
    candidates: CandidateSet,
    pairs: list[QueryReplyPair],
    model: MatcherModel,
    index: InvertedIndex,
    embeddings: Embeddings | None = None,
) -> tuple[QueryReplyPair, float] | None:
    """Best candidate pair by match score; ties keep the better coarse rank.

    Returns None for an empty candidate set (the no-retrieval outcome).
    """
    best: tuple[QueryReplyPair, float] | None = None
    for pid, _ in candidates:
        pair = pairs[pid]
        score = model.score(extract_features(q, pair.query, pair.reply,
                                             index, embeddings))
        if best is None or score > best[1]:
            best = (pair, score)
    return best


def save_matcher(model: MatcherModel, path: str | Path) -> None:
    doc = {
        "version": MATCHER_FORMAT_VERSION,
        "feature_names": list(model.feature_names),
        "weights": [float(w) for w in model.weights],
        "metadata": model.metadata,
    }
    data = json.dumps(doc, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    Path(path).write_text(data + "\n", encoding="utf-8")


def load_matcher(path: str | Path) -> MatcherModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != MATCHER_FORMAT_VERSION:
        raise ValueError(f"unsupported matcher version in {path}")
    if tuple(doc["feature_names"]) != FEATURE_NAMES:
        raise ValueError(f"feature order in {path} does not match this build")
    return MatcherModel(
        weights=np.array(doc["weights"], dtype=np.float64),
        metadata=doc.get("metadata", {}),
    )


def random_embeddings(tokens, dim: int, seed: int) -> Embeddings:
    """A seeded fixed random table; a stand-in before a generator is trained."""
    rng = np.random.default_rng(seed)
    return {tok: rng.normal(size=dim) for tok in sorted(set(tokens))}


def embeddings_from_encoder(emb_table: np.ndarray, vocab) -> Embeddings:
    """Token -> learned query-encoder embedding row, reserved rows skipped."""
    out: Embeddings = {}
    for tok in vocab.tokens:
        out[tok] = emb_table[vocab.token_to_id[tok]]
    return out
