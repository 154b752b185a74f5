"""The full pipeline: retrieve a candidate, generate another, rerank.

``Ensemble`` holds loaded artifacts (index, pair database, matcher,
generator, vocabularies) and answers queries.  Everything it holds is
immutable after load, so one instance serves concurrent callers.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import matcher as matcher_mod
from . import neural
from . import retrieval
from .corpus import TokenSeq, UNK_TOKEN, Vocabulary, load_pairs, tokenize
from .matcher import Embeddings, MatcherModel, extract_features
from .retrieval import InvertedIndex

MODES = ("ensemble", "retrieval_only", "generation_only")

RETRIEVED = "retrieved"
GENERATED = "generated"
FALLBACK = "fallback"

DEFAULT_APOLOGY = "sorry , i do not have a good answer for that ."


class ArtifactError(RuntimeError):
    """An artifact could not be loaded or is incompatible."""


class EmptyQueryError(ValueError):
    """The query tokenizes to nothing."""


@dataclass
class Candidate:
    reply: TokenSeq
    provenance: str                  # "retrieved" or "generated"
    source_pair_id: int | None = None
    source_query: TokenSeq | None = None
    score: float | None = None


@dataclass
class ChatResponse:
    reply: TokenSeq
    provenance: str                  # winner: retrieved/generated/fallback
    candidates: list[Candidate]
    timings_ms: dict[str, float] = field(default_factory=dict)


@dataclass
class DecodeConfig:
    max_len: int = 20
    beam_width: int = 1


@dataclass
class EnsembleConfig:
    mode: str = "ensemble"
    k: int = retrieval.DEFAULT_CANDIDATE_CAP
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    apology: str = DEFAULT_APOLOGY
    pairs_path: str = ""
    pairs_format: str = "tsv"
    index_path: str = ""
    matcher_path: str = ""
    generator_path: str | None = None
    encoder_vocab_path: str | None = None
    decoder_vocab_path: str | None = None
    use_generator_embeddings: bool = False

    @classmethod
    def from_file(cls, path: str | Path) -> "EnsembleConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(doc, base=Path(path).parent)

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "EnsembleConfig":
        def resolve(p):
            if not p or base is None:
                return p
            return str((base / p) if not Path(p).is_absolute() else Path(p))

        mode = doc.get("mode", "ensemble")
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        decode = doc.get("decode", {})
        artifacts = doc.get("artifacts", {})
        return cls(
            mode=mode,
            k=int(doc.get("k", retrieval.DEFAULT_CANDIDATE_CAP)),
            decode=DecodeConfig(
                max_len=int(decode.get("max_len", 20)),
                beam_width=int(decode.get("beam_width", 1)),
            ),
            apology=doc.get("apology", DEFAULT_APOLOGY),
            pairs_path=resolve(artifacts.get("pairs", "")),
            pairs_format=artifacts.get("pairs_format", "tsv"),
            index_path=resolve(artifacts.get("index", "")),
            matcher_path=resolve(artifacts.get("matcher", "")),
            generator_path=resolve(artifacts.get("generator")),
            encoder_vocab_path=resolve(artifacts.get("encoder_vocab")),
            decoder_vocab_path=resolve(artifacts.get("decoder_vocab")),
            use_generator_embeddings=bool(doc.get("use_generator_embeddings", False)),
        )

    def artifact_paths(self) -> dict[str, str]:
        """Every configured artifact file, keyed by role."""
        paths = {
            "pairs": self.pairs_path,
            "index": self.index_path,
            "matcher": self.matcher_path,
        }
        if self.generator_path:
            paths["generator"] = self.generator_path
            payload = Path(self.generator_path).with_suffix(".bin")
            paths["generator_payload"] = str(payload)
        if self.encoder_vocab_path:
            paths["encoder_vocab"] = self.encoder_vocab_path
        if self.decoder_vocab_path:
            paths["decoder_vocab"] = self.decoder_vocab_path
        return paths


def retrieve_best(
    q: TokenSeq,
    index: InvertedIndex,
    pairs,
    matcher: MatcherModel,
    embeddings: Embeddings | None,
    k: int,
) -> Candidate | None:
    """Coarse retrieval then fine ranking; None when nothing is found."""
    candidates = retrieval.coarse_retrieve(index, q, k)
    ranked = matcher_mod.rank_candidates(q, candidates, pairs, matcher,
                                         index, embeddings)
    if ranked is None:
        return None
    pair, score = ranked
    return Candidate(reply=pair.reply, provenance=RETRIEVED,
                     source_pair_id=pair.id, source_query=pair.query,
                     score=score)


def _degenerate(reply: TokenSeq) -> bool:
    return not reply or all(tok == UNK_TOKEN for tok in reply)


def post_rerank(
    q: TokenSeq,
    retrieved: Candidate | None,
    generated: Candidate | None,
    matcher: MatcherModel,
    index: InvertedIndex,
    embeddings: Embeddings | None = None,
) -> ChatResponse:
    """Score both candidates with the q-r scorer and return the winner.

    An empty or all-unknown generated reply is discarded before scoring.
    On an exact tie the retrieved reply wins (it is human-written).
    """
    if generated is not None and _degenerate(generated.reply):
        generated = None
    if retrieved is None and generated is None:
        raise ValueError("post_rerank needs at least one candidate")

    scored: list[Candidate] = []
    if retrieved is not None:
        retrieved.score = matcher.score(extract_features(
            q, retrieved.source_query, retrieved.reply, index, embeddings))
        scored.append(retrieved)
    if generated is not None:
        generated.score = matcher.score(extract_features(
            q, None, generated.reply, index, embeddings))
        scored.append(generated)

    winner = scored[0]
    if len(scored) == 2 and scored[1].score > scored[0].score:
        winner = scored[1]
    return ChatResponse(reply=winner.reply, provenance=winner.provenance,
                        candidates=scored)


def selection_stats(responses: list[ChatResponse]) -> dict[str, float]:
    """Fraction of replies the reranker took from each side."""
    counts = {RETRIEVED: 0, GENERATED: 0}
    for resp in responses:
        if resp.provenance in counts:
            counts[resp.provenance] += 1
    total = sum(counts.values())
    if total == 0:
        raise ValueError("no retrieved or generated responses to summarize")
    return {RETRIEVED: counts[RETRIEVED] / total,
            GENERATED: counts[GENERATED] / total}


class Ensemble:
    """Loaded artifacts plus the respond() entry point."""

    def __init__(
        self,
        config: EnsembleConfig,
        index: InvertedIndex,
        pairs,
        matcher: MatcherModel,
        generator: neural.Model | None = None,
        encoder_vocab: Vocabulary | None = None,
        decoder_vocab: Vocabulary | None = None,
        embeddings: Embeddings | None = None,
    ):
        self.config = config
        self.index = index
        self.pairs = pairs
        self.matcher = matcher
        self.generator = generator
        self.encoder_vocab = encoder_vocab
        self.decoder_vocab = decoder_vocab
        self.embeddings = embeddings

    @classmethod
    def load(cls, config: EnsembleConfig) -> "Ensemble":
        """Load every configured artifact, failing fast with its name."""
        def step(name, fn):
            try:
                return fn()
            except Exception as exc:
                raise ArtifactError(f"failed to load {name}: {exc}") from exc

        pairs, _ = step("pairs database", lambda: load_pairs(
            config.pairs_path, format=config.pairs_format))
        index = step("index", lambda: retrieval.load_index(config.index_path))
        if index.n_docs != len(pairs):
            raise ArtifactError(
                f"index covers {index.n_docs} pairs but database has {len(pairs)}")
        matcher = step("matcher", lambda: matcher_mod.load_matcher(config.matcher_path))

        generator = None
        enc_vocab = dec_vocab = None
        embeddings = None
        if config.generator_path:
            generator = step("generator checkpoint",
                             lambda: neural.load_checkpoint(config.generator_path))
            if not config.encoder_vocab_path or not config.decoder_vocab_path:
                raise ArtifactError("generator configured without vocabulary paths")
            enc_vocab = step("encoder vocabulary",
                             lambda: Vocabulary.load(config.encoder_vocab_path))
            dec_vocab = step("decoder vocabulary",
                             lambda: Vocabulary.load(config.decoder_vocab_path))
            if generator.hyper.enc_vocab_size != enc_vocab.size:
                raise ArtifactError(
                    f"encoder vocabulary size {enc_vocab.size} does not match "
                    f"checkpoint ({generator.hyper.enc_vocab_size})")
            if generator.hyper.dec_vocab_size != dec_vocab.size:
                raise ArtifactError(
                    f"decoder vocabulary size {dec_vocab.size} does not match "
                    f"checkpoint ({generator.hyper.dec_vocab_size})")
            if config.use_generator_embeddings:
                embeddings = matcher_mod.embeddings_from_encoder(
                    generator.enc_q.emb, enc_vocab)
        return cls(config, index, pairs, matcher, generator,
                   enc_vocab, dec_vocab, embeddings)

    # -- candidate production -------------------------------------------

    def _generate_candidate(self, q: TokenSeq, rstar: TokenSeq | None,
                            decode: DecodeConfig) -> Candidate:
        q_ids = self.encoder_vocab.encode(q)
        rstar_ids = self.encoder_vocab.encode(rstar) if rstar is not None else None
        out_ids = neural.generate(self.generator, q_ids, rstar_ids,
                                  max_len=decode.max_len,
                                  beam_width=decode.beam_width)
        return Candidate(reply=self.decoder_vocab.decode(out_ids),
                         provenance=GENERATED)

    def _fallback(self, timings: dict[str, float]) -> ChatResponse:
        reply = tokenize(self.config.apology)
        cand = Candidate(reply=reply, provenance=FALLBACK)
        return ChatResponse(reply=reply, provenance=FALLBACK,
                            candidates=[cand], timings_ms=timings)

    def respond(self, query: str, mode: str | None = None,
                max_len: int | None = None,
                beam_width: int | None = None) -> ChatResponse:
        """Answer one query.  Deterministic apart from the timing fields."""
        mode = mode or self.config.mode
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode != "retrieval_only" and self.generator is None:
            raise ArtifactError(f"mode {mode!r} requires a generator artifact")
        decode = DecodeConfig(
            max_len=max_len if max_len is not None else self.config.decode.max_len,
            beam_width=beam_width if beam_width is not None else self.config.decode.beam_width,
        )
        q = tokenize(query)
        if not q:
            raise EmptyQueryError("query is empty after tokenization")

        timings = {"retrieve": 0.0, "generate": 0.0, "rerank": 0.0, "total": 0.0}
        t_start = time.perf_counter()
        bi = self.generator is not None and self.generator.hyper.arch == neural.BISEQ2SEQ

        retrieved = None
        if mode != "generation_only" or bi:
            t0 = time.perf_counter()
            retrieved = retrieve_best(q, self.index, self.pairs, self.matcher,
                                      self.embeddings, self.config.k)
            timings["retrieve"] = (time.perf_counter() - t0) * 1000.0

        generated = None
        if mode != "retrieval_only":
            needs_rstar = bi
            if not needs_rstar or retrieved is not None:
                t0 = time.perf_counter()
                generated = self._generate_candidate(
                    q, retrieved.reply if (bi and retrieved) else None, decode)
                timings["generate"] = (time.perf_counter() - t0) * 1000.0

        if mode == "retrieval_only":
            generated = None
        elif mode == "generation_only":
            retrieved = None

        t0 = time.perf_counter()
        if generated is not None and _degenerate(generated.reply):
            generated = None
        if retrieved is None and generated is None:
            timings["total"] = (time.perf_counter() - t_start) * 1000.0
            return self._fallback(timings)
        response = post_rerank(q, retrieved, generated, self.matcher,
                               self.index, self.embeddings)
        timings["rerank"] = (time.perf_counter() - t0) * 1000.0
        timings["total"] = (time.perf_counter() - t_start) * 1000.0
        response.timings_ms = timings
        return response
