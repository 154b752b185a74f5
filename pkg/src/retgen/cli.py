"""Command-line shell: build artifacts, train, evaluate, chat, serve.

Subcommands::

    retgen corpus build-vocab   build a vocabulary file from a pair corpus
    retgen index build          build the inverted retrieval index
    retgen matcher train        train the logistic match scorer
    retgen gen train            train a seq2seq or biseq2seq generator
    retgen eval run             score systems on a test corpus
    retgen chat                 interactive terminal loop
    retgen serve                HTTP service for the companion UI

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every subcommand
accepts ``--seed`` and ``--config``; explicit flags override config-file
values, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evaluation
from . import matcher as matcher_mod
from . import neural
from . import retrieval
from .ensemble import Ensemble, EnsembleConfig

_BUILTIN_DEFAULTS = {
    "build_vocab": {"format": "tsv", "side": "both", "max_size": 100_000,
                    "min_count": 1, "lowercase": True, "min_tokens": 1},
    "build_index": {"format": "tsv", "auto_stopwords": 25, "min_tokens": 1},
    "train_matcher": {"format": "tsv", "negatives": 1, "epochs": 500,
                      "learning_rate": 0.5, "l2": 1e-4, "seed": 0,
                      "embeddings": "none", "embedding_dim": 16,
                      "min_tokens": 1},
    "train_generator": {"format": "tsv", "arch": "biseq2seq", "embed_dim": 16,
                        "hidden_dim": 32, "batch_size": 16, "max_epochs": 300,
                        "patience": 10, "rho": 0.95, "eps": 1e-6, "seed": 0,
                        "val_ratio": 0.1, "k": retrieval.DEFAULT_CANDIDATE_CAP,
                        "min_tokens": 1},
    "eval": {"format": "tsv", "seed": 0},
    "chat": {},
    "serve": {"host": "127.0.0.1", "port": 8080, "cors": True},
}


def _load_config_doc(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _resolve(args: argparse.Namespace, section: str, keys) -> dict:
    """flag > config-file section > built-in default."""
    doc = _load_config_doc(getattr(args, "config", None))
    section_doc = doc.get(section, {})
    builtins = _BUILTIN_DEFAULTS[section]
    out = {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in section_doc:
            out[key] = section_doc[key]
        else:
            out[key] = builtins[key]
    return out


def _require(args: argparse.Namespace, **values):
    for name, value in values.items():
        if not value:
            raise UsageError(f"--{name.replace('_', '-')} is required")
    return values


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_build_vocab(args) -> int:
    opts = _resolve(args, "build_vocab",
                    ["format", "side", "max_size", "min_count", "lowercase",
                     "min_tokens"])
    _require(args, pairs=args.pairs, out=args.out)
    pairs, dropped = corpus_mod.load_pairs(args.pairs, format=opts["format"],
                                           lowercase=opts["lowercase"],
                                           min_tokens=opts["min_tokens"])
    vocab = corpus_mod.build_vocabulary(pairs, side=opts["side"],
                                        max_size=opts["max_size"],
                                        min_count=opts["min_count"])
    vocab.save(args.out)
    print(f"vocabulary: {vocab.size} tokens ({dropped} records dropped) -> {args.out}")
    return 0


def _cmd_build_index(args) -> int:
    opts = _resolve(args, "build_index", ["format", "auto_stopwords", "min_tokens"])
    _require(args, pairs=args.pairs, out=args.out)
    pairs, _ = corpus_mod.load_pairs(args.pairs, format=opts["format"],
                                     min_tokens=opts["min_tokens"])
    if args.no_stopwords:
        stopwords = []
    elif args.stopwords:
        text = Path(args.stopwords).read_text(encoding="utf-8")
        stopwords = [line.strip() for line in text.splitlines() if line.strip()]
    else:
        stopwords = retrieval.top_stopwords(pairs, opts["auto_stopwords"])
    index = retrieval.build_index(pairs, stopwords)
    retrieval.save_index(index, args.out)
    print(f"index: {index.n_docs} pairs, {len(index.postings)} terms, "
          f"{len(index.stopwords)} stopwords -> {args.out}")
    return 0


def _load_matcher_embeddings(kind, pairs, opts, args):
    if kind == "none":
        return None
    if kind == "random":
        tokens = [t for p in pairs for t in p.query + p.reply]
        return matcher_mod.random_embeddings(tokens, opts["embedding_dim"],
                                             opts["seed"])
    if kind == "generator":
        _require(args, generator=args.generator, enc_vocab=args.enc_vocab)
        model = neural.load_checkpoint(args.generator)
        vocab = corpus_mod.Vocabulary.load(args.enc_vocab)
        return matcher_mod.embeddings_from_encoder(model.enc_q.emb, vocab)
    raise UsageError(f"unknown embeddings source {kind!r}")


def _cmd_train_matcher(args) -> int:
    opts = _resolve(args, "train_matcher",
                    ["format", "negatives", "epochs", "learning_rate", "l2",
                     "seed", "embeddings", "embedding_dim", "min_tokens"])
    _require(args, pairs=args.pairs, index=args.index, out=args.out)
    pairs, _ = corpus_mod.load_pairs(args.pairs, format=opts["format"],
                                     min_tokens=opts["min_tokens"])
    index = retrieval.load_index(args.index)
    embeddings = _load_matcher_embeddings(opts["embeddings"], pairs, opts, args)
    examples = matcher_mod.generate_negatives(pairs, opts["negatives"],
                                              opts["seed"], index, embeddings)
    model = matcher_mod.train_matcher(examples, epochs=opts["epochs"],
                                      learning_rate=opts["learning_rate"],
                                      l2=opts["l2"], seed=opts["seed"])
    matcher_mod.save_matcher(model, args.out)
    print(f"matcher: {len(examples)} examples, final loss "
          f"{model.metadata['final_loss']:.6f} -> {args.out}")
    return 0


def _materialize_triples(pairs, index, match_model, enc_vocab, dec_vocab,
                         arch, k):
    """Encoded (q, r*, r) training triples; r* comes from self-excluded retrieval."""
    triples = []
    fallbacks = 0
    for pair in pairs:
        rstar_ids = None
        if arch == neural.BISEQ2SEQ:
            cands = retrieval.coarse_retrieve(index, pair.query, k)
            cands = retrieval.CandidateSet(
                entries=[e for e in cands if e[0] != pair.id])
            ranked = matcher_mod.rank_candidates(pair.query, cands, pairs,
                                                 match_model, index)
            if ranked is None:
                rstar_tokens = pair.reply  # nothing else shares a term
                fallbacks += 1
            else:
                rstar_tokens = ranked[0].reply
            rstar_ids = enc_vocab.encode(rstar_tokens)
        triples.append((
            enc_vocab.encode(pair.query),
            rstar_ids,
            dec_vocab.encode(pair.reply, add_bos_eos=True),
        ))
    return triples, fallbacks


def _cmd_train_generator(args) -> int:
    opts = _resolve(args, "train_generator",
                    ["format", "arch", "embed_dim", "hidden_dim", "batch_size",
                     "max_epochs", "patience", "rho", "eps", "seed",
                     "val_ratio", "k", "min_tokens"])
    _require(args, pairs=args.pairs, enc_vocab=args.enc_vocab,
             dec_vocab=args.dec_vocab, out=args.out)
    arch = opts["arch"]
    if arch not in (neural.SEQ2SEQ, neural.BISEQ2SEQ):
        raise UsageError(f"unknown --arch {arch!r}")
    if arch == neural.BISEQ2SEQ and (not args.index or not args.matcher):
        raise UsageError("biseq2seq training requires --index and --matcher "
                         "to retrieve candidate replies")

    pairs, _ = corpus_mod.load_pairs(args.pairs, format=opts["format"],
                                     min_tokens=opts["min_tokens"])
    enc_vocab = corpus_mod.Vocabulary.load(args.enc_vocab)
    dec_vocab = corpus_mod.Vocabulary.load(args.dec_vocab)
    index = retrieval.load_index(args.index) if args.index else None
    match_model = matcher_mod.load_matcher(args.matcher) if args.matcher else None

    triples, fallbacks = _materialize_triples(
        pairs, index, match_model, enc_vocab, dec_vocab, arch, opts["k"])
    if fallbacks:
        print(f"note: {fallbacks} pairs had no retrievable candidate; "
              f"used their own reply as r*")

    val_ratio = opts["val_ratio"]
    if not 0.0 <= val_ratio < 1.0:
        raise UsageError(f"--val-ratio must be in [0, 1), got {val_ratio}")
    if val_ratio == 0.0:
        # toy-scale mode: validate on the training set itself, so the
        # best-validation checkpoint is simply the best-fit epoch
        train_set = triples
        val = triples
    else:
        order = np.random.default_rng(opts["seed"]).permutation(len(triples))
        n_val = max(1, int(val_ratio * len(triples)))
        val = [triples[i] for i in order[:n_val]]
        train_set = [triples[i] for i in order[n_val:]]

    model = neural.init_model(arch, opts["embed_dim"], opts["hidden_dim"],
                              enc_vocab.size, dec_vocab.size, seed=opts["seed"],
                              vocab_files={"encoder": str(args.enc_vocab),
                                           "decoder": str(args.dec_vocab)})
    config = neural.TrainConfig(batch_size=opts["batch_size"],
                                max_epochs=opts["max_epochs"],
                                rho=opts["rho"], eps=opts["eps"],
                                patience=opts["patience"], seed=opts["seed"])
    model, result = neural.train(model, train_set, val, config)

    manifest, payload = neural.save_checkpoint(model, args.out)
    history_path = Path(str(args.out) + ".history.json")
    history_path.write_text(json.dumps({
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "fallback_rstar": fallbacks,
        "epochs": [{"epoch": e.epoch, "train_loss": e.train_loss,
                    "val_perplexity": e.val_perplexity}
                   for e in result.history],
    }, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")
    last = result.history[-1]
    print(f"{arch}: {len(result.history)} epochs, train loss "
          f"{last.train_loss:.4f}, val ppl {last.val_perplexity:.4f} "
          f"-> {manifest} + {payload}")
    return 0


def _echo_responder(reference_by_query):
    from .ensemble import Candidate, ChatResponse

    def respond(query):
        reply = reference_by_query[tuple(query)]
        cand = Candidate(reply=reply, provenance="retrieved", score=1.0)
        return ChatResponse(reply=reply, provenance="retrieved",
                            candidates=[cand])

    return respond


def build_eval_systems(config: EnsembleConfig, seq2seq_path: str | None):
    """The comparison lineup: retrieval, bare generators, full ensemble."""
    systems = []
    retrieval_only = Ensemble.load(config)
    systems.append(("retrieval",
                    lambda q, e=retrieval_only: e.respond(" ".join(q),
                                                          mode="retrieval_only")))
    if seq2seq_path:
        import dataclasses
        cfg2 = dataclasses.replace(config, generator_path=seq2seq_path)
        seq2seq_ens = Ensemble.load(cfg2)
        systems.append(("seq2seq",
                        lambda q, e=seq2seq_ens: e.respond(" ".join(q),
                                                           mode="generation_only")))
    if config.generator_path:
        full = Ensemble.load(config)
        systems.append(("biseq2seq",
                        lambda q, e=full: e.respond(" ".join(q),
                                                    mode="generation_only")))
        systems.append(("rerank_retrieval_biseq2seq",
                        lambda q, e=full: e.respond(" ".join(q),
                                                    mode="ensemble")))
    return systems


def _cmd_eval(args) -> int:
    opts = _resolve(args, "eval", ["format", "seed"])
    _require(args, config=args.config, test=args.test)
    doc = _load_config_doc(args.config)
    config = EnsembleConfig.from_dict(doc, base=Path(args.config).parent)
    seq2seq_path = doc.get("artifacts", {}).get("seq2seq_generator")
    if seq2seq_path and not Path(seq2seq_path).is_absolute():
        seq2seq_path = str(Path(args.config).parent / seq2seq_path)

    test_pairs, _ = corpus_mod.load_pairs(args.test, format=opts["format"])
    test_set = [(p.query, p.reply) for p in test_pairs]

    if not config.decoder_vocab_path:
        raise UsageError("eval needs a decoder vocabulary in the config")
    dec_vocab = corpus_mod.Vocabulary.load(config.decoder_vocab_path)
    train_pairs_path = args.train_pairs or config.pairs_path
    train_pairs, _ = corpus_mod.load_pairs(train_pairs_path,
                                           format=config.pairs_format)
    unigram = evaluation.build_unigram([p.reply for p in train_pairs], dec_vocab)

    systems = build_eval_systems(config, seq2seq_path)
    if args.echo_fixture:
        systems.insert(0, ("echo", _echo_responder(
            {tuple(q): r for q, r in test_set})))

    report = evaluation.evaluate_systems(test_set, systems, unigram)
    text = report.to_text()
    print(text, end="")
    if args.out_json:
        Path(args.out_json).write_text(report.to_json(), encoding="utf-8")
    if args.out_text:
        Path(args.out_text).write_text(text, encoding="utf-8")
    return 0


def _cmd_chat(args) -> int:
    _require(args, config=args.config)
    config = EnsembleConfig.from_file(args.config)
    ens = Ensemble.load(config)
    mode = args.mode or config.mode
    print(f"retgen chat ({mode}); empty line or 'quit' exits")
    while True:
        try:
            line = input("you> ")
        except EOFError:
            break
        line = line.strip()
        if not line or line in ("quit", "exit"):
            break
        resp = ens.respond(line, mode=mode)
        print(f"bot[{resp.provenance}]> {' '.join(resp.reply)}")
        for cand in resp.candidates:
            score = "-" if cand.score is None else f"{cand.score:.4f}"
            src = (f", pair {cand.source_pair_id}"
                   if cand.source_pair_id is not None else "")
            print(f"  · {cand.provenance} (score {score}{src}): "
                  f"{' '.join(cand.reply)}")
    return 0


def _cmd_serve(args) -> int:
    opts = _resolve(args, "serve", ["host", "port", "cors"])
    _require(args, config=args.config)
    config = EnsembleConfig.from_file(args.config)
    ens = Ensemble.load(config)  # fail fast before binding the port
    from .service import create_app
    import uvicorn

    app = create_app(ens, cors=opts["cors"])
    print(f"serving on http://{opts['host']}:{opts['port']}")
    uvicorn.run(app, host=opts["host"], port=int(opts["port"]), log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(parser):
    parser.add_argument("--seed", type=int, default=None,
                        help="seed for every random draw in this command")
    parser.add_argument("--config", default=None,
                        help="JSON config file supplying flag defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retgen",
        description="retrieval + generation dialog ensemble",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    corpus_cmd = sub.add_parser("corpus", help="corpus utilities")
    corpus_sub = corpus_cmd.add_subparsers(dest="subcommand", required=True)
    vocab = corpus_sub.add_parser("build-vocab", help="build a vocabulary file")
    vocab.add_argument("--pairs")
    vocab.add_argument("--format", choices=["tsv", "jsonl"])
    vocab.add_argument("--side", choices=["query", "reply", "both"])
    vocab.add_argument("--max-size", type=int, dest="max_size")
    vocab.add_argument("--min-count", type=int, dest="min_count")
    vocab.add_argument("--min-tokens", type=int, dest="min_tokens")
    vocab.add_argument("--no-lowercase", dest="lowercase",
                       action="store_const", const=False)
    vocab.add_argument("--out")
    _add_common(vocab)
    vocab.set_defaults(func=_cmd_build_vocab)

    index_cmd = sub.add_parser("index", help="retrieval index utilities")
    index_sub = index_cmd.add_subparsers(dest="subcommand", required=True)
    ibuild = index_sub.add_parser("build", help="build the inverted index")
    ibuild.add_argument("--pairs")
    ibuild.add_argument("--format", choices=["tsv", "jsonl"])
    ibuild.add_argument("--min-tokens", type=int, dest="min_tokens")
    ibuild.add_argument("--stopwords", help="stopword file, one term per line")
    ibuild.add_argument("--auto-stopwords", type=int, dest="auto_stopwords",
                        help="derive this many stopwords from document frequency")
    ibuild.add_argument("--no-stopwords", action="store_true")
    ibuild.add_argument("--out")
    _add_common(ibuild)
    ibuild.set_defaults(func=_cmd_build_index)

    matcher_cmd = sub.add_parser("matcher", help="match-scorer utilities")
    matcher_sub = matcher_cmd.add_subparsers(dest="subcommand", required=True)
    mtrain = matcher_sub.add_parser("train", help="train the logistic scorer")
    mtrain.add_argument("--pairs")
    mtrain.add_argument("--format", choices=["tsv", "jsonl"])
    mtrain.add_argument("--min-tokens", type=int, dest="min_tokens")
    mtrain.add_argument("--index")
    mtrain.add_argument("--negatives", type=int,
                        help="negative examples per positive")
    mtrain.add_argument("--epochs", type=int)
    mtrain.add_argument("--lr", type=float, dest="learning_rate")
    mtrain.add_argument("--l2", type=float)
    mtrain.add_argument("--embeddings", choices=["none", "random", "generator"])
    mtrain.add_argument("--embedding-dim", type=int, dest="embedding_dim")
    mtrain.add_argument("--generator", help="checkpoint manifest for embeddings")
    mtrain.add_argument("--enc-vocab", dest="enc_vocab")
    mtrain.add_argument("--out")
    _add_common(mtrain)
    mtrain.set_defaults(func=_cmd_train_matcher)

    gen_cmd = sub.add_parser("gen", help="generator utilities")
    gen_sub = gen_cmd.add_subparsers(dest="subcommand", required=True)
    gtrain = gen_sub.add_parser("train", help="train a reply generator")
    gtrain.add_argument("--arch", choices=[neural.SEQ2SEQ, neural.BISEQ2SEQ])
    gtrain.add_argument("--pairs")
    gtrain.add_argument("--format", choices=["tsv", "jsonl"])
    gtrain.add_argument("--min-tokens", type=int, dest="min_tokens")
    gtrain.add_argument("--enc-vocab", dest="enc_vocab")
    gtrain.add_argument("--dec-vocab", dest="dec_vocab")
    gtrain.add_argument("--index", help="index for materializing r* triples")
    gtrain.add_argument("--matcher", help="match scorer for ranking r* candidates")
    gtrain.add_argument("--k", type=int, help="coarse retrieval cap for r*")
    gtrain.add_argument("--embed-dim", type=int, dest="embed_dim")
    gtrain.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    gtrain.add_argument("--batch-size", type=int, dest="batch_size")
    gtrain.add_argument("--max-epochs", type=int, dest="max_epochs")
    gtrain.add_argument("--patience", type=int)
    gtrain.add_argument("--rho", type=float)
    gtrain.add_argument("--eps", type=float)
    gtrain.add_argument("--val-ratio", type=float, dest="val_ratio")
    gtrain.add_argument("--out", help="checkpoint path prefix")
    _add_common(gtrain)
    gtrain.set_defaults(func=_cmd_train_generator)

    eval_cmd = sub.add_parser("eval", help="evaluation harness")
    eval_sub = eval_cmd.add_subparsers(dest="subcommand", required=True)
    erun = eval_sub.add_parser("run", help="score systems on a test corpus")
    erun.add_argument("--test", help="test pair corpus")
    erun.add_argument("--format", choices=["tsv", "jsonl"])
    erun.add_argument("--train-pairs", dest="train_pairs",
                      help="reply corpus for the unigram entropy model")
    erun.add_argument("--out-json", dest="out_json")
    erun.add_argument("--out-text", dest="out_text")
    erun.add_argument("--echo-fixture", dest="echo_fixture", action="store_true",
                      help="include an oracle system that echoes the reference")
    _add_common(erun)
    erun.set_defaults(func=_cmd_eval)

    chat = sub.add_parser("chat", help="interactive terminal chat")
    chat.add_argument("--mode", choices=["ensemble", "retrieval_only",
                                         "generation_only"])
    _add_common(chat)
    chat.set_defaults(func=_cmd_chat)

    serve = sub.add_parser("serve", help="HTTP chat service")
    serve.add_argument("--host")
    serve.add_argument("--port", type=int)
    serve.add_argument("--no-cors", dest="cors", action="store_const", const=False)
    _add_common(serve)
    serve.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
