"""Shared fixtures: a CLI-built desk-scale artifact set, acceptance reporting."""

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from retgen import cli
from retgen.corpus import save_pairs

from util import make_chat_corpus


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """A 60-pair corpus with every artifact built through the CLI.

    Returns a dict of paths plus the parsed pair list.  Built once per
    session; training runs at tiny dimensions to stay fast.
    """
    root = tmp_path_factory.mktemp("desk")
    pairs = make_chat_corpus(60, seed=11)
    paths = {
        "root": root,
        "pairs": root / "pairs.tsv",
        "stopwords": root / "stopwords.txt",
        "enc_vocab": root / "enc_vocab.json",
        "dec_vocab": root / "dec_vocab.json",
        "index": root / "index.txt",
        "matcher": root / "matcher.json",
        "biseq": root / "biseq",
        "seq2seq": root / "seq2seq",
        "config": root / "config.json",
    }
    save_pairs(pairs, paths["pairs"])
    paths["stopwords"].write_text("the\ndoes\n", encoding="utf-8")

    def run(argv):
        code = cli.main(argv)
        assert code == 0, f"CLI failed ({code}): {argv}"

    run(["corpus", "build-vocab", "--pairs", str(paths["pairs"]),
         "--side", "both", "--max-size", "500", "--out", str(paths["enc_vocab"])])
    run(["corpus", "build-vocab", "--pairs", str(paths["pairs"]),
         "--side", "reply", "--max-size", "500", "--out", str(paths["dec_vocab"])])
    run(["index", "build", "--pairs", str(paths["pairs"]),
         "--stopwords", str(paths["stopwords"]), "--out", str(paths["index"])])
    run(["matcher", "train", "--pairs", str(paths["pairs"]),
         "--index", str(paths["index"]), "--negatives", "2",
         "--epochs", "300", "--seed", "0", "--out", str(paths["matcher"])])
    common = ["--pairs", str(paths["pairs"]), "--enc-vocab", str(paths["enc_vocab"]),
              "--dec-vocab", str(paths["dec_vocab"]), "--embed-dim", "12",
              "--hidden-dim", "24", "--batch-size", "8", "--patience", "999",
              "--val-ratio", "0.1"]
    run(["gen", "train", "--arch", "biseq2seq", *common,
         "--index", str(paths["index"]), "--matcher", str(paths["matcher"]),
         "--max-epochs", "50", "--seed", "5", "--out", str(paths["biseq"])])
    run(["gen", "train", "--arch", "seq2seq", *common,
         "--max-epochs", "40", "--seed", "6", "--out", str(paths["seq2seq"])])

    paths["config"].write_text(json.dumps({
        "mode": "ensemble",
        "k": 100,
        "decode": {"max_len": 12, "beam_width": 1},
        "apology": "sorry i have nothing to say",
        "artifacts": {
            "pairs": "pairs.tsv",
            "index": "index.txt",
            "matcher": "matcher.json",
            "generator": "biseq.json",
            "seq2seq_generator": "seq2seq.json",
            "encoder_vocab": "enc_vocab.json",
            "decoder_vocab": "dec_vocab.json",
        },
    }, indent=2), encoding="utf-8")

    return {"paths": paths, "pairs": pairs}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed"):
        for report in terminalreporter.stats.get(outcome, []):
            if report.when != "call" or "test_acceptance" not in report.nodeid:
                continue
            name = report.nodeid.split("::")[-1]
            lines.append((name, outcome))
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, outcome in sorted(lines):
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{mark}] {name}")
