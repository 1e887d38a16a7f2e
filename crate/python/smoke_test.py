"""Smoke test for the lexiforge_py extension.

Build first:  cargo build -p lexiforge-py --release
Then run:     python3 python/smoke_test.py
"""

import importlib.util
import json
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_extension():
    built = ROOT / "target" / "release" / "liblexiforge_py.so"
    if not built.exists():
        sys.exit(f"missing {built}; run `cargo build -p lexiforge-py --release`")
    tmp = tempfile.mkdtemp()
    dst = os.path.join(tmp, "lexiforge_py.so")
    shutil.copy(built, dst)
    spec = importlib.util.spec_from_file_location("lexiforge_py", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


PAIRS = [
    ("שלום", "hello"),
    ("כלב", "dog"),
    ("חתול", "cat"),
    ("בית", "house"),
    ("מים", "water"),
    ("אש", "fire"),
]


def main():
    lf = load_extension()

    assert lf.normalize_word("  HeLLo ") == "hello"
    a = lf.Alphabet.build(["hello", "world"], "en")
    ids = a.encode("hold")
    assert a.decode(ids) == "hold", ids
    assert len(a) == len(a.symbols) + 4

    small = json.dumps({"emb_dim": 8, "hidden": 16, "epochs": 3, "batch_size": 4})
    with tempfile.TemporaryDirectory() as d:
        for kind, model in [
            ("rnn", lf.Model.train_rnn(PAIRS, "he", "en", seed=1, config=small)),
            ("seq2seq", lf.Model.train_seq2seq(PAIRS, "he", "en", seed=1, config=small)),
            (
                "styletransfer",
                lf.Model.train_style(
                    [s for s, _ in PAIRS],
                    [t for _, t in PAIRS],
                    "he",
                    "en",
                    seed=1,
                    config=json.dumps({"emb_dim": 8, "z_dim": 8, "style_dim": 4, "hidden": 16, "filters": 4, "epochs": 2, "batch_size": 4}),
                ),
            ),
        ]:
            assert model.kind == kind, model.kind
            out = model.translate_all([s for s, _ in PAIRS])
            assert len(out) == len(PAIRS)
            assert all(len(w) <= 24 for w in out), out
            path = os.path.join(d, f"{kind}.cwf")
            model.save(path)
            again = lf.Model.load(path)
            assert again.translate_all([s for s, _ in PAIRS]) == out
            print(f"{kind}: {out}")

        try:
            lf.Model.load(os.path.join(d, "missing.cwf"))
        except lf.LexiforgeError as e:
            print("missing checkpoint ->", e)
        else:
            raise AssertionError("expected LexiforgeError")

    m = lf.vocab_metrics(["cat", "dog", "zebra", "qqq", "zebra"], ["cat"], ["dog", "zebra"])
    assert (m["ewns"], m["pnw"], m["tuw"]) == (2, 1, 3), m
    assert abs(lf.normalized_lcp("dunendarvald", "duendorva") - 2 / 9) < 1e-12
    print("ok")


if __name__ == "__main__":
    main()
