"""Build the desk-scale English/Hebrew word lists used by the acceptance suite.

Requires `pip install wordfreq english-words`. The pairing is by frequency rank,
not by meaning: the lists stand in for a real bilingual dictionary when none is
available locally. Supply your own files to the CLI for real experiments.
"""
import argparse
import os
import re

import wordfreq
from english_words import get_english_words_set

LATIN = re.compile(r"^[a-z]{2,12}$")
HEBREW = re.compile(r"^[א-ת]{2,12}$")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/desk")
    ap.add_argument("--pairs", type=int, default=850)
    ap.add_argument("--english", type=int, default=8000)
    ap.add_argument("--probe", type=int, default=1300)
    ap.add_argument("--reference", type=int, default=60000)
    args = ap.parse_args()

    dictionary = get_english_words_set(["web2", "gcide"], lower=True, alpha=True)
    en = [w for w in wordfreq.top_n_list("en", 200000) if LATIN.match(w) and w in dictionary]
    he = [w for w in wordfreq.top_n_list("he", 100000) if HEBREW.match(w)]

    need_he = args.pairs + args.probe
    assert len(he) >= need_he and len(en) >= args.english

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "he_en_pairs.tsv"), "w", encoding="utf-8", newline="\n") as f:
        f.write("# hebrew<TAB>english, paired by frequency rank (not translations)\n")
        for h, e in zip(he[: args.pairs], en[: args.pairs]):
            f.write(f"{h}\t{e}\n")
    with open(os.path.join(args.out, "en_words.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# {args.english} frequent English words\n")
        f.write("\n".join(en[: args.english]) + "\n")
    with open(os.path.join(args.out, "he_probe.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# {args.probe} Hebrew words disjoint from the pair file\n")
        f.write("\n".join(he[args.pairs : need_he]) + "\n")
    with open(os.path.join(args.out, "en_reference.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write("# English reference vocabulary (frequency list filtered by dictionary)\n")
        f.write("\n".join(sorted(en[: args.reference])) + "\n")


if __name__ == "__main__":
    main()
