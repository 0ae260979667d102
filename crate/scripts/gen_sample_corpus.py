#!/usr/bin/env python3
"""Generate the bundled sample corpora (data/sample-zu.txt, data/sample-xh.txt).

The text is synthetic: sentences are assembled from noun-class prefixes,
agreement concords, tense markers, verb roots and suffixes in the style of
conjunctively written Nguni languages. It is not real Zulu or Xhosa, but it
has the long, morpheme-rich words and agreement patterns that make subword
models and higher-order n-grams pay off. Output is released under CC0.

    python3 scripts/gen_sample_corpus.py            # writes both files
    python3 scripts/gen_sample_corpus.py --check    # verifies the bundled files
"""

import argparse
import hashlib
import random
import sys
from pathlib import Path

# (singular prefix, plural prefix, subject concord sg, subject concord pl,
#  possessive concord sg, possessive concord pl)
NOUN_CLASSES = [
    ("umu", "aba", "u", "ba", "wa", "ba"),
    ("um", "imi", "u", "i", "wa", "ya"),
    ("ili", "ama", "li", "a", "la", "a"),
    ("isi", "izi", "si", "zi", "sa", "za"),
    ("in", "izin", "i", "zi", "ya", "za"),
    ("ulu", "izin", "lu", "zi", "lwa", "za"),
    ("ubu", "ubu", "bu", "bu", "ba", "ba"),
]

LANGS = {
    "zu": {
        "nouns": [
            "ntu", "ntwana", "fundi", "fazi", "lungu", "sebenzi", "hlobo",
            "fula", "thi", "lilo", "zwe", "hlangano", "tshe", "kolo", "bongo",
            "lwimi", "zinyo", "kati", "dlebe", "khathi", "ja", "komo", "dlu",
            "nyanga", "sizwe", "ntaba", "shumi", "phandla", "bhuku", "sipho",
        ],
        "verbs": [
            "hamb", "bon", "funda", "sebenz", "thand", "khulum", "dl", "phuz",
            "lim", "gijim", "cul", "bhal", "buz", "phendul", "vul", "val",
            "thum", "khumbul", "sik", "phek", "fik", "hlal", "lind", "thol",
            "nik", "sheshis", "qal", "qed", "xox", "cabang",
        ],
        "adverbs": [
            "kakhulu", "manje", "kahle", "namhlanje", "kusasa", "izolo",
            "njalo", "futhi", "ngempela", "kancane",
        ],
        "conj": ["kodwa", "ngoba", "uma", "futhi", "kanti", "ukuze"],
        "locs": ["ekhaya", "esikoleni", "edolobheni", "emfuleni", "ensimini", "ezintabeni"],
        "neg": "a",
    },
    "xh": {
        "nouns": [
            "ntu", "ntwana", "fundi", "fazi", "hlobo", "lambo", "thi", "lilo",
            "hlaba", "qela", "tye", "kolo", "tshayi", "lwimi", "xhosa",
            "khathi", "komo", "ndlu", "nyanga", "sizwe", "ntaba", "qhagamshelo",
        ],
        "verbs": [
            "hamb", "bon", "funda", "sebenz", "thand", "theth", "ty", "sel",
            "lim", "baleka", "cula", "bhal", "buz", "phendul", "vul", "val",
            "thum", "khumbul", "qhub", "pheka", "fik", "hlal", "lind", "fumana",
            "nik", "xelel", "qal", "gqib", "xox", "cing",
        ],
        "adverbs": [
            "kakhulu", "ngoku", "kakuhle", "namhlanje", "ngomso", "izolo",
            "rhoqo", "kwakhona", "ngenene", "kancinci",
        ],
        "conj": ["kodwa", "kuba", "ukuba", "kwaye", "ukuze", "xa"],
        "locs": ["ekhaya", "esikolweni", "edolophini", "emlanjeni", "entsimini", "ezintabeni"],
        "neg": "a",
    },
}

TENSES = ["ya", "", "za ku", "be", "sa", "ke"]
SUFFIXES = ["a", "a", "a", "ile", "ela", "isa", "ana", "wa", "eka"]
OBJECTS = ["m", "ba", "yi", "li", "si", "zi", "ku"]


class Lexicon:
    def __init__(self, lang, rng):
        self.lang = LANGS[lang]
        self.rng = rng
        # Each stem is bound to one noun class, as in a real lexicon.
        self.noun_class = {n: rng.randrange(len(NOUN_CLASSES)) for n in self.lang["nouns"]}
        # Zipf-like weights so some words are frequent and most are rare.
        self.noun_w = [1.0 / (i + 1) for i in range(len(self.lang["nouns"]))]
        self.verb_w = [1.0 / (i + 1) ** 0.8 for i in range(len(self.lang["verbs"]))]

    def noun(self):
        stem = self.rng.choices(self.lang["nouns"], self.noun_w)[0]
        cls = NOUN_CLASSES[self.noun_class[stem]]
        plural = self.rng.random() < 0.35
        prefix = cls[1] if plural else cls[0]
        if stem[0] in "aeiou" and prefix.endswith(("u", "i")):
            prefix = prefix[:-1]
        word = prefix + stem
        if self.rng.random() < 0.15:
            word += "ana"
        return word, cls[3] if plural else cls[2], cls[5] if plural else cls[4]

    def verb(self, concord, negative):
        root = self.rng.choices(self.lang["verbs"], self.verb_w)[0]
        tense = self.rng.choice(TENSES)
        obj = self.rng.choice(OBJECTS) if self.rng.random() < 0.3 else ""
        suffix = "i" if negative else self.rng.choice(SUFFIXES)
        if root.endswith("a"):
            root = root[:-1]
        parts = [self.lang["neg"] if negative else "", concord]
        if tense and not negative:
            parts.extend(tense.split(" "))
        return "".join(parts) + obj + root + suffix

    def clause(self):
        subj, concord, poss = self.noun()
        words = [subj]
        if self.rng.random() < 0.3:
            owner, _, _ = self.noun()
            words.append(poss + owner.lstrip("aeiou") if owner[0] in "aeiou" else poss + owner)
        words.append(self.verb(concord, self.rng.random() < 0.15))
        if self.rng.random() < 0.6:
            obj, _, _ = self.noun()
            words.append(obj)
        if self.rng.random() < 0.35:
            words.append(self.rng.choice(self.lang["locs"]))
        if self.rng.random() < 0.3:
            words.append(self.rng.choice(self.lang["adverbs"]))
        return words

    def sentence(self):
        words = self.clause()
        while self.rng.random() < 0.45:
            words.append(self.rng.choice(self.lang["conj"]))
            words.extend(self.clause())
        words[0] = words[0].capitalize()
        return " ".join(words) + self.rng.choice([".", ".", ".", "?", "!"])


def generate(lang, target_bytes, seed):
    rng = random.Random(seed)
    lex = Lexicon(lang, rng)
    lines, size = [], 0
    while size < target_bytes:
        line = lex.sentence()
        lines.append(line)
        size += len(line.encode()) + 1
    return "\n".join(lines) + "\n"


OUTPUTS = [("zu", "sample-zu.txt", 300_000, 7), ("xh", "sample-xh.txt", 80_000, 11)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default=Path(__file__).resolve().parent.parent / "data", type=Path)
    ap.add_argument("--check", action="store_true", help="compare against the files on disk")
    args = ap.parse_args()
    ok = True
    for lang, name, size, seed in OUTPUTS:
        text = generate(lang, size, seed)
        path = args.out_dir / name
        if args.check:
            same = path.exists() and path.read_text(encoding="utf-8") == text
            print(f"{path}: {'ok' if same else 'differs'}")
            ok &= same
        else:
            args.out_dir.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
            digest = hashlib.sha256(text.encode()).hexdigest()[:16]
            print(f"{path}\t{len(text.encode())} bytes\t{text.count(chr(10))} lines\tsha256 {digest}")
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
