#!/usr/bin/env python3
# Copyright (c) 2026 The tablelm Authors
# SPDX-License-Identifier: Apache-2.0
"""Writes the bundled toy corpus: a seeded class-bigram language.

Words fall into classes; each class has a few likely successor classes and
words inside a class follow a Zipf distribution. A good allocation puts each
class in its own table row.
"""

import argparse
import random
from pathlib import Path

ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "pl"]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
CODAS = ["", "n", "r", "s", "l", "k"]


def make_words(rng, count):
    seen, words = set(), []
    while len(words) < count:
        w = "".join(rng.choice(ONSETS) + rng.choice(VOWELS) for _ in range(rng.choice([1, 2, 2, 3])))
        w += rng.choice(CODAS)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", type=Path, default=Path(__file__).resolve().parent.parent / "data")
    ap.add_argument("--classes", type=int, default=31)
    ap.add_argument("--class-size", type=int, default=32)
    ap.add_argument("--train-tokens", type=int, default=100_000)
    ap.add_argument("--valid-tokens", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=20261015)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    words = make_words(rng, args.classes * args.class_size)
    rng.shuffle(words)
    classes = [words[i * args.class_size:(i + 1) * args.class_size] for i in range(args.classes)]
    zipf = [1.0 / (r + 1) for r in range(args.class_size)]

    successors = []
    for _ in range(args.classes):
        nxt = rng.sample(range(args.classes), 3)
        successors.append((nxt, [0.6, 0.3, 0.1]))
    starts = rng.sample(range(args.classes), 5)

    def sentence():
        c = rng.choice(starts)
        out = []
        while True:
            out.append(rng.choices(classes[c], weights=zipf)[0])
            if len(out) >= 4 and rng.random() < 0.2:
                return out
            nxt, weights = successors[c]
            c = rng.choices(nxt, weights=weights)[0]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, budget in (("toy.train.txt", args.train_tokens), ("toy.valid.txt", args.valid_tokens)):
        lines, tokens = [], 0
        while tokens < budget:
            s = sentence()
            tokens += len(s)
            lines.append(" ".join(s))
        (args.out_dir / name).write_text("\n".join(lines) + "\n")
        print(f"{name}: {len(lines)} sentences, {tokens} tokens")


if __name__ == "__main__":
    main()
