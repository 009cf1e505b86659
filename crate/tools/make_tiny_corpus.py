#!/usr/bin/env python3
"""Generate data/tiny_corpus.txt, the ~10 kB character-level LM fixture.

Emits deterministic pseudo-English prose from a small template grammar so the
file is self-authored (no licensing concerns) while still having word- and
sentence-level regularities for a character model to learn.

Usage: make_tiny_corpus.py <output-path>
"""

import random
import sys

SUBJECTS = [
    "the river", "a lantern", "the old mill", "the harbor", "a quiet road",
    "the garden", "the north wind", "a grey heron", "the ferry", "the orchard",
    "a stone bridge", "the lighthouse", "the market", "a slow train", "the valley",
]
VERBS = [
    "waits beside", "turns toward", "drifts past", "leans against", "rests near",
    "moves through", "looks over", "settles under", "winds around", "stands before",
]
OBJECTS = [
    "the water", "the hills", "the open field", "the low clouds", "the far shore",
    "the pine woods", "the empty square", "the morning fog", "the long pier",
    "the salt flats",
]
TAILS = [
    "at dawn", "after the rain", "in late autumn", "before the storm",
    "under a pale sky", "all through the night", "as the tide returns",
    "when the bells ring", "in the first light", "by early evening",
]


def sentence(rng: random.Random) -> str:
    s = "{} {} {} {}".format(
        rng.choice(SUBJECTS), rng.choice(VERBS), rng.choice(OBJECTS), rng.choice(TAILS)
    )
    if rng.random() < 0.25:
        s += ", and {} {} {}".format(
            rng.choice(SUBJECTS), rng.choice(VERBS), rng.choice(OBJECTS)
        )
    return s[0].upper() + s[1:] + "."


def main() -> None:
    out_path = sys.argv[1]
    rng = random.Random(1798)
    paragraphs = []
    text_len = 0
    while text_len < 10_000:
        para = " ".join(sentence(rng) for _ in range(rng.randint(3, 6)))
        paragraphs.append(para)
        text_len += len(para) + 2
    text = "\n\n".join(paragraphs)[:10_240] + "\n"
    with open(out_path, "w") as f:
        f.write(text)
    print(f"wrote {len(text)} chars, {len(set(text))} distinct")


if __name__ == "__main__":
    main()
