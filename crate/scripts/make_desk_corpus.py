#!/usr/bin/env python3
"""Generate the bundled desk-scale corpora under data/desk/.

corpus.txt   blank-line-separated short news-style documents (about 100 KB)
train.jsonl  article/summary pairs built from the same templates
val.jsonl    held-out pairs

The output is a pure function of SEED, so rerunning reproduces the files.
"""

import json
import random
from pathlib import Path

SEED = 20240611
ROOT = Path(__file__).resolve().parent.parent / "data" / "desk"

CITIES = ["Lyon", "Osaka", "Denver", "Porto", "Nairobi", "Quito", "Tampere", "Perth", "Leeds", "Hanoi"]
GROUPS = ["the city council", "the transit board", "the school district", "the water authority",
          "the port commission", "the health service", "the arts council", "the housing agency"]
ACTIONS = [("approved", "approves"), ("rejected", "rejects"), ("delayed", "delays"),
           ("expanded", "expands"), ("announced", "announces"), ("cut", "cuts")]
OBJECTS = ["a new bus line", "the library budget", "a bridge repair plan", "free school meals",
           "a flood barrier", "the night market", "a solar farm", "a cycling lane network",
           "the museum renovation", "a rent freeze"]
REASONS = ["after months of public debate", "citing rising costs", "following a local petition",
           "despite objections from residents", "to meet new safety rules", "after a close vote"]
DETAILS = [
    "Officials said the decision would take effect next spring.",
    "The vote passed by a narrow margin on Tuesday evening.",
    "Local businesses welcomed the news in a joint statement.",
    "Critics argued that the plan lacked a clear timeline.",
    "A spokesperson said further details would follow within weeks.",
    "The project is expected to employ several hundred workers.",
    "Residents will be able to comment on the proposal online.",
    "The mayor called the outcome a step in the right direction.",
]


def pair(rng):
    city = rng.choice(CITIES)
    group = rng.choice(GROUPS)
    past, present = rng.choice(ACTIONS)
    obj = rng.choice(OBJECTS)
    reason = rng.choice(REASONS)
    details = rng.sample(DETAILS, 2)
    article = f"In {city}, {group} {past} {obj} {reason}. " + " ".join(details)
    summary = f"{city} {group.replace('the ', '')} {present} {obj}"
    return article, summary


def main():
    rng = random.Random(SEED)
    ROOT.mkdir(parents=True, exist_ok=True)
    docs = []
    size = 0
    while size < 100_000:
        article, summary = pair(rng)
        doc = f"{summary.capitalize()}.\n{article}"
        docs.append(doc)
        size += len(doc) + 2
    (ROOT / "corpus.txt").write_text("\n\n".join(docs) + "\n", encoding="utf-8")
    for name, count in [("train.jsonl", 400), ("val.jsonl", 40)]:
        with open(ROOT / name, "w", encoding="utf-8") as f:
            for _ in range(count):
                article, summary = pair(rng)
                f.write(json.dumps({"article": article, "summary": summary}) + "\n")


if __name__ == "__main__":
    main()
