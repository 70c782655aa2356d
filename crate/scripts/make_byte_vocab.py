#!/usr/bin/env python3
"""Write assets/byte/{encoder.json,vocab.bpe}: the 256 GPT-2 byte symbols plus
<|endoftext|>, with no merges. Text round-trips byte for byte through it."""

import json
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "assets" / "byte"


def bytes_to_unicode():
    printable = list(range(33, 127)) + list(range(161, 173)) + list(range(174, 256))
    table, extra = {}, 0
    for b in range(256):
        if b in printable:
            table[b] = chr(b)
        else:
            extra += 1
            table[b] = chr(255 + extra)
    return table


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    enc = {c: b for b, c in bytes_to_unicode().items()}
    enc["<|endoftext|>"] = 256
    (OUT / "encoder.json").write_text(json.dumps(enc, ensure_ascii=False), encoding="utf-8")
    (OUT / "vocab.bpe").write_text("#version: 0.2\n", encoding="utf-8")


if __name__ == "__main__":
    main()
