#!/usr/bin/env python3
"""Independent reference computations for the frozen fixtures in tests/fixtures.rs.

Run from the repository root: python3 crates/core/tests/oracles/fixtures.py
"""
import hashlib
import math
import os

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
DIMS = 64


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) % (1 << 64)
    return h


def tokens(text: str):
    out, cur = [], []
    for c in text.lower():
        keep = (c.isascii() and c.isalnum()) or (not c.isascii() and c.isalpha())
        if keep:
            cur.append(c)
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


def embed(text: str):
    v = [0.0] * DIMS
    for tok in tokens(text):
        h = fnv1a64(tok.encode("utf-8"))
        sign = -1.0 if (h >> 6) & 1 else 1.0
        v[h % DIMS] += sign
    norm = math.sqrt(sum(x * x for x in v))
    return v if norm == 0 else [x / norm for x in v]


def cosine(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


if __name__ == "__main__":
    print("sha256 fixture:", hashlib.sha256(("verde-" + "00" * 20).encode()).hexdigest())
    v = embed("antenna array gain")
    print("embed('antenna array gain'):")
    for i, x in enumerate(v):
        if x != 0.0:
            print(f"  ({i}, {x!r}),")
    w = embed("phased antenna array beam steering gain")
    print("cosine:", repr(cosine(v, w)))
    here = os.path.dirname(os.path.abspath(__file__))
    template = open(os.path.join(here, "..", "..", "src", "rag", "ta_template.txt")).read()
    print("word count of template + empty block:", len((template + "<Reference></Reference>").split()))
    print("embed('phased antenna array beam steering gain'):")
    for i, x in enumerate(w):
        if x != 0.0:
            print(f"  ({i}, {x!r}),")
    for t in ["dog", "phased", "beam", "steering", "antenna", "array", "gain"]:
        h = fnv1a64(t.encode())
        print(t, hex(h), h % 64, "neg" if (h >> 6) & 1 else "pos")
