"""Deterministic synthetic corpora used across the test suite.

Two tasks:
  * copy: target equals source (vocab of 20 word types, length <= 10)
  * cipher: word-for-word substitution with reversed order and a Zipf
    token distribution, a small stand-in for a translation task
"""

import numpy as np

from deskmt.autodiff import Rng

COPY_SEED = 424242
CIPHER_SEED = 31337


def write_copy_corpus(path, n_pairs=1000, vocab=20, max_len=10, seed=COPY_SEED):
    gen = Rng(seed).split(0)
    words = [f"t{i:02d}" for i in range(vocab)]
    lines = []
    for _ in range(n_pairs):
        n = int(gen.integers(1, max_len + 1))
        idx = [int(i) for i in gen.integers(0, vocab, n)]
        s = " ".join(words[i] for i in idx)
        lines.append(s + "\t" + s)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def write_cipher_corpus(path, n_pairs, vocab=300, min_len=3, max_len=12,
                        seed=CIPHER_SEED, reverse=True):
    gen = Rng(seed).split(0)
    src_words = [f"s{i:03d}" for i in range(vocab)]
    tgt_words = [f"t{i:03d}" for i in range(vocab)]
    probs = np.array([1.0 / (i + 2) for i in range(vocab)])
    cum = np.cumsum(probs / probs.sum())
    lines = []
    for _ in range(n_pairs):
        n = int(gen.integers(min_len, max_len + 1))
        idx = [int(np.searchsorted(cum, gen.random(()))) for _ in range(n)]
        out = reversed(idx) if reverse else idx
        lines.append(" ".join(src_words[i] for i in idx) + "\t" +
                     " ".join(tgt_words[i] for i in out))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
