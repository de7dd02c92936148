"""Parallel-corpus loading, vocabulary building, encoding, and batching.

The corpus format is UTF-8 text, one pair per line, "source<TAB>target";
extra tab-separated columns are ignored. Word-level tokenization over
normalized text keeps the pipeline simple and the embedding budget
explicit.
"""

from __future__ import annotations

import hashlib
import unicodedata
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .autodiff import Rng
from .errors import ConfigError, DataError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

DEFAULT_MAX_LEN = 512


def normalize(text: str) -> str:
    """NFC-normalize, lowercase, split punctuation into standalone tokens,
    and collapse whitespace. Idempotent by construction."""
    text = unicodedata.normalize("NFC", text).lower()
    out = []
    for ch in text:
        if unicodedata.category(ch).startswith("P"):
            out.append(f" {ch} ")
        else:
            out.append(ch)
    return " ".join("".join(out).split())


@dataclass
class ParallelCorpus:
    """Ordered source/target pairs plus provenance of the file they came from."""

    pairs: list[tuple[str, str]]
    path: str = ""
    content_hash: str = ""
    skipped_lines: int = 0

    def __len__(self) -> int:
        return len(self.pairs)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_corpus(path) -> ParallelCorpus:
    """Read a tab-separated parallel corpus, one normalized pair per line.

    Lines without a tab, or whose either side normalizes to nothing, are
    skipped and counted rather than failing the load.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    pairs = []
    skipped = 0
    for line in lines:
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            skipped += 1
            continue
        src, tgt = normalize(cols[0]), normalize(cols[1])
        if not src or not tgt:
            skipped += 1
            continue
        pairs.append((src, tgt))
    return ParallelCorpus(
        pairs=pairs,
        path=str(path),
        content_hash=file_sha256(path),
        skipped_lines=skipped,
    )


class Vocab:
    """Token/id mapping with pad, bos, eos, unk pinned to ids 0-3."""

    def __init__(self, tokens: list[str], min_freq: int = 1):
        self.min_freq = int(min_freq)
        self.id_to_token = list(SPECIAL_TOKENS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocab contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode_tokens(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode_ids(self, ids, strip_special: bool = True) -> list[str]:
        toks = [self.id_to_token[i] for i in ids]
        if strip_special:
            toks = [t for t in toks if t not in SPECIAL_TOKENS]
        return toks

    def _body(self) -> str:
        return "".join(f"{t}\t{i}\n" for i, t in enumerate(self.id_to_token))

    def save(self, path):
        body = self._body()
        digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#sha256:{digest}\tmin_freq:{self.min_freq}\n")
            fh.write(body)

    @classmethod
    def load(cls, path) -> "Vocab":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                header = fh.readline()
                body = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read vocab {path}: {exc}") from exc
        if not header.startswith("#sha256:"):
            raise DataError(f"vocab {path}: missing content-hash header")
        fields = header.rstrip("\n").split("\t")
        digest = fields[0][len("#sha256:"):]
        min_freq = int(fields[1].split(":")[1]) if len(fields) > 1 else 1
        if hashlib.sha256(body.encode("utf-8")).hexdigest() != digest:
            raise DataError(f"vocab {path}: content hash mismatch")
        tokens = []
        for lineno, line in enumerate(body.splitlines()):
            tok, idx = line.split("\t")
            if int(idx) != lineno:
                raise DataError(f"vocab {path}: ids are not dense at line {lineno}")
            tokens.append(tok)
        if tokens[:4] != list(SPECIAL_TOKENS):
            raise DataError(f"vocab {path}: special tokens missing or misordered")
        return cls(tokens[4:], min_freq=min_freq)


def build_vocab(corpus: ParallelCorpus, side: str, min_freq: int = 2) -> Vocab:
    """Frequency-thresholded word vocabulary for one side of the corpus.

    Order after the specials is (descending frequency, then lexicographic),
    so the result is deterministic for a given corpus.
    """
    if side not in ("source", "target"):
        raise ConfigError(f"build_vocab: side must be 'source' or 'target', got {side!r}")
    if not corpus.pairs:
        raise ConfigError("build_vocab: corpus is empty")
    col = 0 if side == "source" else 1
    counts: Counter = Counter()
    for pair in corpus.pairs:
        counts.update(normalize(pair[col]).split())
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    if not kept:
        raise ConfigError(
            f"build_vocab: no {side} token reaches min_freq={min_freq}"
        )
    return Vocab(kept, min_freq=min_freq)


@dataclass
class EncodedPair:
    """Id sequences for one pair: src ends in eos; tgt_out is tgt_in shifted left."""

    src_ids: list[int]
    tgt_in_ids: list[int]
    tgt_out_ids: list[int]


def encode_pair(pair: tuple[str, str], src_vocab: Vocab, tgt_vocab: Vocab,
                max_len: int = DEFAULT_MAX_LEN) -> EncodedPair:
    """Encode one pair; unseen words map to unk, overlong sides are truncated
    so every emitted sequence stays within ``max_len`` ids."""
    src_tokens = normalize(pair[0]).split()[: max_len - 1]
    tgt_tokens = normalize(pair[1]).split()[: max_len - 1]
    src_ids = src_vocab.encode_tokens(src_tokens) + [EOS_ID]
    tgt_body = tgt_vocab.encode_tokens(tgt_tokens)
    return EncodedPair(
        src_ids=src_ids,
        tgt_in_ids=[BOS_ID] + tgt_body,
        tgt_out_ids=tgt_body + [EOS_ID],
    )


def split_indices(n: int, ratio: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded shuffle of range(n), then a prefix/suffix split at round(n*ratio)."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    perm = Rng(seed).split(0).permutation(n)
    cut = int(round(n * ratio))
    return [int(i) for i in perm[:cut]], [int(i) for i in perm[cut:]]


def split_corpus(corpus: ParallelCorpus, ratio: float = 0.7,
                 seed: int = 0) -> tuple[ParallelCorpus, ParallelCorpus]:
    """Disjoint, exhaustive train/validation partition of the corpus."""
    train_idx, val_idx = split_indices(len(corpus.pairs), ratio, seed)
    train = ParallelCorpus([corpus.pairs[i] for i in train_idx],
                           path=corpus.path, content_hash=corpus.content_hash)
    val = ParallelCorpus([corpus.pairs[i] for i in val_idx],
                         path=corpus.path, content_hash=corpus.content_hash)
    return train, val


@dataclass
class Batch:
    """Padded id arrays plus masks that are true exactly at pad positions."""

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_pad_mask: np.ndarray
    tgt_pad_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def n_target_tokens(self) -> int:
        return int((self.tgt_out != PAD_ID).sum())


def _pad_block(seqs: list[list[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    block = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        block[i, : len(s)] = s
    return block


def make_batches(pairs: list[EncodedPair], batch_size: int,
                 rng: Rng | None = None, shuffle: bool = False) -> list[Batch]:
    """Chunk encoded pairs into batches, each padded to its own max lengths.

    Every pair appears exactly once; ``shuffle`` consumes one permutation
    from ``rng`` so epochs are reproducible from the stream state.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(len(pairs)))
    if shuffle:
        if rng is None:
            raise ConfigError("make_batches: shuffle=True requires an rng")
        order = [int(i) for i in rng.permutation(len(pairs))]
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start: start + batch_size]]
        src = _pad_block([p.src_ids for p in chunk])
        tgt_in = _pad_block([p.tgt_in_ids for p in chunk])
        tgt_out = _pad_block([p.tgt_out_ids for p in chunk])
        batches.append(Batch(
            src=src,
            tgt_in=tgt_in,
            tgt_out=tgt_out,
            src_pad_mask=src == PAD_ID,
            tgt_pad_mask=tgt_in == PAD_ID,
        ))
    return batches
