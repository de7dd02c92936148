"""Encoder-decoder transformer parameterized by the ablation axes.

Post-norm residual blocks, ReLU feed-forward, fixed sinusoidal positions,
untied embeddings and output projection. The feed-forward width is pinned
to 4x the embedding dimension and encoder depth always equals decoder
depth, which is what makes the parameter-count laws in ``count_params``
hold exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .data import Batch, BOS_ID, EOS_ID, PAD_ID
from .errors import ConfigError, ContractError, CorruptionError

ATTN_MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    """The hyperparameter tuple that fully determines a model."""

    d_model: int
    n_heads: int
    n_layers: int
    dropout: float
    src_vocab_size: int
    tgt_vocab_size: int
    max_len: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.d_model < 2 or self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even and >= 2, got {self.d_model}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"n_heads must divide d_model ({self.d_model} % {self.n_heads} != 0)"
            )
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.src_vocab_size < 5 or self.tgt_vocab_size < 5:
            raise ConfigError("vocab sizes must cover the 4 specials plus content")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {self.max_len}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in (
            "d_model", "n_heads", "n_layers", "dropout",
            "src_vocab_size", "tgt_vocab_size", "max_len", "seed")})


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every named tensor's shape, in the fixed construction order."""
    d, ff = config.d_model, config.d_ff
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("emb.src", (config.src_vocab_size, d)),
        ("emb.tgt", (config.tgt_vocab_size, d)),
    ]

    def attn(prefix):
        for name in ("wq", "wk", "wv", "wo"):
            shapes.append((f"{prefix}.{name}", (d, d)))
        for name in ("bq", "bk", "bv", "bo"):
            shapes.append((f"{prefix}.{name}", (d,)))

    def ffn(prefix):
        shapes.append((f"{prefix}.w1", (d, ff)))
        shapes.append((f"{prefix}.b1", (ff,)))
        shapes.append((f"{prefix}.w2", (ff, d)))
        shapes.append((f"{prefix}.b2", (d,)))

    def norm(prefix):
        shapes.append((f"{prefix}.g", (d,)))
        shapes.append((f"{prefix}.b", (d,)))

    for i in range(config.n_layers):
        attn(f"enc.{i}.attn")
        ffn(f"enc.{i}.ff")
        norm(f"enc.{i}.ln1")
        norm(f"enc.{i}.ln2")
    for i in range(config.n_layers):
        attn(f"dec.{i}.self")
        attn(f"dec.{i}.cross")
        ffn(f"dec.{i}.ff")
        norm(f"dec.{i}.ln1")
        norm(f"dec.{i}.ln2")
        norm(f"dec.{i}.ln3")
    shapes.append(("out.w", (d, config.tgt_vocab_size)))
    shapes.append(("out.b", (config.tgt_vocab_size,)))
    return shapes


class ModelParams:
    """Named, ordered collection of weight tensors for one config."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors.keys())

    def named(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def n_elements(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {
            k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for k, t in self._tensors.items()
        })


def init_params(config: ModelConfig, dtype=np.float32) -> ModelParams:
    """Materialize weights: symmetric uniform with scale 1/sqrt(fan_in) for
    matrices, zeros for biases, ones for layer-norm gains. Deterministic
    under ``config.seed``."""
    rng = Rng(config.seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            fan_in = config.d_model if name.startswith("emb.") else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, shape).astype(dtype)
        elif leaf == "g":
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors)


def count_params(config: ModelConfig) -> int:
    """Exact parameter count, in closed form.

    Heads contribute nothing; each extra encoder+decoder layer pair adds
    28*d^2 + 32*d regardless of vocabulary.
    """
    d, ff, L = config.d_model, config.d_ff, config.n_layers
    emb = (config.src_vocab_size + config.tgt_vocab_size) * d
    out = d * config.tgt_vocab_size + config.tgt_vocab_size
    enc_layer = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 2 * 2 * d
    dec_layer = 8 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 3 * 2 * d
    return emb + out + L * (enc_layer + dec_layer)


def layer_pair_delta(d_model: int) -> int:
    """Parameters added by one extra encoder+decoder layer pair."""
    d = d_model
    return 28 * d * d + 32 * d


def sinusoidal_pe(max_len: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Interleaved sin/cos position table; row 0 is [0, 1, 0, 1, ...]."""
    if d_model % 2 != 0:
        raise ConfigError(f"sinusoidal_pe: d_model must be even, got {d_model}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, idx / d_model)
    pe = np.empty((max_len, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


def _additive_mask(pad_rows: np.ndarray, n_heads: int, n_query: int,
                   causal: bool, dtype) -> np.ndarray:
    """Build an additive attention mask tiled per head.

    ``pad_rows`` is boolean [B, T_k], true at pad keys. Returns
    [B*n_heads, n_query, T_k] with ATTN_MASK_FILL at disallowed slots.
    """
    b, t_k = pad_rows.shape
    mask = np.where(pad_rows[:, None, :], dtype.type(ATTN_MASK_FILL), dtype.type(0.0))
    mask = np.broadcast_to(mask, (b, n_query, t_k)).copy()
    if causal:
        tri = np.triu(np.ones((n_query, t_k), dtype=bool), k=1)
        mask[:, tri] = dtype.type(ATTN_MASK_FILL)
    return np.repeat(mask, n_heads, axis=0)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    x = ad.reshape(x, (b, t, n_heads, d // n_heads))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (b * n_heads, t, d // n_heads))


def _merge_heads(x: Tensor, n_heads: int) -> Tensor:
    bh, t, dh = x.shape
    x = ad.reshape(x, (bh // n_heads, n_heads, t, dh))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (bh // n_heads, t, n_heads * dh))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _attention(params: ModelParams, prefix: str, q_in: Tensor, kv_in: Tensor,
               add_mask: np.ndarray, n_heads: int) -> Tensor:
    q = _split_heads(_linear(q_in, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), n_heads)
    k = _split_heads(_linear(kv_in, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), n_heads)
    v = _split_heads(_linear(kv_in, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), n_heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(q.shape[-1]))
    scores = ad.add(scores, Tensor(add_mask))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    return _linear(_merge_heads(ctx, n_heads), params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _feed_forward(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _residual(params: ModelParams, ln_prefix: str, x: Tensor, sub: Tensor,
              p: float, training: bool, rng: Rng | None) -> Tensor:
    summed = ad.add(x, ad.dropout(sub, p, training, rng))
    return ad.layer_norm(summed, params[f"{ln_prefix}.g"], params[f"{ln_prefix}.b"])


def _embed(table: Tensor, ids: np.ndarray, pe: np.ndarray, d_model: int,
           p: float, training: bool, rng: Rng | None) -> Tensor:
    x = ad.scale(ad.embedding(table, ids), math.sqrt(d_model))
    x = ad.add(x, Tensor(pe[: ids.shape[1]][None, :, :]))
    return ad.dropout(x, p, training, rng)


def forward(params: ModelParams, batch: Batch, training: bool = False,
            rng: Rng | None = None) -> Tensor:
    """Teacher-forced logits [B, T, tgt_vocab] for one batch.

    Dropout (training mode only) is applied after the embedding sum,
    after each attention block, and after each feed-forward block.
    """
    cfg = params.config
    b, s = batch.src.shape
    t = batch.tgt_in.shape[1]
    if s > cfg.max_len or t > cfg.max_len:
        raise ContractError(
            f"forward: sequence lengths src={s}, tgt={t} exceed max_len={cfg.max_len}"
        )
    if training and cfg.dropout > 0.0 and rng is None:
        raise ContractError("forward: training with dropout requires an rng")
    dtype = params["emb.src"].dtype
    pe = sinusoidal_pe(max(s, t), cfg.d_model, dtype=dtype)
    p = cfg.dropout

    src_mask = _additive_mask(batch.src_pad_mask, cfg.n_heads, s, causal=False, dtype=dtype)
    cross_mask = _additive_mask(batch.src_pad_mask, cfg.n_heads, t, causal=False, dtype=dtype)
    tgt_mask = _additive_mask(batch.tgt_pad_mask, cfg.n_heads, t, causal=True, dtype=dtype)

    x = _embed(params["emb.src"], batch.src, pe, cfg.d_model, p, training, rng)
    for i in range(cfg.n_layers):
        x = _residual(params, f"enc.{i}.ln1", x,
                      _attention(params, f"enc.{i}.attn", x, x, src_mask, cfg.n_heads),
                      p, training, rng)
        x = _residual(params, f"enc.{i}.ln2", x,
                      _feed_forward(params, f"enc.{i}.ff", x),
                      p, training, rng)
    memory = x

    y = _embed(params["emb.tgt"], batch.tgt_in, pe, cfg.d_model, p, training, rng)
    for i in range(cfg.n_layers):
        y = _residual(params, f"dec.{i}.ln1", y,
                      _attention(params, f"dec.{i}.self", y, y, tgt_mask, cfg.n_heads),
                      p, training, rng)
        y = _residual(params, f"dec.{i}.ln2", y,
                      _attention(params, f"dec.{i}.cross", y, memory, cross_mask, cfg.n_heads),
                      p, training, rng)
        y = _residual(params, f"dec.{i}.ln3", y,
                      _feed_forward(params, f"dec.{i}.ff", y),
                      p, training, rng)
    return _linear(y, params["out.w"], params["out.b"])


def greedy_decode(params: ModelParams, src_ids, max_out_len: int = 64) -> list[int]:
    """Autoregressive argmax decoding from bos until eos or the length cap.

    Returns generated content ids (bos and the terminating eos excluded).
    """
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    out: list[int] = []
    for _ in range(max_out_len):
        tgt_in = np.array([[BOS_ID] + out], dtype=np.int64)
        batch = Batch(
            src=src,
            tgt_in=tgt_in,
            tgt_out=np.zeros_like(tgt_in),
            src_pad_mask=src == PAD_ID,
            tgt_pad_mask=tgt_in == PAD_ID,
        )
        logits = forward(params, batch, training=False)
        nxt = int(np.argmax(logits.data[0, -1]))
        if nxt == EOS_ID:
            break
        out.append(nxt)
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: a directory holding the config as key=value text, each
# named tensor as a little-endian raw array under tensors/, a manifest of
# name -> shape/dtype, and a content hash over the lot. Round-trips are
# bit-exact.
# ---------------------------------------------------------------------------

_CONFIG_FILE = "config.txt"
_MANIFEST_FILE = "manifest.json"
_STATE_FILE = "state.json"
_CHECKSUM_FILE = "checksum.txt"
_TENSOR_DIR = "tensors"

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def _config_text(config: ModelConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(config.to_dict().items()))


def _parse_config_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        k, v = line.split("=", 1)
        kv[k] = v
    return ModelConfig(
        d_model=int(kv["d_model"]),
        n_heads=int(kv["n_heads"]),
        n_layers=int(kv["n_layers"]),
        dropout=float(kv["dropout"]),
        src_vocab_size=int(kv["src_vocab_size"]),
        tgt_vocab_size=int(kv["tgt_vocab_size"]),
        max_len=int(kv["max_len"]),
        seed=int(kv["seed"]),
    )


def save_checkpoint(path, config: ModelConfig, arrays: dict[str, np.ndarray],
                    extra_state: dict | None = None):
    """Atomically write a checkpoint directory (write-new, fsync, rename)."""
    path = str(path)
    parent = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    try:
        os.makedirs(os.path.join(tmp, _TENSOR_DIR))
        digest = hashlib.sha256()

        def write(rel, payload: bytes):
            digest.update(rel.encode("utf-8"))
            digest.update(payload)
            full = os.path.join(tmp, rel)
            with open(full, "wb") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())

        write(_CONFIG_FILE, _config_text(config).encode("utf-8"))
        manifest = {"tensors": []}
        for name, arr in arrays.items():
            dtype = str(arr.dtype)
            if dtype not in _DTYPE_CODES:
                raise ContractError(f"checkpoint: unsupported dtype {dtype} for {name}")
            manifest["tensors"].append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        write(_MANIFEST_FILE, json.dumps(manifest, indent=1).encode("utf-8"))
        for name, arr in arrays.items():
            code = _DTYPE_CODES[str(arr.dtype)]
            write(os.path.join(_TENSOR_DIR, f"{name}.bin"),
                  np.ascontiguousarray(arr).astype(code).tobytes())
        if extra_state is not None:
            write(_STATE_FILE, json.dumps(extra_state, indent=1, sort_keys=True).encode("utf-8"))
        with open(os.path.join(tmp, _CHECKSUM_FILE), "w") as fh:
            fh.write(digest.hexdigest() + "\n")
            fh.flush()
            os.fsync(fh.fileno())

        if os.path.exists(path):
            graveyard = tempfile.mkdtemp(prefix=".ckpt-old-", dir=parent)
            os.rename(path, os.path.join(graveyard, "old"))
            os.rename(tmp, path)
            shutil.rmtree(graveyard, ignore_errors=True)
        else:
            os.rename(tmp, path)
        dirfd = os.open(parent, os.O_RDONLY)
        try:
            os.fsync(dirfd)
        finally:
            os.close(dirfd)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict | None]:
    """Read and verify a checkpoint directory; any mismatch is corruption."""
    path = str(path)

    def read(rel) -> bytes:
        try:
            with open(os.path.join(path, rel), "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise CorruptionError(f"checkpoint {path}: missing {rel}: {exc}") from exc

    config_raw = read(_CONFIG_FILE)
    manifest_raw = read(_MANIFEST_FILE)
    digest = hashlib.sha256()
    digest.update(_CONFIG_FILE.encode("utf-8"))
    digest.update(config_raw)
    digest.update(_MANIFEST_FILE.encode("utf-8"))
    digest.update(manifest_raw)
    try:
        manifest = json.loads(manifest_raw)
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"checkpoint {path}: manifest is not valid JSON") from exc

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        rel = os.path.join(_TENSOR_DIR, f"{entry['name']}.bin")
        payload = read(rel)
        digest.update(rel.encode("utf-8"))
        digest.update(payload)
        code = _DTYPE_CODES[entry["dtype"]]
        expected = np.dtype(code).itemsize * int(np.prod(entry["shape"], dtype=np.int64))
        if len(payload) != expected:
            raise CorruptionError(
                f"checkpoint {path}: tensor {entry['name']} is truncated "
                f"({len(payload)} bytes, expected {expected})"
            )
        arr = np.frombuffer(payload, dtype=code).astype(entry["dtype"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr
    extra = None
    if os.path.exists(os.path.join(path, _STATE_FILE)):
        state_raw = read(_STATE_FILE)
        digest.update(_STATE_FILE.encode("utf-8"))
        digest.update(state_raw)
        extra = json.loads(state_raw)
    recorded = read(_CHECKSUM_FILE).decode("utf-8").strip()
    if recorded != digest.hexdigest():
        raise CorruptionError(f"checkpoint {path}: content hash mismatch")
    return _parse_config_text(config_raw.decode("utf-8")), arrays, extra


def params_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild ModelParams from checkpoint arrays, validating the shape map."""
    tensors = {}
    for name, shape in _param_shapes(config):
        if name not in arrays:
            raise CorruptionError(f"checkpoint missing tensor {name}")
        if tuple(arrays[name].shape) != shape:
            raise CorruptionError(
                f"checkpoint tensor {name} has shape {arrays[name].shape}, expected {shape}"
            )
        tensors[name] = Tensor(arrays[name].copy(), requires_grad=True)
    return ModelParams(config, tensors)
