"""Frozen toy causal LM over bytes, plus tokenization, chunking and corpora."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DTYPE, LN_EPS, layer_norm_forward, log_softmax
from .rng import SplitMix64

VOCAB_SIZE = 256
CORPUS_MAGIC = b"BYTC"
CORPUS_VERSION = 1


# --- tokens ---------------------------------------------------------------

def tokenize(data: bytes) -> list[int]:
    return list(bytes(data))


def detokenize(tokens) -> bytes:
    return bytes(int(t) for t in tokens)


@dataclass
class TokenChunk:
    tokens: np.ndarray
    labels: np.ndarray
    sequence_id: int
    chunk_index: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tokens.shape != self.labels.shape:
            raise ValueError("tokens and labels must align")
        if self.tokens.size and (self.tokens.max() >= VOCAB_SIZE or self.tokens.min() < 0):
            raise ValueError("token id out of range")


def chunk_stream(tokens, seq_len: int, chunk_size: int) -> list[TokenChunk]:
    """Cut a token stream into sequences of ``seq_len`` and those into chunks.

    Each sequence occupies its own window of ``seq_len + 1`` tokens: the first
    ``seq_len`` are inputs, the last one only serves as the final label.
    Windows do not overlap and a short tail is dropped.
    """
    if chunk_size <= 0 or seq_len <= 0:
        raise ValueError("seq_len and chunk_size must be positive")
    if seq_len % chunk_size:
        raise ValueError(f"chunk_size {chunk_size} does not divide seq_len {seq_len}")
    toks = np.asarray(tokens, dtype=np.int64)
    stride = seq_len + 1
    chunks = []
    per_seq = seq_len // chunk_size
    for s in range(toks.size // stride):
        base = s * stride
        for c in range(per_seq):
            lo = base + c * chunk_size
            chunks.append(TokenChunk(toks[lo : lo + chunk_size], toks[lo + 1 : lo + chunk_size + 1], s, c))
    return chunks


def group_sequences(chunks: list[TokenChunk]) -> list[list[TokenChunk]]:
    """Group chunks by sequence id, keeping order."""
    groups: dict[int, list[TokenChunk]] = {}
    for ch in chunks:
        groups.setdefault(ch.sequence_id, []).append(ch)
    return [sorted(g, key=lambda c: c.chunk_index) for _, g in sorted(groups.items())]


def shuffle_within_sequence(tokens, seed: int) -> np.ndarray:
    """Uniform random permutation of one sequence's tokens."""
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size == 0:
        raise ValueError("cannot shuffle an empty sequence")
    perm = SplitMix64(seed).permutation(toks.size)
    return toks[perm]


def shuffle_stream(tokens, seq_len: int, seed: int) -> np.ndarray:
    """Shuffle every sequence window (``seq_len + 1`` tokens) independently.

    Window ``s`` uses ``seed + s``; labels come from the permuted stream
    once it is re-chunked. A short tail is left untouched.
    """
    toks = np.asarray(tokens, dtype=np.int64).copy()
    stride = seq_len + 1
    for s in range(toks.size // stride):
        lo = s * stride
        toks[lo : lo + stride] = shuffle_within_sequence(toks[lo : lo + stride], seed + s)
    return toks


def synth_corpus(seed: int, n_sequences: int, seq_len: int, pattern: str = "mixed") -> np.ndarray:
    """Synthetic byte stream of ``n_sequences * (seq_len + 1)`` tokens.

    ``mixed`` concatenates segments of three kinds so chunks differ in how much
    in-context structure they carry: a short random motif repeated with a
    few substitutions, a run of one byte, or uniform noise over a small
    alphabet. ``motif`` uses only motif segments, ``constant`` repeats ``a``.
    """
    if n_sequences < 1:
        raise ValueError("need at least one sequence")
    total = n_sequences * (seq_len + 1)
    if pattern == "constant":
        return np.full(total, ord("a"), dtype=np.int64)
    if pattern not in ("mixed", "motif"):
        raise ValueError(f"unknown pattern {pattern!r}")
    g = SplitMix64(seed)
    alphabet = list(range(ord("a"), ord("z") + 1)) + list(range(ord("A"), ord("Z") + 1))
    out: list[int] = []
    while len(out) < total:
        length = 16 + g.below(113)
        kind = "motif" if pattern == "motif" else ("motif", "motif", "run", "noise")[g.below(4)]
        if kind == "motif":
            motif = [alphabet[g.below(len(alphabet))] for _ in range(3 + g.below(10))]
            noise = 0.02 * g.below(6)
            for i in range(length):
                tok = motif[i % len(motif)]
                if g.next_float() < noise:
                    tok = alphabet[g.below(len(alphabet))]
                out.append(tok)
        elif kind == "run":
            out.extend([alphabet[g.below(len(alphabet))]] * length)
        else:
            out.extend(alphabet[g.below(len(alphabet))] for _ in range(length))
    return np.asarray(out[:total], dtype=np.int64)


# --- corpus files -----------------------------------------------------------

def write_corpus_bin(path, tokens) -> None:
    """``BYTC`` magic, u32 version, u64 token count, then one byte per token."""
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size and (toks.min() < 0 or toks.max() >= VOCAB_SIZE):
        raise ValueError("byte corpus tokens must lie in [0, 255]")
    payload = CORPUS_MAGIC + struct.pack("<IQ", CORPUS_VERSION, toks.size) + toks.astype(np.uint8).tobytes()
    Path(path).write_bytes(payload)


def read_corpus_bin(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(CORPUS_MAGIC):
        raise ValueError(f"{path}: missing corpus magic")
    if len(data) < len(CORPUS_MAGIC) + 12:
        raise ValueError(f"{path}: truncated corpus header")
    version, count = struct.unpack_from("<IQ", data, len(CORPUS_MAGIC))
    if version != CORPUS_VERSION:
        raise ValueError(f"{path}: unsupported corpus version {version}")
    start = len(CORPUS_MAGIC) + 12
    body = data[start:]
    if len(body) != count:
        raise ValueError(f"{path}: header says {count} tokens, file holds {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def load_corpus(path) -> np.ndarray:
    """A ``.bin`` token file, a single text file, or a directory of text files (sorted)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.is_file() and p.suffix != ".bin")
        data = b"".join(p.read_text(encoding="utf-8").encode("utf-8") for p in files)
        return np.asarray(tokenize(data), dtype=np.int64)
    if path.suffix == ".bin":
        return read_corpus_bin(path)
    return np.asarray(tokenize(path.read_text(encoding="utf-8").encode("utf-8")), dtype=np.int64)


# --- model ------------------------------------------------------------------

@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = VOCAB_SIZE
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 1024
    mlp_ratio: int = 4
    embed_std: float = 1.0
    pos_std: float = 0.1
    init_std: float = 0.02
    logit_scale: float = 0.0625
    seed: int = 42


@dataclass(frozen=True)
class BackboneWeights:
    config: BackboneConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    blocks: tuple = field(repr=False)
    lnf_gamma: np.ndarray = field(repr=False)
    lnf_beta: np.ndarray = field(repr=False)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def arrays(self):
        yield self.tok_emb
        yield self.pos_emb
        for blk in self.blocks:
            for key in sorted(blk):
                yield blk[key]
        yield self.lnf_gamma
        yield self.lnf_beta

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in self.arrays():
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def init_backbone(config: BackboneConfig = BackboneConfig()) -> BackboneWeights:
    """Seeded GPT-style init. Arrays are marked read-only."""
    rng = np.random.default_rng(config.seed)
    D, std = config.model_dim, config.init_std
    hidden = config.mlp_ratio * D
    blocks = []
    for _ in range(config.n_layers):
        blocks.append({
            "ln1_g": np.ones(D), "ln1_b": np.zeros(D),
            "w_qkv": rng.normal(0.0, std, (D, 3 * D)),
            "w_o": rng.normal(0.0, std, (D, D)),
            "ln2_g": np.ones(D), "ln2_b": np.zeros(D),
            "w_fc": rng.normal(0.0, std, (D, hidden)),
            "w_proj": rng.normal(0.0, std, (hidden, D)),
        })
    weights = BackboneWeights(
        config=config,
        tok_emb=rng.normal(0.0, config.embed_std, (config.vocab_size, D)),
        pos_emb=rng.normal(0.0, config.pos_std, (config.max_len, D)),
        blocks=tuple(blocks),
        lnf_gamma=np.ones(D),
        lnf_beta=np.zeros(D),
    )
    for arr in weights.arrays():
        arr.setflags(write=False)
    return weights


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _attention(x, blk, n_heads):
    T, D = x.shape
    d = D // n_heads
    qkv = x @ blk["w_qkv"]
    q, k, v = (qkv[:, i * D : (i + 1) * D].reshape(T, n_heads, d).transpose(1, 0, 2) for i in range(3))
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(d)
    scores = np.where(np.tril(np.ones((T, T), dtype=bool)), scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ v).transpose(1, 0, 2).reshape(T, D)
    return out @ blk["w_o"]


def backbone_hidden(tokens, weights: BackboneWeights) -> np.ndarray:
    """Residual stream after the last block for a whole token sequence, (T, D)."""
    toks = np.asarray(tokens, dtype=np.int64)
    cfg = weights.config
    if toks.size and (toks.max() >= cfg.vocab_size or toks.min() < 0):
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")
    if toks.size > cfg.max_len:
        raise ValueError(f"sequence of {toks.size} exceeds positional table {cfg.max_len}")
    h = weights.tok_emb[toks] + weights.pos_emb[: toks.size]
    for blk in weights.blocks:
        a, _ = layer_norm_forward(h, blk["ln1_g"], blk["ln1_b"], LN_EPS)
        h = h + _attention(a, blk, cfg.n_heads)
        m, _ = layer_norm_forward(h, blk["ln2_g"], blk["ln2_b"], LN_EPS)
        h = h + _gelu(m @ blk["w_fc"]) @ blk["w_proj"]
    return h


def backbone_forward(chunks: list[TokenChunk], weights: BackboneWeights) -> list[np.ndarray]:
    """Hidden states per chunk, with attention over the whole sequence so far."""
    if not chunks:
        return []
    tokens = np.concatenate([c.tokens for c in chunks])
    h = backbone_hidden(tokens, weights)
    out, start = [], 0
    for c in chunks:
        out.append(h[start : start + c.tokens.size])
        start += c.tokens.size
    return out


def logits_from_hidden(hidden, weights: BackboneWeights) -> np.ndarray:
    x, _ = layer_norm_forward(hidden, weights.lnf_gamma, weights.lnf_beta, LN_EPS)
    return weights.config.logit_scale * (x @ weights.tok_emb.T)


def token_ce(logits, labels) -> np.ndarray:
    """Per-token ``-log softmax(logits)[label]`` in nats."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} do not align")
    lp = log_softmax(logits)
    return -lp[np.arange(labels.size), labels]


def ce_loss(hidden, ttt_output, labels, weights: BackboneWeights):
    """Mean CE of a chunk with the TTT branch added to the residual stream.

    Returns ``(mean, per_token)``.
    """
    h = np.asarray(hidden, dtype=DTYPE)
    if ttt_output is not None:
        h = h + ttt_output
    per_token = token_ce(logits_from_hidden(h, weights), labels)
    return float(per_token.mean()), per_token


def ttt_input(hidden) -> np.ndarray:
    """Normalized residual stream fed to the TTT branch (pre-norm residual block)."""
    d = hidden.shape[-1]
    x, _ = layer_norm_forward(hidden, np.ones(d), np.zeros(d), LN_EPS)
    return x
