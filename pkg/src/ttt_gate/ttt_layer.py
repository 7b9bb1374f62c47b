"""TTT-Linear fast-weight layer.

Each head owns a fast weight ``W`` (head_dim x head_dim) and bias ``b``. The
self-supervised task reconstructs ``V - K`` from ``K`` through a LayerNorm:

    loss_t = || LN(K_t W + b) - (V_t - K_t) ||^2

and the chunk loss of a head is the mean of ``loss_t`` over the chunk. The
test view ``Q`` reads the (partially updated) fast weight and the key is
added back as a residual, so the layer emits ``K_t + LN(Q_t W_t + b_t)``.

Inside a chunk, every token's gradient is taken at the chunk-start weights
(mini-batch TTT). That is what makes the sequential recurrence and the
masked-matmul dual form produce identical numbers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .numerics import (
    DTYPE,
    LN_EPS,
    ShapeError,
    TriangularMask,
    causal_conv1d,
    layer_norm_backward,
    layer_norm_forward,
    sigmoid,
    tril_weighted_sum,
)

PARAM_MAGIC = b"TTTLPARM"
PARAM_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A NaN/Inf appeared while processing a chunk."""

    def __init__(self, message: str, token_index: int | None = None):
        super().__init__(message if token_index is None else f"{message} (token {token_index})")
        self.token_index = token_index


@dataclass(frozen=True)
class TTTConfig:
    model_dim: int = 64
    n_heads: int = 2
    head_dim: int = 32
    conv_width: int = 4
    base_inner_lr: float = 1.0
    recon_weight_beta: float = 0.1
    chunk_size: int = 64
    mask_diagonal: int = 0
    # "mean": chunk mean of per-token losses; "last": last position only.
    signal_position: str = "mean"

    def __post_init__(self):
        for name in ("model_dim", "n_heads", "head_dim", "conv_width", "chunk_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_dim != self.n_heads * self.head_dim:
            raise ValueError("model_dim must equal n_heads * head_dim")
        if not self.base_inner_lr > 0:
            raise ValueError("base_inner_lr must be positive")
        if self.recon_weight_beta < 0:
            raise ValueError("recon_weight_beta must be non-negative")
        if self.mask_diagonal not in (0, -1):
            raise ValueError("mask_diagonal must be 0 or -1")
        if self.signal_position not in ("mean", "last"):
            raise ValueError("signal_position must be 'mean' or 'last'")


@dataclass(frozen=True)
class ProjectionParams:
    wq_base: np.ndarray  # (D, D) shared base of the Q and K views
    conv_q: np.ndarray  # (conv_width, D)
    conv_k: np.ndarray  # (conv_width, D)
    wv: np.ndarray  # (D, D)
    lr_gate_weight: np.ndarray  # (D,)
    lr_gate_bias: float
    ln_gamma: np.ndarray  # (head_dim,)
    ln_beta: np.ndarray  # (head_dim,)
    w_out: np.ndarray  # (D, D)
    w0: np.ndarray  # (H, head_dim, head_dim)
    b0: np.ndarray  # (H, head_dim)

    def validate(self, config: TTTConfig) -> None:
        D, H, d, cw = config.model_dim, config.n_heads, config.head_dim, config.conv_width
        expected = {
            "wq_base": (D, D),
            "conv_q": (cw, D),
            "conv_k": (cw, D),
            "wv": (D, D),
            "lr_gate_weight": (D,),
            "ln_gamma": (d,),
            "ln_beta": (d,),
            "w_out": (D, D),
            "w0": (H, d, d),
            "b0": (H, d),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if not np.isfinite(self.lr_gate_bias):
            raise ValueError("lr_gate_bias is not finite")


@dataclass
class FastWeightState:
    W: np.ndarray  # (H, d, d)
    b: np.ndarray  # (H, d)
    chunks_seen: int = 0

    @classmethod
    def initial(cls, params: ProjectionParams) -> "FastWeightState":
        return cls(W=params.w0.copy(), b=params.b0.copy(), chunks_seen=0)

    def copy(self) -> "FastWeightState":
        return FastWeightState(W=self.W.copy(), b=self.b.copy(), chunks_seen=self.chunks_seen)


@dataclass
class ChunkViews:
    """Per-head views of one chunk, each (H, T, head_dim), plus per-token eta (T,)."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    eta: np.ndarray


@dataclass
class ChunkForwardResult:
    outputs: np.ndarray  # (T, D), after w_out
    pre_projection: np.ndarray  # (T, D), K + LN(z) before w_out
    recon_loss_scalar: float
    per_token_recon: np.ndarray  # (T,)
    eta: np.ndarray  # (T,)


INIT_SCHEMES = ("associative", "independent")


def init_params(config: TTTConfig, seed: int = 0, scheme: str = "associative") -> ProjectionParams:
    """Deterministic parameters for running without outer-loop training.

    Projections are random orthogonal matrices from a seeded generator, the
    lr gate is zero (eta = base_inner_lr / 2) and the fast weight starts at
    zero. The query convolution is a unit tap on the current position.

    ``associative``: the key convolution reads the previous position and
    ``wv`` starts equal to ``wq_base`` with ``w_out = wq_base.T``, so the
    fast weight stores "previous token -> current token" pairs and the
    query recalls the successor of the current token in embedding space.

    ``independent``: ``wq_base``, ``wv`` and ``w_out`` are independent and
    both convolutions are identity taps (Q equals K).
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    D, H, d, cw = config.model_dim, config.n_heads, config.head_dim, config.conv_width

    def orthogonal() -> np.ndarray:
        q, r = np.linalg.qr(rng.standard_normal((D, D)))
        return q * np.sign(np.diag(r))

    wq_base = orthogonal()
    conv_q = np.zeros((cw, D))
    conv_q[0] = 1.0
    conv_k = np.zeros((cw, D))
    if scheme == "associative":
        if cw < 2:
            raise ValueError("the associative scheme needs conv_width >= 2")
        conv_k[1] = 1.0
        wv = wq_base.copy()
        w_out = wq_base.T.copy()
    else:
        conv_k[0] = 1.0
        wv = orthogonal()
        w_out = orthogonal()
    return ProjectionParams(
        wq_base=wq_base,
        conv_q=conv_q,
        conv_k=conv_k,
        wv=wv,
        lr_gate_weight=np.zeros(D),
        lr_gate_bias=0.0,
        ln_gamma=np.ones(d),
        ln_beta=np.zeros(d),
        w_out=w_out,
        w0=np.zeros((H, d, d)),
        b0=np.zeros((H, d)),
    )


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    T, D = x.shape
    if D % n_heads:
        raise ShapeError(f"model dim {D} not divisible by {n_heads} heads")
    return x.reshape(T, n_heads, D // n_heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    H, T, d = x.shape
    return x.transpose(1, 0, 2).reshape(T, H * d)


def project_views(hidden, params: ProjectionParams, config: TTTConfig):
    """Return ``(Q, K, V, eta)`` with Q/K/V of shape (T, model_dim)."""
    hidden = np.asarray(hidden, dtype=DTYPE)
    if hidden.ndim != 2 or hidden.shape[1] != config.model_dim or hidden.shape[0] < 1:
        raise ShapeError(f"hidden must be (T>=1, {config.model_dim}), got {hidden.shape}")
    base = hidden @ params.wq_base
    Q = causal_conv1d(base, params.conv_q)
    K = causal_conv1d(base, params.conv_k)
    V = hidden @ params.wv
    eta = config.base_inner_lr * sigmoid(hidden @ params.lr_gate_weight + params.lr_gate_bias)
    return Q, K, V, eta


def chunk_views(hidden, params: ProjectionParams, config: TTTConfig) -> ChunkViews:
    Q, K, V, eta = project_views(hidden, params, config)
    H = config.n_heads
    return ChunkViews(Q=split_heads(Q, H), K=split_heads(K, H), V=split_heads(V, H), eta=eta)


def _check_views(W, b, K_h, V_h, Q_h=None):
    if K_h.ndim != 3 or K_h.shape != V_h.shape:
        raise ShapeError(f"K and V must share shape (H, T, d); got {K_h.shape} and {V_h.shape}")
    H, T, d = K_h.shape
    if W.shape != (H, d, d) or b.shape != (H, d):
        raise ShapeError(f"fast weights {W.shape}/{b.shape} do not fit views {K_h.shape}")
    if Q_h is not None and Q_h.shape != K_h.shape:
        raise ShapeError(f"Q shape {Q_h.shape} != K shape {K_h.shape}")


def _recon_terms(W, b, K_h, V_h, ln_gamma, ln_beta):
    """Per-head, per-token residuals of the reconstruction task plus the LN cache."""
    z = K_h @ W + b[:, None, :]
    y, cache = layer_norm_forward(z, ln_gamma, ln_beta, LN_EPS)
    resid = y - (V_h - K_h)
    return resid, cache


def recon_loss(W, b, K_h, V_h, ln_gamma, ln_beta):
    """Return ``(per_token, mean)``; per_token (T,) is averaged over heads."""
    W, b, K_h, V_h = (np.asarray(a, dtype=DTYPE) for a in (W, b, K_h, V_h))
    _check_views(W, b, K_h, V_h)
    resid, _ = _recon_terms(W, b, K_h, V_h, ln_gamma, ln_beta)
    per_head_token = (resid * resid).sum(axis=-1)  # (H, T)
    per_token = per_head_token.mean(axis=0)
    return per_token, float(per_token.mean())


def token_gradients(W, b, K_h, V_h, ln_gamma, ln_beta) -> np.ndarray:
    """Gradient of each head's chunk-mean loss w.r.t. every ``z_i``; shape (H, T, d).

    Row ``i`` only involves token ``i``; summing ``k_i^T g_i`` over tokens
    gives the weight gradient.
    """
    resid, cache = _recon_terms(W, b, K_h, V_h, ln_gamma, ln_beta)
    T = K_h.shape[1]
    return layer_norm_backward(2.0 * resid, cache) / T


def inner_gradient(W, b, K_h, V_h, ln_gamma, ln_beta):
    """Analytic ``(dW, db)`` of each head's mean reconstruction loss."""
    W, b, K_h, V_h = (np.asarray(a, dtype=DTYPE) for a in (W, b, K_h, V_h))
    _check_views(W, b, K_h, V_h)
    G = token_gradients(W, b, K_h, V_h, ln_gamma, ln_beta)
    dW = K_h.transpose(0, 2, 1) @ G
    db = G.sum(axis=1)
    return dW, db


def _finish(out_heads, params, config, W0, b0, K_h, V_h, eta):
    per_token, _ = recon_loss(W0, b0, K_h, V_h, params.ln_gamma, params.ln_beta)
    pre = merge_heads(out_heads)
    outputs = pre @ params.w_out
    bad = ~np.all(np.isfinite(outputs), axis=1)
    if bad.any():
        raise NonFiniteError("non-finite TTT output", int(np.argmax(bad)))
    signal = float(per_token[-1]) if config.signal_position == "last" else float(per_token.mean())
    return ChunkForwardResult(
        outputs=outputs,
        pre_projection=pre,
        recon_loss_scalar=signal,
        per_token_recon=per_token,
        eta=np.asarray(eta, dtype=DTYPE).copy(),
    )


def primal_forward_update(state: FastWeightState, views: ChunkViews, params: ProjectionParams,
                          config: TTTConfig):
    """Sequential reference: walk the chunk token by token.

    Token ``t`` reads the weights after the steps of tokens ``< t`` (mask
    ``k = -1``) or ``<= t`` (``k = 0``). Returns ``(result, new_state)``.
    """
    Q_h, K_h, V_h, eta = views.Q, views.K, views.V, np.asarray(views.eta, dtype=DTYPE)
    _check_views(state.W, state.b, K_h, V_h, Q_h)
    H, T, d = K_h.shape
    if eta.shape != (T,):
        raise ShapeError(f"eta shape {eta.shape} != ({T},)")
    G = token_gradients(state.W, state.b, K_h, V_h, params.ln_gamma, params.ln_beta)
    W = state.W.copy()
    b = state.b.copy()
    out = np.empty_like(Q_h)
    for t in range(T):
        step_W = eta[t] * (K_h[:, t, :, None] * G[:, t, None, :])
        step_b = eta[t] * G[:, t, :]
        if config.mask_diagonal == 0:
            W -= step_W
            b -= step_b
        z = np.einsum("hd,hde->he", Q_h[:, t], W) + b
        y, _ = layer_norm_forward(z, params.ln_gamma, params.ln_beta, LN_EPS)
        out[:, t] = K_h[:, t] + y
        if config.mask_diagonal == -1:
            W -= step_W
            b -= step_b
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(out[:, t]))):
            raise NonFiniteError("non-finite value in primal recurrence", t)
    result = _finish(out, params, config, state.W, state.b, K_h, V_h, eta)
    return result, FastWeightState(W=W, b=b, chunks_seen=state.chunks_seen + 1)


def dual_forward(state: FastWeightState, views: ChunkViews, params: ProjectionParams,
                 config: TTTConfig, mask: TriangularMask | None = None):
    """Parallel form of :func:`primal_forward_update` using masked matmuls.

    ``z_t = q_t W0 + b0 - sum_{i in mask(t)} eta_i (q_t . k_i + 1) g_i``
    """
    Q_h, K_h, V_h, eta = views.Q, views.K, views.V, np.asarray(views.eta, dtype=DTYPE)
    _check_views(state.W, state.b, K_h, V_h, Q_h)
    H, T, d = K_h.shape
    if eta.shape != (T,):
        raise ShapeError(f"eta shape {eta.shape} != ({T},)")
    if mask is None:
        mask = TriangularMask(T, config.mask_diagonal)
    G = token_gradients(state.W, state.b, K_h, V_h, params.ln_gamma, params.ln_beta)
    if not np.all(np.isfinite(G)):
        bad = ~np.all(np.isfinite(G), axis=(0, 2))
        raise NonFiniteError("non-finite inner gradient", int(np.argmax(bad)))
    eta_G = eta[None, :, None] * G
    attn = np.stack([tril_weighted_sum(Q_h[h] @ K_h[h].T + 1.0, mask) for h in range(H)])
    z = Q_h @ state.W + state.b[:, None, :] - attn @ eta_G
    y, _ = layer_norm_forward(z, params.ln_gamma, params.ln_beta, LN_EPS)
    out = K_h + y
    W_new = state.W - K_h.transpose(0, 2, 1) @ eta_G
    b_new = state.b - eta_G.sum(axis=1)
    if not (np.all(np.isfinite(W_new)) and np.all(np.isfinite(b_new))):
        raise NonFiniteError("non-finite fast weight after dual update", T - 1)
    result = _finish(out, params, config, state.W, state.b, K_h, V_h, eta)
    return result, FastWeightState(W=W_new, b=b_new, chunks_seen=state.chunks_seen + 1)


def frozen_forward(state: FastWeightState, views: ChunkViews, params: ProjectionParams,
                   config: TTTConfig) -> ChunkForwardResult:
    """Forward with the fast weight held fixed (the SKIP branch)."""
    z = views.Q @ state.W + state.b[:, None, :]
    y, _ = layer_norm_forward(z, params.ln_gamma, params.ln_beta, LN_EPS)
    return _finish(views.K + y, params, config, state.W, state.b, views.K, views.V,
                   np.zeros_like(views.eta))


def apply_chunk_update(state: FastWeightState, K_h, V_h, eta_mean: float,
                       params: ProjectionParams) -> FastWeightState:
    """One gradient step on the chunk-mean loss with a single step size."""
    dW, db = inner_gradient(state.W, state.b, K_h, V_h, params.ln_gamma, params.ln_beta)
    W = state.W - eta_mean * dW
    b = state.b - eta_mean * db
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise NonFiniteError("non-finite fast weight after chunk update")
    return FastWeightState(W=W, b=b, chunks_seen=state.chunks_seen)


def ttt_improvement(state: FastWeightState, views: ChunkViews, params: ProjectionParams,
                    eta_mean: float | None = None):
    """Reconstruction-loss drop after one chunk step: ``(delta, loss0, loss1)``.

    ``state`` is not modified.
    """
    if eta_mean is None:
        eta_mean = float(np.mean(views.eta))
    _, loss0 = recon_loss(state.W, state.b, views.K, views.V, params.ln_gamma, params.ln_beta)
    stepped = apply_chunk_update(state, views.K, views.V, eta_mean, params)
    _, loss1 = recon_loss(stepped.W, stepped.b, views.K, views.V, params.ln_gamma, params.ln_beta)
    return loss0 - loss1, loss0, loss1


@dataclass
class TTTLayer:
    """Config plus immutable parameters; state is passed in explicitly."""

    config: TTTConfig
    params: ProjectionParams = field(repr=False)

    def __post_init__(self):
        self.params.validate(self.config)

    def initial_state(self) -> FastWeightState:
        return FastWeightState.initial(self.params)

    def views(self, hidden) -> ChunkViews:
        return chunk_views(hidden, self.params, self.config)

    def skip_forward(self, state, views) -> ChunkForwardResult:
        return frozen_forward(state, views, self.params, self.config)

    def update_forward(self, state, views):
        return dual_forward(state, views, self.params, self.config)

    def improvement(self, state, views):
        return ttt_improvement(state, views, self.params)


# --- parameter file -------------------------------------------------------

_CONFIG_INT_FIELDS = ("model_dim", "n_heads", "head_dim", "conv_width", "chunk_size", "mask_diagonal")
_CONFIG_FLOAT_FIELDS = ("base_inner_lr", "recon_weight_beta")
PARAM_ORDER = ("wq_base", "conv_q", "conv_k", "wv", "lr_gate_weight", "lr_gate_bias",
               "ln_gamma", "ln_beta", "w_out", "w0", "b0")


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype="<f8")
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    return arr.reshape(-1, arr.shape[-1])


def save_params(path, config: TTTConfig, params: ProjectionParams) -> None:
    """Binary little-endian parameter file plus a ``.json`` config sidecar.

    Layout: 8-byte magic, u32 version, i32 x6 config ints, f64 x2 config
    floats, u8 signal flag, then each entry of ``PARAM_ORDER`` as
    ``u32 rows, u32 cols, rows*cols f64`` row-major. 3-D arrays are stored
    with their leading axes flattened into rows.
    """
    path = Path(path)
    params.validate(config)
    buf = bytearray(PARAM_MAGIC)
    buf += struct.pack("<I", PARAM_VERSION)
    buf += struct.pack("<6i", *(getattr(config, f) for f in _CONFIG_INT_FIELDS))
    buf += struct.pack("<2d", *(getattr(config, f) for f in _CONFIG_FLOAT_FIELDS))
    buf += struct.pack("<B", 1 if config.signal_position == "last" else 0)
    for name in PARAM_ORDER:
        mat = _as_matrix(getattr(params, name))
        buf += struct.pack("<II", *mat.shape)
        buf += mat.astype("<f8").tobytes()
    path.write_bytes(bytes(buf))
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"format_version": PARAM_VERSION, "config": asdict(config)},
                                  indent=2, sort_keys=True) + "\n")


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(config, params)``."""
    data = Path(path).read_bytes()
    try:
        return _parse_params(path, data)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated parameter file ({exc})") from exc


def _parse_params(path, data: bytes):
    if not data.startswith(PARAM_MAGIC):
        raise ValueError(f"{path}: not a TTT parameter file")
    off = len(PARAM_MAGIC)
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != PARAM_VERSION:
        raise ValueError(f"{path}: unsupported parameter format version {version}")
    ints = struct.unpack_from("<6i", data, off)
    off += 24
    floats = struct.unpack_from("<2d", data, off)
    off += 16
    (flag,) = struct.unpack_from("<B", data, off)
    off += 1
    kw = dict(zip(_CONFIG_INT_FIELDS, ints)) | dict(zip(_CONFIG_FLOAT_FIELDS, floats))
    config = TTTConfig(signal_position="last" if flag else "mean", **kw)
    H, d = config.n_heads, config.head_dim
    arrays = {}
    for name in PARAM_ORDER:
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        n = rows * cols
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(DTYPE).reshape(rows, cols)
        off += 8 * n
        arrays[name] = arr
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in parameter file")
    params = ProjectionParams(
        wq_base=arrays["wq_base"],
        conv_q=arrays["conv_q"],
        conv_k=arrays["conv_k"],
        wv=arrays["wv"],
        lr_gate_weight=arrays["lr_gate_weight"].reshape(-1),
        lr_gate_bias=float(arrays["lr_gate_bias"][0, 0]),
        ln_gamma=arrays["ln_gamma"].reshape(-1),
        ln_beta=arrays["ln_beta"].reshape(-1),
        w_out=arrays["w_out"],
        w0=arrays["w0"].reshape(H, d, d),
        b0=arrays["b0"].reshape(H, d),
    )
    params.validate(config)
    return config, params


def config_fields() -> list[str]:
    return [f.name for f in fields(TTTConfig)]
