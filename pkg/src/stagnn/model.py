"""Spatio-temporal attention graph network.

Pipeline per window batch ``x`` of shape (B, W, N, F):

    embed_inputs -> temporal_block -> build_similarity -> spatial_block -> decode

Row-vector convention throughout (``x @ W``). The model forecasts the
observation one step after the window.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_entities: int
    n_features: int
    window: int = 6
    embed_dim: int = 128
    temporal_heads: int = 4
    spatial_heads: int = 4
    top_k: int = 6
    has_prior: bool = False
    lambda_init: float = 10.0
    temperature_init: float = 0.9
    beta_init: float = 1.0

    def __post_init__(self):
        if self.n_entities < 1 or self.n_features < 1:
            raise ConfigError("n_entities and n_features must be positive")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        for name in ("temporal_heads", "spatial_heads"):
            h = getattr(self, name)
            if h < 1 or self.embed_dim % h:
                raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {name}={h}")
        if not 1 <= self.top_k <= self.n_entities:
            raise ConfigError(f"top_k must be in [1, {self.n_entities}], got {self.top_k}")
        if self.temperature_init <= 0:
            raise ConfigError("temperature_init must be > 0")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ConfigError(f"unknown ModelConfig key {k!r}")
            t = kinds[k]
            if t == "bool":
                out[k] = v if isinstance(v, bool) else str(v).lower() == "true"
            elif t == "int":
                out[k] = int(v)
            else:
                out[k] = float(v)
        return cls(**out)


def normalize_prior(adj: np.ndarray) -> np.ndarray:
    """Scale a nonnegative adjacency into [0, 1] by its maximum entry."""
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ConfigError(f"prior must be square, got {adj.shape}")
    if (adj < 0).any():
        raise ConfigError("prior adjacency must be nonnegative")
    m = adj.max()
    return adj / m if m > 0 else adj.copy()


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    prior: np.ndarray | None = None

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.tensors.items() if t.requires_grad]

    @property
    def temperature(self) -> float:
        return float(np.exp(self.tensors["spatial.log_temperature"].data))

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad)
             for k, t in self.tensors.items()},
            None if self.prior is None else self.prior.copy(),
        )

    def freeze(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy()) for k, t in self.tensors.items()},
            None if self.prior is None else self.prior.copy(),
        )


def init_params(config: ModelConfig, seed: int = 0,
                prior: np.ndarray | None = None) -> ModelParams:
    if config.has_prior and prior is None:
        raise ConfigError("config.has_prior is set but no prior graph was given")
    if prior is not None and not config.has_prior:
        raise ConfigError("prior graph given but config.has_prior is False")
    rng = np.random.default_rng(seed)
    d, F, N, W = config.embed_dim, config.n_features, config.n_entities, config.window

    def lin(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    p: dict[str, np.ndarray] = {
        "input.weight": lin(F, d),
        "input.bias": np.zeros(d),
        "input.pos": rng.normal(0.0, 0.02, size=(W, d)),
        "temporal.W_q": lin(d, d),
        "temporal.W_k": lin(d, d),
        "temporal.W_v": lin(d, d),
        "temporal.W_o": lin(d, d),
        "temporal.ln_gain": np.ones(d),
        "temporal.ln_bias": np.zeros(d),
    }
    if prior is None:
        p["spatial.entity_embed"] = rng.normal(0.0, 1.0, size=(N, d))
    p.update({
        "spatial.W_q": lin(d, d),
        "spatial.W_k": lin(d, d),
        "spatial.W_v": lin(d, d),
        "spatial.lambda": np.array(config.lambda_init),
        "spatial.log_temperature": np.array(math.log(config.temperature_init)),
        "spatial.beta": np.array(config.beta_init),
        "decoder.W1": lin(d, d),
        "decoder.b1": np.zeros(d),
        "decoder.W2": lin(d, F),
        "decoder.b2": np.zeros(F),
    })
    tensors = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
    return ModelParams(config, tensors, None if prior is None else normalize_prior(prior))


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def embed_inputs(x, params: ModelParams) -> Tensor:
    cfg = params.config
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1:] != (cfg.window, cfg.n_entities, cfg.n_features):
        raise ConfigError(
            f"input shape {x.shape} does not match (B, {cfg.window}, "
            f"{cfg.n_entities}, {cfg.n_features})")
    B, W, N, _ = x.shape
    d = cfg.embed_dim
    h = nx.add(nx.matmul(x, params["input.weight"]), params["input.bias"])
    pos = nx.broadcast_to(nx.reshape(params["input.pos"], (W, 1, d)), (B, W, N, d))
    return nx.add(h, pos)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    # (..., L, d) -> (..., heads, L, d/heads)
    *lead, L, d = t.shape
    t = nx.reshape(t, (*lead, L, heads, d // heads))
    k = len(lead)
    return nx.permute(t, (*range(k), k + 1, k, k + 2))


def _merge_heads(t: Tensor) -> Tensor:
    # (..., heads, L, dh) -> (..., L, heads*dh)
    *lead, h, L, dh = t.shape
    k = len(lead)
    t = nx.permute(t, (*range(k), k + 1, k, k + 2))
    return nx.reshape(t, (*lead, L, h * dh))


def causal_mask(W: int) -> np.ndarray:
    return np.tril(np.ones((W, W), dtype=bool))


def temporal_attention(h: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Causal multi-head self-attention over timesteps, per entity.

    Returns the per-timestep output (B, N, W, d) and the attention weights
    (B, N, heads, W, W).
    """
    cfg = params.config
    heads = cfg.temporal_heads
    dh = cfg.embed_dim // heads
    W = h.shape[1]
    hs = nx.permute(h, (0, 2, 1, 3))  # B, N, W, d
    q = _split_heads(nx.matmul(hs, params["temporal.W_q"]), heads)
    k = _split_heads(nx.matmul(hs, params["temporal.W_k"]), heads)
    v = _split_heads(nx.matmul(hs, params["temporal.W_v"]), heads)
    logits = nx.scale(nx.matmul(q, nx.transpose_last_two(k)), 1.0 / math.sqrt(dh))
    att = nx.softmax_lastaxis(logits, causal_mask(W))
    out = nx.matmul(_merge_heads(nx.matmul(att, v)), params["temporal.W_o"])
    return out, att


def temporal_block(h: Tensor, params: ModelParams) -> Tensor:
    out, _ = temporal_attention(h, params)
    pooled = nx.mean_axis(out, axis=2)
    return nx.layer_norm(pooled, params["temporal.ln_gain"], params["temporal.ln_bias"])


def static_similarity(params: ModelParams) -> Tensor:
    if params.prior is not None:
        return Tensor(params.prior)
    e = nx.l2_normalize_lastaxis(params["spatial.entity_embed"])
    return nx.matmul(e, nx.transpose_last_two(e))


def build_similarity(h: Tensor, params: ModelParams) -> Tensor:
    """Contextual cosine Gram matrix plus the lambda-scaled static similarity."""
    hn = nx.l2_normalize_lastaxis(h)
    ctx = nx.matmul(hn, nx.transpose_last_two(hn))
    st = nx.mul(static_similarity(params), params["spatial.lambda"])
    return nx.add(ctx, st)


def spatial_block(h: Tensor, s: Tensor, params: ModelParams) -> tuple[Tensor, np.ndarray]:
    """Similarity-biased, temperature-scaled, top-k sparsified attention over entities.

    Returns ``A V + beta H`` and the head-averaged attention, re-truncated to
    the top-k entries per row so the exported matrix honours the same support
    bound as each head.
    """
    cfg = params.config
    heads = cfg.spatial_heads
    dh = cfg.embed_dim // heads
    B, N, d = h.shape
    q = _split_heads(nx.matmul(h, params["spatial.W_q"]), heads)  # B,h,N,dh
    k = _split_heads(nx.matmul(h, params["spatial.W_k"]), heads)
    v = _split_heads(nx.matmul(h, params["spatial.W_v"]), heads)
    temp = nx.exp(params["spatial.log_temperature"])
    qk = nx.scale(nx.matmul(q, nx.transpose_last_two(k)), 1.0 / math.sqrt(dh))
    logits = nx.add(nx.div(qk, temp),
                    nx.broadcast_to(nx.reshape(s, (B, 1, N, N)), (B, heads, N, N)))
    att = nx.topk_renormalize(nx.softmax_lastaxis(logits), cfg.top_k)
    msg = _merge_heads(nx.matmul(att, v))
    out = nx.add(msg, nx.mul(h, params["spatial.beta"]))
    return out, sparsify_rows(att.data.mean(axis=1), cfg.top_k)


def sparsify_rows(a: np.ndarray, k: int) -> np.ndarray:
    return nx.topk_renormalize(Tensor(a), k).data


def decode(h: Tensor, params: ModelParams) -> Tensor:
    z = nx.relu(nx.add(nx.matmul(h, params["decoder.W1"]), params["decoder.b1"]))
    return nx.add(nx.matmul(z, params["decoder.W2"]), params["decoder.b2"])


@dataclass
class ForwardOutput:
    predictions: Tensor          # B, N, F (raw scores for Boolean channels)
    embeddings: Tensor           # B, N, d
    similarity: np.ndarray       # B, N, N
    attention: np.ndarray        # B, N, N
    temporal_attention: np.ndarray = field(repr=False, default=None)


def forward(x, params: ModelParams) -> ForwardOutput:
    emb = embed_inputs(x, params)
    seq, t_att = temporal_attention(emb, params)
    pooled = nx.mean_axis(seq, axis=2)
    h = nx.layer_norm(pooled, params["temporal.ln_gain"], params["temporal.ln_bias"])
    s = build_similarity(h, params)
    h_sp, att = spatial_block(h, s, params)
    y = decode(h_sp, params)
    return ForwardOutput(y, h, s.data, att, t_att.data)


def predict(x: np.ndarray, params: ModelParams, batch_size: int = 256) -> np.ndarray:
    frozen = params.freeze()
    out = [forward(x[i:i + batch_size], frozen).predictions.data
           for i in range(0, len(x), batch_size)]
    if not out:
        cfg = params.config
        return np.zeros((0, cfg.n_entities, cfg.n_features))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

MAGIC = b"STAGNNCK"
FORMAT_VERSION = 1
_DTYPE_F64 = 1
PRIOR_NAME = "__prior__"


def _put_bytes(buf: io.BytesIO, b: bytes) -> None:
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _get_bytes(buf: io.BytesIO) -> bytes:
    (n,) = struct.unpack("<I", buf.read(4))
    b = buf.read(n)
    if len(b) != n:
        raise ValueError("truncated checkpoint")
    return b


def checkpoint_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    cfg = params.config.to_dict()
    buf.write(struct.pack("<I", len(cfg)))
    for k, v in cfg.items():
        _put_bytes(buf, k.encode())
        _put_bytes(buf, repr(v).encode())
    named = [(k, t.data) for k, t in params.tensors.items()]
    if params.prior is not None:
        named.append((PRIOR_NAME, params.prior))
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named:
        _put_bytes(buf, name.encode())
        buf.write(struct.pack("<BB", _DTYPE_F64, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes) -> ModelParams:
    buf = io.BytesIO(data)
    if buf.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<H", buf.read(2))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n_cfg,) = struct.unpack("<I", buf.read(4))
    raw = {}
    for _ in range(n_cfg):
        k = _get_bytes(buf).decode()
        raw[k] = _get_bytes(buf).decode()
    config = ModelConfig.from_dict(raw)
    (n_t,) = struct.unpack("<I", buf.read(4))
    tensors, prior = {}, None
    for _ in range(n_t):
        name = _get_bytes(buf).decode()
        dtype, rank = struct.unpack("<BB", buf.read(2))
        if dtype != _DTYPE_F64:
            raise ValueError(f"unsupported dtype tag {dtype} for {name}")
        shape = struct.unpack(f"<{rank}Q", buf.read(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        if name == PRIOR_NAME:
            prior = arr
        else:
            tensors[name] = Tensor(arr, requires_grad=True)
    return ModelParams(config, tensors, prior)


def save_checkpoint(params: ModelParams, path) -> None:
    from .io_utils import atomic_write_bytes
    atomic_write_bytes(Path(path), checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
