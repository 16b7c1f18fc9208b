"""Dense transformer with switchable norm schemes and initializers.

Three norm schemes:

* ``pre_ln``    -- normalization before each sub-layer only.
* ``sandwich``  -- additionally normalizes each sub-layer's output before the
                   residual addition; post-norm gammas start at c.
* ``dssn``      -- sandwich with depth-scaled post-norm init: gamma = c/sqrt(L).

Initializers: ``small_init`` draws every weight from N(0, 2/(5d));
``small_init_residual_scaled`` additionally divides residual-output
projections (attention output, FFN down) by sqrt(L); ``tiny_init`` scales by
both width and depth, std = sqrt(1/(2dL)).  Embeddings use their own std.

Attention is grouped-query: n_q_heads query heads share n_kv_heads KV heads.
Rotary embeddings use a runtime-switchable base so the context-extension
phases can raise it mid-run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigError, NumericError
from .masking import CompressedMask, mask_bias
from .tensor import Tensor

NORM_SCHEMES = ("pre_ln", "sandwich", "dssn")
INIT_SCHEMES = ("small_init", "small_init_residual_scaled", "tiny_init")


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_q_heads: int
    n_kv_heads: int
    ffn_inner: int
    vocab_size: int
    norm_scheme: str = "dssn"
    init_scheme: str = "tiny_init"
    c_attn: float = 0.283
    c_mlp: float = 0.432
    rope_base: float = 1.0e4
    embed_std: float = 0.5
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.norm_scheme not in NORM_SCHEMES:
            raise ConfigError(f"unknown norm_scheme {self.norm_scheme!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"unknown init_scheme {self.init_scheme!r}")
        if self.n_q_heads % self.n_kv_heads != 0:
            raise ConfigError("n_q_heads must be divisible by n_kv_heads")
        if self.d_model % self.n_q_heads != 0:
            raise ConfigError("d_model must be divisible by n_q_heads")
        if self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_q_heads

    @property
    def has_post_norms(self) -> bool:
        return self.norm_scheme in ("sandwich", "dssn")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def reference_config() -> ModelConfig:
    """The full-scale 94-layer configuration (as data; never built in tests)."""
    return ModelConfig(
        n_layers=94, d_model=12288, n_q_heads=96, n_kv_heads=8,
        ffn_inner=28672, vocab_size=153376,
        norm_scheme="dssn", init_scheme="tiny_init",
        c_attn=0.283, c_mlp=0.432, embed_std=0.5,
    )


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale default: trains in minutes on one CPU core."""
    base = dict(n_layers=8, d_model=128, n_q_heads=8, n_kv_heads=2,
                ffn_inner=384, vocab_size=512)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# Rotary base schedule
# ---------------------------------------------------------------------------

LENGTH_TO_BASE = {4096: 1.0e4, 8192: 1.0e5, 32768: 1.6e6, 131072: 2.56e7}


@dataclass
class RopeConfig:
    base: float
    head_dim: int
    length_to_base: dict = field(default_factory=lambda: dict(LENGTH_TO_BASE))

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even")
        keys = list(self.length_to_base)
        vals = list(self.length_to_base.values())
        if keys != sorted(keys) or vals != sorted(vals):
            raise ConfigError("length_to_base must have increasing keys and bases")

    def base_for(self, context_len: int) -> float:
        """Base for the smallest tabulated length >= context_len."""
        for n in self.length_to_base:
            if context_len <= n:
                return self.length_to_base[n]
        raise ArgumentError(f"no tabulated base covers context length {context_len}")


# ---------------------------------------------------------------------------
# Initialization values
# ---------------------------------------------------------------------------


def gamma_init(c: float, n_layers: int) -> float:
    """Depth-scaled post-norm gamma init: c / sqrt(L)."""
    if n_layers < 1:
        raise ArgumentError("n_layers must be >= 1")
    if c <= 0:
        raise ArgumentError("c must be positive")
    return c / math.sqrt(n_layers)


def init_std(scheme: str, d_model: int, n_layers: int, residual: bool = False) -> float:
    """Weight std for a scheme; `residual` marks residual-output projections."""
    if d_model < 1 or n_layers < 1:
        raise ArgumentError("d_model and n_layers must be >= 1")
    if scheme == "tiny_init":
        return math.sqrt(1.0 / (2.0 * d_model * n_layers))
    if scheme == "small_init":
        return math.sqrt(2.0 / (5.0 * d_model))
    if scheme == "small_init_residual_scaled":
        std = math.sqrt(2.0 / (5.0 * d_model))
        return std / math.sqrt(n_layers) if residual else std
    raise ArgumentError(f"unknown init scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class DssnBlock:
    """One transformer layer: attention + FFN weights and up to four norm
    gammas (post-norms absent under pre_ln)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    g_pre_attn: Tensor
    g_pre_mlp: Tensor
    g_post_attn: Optional[Tensor] = None
    g_post_mlp: Optional[Tensor] = None

    def named_params(self, prefix: str):
        for name in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down",
                     "g_pre_attn", "g_pre_mlp", "g_post_attn", "g_post_mlp"):
            t = getattr(self, name)
            if t is not None:
                yield f"{prefix}.{name}", t


@dataclass
class Model:
    config: ModelConfig
    embedding: Tensor
    blocks: list
    g_final: Tensor
    w_out: Tensor
    rope_base: float  # runtime value; phases may raise it

    def named_params(self):
        yield "embedding", self.embedding
        for i, blk in enumerate(self.blocks):
            yield from blk.named_params(f"blocks.{i}")
        yield "final_norm.gamma", self.g_final
        yield "head.w_out", self.w_out

    def param_tensors(self) -> list:
        return [t for _, t in self.named_params()]

    def num_params(self) -> int:
        return sum(t.data.size for t in self.param_tensors())

    def set_requires_grad(self, flag: bool = True):
        for t in self.param_tensors():
            t.requires_grad = flag


def build_model(config: ModelConfig, seed: int, dtype=np.float64) -> Model:
    """Draw all weights deterministically from `seed`.

    Weight matrices are N(0, std^2) per the init scheme; the embedding uses
    embed_std; gammas follow the norm scheme.  Two builds with the same seed
    are bitwise identical.
    """
    cfg = config
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    hd = cfg.head_dim
    base_std = init_std(cfg.init_scheme, d, cfg.n_layers)
    res_std = init_std(cfg.init_scheme, d, cfg.n_layers, residual=True)

    def draw(rows, cols, std):
        return Tensor(rng.normal(0.0, std, size=(rows, cols)).astype(dtype))

    def gamma_vec(value):
        return Tensor(np.full(d, value, dtype=dtype))

    embedding = Tensor(rng.normal(0.0, cfg.embed_std, size=(cfg.vocab_size, d)).astype(dtype))
    if cfg.norm_scheme == "dssn":
        post_attn_val = gamma_init(cfg.c_attn, cfg.n_layers)
        post_mlp_val = gamma_init(cfg.c_mlp, cfg.n_layers)
    elif cfg.norm_scheme == "sandwich":
        post_attn_val = cfg.c_attn
        post_mlp_val = cfg.c_mlp
    else:
        post_attn_val = post_mlp_val = None

    blocks = []
    for _ in range(cfg.n_layers):
        blk = DssnBlock(
            wq=draw(d, cfg.n_q_heads * hd, base_std),
            wk=draw(d, cfg.n_kv_heads * hd, base_std),
            wv=draw(d, cfg.n_kv_heads * hd, base_std),
            wo=draw(cfg.n_q_heads * hd, d, res_std),
            w_gate=draw(d, cfg.ffn_inner, base_std),
            w_up=draw(d, cfg.ffn_inner, base_std),
            w_down=draw(cfg.ffn_inner, d, res_std),
            g_pre_attn=gamma_vec(1.0),
            g_pre_mlp=gamma_vec(1.0),
            g_post_attn=gamma_vec(post_attn_val) if post_attn_val is not None else None,
            g_post_mlp=gamma_vec(post_mlp_val) if post_mlp_val is not None else None,
        )
        blocks.append(blk)
    w_out = draw(d, cfg.vocab_size, base_std)
    return Model(config=cfg, embedding=embedding, blocks=blocks,
                 g_final=gamma_vec(1.0), w_out=w_out, rope_base=cfg.rope_base)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _attention(x: Tensor, blk: DssnBlock, cfg: ModelConfig, rope_base: float,
               bias: np.ndarray, positions: np.ndarray,
               probes=None, layer: int = 0) -> Tensor:
    b, t, d = x.shape
    hd = cfg.head_dim
    h, kvh = cfg.n_q_heads, cfg.n_kv_heads
    q = T.reshape(T.matmul(x, blk.wq), (b, t, h, hd))
    k = T.reshape(T.matmul(x, blk.wk), (b, t, kvh, hd))
    v = T.reshape(T.matmul(x, blk.wv), (b, t, kvh, hd))
    q = T.rope_apply(q, positions, rope_base)
    k = T.rope_apply(k, positions, rope_base)
    group = h // kvh
    if group > 1:
        k = T.repeat_heads(k, group)
        v = T.repeat_heads(v, group)
    q = T.transpose(q, (0, 2, 1, 3))
    k = T.transpose(k, (0, 2, 1, 3))
    v = T.transpose(v, (0, 2, 1, 3))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    scores = T.add(scores, Tensor(bias))
    probs = T.softmax_lastdim(scores)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, t, h * hd))
    if probes is not None:
        probes.record(layer, "attn_out_proj_in", ctx.data)
    out = T.matmul(ctx, blk.wo)
    if probes is not None:
        probes.record(layer, "attn_out_proj_out", out.data)
    return out


def _ffn(x: Tensor, blk: DssnBlock, probes=None, layer: int = 0) -> Tensor:
    s = T.swiglu(T.matmul(x, blk.w_gate), T.matmul(x, blk.w_up))
    if probes is not None:
        probes.record(layer, "ffn_down_proj_in", s.data)
    out = T.matmul(s, blk.w_down)
    if probes is not None:
        probes.record(layer, "ffn_down_proj_out", out.data)
    return out


def dssn_block_forward(h: Tensor, block: DssnBlock, mask, cfg: ModelConfig,
                       rope_base: Optional[float] = None,
                       attn_fn: Optional[Callable] = None,
                       mlp_fn: Optional[Callable] = None,
                       probes=None, layer: int = 0) -> Tensor:
    """One layer: h += Norm_post(ATTN(Norm(h))); h += Norm_post(MLP(Norm(h))).

    Post-norms are skipped under pre_ln.  `mask` is a CompressedMask or a
    precomputed additive bias array.  attn_fn/mlp_fn replace the sub-layers
    when given (test hook).
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = T.reshape(h, (1,) + h.shape)
    b, t, _ = h.shape
    if isinstance(mask, CompressedMask):
        if mask.total != t:
            raise ArgumentError(f"mask covers {mask.total} of {t} positions")
        bias = mask_bias(mask, dtype=h.dtype)[None, None]
    else:
        bias = mask
    if rope_base is None:
        rope_base = cfg.rope_base
    positions = np.arange(t)
    eps = cfg.rms_eps

    def run_attn(x):
        if attn_fn is not None:
            return attn_fn(x)
        return _attention(x, block, cfg, rope_base, bias, positions, probes, layer)

    def run_mlp(x):
        if mlp_fn is not None:
            return mlp_fn(x)
        return _ffn(x, block, probes, layer)

    a = run_attn(T.rmsnorm(h, block.g_pre_attn, eps))
    if not np.all(np.isfinite(a.data)):
        raise NumericError(f"layer {layer}: non-finite attention output")
    if block.g_post_attn is not None:
        a = T.rmsnorm(a, block.g_post_attn, eps)
    h = T.add(h, a)

    m = run_mlp(T.rmsnorm(h, block.g_pre_mlp, eps))
    if not np.all(np.isfinite(m.data)):
        raise NumericError(f"layer {layer}: non-finite FFN output")
    if block.g_post_mlp is not None:
        m = T.rmsnorm(m, block.g_post_mlp, eps)
    h = T.add(h, m)
    return T.reshape(h, h.shape[1:]) if squeeze else h


def forward(model: Model, tokens: np.ndarray, masks, probes=None) -> Tensor:
    """Logits for a batch of packed sequences.

    tokens: int array (B, T) or (T,); masks: one CompressedMask per row (or a
    single one shared by all rows).
    """
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    b, t = tokens.shape
    if isinstance(masks, CompressedMask):
        masks = [masks] * b
    if len(masks) != b:
        raise ArgumentError("need one mask per batch row")
    dtype = model.embedding.dtype
    bias = np.stack([mask_bias(m, dtype=dtype) for m in masks])[:, None]
    h = T.embedding_lookup(model.embedding, tokens)
    for i, blk in enumerate(model.blocks):
        h = dssn_block_forward(h, blk, bias, model.config,
                               rope_base=model.rope_base, probes=probes, layer=i)
    h = T.rmsnorm(h, model.g_final, model.config.rms_eps)
    logits = T.matmul(h, model.w_out)
    return T.reshape(logits, logits.shape[1:]) if squeeze else logits


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    """Self-describing container: config JSON + named weight arrays.

    Array names match Model.named_params(); see README for the schema.
    """
    arrays = {name: t.data for name, t in model.named_params()}
    meta = dict(model.config.to_dict())
    meta["rope_base_runtime"] = model.rope_base
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path) -> Model:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        rope_base = meta.pop("rope_base_runtime")
        cfg = ModelConfig.from_dict(meta)
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    blocks = []
    for i in range(cfg.n_layers):
        p = f"blocks.{i}"
        blocks.append(DssnBlock(
            wq=Tensor(arrays[f"{p}.wq"]), wk=Tensor(arrays[f"{p}.wk"]),
            wv=Tensor(arrays[f"{p}.wv"]), wo=Tensor(arrays[f"{p}.wo"]),
            w_gate=Tensor(arrays[f"{p}.w_gate"]), w_up=Tensor(arrays[f"{p}.w_up"]),
            w_down=Tensor(arrays[f"{p}.w_down"]),
            g_pre_attn=Tensor(arrays[f"{p}.g_pre_attn"]),
            g_pre_mlp=Tensor(arrays[f"{p}.g_pre_mlp"]),
            g_post_attn=Tensor(arrays[f"{p}.g_post_attn"]) if f"{p}.g_post_attn" in arrays else None,
            g_post_mlp=Tensor(arrays[f"{p}.g_post_mlp"]) if f"{p}.g_post_mlp" in arrays else None,
        ))
    return Model(config=cfg, embedding=Tensor(arrays["embedding"]), blocks=blocks,
                 g_final=Tensor(arrays["final_norm.gamma"]),
                 w_out=Tensor(arrays["head.w_out"]), rope_base=rope_base)
