"""Building layers of the single-branch tracking transformer.

A block either extracts (self-attention within one image's tokens) or
correlates (cross-attention between template and search tokens); both
variants share the same weights and the same pre-norm residual layout:

    f := f + Attn(LN(f))          # self or cross, spatial-reduction global
    f := f + MLP_condPE(LN(f))    # linear -> 3x3 depthwise -> GELU -> linear

Keys and values may be spatially reduced by an r-strided r x r convolution
followed by layer norm; queries keep full resolution.  The prediction-head
block mixes channels (weights shared over positions) and then positions
(weights shared over channels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .engine import PadMode, ShapeError, Tensor

SA = "sa"
CA = "ca"


@dataclass(frozen=True)
class AttnConfig:
    """Attention geometry: channel dim, head count, key/value reduction ratio."""

    dim: int
    heads: int
    reduction: int

    def __post_init__(self):
        if self.dim <= 0 or self.heads <= 0 or self.reduction < 1:
            raise ValueError(f"bad attention config {self}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class FeatureMap:
    """One branch's features on a token grid: tensor [c, h, w], grid (h, w)."""

    tensor: Tensor
    grid: tuple[int, int] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.grid is None:
            self.grid = (self.tensor.shape[1], self.tensor.shape[2])
        c, h, w = self.tensor.shape
        if (h, w) != tuple(self.grid) or min(c, h, w) < 1:
            raise ShapeError(f"feature map {self.tensor.shape} disagrees with grid {self.grid}")

    @property
    def channels(self) -> int:
        return self.tensor.shape[0]

    @property
    def token_count(self) -> int:
        return self.grid[0] * self.grid[1]


def tokens_of(f: FeatureMap) -> Tensor:
    """Row-major flatten of the grid: [c, h, w] -> [h*w, c]."""
    c = f.channels
    return eg.transpose(eg.reshape(f.tensor, (c, f.token_count)), (1, 0))


def map_of(tokens: Tensor, grid: tuple[int, int]) -> FeatureMap:
    h, w = grid
    c = tokens.shape[-1]
    return FeatureMap(eg.reshape(eg.transpose(tokens, (1, 0)), (c, h, w)), grid)


# -- weight containers ------------------------------------------------------


@dataclass
class PatchEmbedWeights:
    weight: Tensor  # [c_out, c_in, k, k]
    bias: Tensor
    gamma: Tensor
    beta: Tensor


@dataclass
class BlockWeights:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    q_weight: Tensor
    q_bias: Tensor
    k_weight: Tensor
    k_bias: Tensor
    v_weight: Tensor
    v_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    pe_weight: Tensor  # depthwise 3x3 on the hidden channels
    pe_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    reduce_weight: Tensor | None = None  # present only when reduction > 1
    reduce_bias: Tensor | None = None
    reduce_gamma: Tensor | None = None
    reduce_beta: Tensor | None = None


@dataclass
class MixMlpWeights:
    channel_weight: Tensor  # [c, c], shared across positions
    channel_bias: Tensor
    spatial_weight: Tensor  # [n_tokens, n_tokens], shared across channels
    spatial_bias: Tensor


@dataclass
class HeadWeights:
    blocks: list[MixMlpWeights] = field(default_factory=list)
    out_weight: Tensor = None  # type: ignore[assignment]  # [c, out_channels]
    out_bias: Tensor = None  # type: ignore[assignment]


# -- initialization -----------------------------------------------------------


def _tn(rng, shape, dtype):
    return eg.parameter(eg.truncated_normal(rng, shape, std=0.02, dtype=dtype))


def _zeros(shape, dtype):
    return eg.parameter(np.zeros(shape, dtype=dtype))


def _ones(shape, dtype):
    return eg.parameter(np.ones(shape, dtype=dtype))


def init_patch_embed(rng, c_in: int, c_out: int, kernel: int, dtype=np.float32) -> PatchEmbedWeights:
    return PatchEmbedWeights(
        weight=_tn(rng, (c_out, c_in, kernel, kernel), dtype),
        bias=_zeros(c_out, dtype),
        gamma=_ones(c_out, dtype),
        beta=_zeros(c_out, dtype),
    )


def init_block_weights(rng, cfg: AttnConfig, dtype=np.float32) -> BlockWeights:
    c = cfg.dim
    hidden = 4 * c
    w = BlockWeights(
        norm1_gamma=_ones(c, dtype), norm1_beta=_zeros(c, dtype),
        q_weight=_tn(rng, (c, c), dtype), q_bias=_zeros(c, dtype),
        k_weight=_tn(rng, (c, c), dtype), k_bias=_zeros(c, dtype),
        v_weight=_tn(rng, (c, c), dtype), v_bias=_zeros(c, dtype),
        out_weight=_tn(rng, (c, c), dtype), out_bias=_zeros(c, dtype),
        norm2_gamma=_ones(c, dtype), norm2_beta=_zeros(c, dtype),
        fc1_weight=_tn(rng, (c, hidden), dtype), fc1_bias=_zeros(hidden, dtype),
        pe_weight=_tn(rng, (hidden, 3, 3), dtype), pe_bias=_zeros(hidden, dtype),
        fc2_weight=_tn(rng, (hidden, c), dtype), fc2_bias=_zeros(c, dtype),
    )
    if cfg.reduction > 1:
        r = cfg.reduction
        w.reduce_weight = _tn(rng, (c, c, r, r), dtype)
        w.reduce_bias = _zeros(c, dtype)
        w.reduce_gamma = _ones(c, dtype)
        w.reduce_beta = _zeros(c, dtype)
    return w


def init_mix_mlp(rng, c: int, n_tokens: int, dtype=np.float32) -> MixMlpWeights:
    # Spatial mixing starts at identity: the freshly built head is then
    # translation-equivariant, and the signal reaching the output layer is
    # not crushed by two stacked near-zero linear maps.
    return MixMlpWeights(
        channel_weight=_tn(rng, (c, c), dtype),
        channel_bias=_zeros(c, dtype),
        spatial_weight=eg.parameter(np.eye(n_tokens, dtype=dtype)),
        spatial_bias=_zeros(n_tokens, dtype),
    )


def init_head(rng, c: int, n_tokens: int, depth: int, out_channels: int, dtype=np.float32) -> HeadWeights:
    head = HeadWeights(blocks=[init_mix_mlp(rng, c, n_tokens, dtype) for _ in range(depth)])
    head.out_weight = _tn(rng, (c, out_channels), dtype)
    head.out_bias = _zeros(out_channels, dtype)
    return head


# -- operations ---------------------------------------------------------------


def patch_embed(img: Tensor, weights: PatchEmbedWeights, stride: int,
                pad_kind: str = "zeros") -> FeatureMap:
    """Overlapping-patch embedding: strided conv then per-position layer norm."""
    k = weights.weight.shape[-1]
    pad = PadMode.same(pad_kind, k)
    h, w = img.shape[1], img.shape[2]
    if h % stride or w % stride:
        raise ShapeError(f"input {h}x{w} not divisible by stride {stride}")
    out = eg.conv2d(img, weights.weight, weights.bias, stride=stride, pad=pad)
    out = eg.layer_norm(out, weights.gamma, weights.beta, axis=0)
    return FeatureMap(out)


def _kv_tokens(f: FeatureMap, cfg: AttnConfig, w: BlockWeights) -> Tensor:
    """Key/value source tokens, spatially reduced when cfg.reduction > 1."""
    r = cfg.reduction
    if r == 1:
        return tokens_of(f)
    h, wd = f.grid
    if h % r or wd % r:
        raise ShapeError(f"reduction {r} does not divide grid {f.grid}")
    red = eg.conv2d(f.tensor, w.reduce_weight, w.reduce_bias, stride=r, pad=PadMode.valid())
    tok = tokens_of(FeatureMap(red))
    return eg.layer_norm(tok, w.reduce_gamma, w.reduce_beta, axis=-1)


def _split_heads(tok: Tensor, cfg: AttnConfig) -> Tensor:
    n = tok.shape[0]
    return eg.transpose(eg.reshape(tok, (n, cfg.heads, cfg.head_dim)), (1, 0, 2))


def _merge_heads(att: Tensor, cfg: AttnConfig) -> Tensor:
    t = att.shape[1]
    return eg.reshape(eg.transpose(att, (1, 0, 2)), (t, cfg.dim))


def qkv_project(f: FeatureMap, which: str, cfg: AttnConfig, weights: BlockWeights) -> Tensor:
    """Project one branch's features to per-head tokens [heads, tokens, head_dim].

    Queries keep the full grid; keys/values see the reduced grid.
    """
    if f.channels != cfg.dim:
        raise ShapeError(f"feature dim {f.channels} != config dim {cfg.dim}")
    if which == "q":
        tok = tokens_of(f)
        proj = eg.linear(tok, weights.q_weight, weights.q_bias)
    elif which == "k":
        proj = eg.linear(_kv_tokens(f, cfg, weights), weights.k_weight, weights.k_bias)
    elif which == "v":
        proj = eg.linear(_kv_tokens(f, cfg, weights), weights.v_weight, weights.v_bias)
    else:
        raise ValueError(f"which must be q/k/v, got {which!r}")
    return _split_heads(proj, cfg)


def attention(q: Tensor, k: Tensor, v: Tensor, head_dim: int) -> Tensor:
    """Scaled dot-product attention; accepts [t, d] or [heads, t, d]."""
    if q.shape[-1] != head_dim or k.shape[-1] != head_dim or v.shape[-1] != head_dim:
        raise ShapeError(f"head dim mismatch: {q.shape}, {k.shape}, {v.shape} vs {head_dim}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("key/value token counts differ")
    squeeze = q.ndim == 2
    if squeeze:
        q = eg.reshape(q, (1, *q.shape))
        k = eg.reshape(k, (1, *k.shape))
        v = eg.reshape(v, (1, *v.shape))
    scores = eg.mul(eg.matmul(q, eg.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(head_dim))
    out = eg.matmul(eg.softmax_last_dim(scores), v)
    if squeeze:
        out = eg.reshape(out, out.shape[1:])
    return out


def _norm1(f: FeatureMap, weights: BlockWeights) -> FeatureMap:
    return FeatureMap(eg.layer_norm(f.tensor, weights.norm1_gamma, weights.norm1_beta, axis=0))


def _attended_residual(f_raw: FeatureMap, f_q: FeatureMap, f_kv: FeatureMap,
                       cfg: AttnConfig, weights: BlockWeights) -> FeatureMap:
    """f_raw + out_proj(Attn(q(f_q), k(f_kv), v(f_kv))) on f_q's grid."""
    q = qkv_project(f_q, "q", cfg, weights)
    k = qkv_project(f_kv, "k", cfg, weights)
    v = qkv_project(f_kv, "v", cfg, weights)
    att = attention(q, k, v, cfg.head_dim)
    out_tok = eg.linear(_merge_heads(att, cfg), weights.out_weight, weights.out_bias)
    delta = map_of(out_tok, f_q.grid)
    return FeatureMap(eg.add(f_raw.tensor, delta.tensor), f_raw.grid)


def eoc_attention(f_z: FeatureMap, f_x: FeatureMap, mode: str, cfg: AttnConfig,
                  weights: BlockWeights, pre_norm: bool = True) -> tuple[FeatureMap, FeatureMap]:
    """Attention sub-layer updating both branches with shared weights.

    SA lets each branch attend to itself; CA takes queries from one branch
    and keys/values from the other.  Both updates read the pre-update
    features and add the attended values back as a residual.  `pre_norm`
    can be dropped to expose the bare update (used by the dynamic-conv
    equivalence checks).
    """
    if f_z.channels != f_x.channels:
        raise ShapeError(f"branch channels differ: {f_z.channels} vs {f_x.channels}")
    if mode not in (SA, CA):
        raise ValueError(f"mode must be '{SA}' or '{CA}'")

    nz = _norm1(f_z, weights) if pre_norm else f_z
    nx = _norm1(f_x, weights) if pre_norm else f_x
    if mode == SA:
        return (_attended_residual(f_z, nz, nz, cfg, weights),
                _attended_residual(f_x, nx, nx, cfg, weights))
    return (_attended_residual(f_z, nz, nx, cfg, weights),
            _attended_residual(f_x, nx, nz, cfg, weights))


def mlp_cond_pe(f: FeatureMap, weights: BlockWeights, pad_kind: str = "zeros") -> FeatureMap:
    """Token MLP with a 3x3 depthwise conv injecting position before GELU."""
    hidden = eg.linear(tokens_of(f), weights.fc1_weight, weights.fc1_bias)
    hmap = map_of(hidden, f.grid)
    hmap = FeatureMap(eg.depthwise_conv2d(hmap.tensor, weights.pe_weight, weights.pe_bias,
                                          pad=PadMode.same(pad_kind, 3)))
    out = eg.linear(tokens_of(FeatureMap(eg.gelu(hmap.tensor))), weights.fc2_weight, weights.fc2_bias)
    return map_of(out, f.grid)


def _mlp_residual(f: FeatureMap, weights: BlockWeights, pad_kind: str) -> FeatureMap:
    n = FeatureMap(eg.layer_norm(f.tensor, weights.norm2_gamma, weights.norm2_beta, axis=0))
    return FeatureMap(eg.add(f.tensor, mlp_cond_pe(n, weights, pad_kind).tensor), f.grid)


def eoc_block(f_z: FeatureMap, f_x: FeatureMap, mode: str, cfg: AttnConfig,
              weights: BlockWeights, pad_kind: str = "zeros") -> tuple[FeatureMap, FeatureMap]:
    """Full extract-or-correlate block: attention then conditional-PE MLP."""
    f_z, f_x = eoc_attention(f_z, f_x, mode, cfg, weights)
    return _mlp_residual(f_z, weights, pad_kind), _mlp_residual(f_x, weights, pad_kind)


def eoc_block_single(f: FeatureMap, cfg: AttnConfig, weights: BlockWeights,
                     pad_kind: str = "zeros") -> FeatureMap:
    """Self-attention-only block on one branch (classification pre-training)."""
    n = _norm1(f, weights)
    f = _attended_residual(f, n, n, cfg, weights)
    return _mlp_residual(f, weights, pad_kind)


def mix_mlp_block(f: FeatureMap, weights: MixMlpWeights) -> FeatureMap:
    """Prediction-head block: channel mixing then spatial mixing, each linear+ReLU."""
    n_tokens = f.token_count
    if weights.spatial_weight.shape[0] != n_tokens:
        raise ShapeError(
            f"spatial mixing weight expects {weights.spatial_weight.shape[0]} tokens, got {n_tokens}")
    tok = tokens_of(f)
    mixed_c = eg.relu(eg.linear(tok, weights.channel_weight, weights.channel_bias))
    by_channel = eg.transpose(mixed_c, (1, 0))  # [c, n_tokens]
    mixed_s = eg.relu(eg.linear(by_channel, weights.spatial_weight, weights.spatial_bias))
    return map_of(eg.transpose(mixed_s, (1, 0)), f.grid)


def head_forward(f: FeatureMap, head: HeadWeights) -> Tensor:
    """Stacked mix-MLP blocks then a per-token linear map; returns [out_c, h, w]."""
    cur = f
    for blk in head.blocks:
        cur = mix_mlp_block(cur, blk)
    out_tok = eg.linear(tokens_of(cur), head.out_weight, head.out_bias)
    return map_of(out_tok, f.grid).tensor
