"""Transformer model: 3D ViT encoder/decoder, text encoder/decoder with a
single shared text encoder, projection heads, and cross-modal fusion.

All blocks are pre-norm (x + attn(LN(x)), x + mlp(LN(x))) with no final
norm after the stacks, so a zero-layer encoder is an exact identity on
its input embedding. Attention q/k/v projections carry no bias; the
output projection does.

Parameter names follow "module.block.index.tensor" and are the
checkpoint contract.
"""

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import (
    Tensor, ShapeError, concat_rows, gather_rows, gelu, layer_norm,
    matmul, reshape, softmax, transpose, tsqrt, tsum,
)
from .volume import MaskPlan, positional_embedding_1d, positional_embedding_3d

INIT_STD = 0.02


@dataclass
class ModelConfig:
    embed_dim: int = 64
    proj_dim: int = 32
    enc_layers_v: int = 2
    dec_layers_v: int = 1
    enc_layers_t: int = 2
    dec_layers_t: int = 1
    heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 0
    patch_dims: tuple = (8, 8, 4)
    grid_dims: tuple = (4, 4, 4)
    enable_sa: bool = True
    enable_il: bool = True
    enable_wl: bool = True
    freeze_text_encoder: bool = False
    mim_scope: str = "masked"
    sentence_pool: str = "cls"

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        for name in ("embed_dim", "proj_dim", "heads", "mlp_ratio", "vocab_size",
                     "enc_layers_v", "enc_layers_t"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dec_layers_v < 0 or self.dec_layers_t < 0:
            raise ValueError("decoder layer counts must be >= 0")
        if self.mim_scope not in ("masked", "full"):
            raise ValueError(f"mim_scope must be 'masked' or 'full', got {self.mim_scope!r}")
        if self.sentence_pool not in ("cls", "mean"):
            raise ValueError(f"sentence_pool must be 'cls' or 'mean', got {self.sentence_pool!r}")

    @property
    def patch_voxels(self) -> int:
        ph, pw, pd = self.patch_dims
        return ph * pw * pd

    @property
    def n_patches(self) -> int:
        gh, gw, gd = self.grid_dims
        return gh * gw * gd


class Linear:
    def __init__(self, rng: Rng, d_in: int, d_out: int, bias: bool = True):
        w = rng.normal(d_in * d_out, std=INIT_STD).reshape(d_in, d_out)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x):
        out = matmul(x, self.w)
        if self.b is not None:
            out = out + self.b
        return out

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, dim: int):
        self.g = Tensor(np.ones(dim), requires_grad=True)
        self.b = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return layer_norm(x, self.g, self.b)

    def named_params(self, prefix):
        yield f"{prefix}.g", self.g
        yield f"{prefix}.b", self.b


class Attention:
    """Multi-head scaled dot-product attention over row sequences.

    Queries come from q_in (L rows), keys/values from kv_in (N rows);
    q_in is kv_in for self-attention. Head dim is embed_dim / heads.
    """

    def __init__(self, rng: Rng, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.dk = dim, heads, dim // heads
        self.scale = 1.0 / math.sqrt(self.dk)
        self.wq = Linear(rng, dim, dim, bias=False)
        self.wk = Linear(rng, dim, dim, bias=False)
        self.wv = Linear(rng, dim, dim, bias=False)
        self.wo = Linear(rng, dim, dim)

    def __call__(self, q_in, kv_in, return_internals: bool = False):
        if q_in.shape[-1] != self.dim or kv_in.shape[-1] != self.dim:
            raise ShapeError("attention", q_in.shape, kv_in.shape)
        L, N = q_in.shape[0], kv_in.shape[0]
        q = transpose(reshape(self.wq(q_in), (L, self.heads, self.dk)), (1, 0, 2))
        k = transpose(reshape(self.wk(kv_in), (N, self.heads, self.dk)), (1, 2, 0))
        v = transpose(reshape(self.wv(kv_in), (N, self.heads, self.dk)), (1, 0, 2))
        probs = softmax(matmul(q, k) * self.scale)          # (heads, L, N)
        merged = reshape(transpose(matmul(probs, v), (1, 0, 2)), (L, self.dim))
        out = self.wo(merged)
        if return_internals:
            return out, probs, merged
        return out

    def named_params(self, prefix):
        yield from self.wq.named_params(f"{prefix}.wq")
        yield from self.wk.named_params(f"{prefix}.wk")
        yield from self.wv.named_params(f"{prefix}.wv")
        yield from self.wo.named_params(f"{prefix}.wo")


class Block:
    """Pre-norm transformer block: self-attention then GELU MLP."""

    def __init__(self, rng: Rng, dim: int, heads: int, mlp_ratio: int):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim)

    def __call__(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h)
        x = x + self.fc2(gelu(self.fc1(self.ln2(x))))
        return x

    def named_params(self, prefix):
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")


def _stack(rng, n_layers, dim, heads, mlp_ratio):
    return [Block(rng, dim, heads, mlp_ratio) for _ in range(n_layers)]


def normalize_rows(x):
    """L2-normalize the rows of a 2-D tensor; zero rows are an error."""
    sq = tsum(x * x, axis=-1, keepdims=True)
    if np.any(sq.data <= 0.0):
        raise ValueError("cannot L2-normalize a zero-norm row")
    return x / tsqrt(sq)


def instance_feature(f_v):
    """Global average pool over the patch axis: (N, d) -> (d,)."""
    if f_v.shape[0] < 1:
        raise ValueError("instance_feature needs at least one row")
    return f_v.mean(axis=0)


class VolumeReportModel:
    """All trainable state plus the forward operations of the pipeline.

    The same text encoder object serves both the masked-report path and
    the per-sentence path, so their parameters are shared by identity.
    """

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        d = cfg.embed_dim

        self.patch_proj = Linear(rng, cfg.patch_voxels, d)
        self.vis_enc = _stack(rng, cfg.enc_layers_v, d, cfg.heads, cfg.mlp_ratio)
        self.mask_token = Tensor(
            rng.normal(d, std=INIT_STD).reshape(1, d), requires_grad=True
        )
        self.vis_dec = _stack(rng, cfg.dec_layers_v, d, cfg.heads, cfg.mlp_ratio)
        self.vis_head = Linear(rng, d, cfg.patch_voxels)

        self.tok_emb = Tensor(
            rng.normal(cfg.vocab_size * d, std=INIT_STD).reshape(cfg.vocab_size, d),
            requires_grad=True,
        )
        self.txt_enc = _stack(rng, cfg.enc_layers_t, d, cfg.heads, cfg.mlp_ratio)
        self.txt_dec = _stack(rng, cfg.dec_layers_t, d, cfg.heads, cfg.mlp_ratio)
        self.vocab_head = Linear(rng, d, cfg.vocab_size)

        self.fusion = Attention(rng, d, cfg.heads)
        self.text_proj = Linear(rng, d, cfg.proj_dim)
        self.vision_proj = Linear(rng, d, cfg.proj_dim)

        self.pos3d = positional_embedding_3d(cfg.grid_dims, d)
        self._pos1d_cache = {}
        self._params = dict(self._named_params())

    def _named_params(self):
        yield from self.patch_proj.named_params("vision_enc.patch_proj")
        for i, b in enumerate(self.vis_enc):
            yield from b.named_params(f"vision_enc.block.{i}")
        yield "vision_dec.mask_token", self.mask_token
        for i, b in enumerate(self.vis_dec):
            yield from b.named_params(f"vision_dec.block.{i}")
        yield from self.vis_head.named_params("vision_dec.head")
        yield "text_enc.emb", self.tok_emb
        for i, b in enumerate(self.txt_enc):
            yield from b.named_params(f"text_enc.block.{i}")
        for i, b in enumerate(self.txt_dec):
            yield from b.named_params(f"text_dec.block.{i}")
        yield from self.vocab_head.named_params("text_dec.head")
        yield from self.fusion.named_params("fusion.attn")
        yield from self.text_proj.named_params("align.text_proj")
        yield from self.vision_proj.named_params("align.vision_proj")

    def named_params(self) -> dict:
        return self._params

    def text_encoder_param_names(self) -> set:
        return {n for n in self._params if n.startswith("text_enc.")}

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def _pos1d(self, n: int) -> np.ndarray:
        if n not in self._pos1d_cache:
            self._pos1d_cache[n] = positional_embedding_1d(n, self.cfg.embed_dim)
        return self._pos1d_cache[n]

    # ------------------------------------------------------------------
    # vision path

    def encode_vision(self, patches, pos_emb):
        """Project visible patches, add their position rows, run the encoder."""
        if patches.shape[0] != pos_emb.shape[0]:
            raise ShapeError("encode_vision", patches.shape, pos_emb.shape)
        x = self.patch_proj(patches) + pos_emb
        for block in self.vis_enc:
            x = block(x)
        return x

    def decode_vision(self, f_v, plan: MaskPlan, full_pos_emb):
        """Reassemble the full patch sequence with mask tokens and reconstruct.

        Output rows are ordered by original patch index.
        """
        n_total = plan.n_total
        if full_pos_emb.shape[0] != n_total:
            raise ShapeError("decode_vision", full_pos_emb.shape, (n_total,))
        if f_v.shape[0] != plan.n_unmasked:
            raise ShapeError("decode_vision", f_v.shape, (plan.n_unmasked,))
        n_masked = plan.n_masked
        order = np.empty(n_total, dtype=np.int64)
        order[plan.unmasked_idx] = np.arange(plan.n_unmasked)
        if n_masked:
            order[plan.masked_idx] = plan.n_unmasked + np.arange(n_masked)
            filled = gather_rows(self.mask_token, np.zeros(n_masked, dtype=np.int64))
            rows = concat_rows([f_v, filled])
        else:
            rows = f_v
        x = gather_rows(rows, order) + full_pos_emb
        for block in self.vis_dec:
            x = block(x)
        return self.vis_head(x)

    # ------------------------------------------------------------------
    # text path (shared encoder)

    def encode_text(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError(
                f"token id out of range for vocab size {self.cfg.vocab_size}"
            )
        x = gather_rows(self.tok_emb, ids) + Tensor(self._pos1d(ids.size))
        for block in self.txt_enc:
            x = block(x)
        return x

    def pool_sentence(self, f_t):
        """Pool an encoded sentence to a unit vector in the shared space."""
        if f_t.shape[0] < 1:
            raise ValueError("pool_sentence needs at least one row")
        if self.cfg.sentence_pool == "cls":
            pooled = gather_rows(f_t, np.zeros(1, dtype=np.int64))
        else:
            pooled = f_t.mean(axis=0, keepdims=True)
        return reshape(normalize_rows(self.text_proj(pooled)), (self.cfg.proj_dim,))

    def project_patches(self, f_v):
        """Row-wise projection of patch features to unit vectors."""
        return normalize_rows(self.vision_proj(f_v))

    def cross_attention(self, f_t, f_v, return_internals: bool = False):
        """Word-patch fusion: text rows attend over vision rows."""
        return self.fusion(f_t, f_v, return_internals=return_internals)

    def decode_text(self, f_t, f_inst=None, f_word=None):
        """Fuse instance/word-level vision context into the report and decode.

        Either fusion input may be disabled (None or flag off); with
        both absent this degrades to text-only decoding.
        """
        x = f_t
        if self.cfg.enable_wl and f_word is not None:
            x = x + f_word
        if self.cfg.enable_il and f_inst is not None:
            x = x + f_inst
        for block in self.txt_dec:
            x = block(x)
        return self.vocab_head(x)
