"""Video and query encoders: input projection / token embedding plus one
multi-head self-attention block with fixed sinusoidal positions."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .nn import (Embedding, Linear, Module, SelfAttentionBlock,
                 sinusoidal_positions)


def self_attention(x: Tensor | np.ndarray, block: SelfAttentionBlock,
                   mask: np.ndarray) -> Tensor:
    """Apply one self-attention block to a (L, D) or (B, L, D) input.
    `mask` marks valid positions; a fully masked sequence is an error."""
    x = ad.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
        mask = np.asarray(mask, bool).reshape(1, -1)
    out = block(x, np.asarray(mask, bool))
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out


class VideoEncoder(Module):
    """Project raw clip features to width D and contextualize them; videos
    arrive pre-downsampled so every position is valid."""

    def __init__(self, rng, cfg: ModelConfig, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.in_proj = Linear(rng, cfg.d_in, cfg.dim, dtype=dtype)
        self.attn = SelfAttentionBlock(rng, cfg.dim, cfg.heads, cfg.ffn_dim,
                                       dtype=dtype)
        self.positional = (sinusoidal_positions(cfg.clip_count, cfg.dim, dtype)
                           if cfg.positional else None)

    def __call__(self, feats: Tensor | np.ndarray) -> Tensor:
        x = ad.as_tensor(feats)
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
            squeeze = True
        else:
            squeeze = False
        if x.shape[-1] != self.cfg.d_in:
            raise ValueError(
                f"expected feature width {self.cfg.d_in}, got {x.shape[-1]}")
        h = self.in_proj(x)
        if self.positional is not None:
            h = ad.add(h, self.positional[: h.shape[1]])
        mask = np.ones((h.shape[0], h.shape[1]), bool)
        out = self.attn(h, mask)
        return ad.reshape(out, out.shape[1:]) if squeeze else out


class QueryEncoder(Module):
    """Token embedding lookup and contextualization with pad masking."""

    def __init__(self, rng, cfg: ModelConfig, dtype=np.float64):
        super().__init__()
        if cfg.vocab_size < 3:
            raise ValueError("vocab_size must cover the reserved tokens")
        self.cfg = cfg
        self.embed = Embedding(rng, cfg.vocab_size, cfg.dim, dtype=dtype)
        self.attn = SelfAttentionBlock(rng, cfg.dim, cfg.heads, cfg.ffn_dim,
                                       dtype=dtype)
        self.positional = (sinusoidal_positions(cfg.query_len, cfg.dim, dtype)
                           if cfg.positional else None)

    def __call__(self, token_ids: np.ndarray, mask: np.ndarray) -> Tensor:
        ids = np.asarray(token_ids)
        mask = np.asarray(mask, bool)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
            mask = mask.reshape(1, -1)
        h = self.embed(ids)
        if self.positional is not None:
            h = ad.add(h, self.positional[: h.shape[1]])
        out = self.attn(h, mask)
        return ad.reshape(out, out.shape[1:]) if squeeze else out
