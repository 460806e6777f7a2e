"""Co-attention between clip and word features.

The clip/word similarity matrix drives two attention passes: a row softmax
aligns each clip with query words, and a column softmax (transposed back
through the rows) aligns each clip with the other clips a word attends to.
The fused per-clip representation concatenates the video stream with both
aligned streams and their elementwise products, then maps back to width D
through a two-layer feed-forward net.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module, Parameter, xavier_uniform


@dataclass
class InteractionTrace:
    """Intermediates kept for inspection and invariant tests."""

    sim: Tensor        # (B, T, M) raw similarity
    row_attn: Tensor   # (B, T, M) softmax over words, pads exactly 0
    col_attn: Tensor   # (B, T, M) softmax over clips, pad columns zeroed
    word_ctx: Tensor   # (B, T, D) word-aligned stream
    clip_ctx: Tensor   # (B, T, D) clip-aligned stream
    fused: Tensor      # (B, T, D) output features


def similarity(video: Tensor, query: Tensor, proj: Tensor,
               scale: float | None = None) -> Tensor:
    """sim[t, j] = <video_t, (query @ proj)_j>, optionally scaled."""
    if video.shape[-1] != proj.shape[0] or query.shape[-1] != proj.shape[0]:
        raise ValueError("video/query width must match the projection")
    projected = ad.matmul(query, proj)
    sim = ad.matmul(video, _swap_last(projected))
    if scale is not None:
        sim = ad.mul(sim, scale)
    return sim


def coattend(sim: Tensor, video: Tensor, query: Tensor, proj: Tensor,
             qmask: np.ndarray) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Returns (row_attn, col_attn, word_ctx, clip_ctx).

    Row attention is a masked softmax over words; column attention is a
    softmax over clips with pad columns zeroed afterwards, so every valid
    column is stochastic and pads contribute nothing downstream.
    """
    qmask = np.asarray(qmask, bool)
    row_attn = ad.masked_softmax(sim, qmask[:, None, :], axis=-1)
    col_attn = ad.mul(ad.softmax(sim, axis=-2),
                      qmask[:, None, :].astype(sim.dtype))
    projected = ad.matmul(query, proj)
    word_ctx = ad.matmul(row_attn, projected)
    clip_ctx = ad.matmul(ad.matmul(row_attn, _swap_last(col_attn)), video)
    return row_attn, col_attn, word_ctx, clip_ctx


class CrossModalInteraction(Module):
    def __init__(self, rng, dim: int, dtype=np.float64,
                 scaled: bool = False):
        super().__init__()
        self.dim = dim
        self.scale = (1.0 / np.sqrt(dim)) if scaled else None
        self.proj = Parameter(xavier_uniform(rng, dim, dim, dtype=dtype))
        self.ffn_in = Linear(rng, 4 * dim, dim, dtype=dtype)
        self.ffn_out = Linear(rng, dim, dim, dtype=dtype)

    def fuse(self, video: Tensor, word_ctx: Tensor, clip_ctx: Tensor) -> Tensor:
        cat = ad.concat([video, word_ctx,
                         ad.mul(video, word_ctx),
                         ad.mul(video, clip_ctx)], axis=-1)
        return self.ffn_out(ad.relu(self.ffn_in(cat)))

    def __call__(self, video: Tensor, query: Tensor, qmask: np.ndarray,
                 return_trace: bool = False):
        sim = similarity(video, query, self.proj, self.scale)
        row_attn, col_attn, word_ctx, clip_ctx = coattend(
            sim, video, query, self.proj, qmask)
        fused = self.fuse(video, word_ctx, clip_ctx)
        if return_trace:
            return fused, InteractionTrace(sim, row_attn, col_attn,
                                           word_ctx, clip_ctx, fused)
        return fused


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ad.transpose(t, tuple(axes))
