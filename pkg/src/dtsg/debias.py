"""Training-only debiasing branch.

Three deliberately impoverished models expose what a grounding model can
learn from partial input: video alone, video plus only the query's nouns,
and video plus only its verbs.  Each biased stream is gated elementwise by
a learned sigmoid filter (so only the harmful part survives), the gated
streams are fused per clip by softmax attention weights, and the fused
negative bias is subtracted from the backbone's features.  A small
supervised module keeps the subtracted features predictive, while a
per-clip contrastive loss pulls the backbone features toward the debiased
version and away from the fused bias.  None of this branch is used at
inference.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boundary import BoundaryHead
from .config import ModelConfig
from .crossmodal import CrossModalInteraction
from .encoders import QueryEncoder, VideoEncoder
from .nn import Linear, MLP, Module


class BiasedVideoModel(Module):
    """Stream 1: the segment predicted from the video alone.  Own encoder
    and head; the query never enters, so its output is query-invariant."""

    def __init__(self, rng, cfg: ModelConfig, dtype=np.float64):
        super().__init__()
        self.encoder = VideoEncoder(rng, cfg, dtype=dtype)
        self.proj = Linear(rng, cfg.dim, cfg.dim, dtype=dtype)
        self.head = BoundaryHead(rng, cfg.dim, dtype=dtype)

    def features(self, video_feats) -> Tensor:
        return self.proj(self.encoder(video_feats))

    def __call__(self, video_feats) -> tuple[Tensor, Tensor, Tensor]:
        feats = self.features(video_feats)
        start, end = self.head(feats)
        return feats, start, end


class BiasedQueryModel(Module):
    """Streams 2 and 3: the segment predicted from the video plus a
    POS-filtered query (nouns only, or verbs only).  Same architecture as
    the backbone, independent parameters."""

    def __init__(self, rng, cfg: ModelConfig, dtype=np.float64):
        super().__init__()
        self.video_encoder = VideoEncoder(rng, cfg, dtype=dtype)
        self.query_encoder = QueryEncoder(rng, cfg, dtype=dtype)
        self.interaction = CrossModalInteraction(rng, cfg.dim, dtype=dtype,
                                                 scaled=cfg.scaled_similarity)
        self.head = BoundaryHead(rng, cfg.dim, dtype=dtype)

    def features(self, video_feats, token_ids: np.ndarray,
                 qmask: np.ndarray) -> Tensor:
        video = self.video_encoder(video_feats)
        query = self.query_encoder(token_ids, qmask)
        return self.interaction(video, query, np.asarray(qmask, bool))

    def __call__(self, video_feats, token_ids: np.ndarray,
                 qmask: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        feats = self.features(video_feats, token_ids, qmask)
        start, end = self.head(feats)
        return feats, start, end


class BiasIdentification(Module):
    """Per-stream sigmoid gates plus softmax fusion into one bias tensor."""

    def __init__(self, rng, cfg: ModelConfig, n_streams: int,
                 dtype=np.float64):
        super().__init__()
        if n_streams < 1:
            raise ValueError("need at least one biased stream")
        self.n_streams = n_streams
        self.gates = []
        for k in range(n_streams):
            gate = MLP(rng, [cfg.dim, cfg.gate_hidden, cfg.dim],
                       activation="relu", dtype=dtype)
            setattr(self, f"gate{k}", gate)
            self.gates.append(gate)
        self.fusion = Linear(rng, n_streams * cfg.dim, n_streams, dtype=dtype)

    def identify(self, stream: Tensor, index: int) -> Tensor:
        """Elementwise gate in (0, 1) applied onto one biased stream."""
        return ad.mul(stream, ad.sigmoid(self.gates[index](stream)))

    def fuse(self, gated: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Per-clip softmax weights over the gated streams and their convex
        combination.  Returns (weights (..., T, n), fused (..., T, D))."""
        logits = self.fusion(ad.concat(gated, axis=-1))
        weights = ad.softmax(logits, axis=-1)
        expanded = [ad.reshape(g, g.shape[:-1] + (1,) + g.shape[-1:])
                    for g in gated]
        stacked = ad.concat(expanded, axis=-2)  # (..., T, n, D)
        wrow = ad.reshape(weights, weights.shape[:-1] + (1, self.n_streams))
        fused = ad.reshape(ad.matmul(wrow, stacked), gated[0].shape)
        return weights, fused

    def __call__(self, streams: list[Tensor],
                 ) -> tuple[list[Tensor], Tensor, Tensor]:
        if len(streams) != self.n_streams:
            raise ValueError(f"expected {self.n_streams} streams, "
                             f"got {len(streams)}")
        gated = [self.identify(s, k) for k, s in enumerate(streams)]
        weights, fused = self.fuse(gated)
        return gated, weights, fused


def remove_bias(feats: Tensor, fused_bias: Tensor) -> Tensor:
    """Exact elementwise subtraction of the fused negative bias."""
    return ad.sub(feats, fused_bias)


class DebiasedModule(Module):
    """Keeps the debiased features predictive: a projection and a boundary
    head supervised against the same ground truth as the backbone."""

    def __init__(self, rng, cfg: ModelConfig, dtype=np.float64):
        super().__init__()
        self.proj = Linear(rng, cfg.dim, cfg.dim, dtype=dtype)
        self.head = BoundaryHead(rng, cfg.dim, dtype=dtype)

    def project(self, debiased: Tensor) -> Tensor:
        return ad.relu(self.proj(debiased))

    def __call__(self, debiased: Tensor) -> tuple[Tensor, Tensor]:
        return self.head(self.project(debiased))


def cosine_score(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity over the last axis; zero against zero is 0.

    The norm product is computed as sqrt(|a|^2 |b|^2 + delta) with a tiny
    delta so the gradient stays finite when a feature row is exactly zero
    (sqrt has an infinite derivative at 0); the value is unchanged to
    within 1e-15 relative."""
    dot = ad.tsum(ad.mul(a, b), axis=-1)
    sq = ad.mul(ad.tsum(ad.mul(a, a), axis=-1),
                ad.tsum(ad.mul(b, b), axis=-1))
    norms = ad.sqrt(ad.add(sq, 1e-30))
    return ad.div(dot, ad.add(norms, eps))


def feature_contrastive_loss(feats: Tensor, debiased: Tensor,
                             fused_bias: Tensor,
                             temperature: float = 1.0) -> Tensor:
    """Per clip, a two-way softmax pulls `feats` toward the debiased stream
    and away from the fused bias; averaged over clips (and any batch dim).

    Written as softplus((s_bias - s_debiased)/tau), the exact negative log
    of the two-way softmax on the positive side.
    """
    pos = cosine_score(feats, debiased)
    neg = cosine_score(feats, fused_bias)
    gap = ad.mul(ad.sub(neg, pos), 1.0 / temperature)
    return ad.tmean(ad.softplus(gap))
