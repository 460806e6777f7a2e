"""Start/end boundary scoring, its supervision, and span decoding.

Two independent LSTMs sweep the fused features left to right; each clip's
logit comes from the clip feature concatenated with the running hidden
state.  Supervision is per-clip binary cross-entropy against one-hot
boundary labels by default (a softmax-over-clips variant is available
behind ``head_loss="softmax"``).  Decoding enumerates (start, end) pairs
and ranks them by the sum of the two sigmoid probabilities.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LSTM, Linear, Module


class BoundaryHead(Module):
    def __init__(self, rng, dim: int, dtype=np.float64):
        super().__init__()
        self.lstm_start = LSTM(rng, dim, dim, dtype=dtype)
        self.lstm_end = LSTM(rng, dim, dim, dtype=dtype)
        self.score_start = Linear(rng, 2 * dim, 1, dtype=dtype)
        self.score_end = Linear(rng, 2 * dim, 1, dtype=dtype)

    def __call__(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """(B, T, D) -> start and end logits, each (B, T)."""
        squeeze = feats.ndim == 2
        if squeeze:
            feats = ad.reshape(feats, (1,) + feats.shape)
        h_start = self.lstm_start(feats)
        h_end = self.lstm_end(feats)
        start = self.score_start(ad.concat([feats, h_start], axis=-1))
        end = self.score_end(ad.concat([feats, h_end], axis=-1))
        start = ad.reshape(start, start.shape[:-1])
        end = ad.reshape(end, end.shape[:-1])
        if squeeze:
            start = ad.reshape(start, start.shape[1:])
            end = ad.reshape(end, end.shape[1:])
        return start, end


def score_boundaries_many(heads: list[BoundaryHead], feats: list[Tensor],
                          ) -> list[tuple[Tensor, Tensor]]:
    """Run several same-shaped boundary heads in lockstep.

    All ten LSTM recurrences (start and end for each head) collapse into
    two stacked passes, which matters on small batches where the Python
    per-step overhead dominates.  Results match running each head alone.
    """
    if len(heads) != len(feats):
        raise ValueError("one feature tensor per head")
    k = len(heads)
    if k == 1:
        return [heads[0](feats[0])]
    b, t, d = feats[0].shape
    stacked = ad.concat([ad.reshape(f, (1, b, t, d)) for f in feats], axis=0)

    def stack_params(attr):
        w_x = ad.concat([ad.reshape(getattr(h, attr).w_x, (1, d, 4 * d))
                         for h in heads], axis=0)
        w_h = ad.concat([ad.reshape(getattr(h, attr).w_h, (1, d, 4 * d))
                         for h in heads], axis=0)
        bias = ad.concat([ad.reshape(getattr(h, attr).b, (1, 1, 4 * d))
                          for h in heads], axis=0)
        return w_x, w_h, bias

    h_start = ad.lstm_stacked(stacked, *stack_params("lstm_start"))
    h_end = ad.lstm_stacked(stacked, *stack_params("lstm_end"))
    out = []
    for i, head in enumerate(heads):
        hs = ad.reshape(ad.take(h_start, i), (b, t, d))
        he = ad.reshape(ad.take(h_end, i), (b, t, d))
        start = head.score_start(ad.concat([feats[i], hs], axis=-1))
        end = head.score_end(ad.concat([feats[i], he], axis=-1))
        out.append((ad.reshape(start, (b, t)), ad.reshape(end, (b, t))))
    return out


def boundary_labels(gt: np.ndarray, clip_count: int,
                    smooth_radius: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """One-hot (or radius-widened) start/end label arrays of shape (B, T)."""
    gt = np.atleast_2d(np.asarray(gt, np.int64))
    b = gt.shape[0]
    start = np.zeros((b, clip_count))
    end = np.zeros((b, clip_count))
    for k in range(b):
        s, e = gt[k]
        lo, hi = max(0, s - smooth_radius), min(clip_count - 1, s + smooth_radius)
        start[k, lo: hi + 1] = 1.0
        lo, hi = max(0, e - smooth_radius), min(clip_count - 1, e + smooth_radius)
        end[k, lo: hi + 1] = 1.0
    return start, end


def tsg_loss(start_logits: Tensor, end_logits: Tensor, gt,
             variant: str = "bce", smooth_radius: int = 0) -> Tensor:
    """Boundary supervision averaged over clips and the batch.

    bce: mean over 2T terms of y*log(sigmoid) + (1-y)*log(1-sigmoid),
    written with softplus so saturated logits stay finite.
    softmax: cross-entropy of the boundary position over the T clips,
    averaged over the start and end heads.
    """
    squeeze = start_logits.ndim == 1
    if squeeze:
        start_logits = ad.reshape(start_logits, (1,) + start_logits.shape)
        end_logits = ad.reshape(end_logits, (1,) + end_logits.shape)
    clip_count = start_logits.shape[-1]
    y_start, y_end = boundary_labels(gt, clip_count, smooth_radius)
    y_start = y_start.astype(start_logits.dtype)
    y_end = y_end.astype(start_logits.dtype)

    if variant == "bce":
        def bce(logits, y):
            # y*softplus(-c) + (1-y)*softplus(c)
            return ad.add(ad.mul(y, ad.softplus(ad.mul(logits, -1.0))),
                          ad.mul(1.0 - y, ad.softplus(logits)))
        per_clip = ad.add(bce(start_logits, y_start), bce(end_logits, y_end))
        return ad.tmean(ad.mul(ad.tmean(per_clip, axis=-1), 0.5))
    if variant == "softmax":
        gt_arr = np.atleast_2d(np.asarray(gt, np.int64))
        rows = np.arange(gt_arr.shape[0])
        ce_s = ad.sub(ad.logsumexp(start_logits, axis=-1),
                      ad.take(start_logits, (rows, gt_arr[:, 0])))
        ce_e = ad.sub(ad.logsumexp(end_logits, axis=-1),
                      ad.take(end_logits, (rows, gt_arr[:, 1])))
        return ad.tmean(ad.mul(ad.add(ce_s, ce_e), 0.5))
    raise ValueError(f"unknown head loss variant {variant!r}")


def decode_top_n(start_logits: np.ndarray, end_logits: np.ndarray, n: int,
                 max_len: int | None = None) -> list[tuple[int, int, float]]:
    """Top-n spans by sigmoid(start) + sigmoid(end).

    Candidates are all (s, e) with s <= e (and e - s < max_len when set).
    Ties break toward the smaller start, then the smaller end.  Fewer valid
    pairs than n returns them all.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    c_start = np.asarray(start_logits, np.float64)
    c_end = np.asarray(end_logits, np.float64)
    t = c_start.shape[0]
    p_start = 0.5 * (1.0 + np.tanh(0.5 * c_start))
    p_end = 0.5 * (1.0 + np.tanh(0.5 * c_end))
    score = p_start[:, None] + p_end[None, :]
    s_idx, e_idx = np.meshgrid(np.arange(t), np.arange(t), indexing="ij")
    valid = s_idx <= e_idx
    if max_len is not None and max_len > 0:
        valid &= (e_idx - s_idx) < max_len
    flat_s = s_idx[valid]
    flat_e = e_idx[valid]
    flat_score = score[valid]
    order = np.lexsort((flat_e, flat_s, -flat_score))
    top = order[:n]
    return [(int(flat_s[i]), int(flat_e[i]), float(flat_score[i]))
            for i in top]


def interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """IoU of two half-open intervals [start, end); 0 when disjoint."""
    (a0, a1), (b0, b1) = a, b
    if a1 < a0 or b1 < b0:
        raise ValueError("interval end before start")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


def clip_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """IoU of inclusive clip-index pairs, compared as [s, e+1) intervals."""
    return interval_iou((a[0], a[1] + 1), (b[0], b[1] + 1))
