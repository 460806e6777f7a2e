"""Model composition: the grounding backbone used at inference, plus the
training-only debiasing branch and match scorer.

Every parameter carries a component tag (backbone / bias1 / bias2 / bias3 /
bim / debiased_module / sampler) so checkpoints can be filtered and the
inference path can be audited for parameter parity.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boundary import BoundaryHead, score_boundaries_many, tsg_loss
from .config import LossToggles, ModelConfig
from .crossmodal import CrossModalInteraction
from .data import Dataset, Vocabulary, downsample_video, NOUN, VERB
from .debias import (BiasIdentification, BiasedQueryModel, BiasedVideoModel,
                     DebiasedModule, feature_contrastive_loss, remove_bias)
from .encoders import QueryEncoder, VideoEncoder
from .nn import Module
from .sampling import MatchScorer, sample_loss

BACKBONE, BIAS1, BIAS2, BIAS3 = "backbone", "bias1", "bias2", "bias3"
BIM, DEBIASED, SAMPLER = "bim", "debiased_module", "sampler"


def np_dtype(name: str):
    return {"float64": np.float64, "float32": np.float32}[name]


class GroundingBackbone(Module):
    """Video encoder, query encoder, co-attention, and boundary head: the
    whole inference-time model."""

    def __init__(self, rng, cfg: ModelConfig, dtype=np.float64):
        super().__init__()
        self.video_encoder = VideoEncoder(rng, cfg, dtype=dtype)
        self.query_encoder = QueryEncoder(rng, cfg, dtype=dtype)
        self.interaction = CrossModalInteraction(rng, cfg.dim, dtype=dtype,
                                                 scaled=cfg.scaled_similarity)
        self.head = BoundaryHead(rng, cfg.dim, dtype=dtype)

    def features(self, video_feats, token_ids, qmask,
                 encoded_video: Tensor | None = None) -> Tensor:
        video = (encoded_video if encoded_video is not None
                 else self.video_encoder(video_feats))
        query = self.query_encoder(token_ids, qmask)
        return self.interaction(video, query, np.asarray(qmask, bool))

    def __call__(self, video_feats, token_ids, qmask,
                 ) -> tuple[Tensor, Tensor, Tensor]:
        feats = self.features(video_feats, token_ids, qmask)
        start, end = self.head(feats)
        return feats, start, end


class DTSGModel(Module):
    """Backbone plus whichever debiasing components the toggles enable."""

    def __init__(self, rng, cfg: ModelConfig,
                 toggles: LossToggles | None = None):
        super().__init__()
        cfg = cfg.resolved()
        toggles = toggles if toggles is not None else LossToggles()
        toggles.validate()
        dtype = np_dtype(cfg.dtype)
        self.cfg = cfg
        self.toggles = toggles
        self.backbone = GroundingBackbone(rng, cfg, dtype=dtype)
        if toggles.bias1:
            self.bias1 = BiasedVideoModel(rng, cfg, dtype=dtype)
        if toggles.bias2:
            self.bias2 = BiasedQueryModel(rng, cfg, dtype=dtype)
        if toggles.bias3:
            self.bias3 = BiasedQueryModel(rng, cfg, dtype=dtype)
        n_streams = int(toggles.bias1) + int(toggles.bias2) + int(toggles.bias3)
        if (toggles.debias or toggles.contras) and n_streams:
            self.bim = BiasIdentification(rng, cfg, n_streams, dtype=dtype)
        if toggles.debias:
            self.debiased = DebiasedModule(rng, cfg, dtype=dtype)
        if toggles.sample:
            self.scorer = MatchScorer(rng, cfg, dtype=dtype)

    def query_embedding_tables(self):
        """Every learned token table in the model (backbone and the two
        POS-query biased streams share the vocabulary)."""
        tables = [self.backbone.query_encoder.embed.table]
        if self.toggles.bias2:
            tables.append(self.bias2.query_encoder.embed.table)
        if self.toggles.bias3:
            tables.append(self.bias3.query_encoder.embed.table)
        return tables

    def load_pretrained_embeddings(self, path, vocab) -> int:
        """Overwrite embedding rows from a JSON-lines token-vector file;
        returns the number of rows replaced per table."""
        from .data import load_pretrained_embeddings
        patch, filled = load_pretrained_embeddings(path, vocab, self.cfg.dim)
        for table in self.query_embedding_tables():
            table.data[filled] = patch[filled].astype(table.data.dtype)
        return len(filled)

    # -- component tagging --------------------------------------------------
    _TAG_BY_ATTR = {"backbone": BACKBONE, "bias1": BIAS1, "bias2": BIAS2,
                    "bias3": BIAS3, "bim": BIM, "debiased": DEBIASED,
                    "scorer": SAMPLER}

    def tag_of(self, param_name: str) -> str:
        head = param_name.split(".", 1)[0]
        return self._TAG_BY_ATTR[head]

    def tagged_parameters(self) -> list[tuple[str, str, "Tensor"]]:
        return [(name, self.tag_of(name), p)
                for name, p in self.named_parameters()]

    def param_count_by_tag(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for name, tag, p in self.tagged_parameters():
            counts[tag] = counts.get(tag, 0) + int(np.prod(p.data.shape))
        return counts

    # -- training forward ----------------------------------------------------
    def training_losses(self, batch: dict, detach_override: bool | None = None,
                        return_internals: bool = False):
        """All enabled loss terms for one batch.

        `detach_override` forces the debias-head input's backbone detach on
        or off (the gradient audit needs it off so analytic gradients equal
        the true derivative of the evaluated function).
        """
        cfg = self.cfg
        toggles = self.toggles
        detach = (cfg.detach_debias_input if detach_override is None
                  else detach_override)
        losses: dict[str, Tensor] = {}
        internals: dict[str, object] = {}

        encoded_video = self.backbone.video_encoder(batch["video"])
        feats = self.backbone.features(batch["video"], batch["tokens"],
                                       batch["qmask"],
                                       encoded_video=encoded_video)
        # every enabled boundary head is scored in one stacked pass below
        head_jobs: list[tuple[str, object, Tensor]] = [
            ("tsg", self.backbone.head, feats)]

        streams: list[Tensor] = []
        if toggles.bias1:
            f1 = self.bias1.features(batch["video"])
            head_jobs.append(("bias1", self.bias1.head, f1))
            streams.append(f1)
        if toggles.bias2:
            f2 = self.bias2.features(batch["video"], batch["noun_tokens"],
                                     batch["noun_mask"])
            head_jobs.append(("bias2", self.bias2.head, f2))
            streams.append(f2)
        if toggles.bias3:
            f3 = self.bias3.features(batch["video"], batch["verb_tokens"],
                                     batch["verb_mask"])
            head_jobs.append(("bias3", self.bias3.head, f3))
            streams.append(f3)

        if streams and (toggles.debias or toggles.contras):
            gated, weights, fused = self.bim(streams)
            internals["gated"] = gated
            internals["fusion_weights"] = weights
            internals["fused_bias"] = fused
            if toggles.debias:
                base = feats.detach() if detach else feats
                head_in = remove_bias(base, fused)
                head_jobs.append(("debias", self.debiased.head,
                                  self.debiased.project(head_in)))
            if toggles.contras:
                debiased_full = remove_bias(feats, fused)
                internals["debiased"] = debiased_full
                losses["contras"] = feature_contrastive_loss(
                    feats, debiased_full, fused, cfg.contras_temperature)

        scored = score_boundaries_many([job[1] for job in head_jobs],
                                       [job[2] for job in head_jobs])
        for (name, _, _), (start_k, end_k) in zip(head_jobs, scored):
            losses[name] = tsg_loss(start_k, end_k, batch["gt"],
                                    cfg.head_loss, cfg.label_smooth_radius)
        start, end = scored[0]

        if toggles.sample:
            pos_score = self.scorer(feats)
            negv_feats = self.backbone.features(
                batch["negv_video"], batch["tokens"], batch["qmask"])
            negq_feats = self.backbone.features(
                batch["video"], batch["negq_tokens"], batch["negq_mask"],
                encoded_video=encoded_video)
            losses["sample"] = sample_loss(
                pos_score,
                [(self.scorer(negv_feats), batch["has_negv"]),
                 (self.scorer(negq_feats), batch["has_negq"])])

        internals["feats"] = feats
        internals["start"] = start
        internals["end"] = end
        if return_internals:
            return losses, internals
        return losses

    # -- inference ------------------------------------------------------------
    def predict_logits(self, video_feats, token_ids, qmask,
                       ) -> tuple[np.ndarray, np.ndarray]:
        """Backbone-only forward; the debiasing branch never runs here."""
        with ad.no_grad():
            _, start, end = self.backbone(video_feats, token_ids, qmask)
        return start.data, end.data

    def traced_inference_parameters(self, video_feats, token_ids, qmask,
                                    ) -> set[int]:
        """ids of every parameter the inference graph actually touches,
        collected by walking the recorded tape."""
        _, start, end = self.backbone(video_feats, token_ids, qmask)
        probe = ad.add(ad.tsum(start), ad.tsum(end))
        touched: set[int] = set()
        stack = [probe]
        seen: set[int] = set()
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node.requires_grad and not node._parents:
                touched.add(id(node))
            stack.extend(node._parents)
        return touched


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

class FeatureCache:
    """Per-video downsampled feature arrays in the model dtype."""

    def __init__(self, clip_count: int, dtype):
        self.clip_count = clip_count
        self.dtype = dtype
        self._store: dict[str, np.ndarray] = {}

    def get(self, video) -> np.ndarray:
        arr = self._store.get(video.id)
        if arr is None:
            arr = downsample_video(video.features,
                                   self.clip_count).astype(self.dtype)
            self._store[video.id] = arr
        return arr


def pos_filtered_ids(query, which: str, vocab: Vocabulary, length: int,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Token ids for the sample's NOUN-only or VERB-only query, in original
    order; an empty filter yields the reserved empty token."""
    toks = [t for t, g in zip(query.tokens, query.pos_tags) if g == which]
    return vocab.encode(toks, length)


def collate(samples, vocab: Vocabulary, cfg: ModelConfig,
            cache: FeatureCache, with_pos_queries: bool = True) -> dict:
    cfg = cfg.resolved()
    dtype = np_dtype(cfg.dtype)
    b = len(samples)
    m = cfg.query_len
    video = np.empty((b, cfg.clip_count, cfg.d_in), dtype)
    tokens = np.empty((b, m), np.int64)
    qmask = np.empty((b, m), bool)
    gt = np.empty((b, 2), np.int64)
    noun_tokens = np.empty((b, m), np.int64)
    noun_mask = np.empty((b, m), bool)
    verb_tokens = np.empty((b, m), np.int64)
    verb_mask = np.empty((b, m), bool)
    for k, s in enumerate(samples):
        video[k] = cache.get(s.video)
        tokens[k], qmask[k] = vocab.encode(s.query.tokens, m)
        gt[k] = s.clip_segment
        if with_pos_queries:
            noun_tokens[k], noun_mask[k] = pos_filtered_ids(
                s.query, NOUN, vocab, m)
            verb_tokens[k], verb_mask[k] = pos_filtered_ids(
                s.query, VERB, vocab, m)
    batch = {"video": video, "tokens": tokens, "qmask": qmask, "gt": gt,
             "sample_ids": [s.sample_id for s in samples]}
    if with_pos_queries:
        batch.update(noun_tokens=noun_tokens, noun_mask=noun_mask,
                     verb_tokens=verb_tokens, verb_mask=verb_mask)
    return batch


def attach_negatives(batch: dict, samples, table, dataset: Dataset,
                     vocab: Vocabulary, cfg: ModelConfig, cache: FeatureCache,
                     rng: np.random.Generator):
    """Draw one video negative and one query negative per sample from the
    mined table; absent candidates fall back to the sample's own data with
    the presence flag cleared (they then carry zero loss weight)."""
    from .sampling import sample_negatives

    cfg = cfg.resolved()
    b = len(samples)
    m = cfg.query_len
    negv_video = np.array(batch["video"], copy=True)
    negq_tokens = np.array(batch["tokens"], copy=True)
    negq_mask = np.array(batch["qmask"], copy=True)
    has_negv = np.zeros(b, bool)
    has_negq = np.zeros(b, bool)
    for k, s in enumerate(samples):
        neg_video, neg_query = sample_negatives(table, s.sample_id, rng,
                                                dataset)
        if neg_video is not None:
            negv_video[k] = cache.get(neg_video)
            has_negv[k] = True
        if neg_query is not None:
            negq_tokens[k], negq_mask[k] = vocab.encode(neg_query.tokens, m)
            has_negq[k] = True
    batch.update(negv_video=negv_video, negq_tokens=negq_tokens,
                 negq_mask=negq_mask, has_negv=has_negv, has_negq=has_negq)


def dummy_negatives(batch: dict):
    """Self-copies with presence flags off, for configs without mining."""
    b = batch["video"].shape[0]
    batch.update(negv_video=batch["video"], negq_tokens=batch["tokens"],
                 negq_mask=batch["qmask"], has_negv=np.zeros(b, bool),
                 has_negq=np.zeros(b, bool))
