"""Offline mining of contrastive video/query negatives and the sample-level
contrastive loss.

Two queries are contrastive when they differ by exactly one substitution in
their noun multisets with identical verbs, or exactly one substitution in
their verb multisets with identical nouns.  For a positive pair, a mined
candidate contributes its video (a near-miss video for the same query) and
its query (a near-miss query for the same video); candidates sharing the
positive's video are excluded.  Mining runs once per corpus, before
training, and the table is persisted as JSON.
"""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .data import Dataset, NOUN, QueryAnnotation, RawVideo, VERB
from .nn import MLP, Module


def extract_pos_sets(query: QueryAnnotation,
                     ) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Order-preserving (nouns, verbs) extraction by tag."""
    nouns = tuple(t for t, g in zip(query.tokens, query.pos_tags) if g == NOUN)
    verbs = tuple(t for t, g in zip(query.tokens, query.pos_tags) if g == VERB)
    return nouns, verbs


def _single_substitution(a: tuple[str, ...], b: tuple[str, ...]) -> bool:
    """Multisets differ by replacing exactly one element with another."""
    ca, cb = Counter(a), Counter(b)
    extra_a = ca - cb
    extra_b = cb - ca
    return sum(extra_a.values()) == 1 and sum(extra_b.values()) == 1


def is_contrastive(qa: QueryAnnotation, qb: QueryAnnotation) -> bool:
    """The two rules are mutually exclusive: a noun substitution requires
    identical verbs and vice versa."""
    na, va = extract_pos_sets(qa)
    nb, vb = extract_pos_sets(qb)
    noun_sub = _single_substitution(na, nb) and Counter(va) == Counter(vb)
    verb_sub = _single_substitution(va, vb) and Counter(na) == Counter(nb)
    return noun_sub or verb_sub


class NegativeTable:
    """sample_id -> candidate sample ids usable as video / query negatives."""

    def __init__(self, entries: dict[str, dict[str, list[str]]]):
        self.entries = entries

    def neg_videos(self, sample_id: str) -> list[str]:
        return self.entries.get(sample_id, {}).get("neg_videos", [])

    def neg_queries(self, sample_id: str) -> list[str]:
        return self.entries.get(sample_id, {}).get("neg_queries", [])

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.entries, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "NegativeTable":
        return cls(json.loads(Path(path).read_text()))


def mine_negatives(dataset: Dataset) -> NegativeTable:
    """Exhaustive pairwise mining under the single-substitution rules.

    Deterministic and independent of dataset iteration order: samples are
    canonically sorted before comparison and candidate lists stay sorted.
    """
    samples = sorted(dataset, key=lambda s: s.sample_id)
    keys = [extract_pos_sets(s.query) for s in samples]
    counters = [(Counter(n), Counter(v)) for n, v in keys]
    entries: dict[str, dict[str, list[str]]] = {
        s.sample_id: {"neg_videos": [], "neg_queries": []} for s in samples}
    n = len(samples)
    for i in range(n):
        ni, vi = keys[i]
        cni, cvi = counters[i]
        for k in range(i + 1, n):
            nk, vk = keys[k]
            cnk, cvk = counters[k]
            noun_sub = cvi == cvk and _single_substitution(ni, nk)
            verb_sub = cni == cnk and _single_substitution(vi, vk)
            if not (noun_sub or verb_sub):
                continue
            if samples[i].video.id == samples[k].video.id:
                continue
            entries[samples[i].sample_id]["neg_videos"].append(
                samples[k].sample_id)
            entries[samples[i].sample_id]["neg_queries"].append(
                samples[k].sample_id)
            entries[samples[k].sample_id]["neg_videos"].append(
                samples[i].sample_id)
            entries[samples[k].sample_id]["neg_queries"].append(
                samples[i].sample_id)
    return NegativeTable(entries)


def sample_negatives(table: NegativeTable, sample_id: str,
                     rng: np.random.Generator, dataset: Dataset,
                     ) -> tuple[RawVideo | None, QueryAnnotation | None]:
    """Independent uniform draws from the two candidate lists; None for an
    empty list (the sample then contributes no sample-contrastive term)."""
    vids = table.neg_videos(sample_id)
    qids = table.neg_queries(sample_id)
    neg_video = None
    neg_query = None
    if vids:
        pick = vids[int(rng.integers(0, len(vids)))]
        neg_video = dataset.by_id(pick).video
    if qids:
        pick = qids[int(rng.integers(0, len(qids)))]
        neg_query = dataset.by_id(pick).query
    return neg_video, neg_query


class MatchScorer(Module):
    """Per-clip alignment logit (D -> hidden -> 1, tanh hidden) max-pooled
    over clips into one matchness score per sequence."""

    def __init__(self, rng, cfg: ModelConfig, dtype=np.float64):
        super().__init__()
        self.mlp = MLP(rng, [cfg.dim, cfg.scorer_hidden, 1],
                       activation="tanh", dtype=dtype)

    def __call__(self, feats: Tensor) -> Tensor:
        """(B, T, D) -> (B,) or (T, D) -> scalar-shaped (,) score."""
        logits = self.mlp(feats)
        logits = ad.reshape(logits, logits.shape[:-1])
        return ad.amax(logits, axis=-1)


def sample_loss(pos_score: Tensor,
                neg_scores: list[tuple[Tensor, np.ndarray]]) -> Tensor:
    """Softmax contrast of the positive pair's match score against the
    present negatives' scores, averaged over the batch.

    Each negative comes with a per-sample presence mask; absent entries are
    pushed to -1e30 so they carry exactly zero softmax weight, which also
    makes a sample with no negatives contribute exactly 0.
    """
    pos = ad.reshape(pos_score, (-1, 1))
    cols = [pos]
    for scores, present in neg_scores:
        offset = np.where(np.asarray(present, bool), 0.0, -1e30)
        col = ad.reshape(scores, (-1, 1))
        cols.append(ad.add(col, offset.reshape(-1, 1)))
    logits = ad.concat(cols, axis=1)
    per_sample = ad.sub(ad.logsumexp(logits, axis=1),
                        ad.reshape(pos, (-1,)))
    return ad.tmean(per_sample)
