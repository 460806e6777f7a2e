"""Synthetic bias-planted corpora.

Videos are sequences of event segments rendered as prototype vectors plus
noise; each query is a (noun, verb) pair naming one planted event, and the
ground truth is that event's clip run.  Two shortcuts are planted on
purpose:

* a high-norm *distractor* event co-occurs with the target window at a
  configurable rate that differs between train and test, so a model that
  merely finds the most salient clips looks good on train and falls apart
  on test;
* a set of *rare* nouns/verbs appears fewer than ``rare_threshold`` times
  in the training split, so per-token generalization is measurable via the
  rare/common split.

Generation is a pure function of the spec (including its seed): the same
spec always produces byte-identical corpora.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (Dataset, GroundingSample, QueryAnnotation, RawVideo,
                   map_timestamps, write_dataset, NOUN, VERB)


class InfeasibleSpec(ValueError):
    """The requested rare-pair budget cannot be met."""


@dataclass(frozen=True)
class SyntheticSpec:
    num_nouns: int = 12
    num_verbs: int = 8
    zipf_exponent: float = 1.0
    rare_pair_budget: int = 6
    salience_boost: float = 4.0        # distractor norm multiplier
    train_correlation: float = 0.9     # P(distractor overlaps target), train
    test_correlation: float = 0.1      # same, test split
    clip_count: int = 32               # T
    d_in: int = 64
    num_train: int = 2000
    num_val: int = 200
    num_test: int = 400
    rare_test_fraction: float = 0.5    # share of test samples with rare pairs
    noise_scale: float = 0.4
    min_event_len: int = 4
    max_event_len: int = 7
    rare_threshold: int = 10
    seed: int = 0

    def validate(self):
        if self.train_correlation == self.test_correlation:
            raise ValueError("train and test distractor correlation must differ")
        for name in ("train_correlation", "test_correlation"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1]")
        if self.salience_boost < 0:
            raise ValueError("salience_boost must be >= 0")
        if self.max_event_len * 3 > self.clip_count:
            raise ValueError("clip_count too small for three disjoint events")
        n_rare_nouns = (self.rare_pair_budget + 1) // 2
        n_rare_verbs = self.rare_pair_budget // 2
        if (n_rare_nouns > self.num_nouns - 2
                or n_rare_verbs > self.num_verbs - 2):
            raise InfeasibleSpec(
                f"rare_pair_budget {self.rare_pair_budget} exceeds the "
                f"combinatorial space of {self.num_nouns} nouns x "
                f"{self.num_verbs} verbs (need >= 2 common of each)")
        if self.rare_pair_budget * (self.rare_threshold - 1) > self.num_train:
            raise InfeasibleSpec("rare pairs cannot fit in the train split")


@dataclass
class SyntheticCorpus:
    train: Dataset
    val: Dataset
    test: Dataset
    rare_pairs: list[tuple[str, str]]
    spec: SyntheticSpec


def _noun_name(i: int) -> str:
    return f"obj{i:02d}"


def _verb_name(j: int) -> str:
    return f"act{j:02d}"


class _World:
    """Token prototypes and pair pools shared by all splits."""

    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.spec = spec
        d = spec.d_in
        scale = 1.0 / math.sqrt(d)
        self.noun_vecs = rng.normal(0.0, 1.0, (spec.num_nouns, d)) * scale
        self.verb_vecs = rng.normal(0.0, 1.0, (spec.num_verbs, d)) * scale
        proto = rng.normal(0.0, 1.0, d) * scale
        self.distractor_vec = proto * spec.salience_boost

        n_rare_nouns = (spec.rare_pair_budget + 1) // 2
        n_rare_verbs = spec.rare_pair_budget // 2
        self.common_nouns = list(range(spec.num_nouns - n_rare_nouns))
        self.rare_nouns = list(range(spec.num_nouns - n_rare_nouns,
                                     spec.num_nouns))
        self.common_verbs = list(range(spec.num_verbs - n_rare_verbs))
        self.rare_verbs = list(range(spec.num_verbs - n_rare_verbs,
                                     spec.num_verbs))

        # each rare token lives in exactly one pair, so its train frequency
        # equals that pair's sample count
        self.rare_pairs: list[tuple[int, int]] = []
        for i in self.rare_nouns:
            self.rare_pairs.append((i, int(rng.choice(self.common_verbs))))
        for j in self.rare_verbs:
            self.rare_pairs.append((int(rng.choice(self.common_nouns)), j))

        self.common_pairs = [(i, j) for i in self.common_nouns
                             for j in self.common_verbs]
        ranks = rng.permutation(len(self.common_pairs)) + 1
        weights = ranks.astype(np.float64) ** (-spec.zipf_exponent)
        self.common_weights = weights / weights.sum()

    def event_vec(self, pair: tuple[int, int]) -> np.ndarray:
        return self.noun_vecs[pair[0]] + self.verb_vecs[pair[1]]

    def pair_tokens(self, pair: tuple[int, int]) -> tuple[str, str]:
        return _noun_name(pair[0]), _verb_name(pair[1])

    def confuser_for(self, pair: tuple[int, int],
                     rng: np.random.Generator) -> tuple[int, int]:
        """A pair sharing exactly one token with `pair` (50/50 which)."""
        noun, verb = pair
        if rng.random() < 0.5:
            others = [j for j in self.common_verbs if j != verb]
            return (noun, int(rng.choice(others)))
        others = [i for i in self.common_nouns if i != noun]
        return (int(rng.choice(others)), verb)


def _place_runs(lengths: list[int], clip_count: int,
                rng: np.random.Generator) -> list[tuple[int, int]]:
    """Disjoint (start, end_inclusive) runs; rejection sampling with a
    deterministic retry budget."""
    for _ in range(200):
        runs: list[tuple[int, int]] = []
        ok = True
        for length in lengths:
            for _ in range(50):
                s = int(rng.integers(0, clip_count - length + 1))
                e = s + length - 1
                if all(e < rs or s > re for rs, re in runs):
                    runs.append((s, e))
                    break
            else:
                ok = False
                break
        if ok:
            return runs
    raise RuntimeError("could not place disjoint event runs")


def _make_sample(world: _World, pair: tuple[int, int], aligned: bool,
                 video_id: str, rng: np.random.Generator) -> GroundingSample:
    spec = world.spec
    t, d = spec.clip_count, spec.d_in
    lengths = list(rng.integers(spec.min_event_len, spec.max_event_len + 1,
                                size=3))
    runs = _place_runs(lengths, t, rng)
    target, confuser_run, spare = runs

    feats = rng.normal(0.0, 1.0, (t, d)) * (spec.noise_scale / math.sqrt(d))
    feats[target[0]: target[1] + 1] += world.event_vec(pair)
    confuser = world.confuser_for(pair, rng)
    feats[confuser_run[0]: confuser_run[1] + 1] += world.event_vec(confuser)
    distractor_run = target if aligned else spare
    feats[distractor_run[0]: distractor_run[1] + 1] += world.distractor_vec

    duration = float(t)
    seconds = (float(target[0]), float(target[1] + 1))
    noun, verb = world.pair_tokens(pair)
    query = QueryAnnotation((noun, verb), (NOUN, VERB), seconds)
    video = RawVideo(video_id, duration, feats.astype(np.float32))
    clip_seg = map_timestamps(seconds, duration, t)
    return GroundingSample(f"{video_id}#0", video, query, clip_seg)


def _draw_split(world: _World, pairs: list[tuple[int, int]],
                correlation: float, prefix: str,
                rng: np.random.Generator) -> Dataset:
    samples = []
    for k, pair in enumerate(pairs):
        aligned = bool(rng.random() < correlation)
        samples.append(_make_sample(world, pair, aligned,
                                    f"{prefix}{k:05d}", rng))
    return Dataset(samples, world.spec.clip_count)


def generate_corpus(spec: SyntheticSpec) -> SyntheticCorpus:
    """Build train/val/test splits; deterministic in the spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    world = _World(spec, rng)

    # train pair sequence: every rare pair appears just under the rarity
    # threshold (enough signal for few-shot token learning, still rare),
    # the rest by zipf-weighted draws over the common pool
    lo = max(2, spec.rare_threshold - 4)
    rare_counts = rng.integers(lo, spec.rare_threshold,
                               size=len(world.rare_pairs))
    train_pairs: list[tuple[int, int]] = []
    for pair, count in zip(world.rare_pairs, rare_counts):
        train_pairs.extend([pair] * int(count))
    n_common = spec.num_train - len(train_pairs)
    idx = rng.choice(len(world.common_pairs), size=n_common,
                     p=world.common_weights)
    train_pairs.extend(world.common_pairs[i] for i in idx)
    order = rng.permutation(len(train_pairs))
    train_pairs = [train_pairs[i] for i in order]

    val_idx = rng.choice(len(world.common_pairs), size=spec.num_val,
                         p=world.common_weights)
    val_pairs = [world.common_pairs[i] for i in val_idx]

    n_rare_test = int(round(spec.num_test * spec.rare_test_fraction))
    test_pairs = [world.rare_pairs[int(i)] for i in
                  rng.integers(0, len(world.rare_pairs), size=n_rare_test)]
    common_idx = rng.choice(len(world.common_pairs),
                            size=spec.num_test - n_rare_test,
                            p=world.common_weights)
    test_pairs.extend(world.common_pairs[i] for i in common_idx)
    order = rng.permutation(len(test_pairs))
    test_pairs = [test_pairs[i] for i in order]

    train = _draw_split(world, train_pairs, spec.train_correlation, "syntr", rng)
    val = _draw_split(world, val_pairs, spec.train_correlation, "synva", rng)
    test = _draw_split(world, test_pairs, spec.test_correlation, "synte", rng)
    rare_named = [world.pair_tokens(p) for p in world.rare_pairs]
    return SyntheticCorpus(train, val, test, rare_named, spec)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """The (train, test) pair; `generate_corpus` also exposes the val split."""
    corpus = generate_corpus(spec)
    return corpus.train, corpus.test


def distractor_overlap_rate(dataset: Dataset, salience_boost: float) -> float:
    """Fraction of samples whose distractor run overlaps the ground-truth
    window, measured from the data itself: distractor clips are found by
    thresholding clip norms at 60% of the planted salient norm."""
    threshold = 0.6 * salience_boost
    hits = 0
    for s in dataset:
        norms = np.linalg.norm(s.video.features.astype(np.float64), axis=1)
        salient = np.flatnonzero(norms > threshold)
        lo, hi = s.clip_segment
        if salient.size and ((salient >= lo) & (salient <= hi)).any():
            hits += 1
    return hits / len(dataset)


# ---------------------------------------------------------------------------
# disk layout for cmd_generate
# ---------------------------------------------------------------------------

def spec_from_flat(values: dict) -> SyntheticSpec:
    fields = {f.name for f in dataclasses.fields(SyntheticSpec)}
    unknown = set(values) - fields
    if unknown:
        raise KeyError(f"unknown synthetic spec keys: {sorted(unknown)}")
    return SyntheticSpec(**values)


def corpus_to_disk(corpus: SyntheticCorpus, out_dir: str | Path):
    """Write the corpus in the standard on-disk layout plus a provenance
    manifest (spec + seed) sufficient to regenerate it byte-for-byte."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", corpus.train), ("val", corpus.val),
                        ("test", corpus.test)):
        write_dataset(split, out_dir, annotations_name=f"{name}.jsonl")
    manifest = {
        "spec": dataclasses.asdict(corpus.spec),
        "rare_pairs": [list(p) for p in corpus.rare_pairs],
        "sizes": {"train": len(corpus.train), "val": len(corpus.val),
                  "test": len(corpus.test)},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
