"""Corpus walkthrough: generate a bias-planted corpus, inspect the on-disk
formats, map timestamps to clip indices, and split rare from common.

Run:  python3 demos/01_corpus_and_features.py
"""

import tempfile
from pathlib import Path

import numpy as np

from dtsg.config import DataConfig
from dtsg.data import (load_dataset, map_timestamps, read_features,
                       split_rare_common, word_frequency_table)
from dtsg.synthetic import (SyntheticSpec, corpus_to_disk,
                            distractor_overlap_rate, generate_corpus)

spec = SyntheticSpec(num_nouns=8, num_verbs=6, rare_pair_budget=4,
                     num_train=400, num_val=60, num_test=120,
                     clip_count=24, d_in=32, seed=5)
corpus = generate_corpus(spec)
print(f"generated {len(corpus.train)} train / {len(corpus.val)} val / "
      f"{len(corpus.test)} test samples")
print(f"designated rare pairs: {corpus.rare_pairs}")

# the planted shortcut: the high-norm distractor co-occurs with the target
# window often in train, rarely in test
print(f"distractor/target overlap rate: "
      f"train {distractor_overlap_rate(corpus.train, spec.salience_boost):.2f}"
      f" vs test {distractor_overlap_rate(corpus.test, spec.salience_boost):.2f}")

sample = corpus.train[0]
print(f"\nfirst sample: video {sample.video.id}, query "
      f"{' '.join(sample.query.tokens)} {sample.query.pos_tags}")
print(f"segment {sample.query.segment_seconds} s over "
      f"{sample.video.duration:.0f} s -> clips {sample.clip_segment}")
print("same mapping by hand:",
      map_timestamps(sample.query.segment_seconds, sample.video.duration,
                     spec.clip_count))

with tempfile.TemporaryDirectory() as tmp:
    corpus_to_disk(corpus, tmp)
    root = Path(tmp)
    print(f"\non disk: {sorted(p.name for p in root.iterdir())}")
    feat_file = next((root / "features").iterdir())
    feats = read_features(feat_file)
    print(f"{feat_file.name}: {feats.shape} {feats.dtype} "
          f"(binary: magic DTSG + u32 T + u32 D + f32 payload)")
    reloaded = load_dataset(root / "features", root / "train.jsonl",
                            DataConfig(clip_count=spec.clip_count,
                                       query_len=4))
    print(f"reloaded {len(reloaded)} samples, {reloaded.rejected_count} "
          f"rejected")

freq = word_frequency_table(corpus.train)
rare, common = split_rare_common(corpus.test, freq, threshold=10)
print(f"\ntest split by train-frequency rule (<10): "
      f"{len(rare)} rare, {len(common)} common")
least = sorted(freq.items(), key=lambda kv: kv[1])[:5]
print(f"least frequent train tokens: {least}")
