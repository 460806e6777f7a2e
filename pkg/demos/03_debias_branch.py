"""Debiasing branch walkthrough: the three impoverished streams, the
sigmoid gates, the fusion weights, the subtraction, and the two
contrastive losses (training-only machinery; inference never sees it).

Run:  python3 demos/03_debias_branch.py
"""

import numpy as np

from dtsg.config import ModelConfig, TrainConfig
from dtsg.data import Vocabulary
from dtsg.model import (DTSGModel, FeatureCache, attach_negatives, collate)
from dtsg.sampling import mine_negatives
from dtsg.synthetic import SyntheticSpec, generate_corpus
from dtsg.training import total_loss

spec = SyntheticSpec(num_nouns=8, num_verbs=6, rare_pair_budget=4,
                     num_train=60, num_val=10, num_test=10, clip_count=24,
                     d_in=32, seed=4)
corpus = generate_corpus(spec)
vocab = Vocabulary.build(corpus.train)
cfg = ModelConfig(dim=32, heads=2, ffn_dim=64, clip_count=24, query_len=4,
                  d_in=32, vocab_size=len(vocab)).resolved()
model = DTSGModel(np.random.default_rng(0), cfg)
print("parameters by component:", model.param_count_by_tag())

cache = FeatureCache(24, np.float64)
samples = corpus.train.samples[:4]
batch = collate(samples, vocab, cfg, cache)
table = mine_negatives(corpus.train)
attach_negatives(batch, samples, table, corpus.train, vocab, cfg, cache,
                 np.random.default_rng(0))
print("noun-only query ids (row 0):",
      batch["noun_tokens"][0][batch["noun_mask"][0]])
print("verb-only query ids (row 0):",
      batch["verb_tokens"][0][batch["verb_mask"][0]])

parts, internals = model.training_losses(batch, return_internals=True)
weights = internals["fusion_weights"].data
print(f"\nfusion weights shape {weights.shape}; per-clip rows sum to "
      f"{weights.sum(-1).min():.6f}..{weights.sum(-1).max():.6f}")
print(f"mean weight per stream (video-only, nouns, verbs): "
      f"{weights.mean(axis=(0, 1)).round(3)}")

feats = internals["feats"].data
fused = internals["fused_bias"].data
debiased = internals["debiased"].data
print(f"||features|| {np.linalg.norm(feats):.2f}, "
      f"||fused bias|| {np.linalg.norm(fused):.2f}, "
      f"||debiased|| {np.linalg.norm(debiased):.2f}")
assert np.array_equal(debiased, feats - fused)

print("\nloss terms:")
for name, value in parts.items():
    print(f"  {name:8s} {float(value.data):.4f}")
combined = total_loss(parts, TrainConfig())
print(f"combined objective: {float(combined.data):.4f}")

# the inference path never touches any of this: trace it
probe = collate(samples[:1], vocab, cfg, cache, with_pos_queries=False)
touched = model.traced_inference_parameters(probe["video"], probe["tokens"],
                                            probe["qmask"])
backbone_ids = {id(p) for _, tag, p in model.tagged_parameters()
                if tag == "backbone"}
print(f"\ninference graph touches {len(touched)} tensors; "
      f"all backbone: {touched == backbone_ids}")
