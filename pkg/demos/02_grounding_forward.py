"""Backbone walkthrough: encoders, co-attention, boundary scores, and span
decoding on one synthetic sample (untrained weights; the point is the
shapes and the invariants, not the answer).

Run:  python3 demos/02_grounding_forward.py
"""

import numpy as np

from dtsg.boundary import clip_iou, decode_top_n
from dtsg.config import ModelConfig
from dtsg.data import Vocabulary
from dtsg.model import DTSGModel, FeatureCache, collate
from dtsg.synthetic import SyntheticSpec, generate_corpus

spec = SyntheticSpec(num_nouns=8, num_verbs=6, rare_pair_budget=4,
                     num_train=50, num_val=10, num_test=10, clip_count=24,
                     d_in=32, seed=2)
corpus = generate_corpus(spec)
vocab = Vocabulary.build(corpus.train)
cfg = ModelConfig(dim=32, heads=2, ffn_dim=64, clip_count=24, query_len=4,
                  d_in=32, vocab_size=len(vocab)).resolved()
model = DTSGModel(np.random.default_rng(0), cfg)

sample = corpus.train[3]
batch = collate([sample], vocab, cfg, FeatureCache(24, np.float64))
print(f"query: {' '.join(sample.query.tokens)}  ground truth clips "
      f"{sample.clip_segment}")
print(f"video batch {batch['video'].shape}, tokens {batch['tokens'].shape}")

video = model.backbone.video_encoder(batch["video"])
query = model.backbone.query_encoder(batch["tokens"], batch["qmask"])
print(f"encoded video {video.shape}, encoded query {query.shape}")

fused, trace = model.backbone.interaction(video, query, batch["qmask"],
                                          return_trace=True)
print(f"similarity {trace.sim.shape}; row-attention sums "
      f"{trace.row_attn.data.sum(-1).min():.6f}..{trace.row_attn.data.sum(-1).max():.6f}")
valid_cols = batch["qmask"][0]
col_sums = trace.col_attn.data[0].sum(0)[valid_cols]
print(f"column-attention sums over valid words: "
      f"{col_sums.min():.6f}..{col_sums.max():.6f}")
print(f"fused features {fused.shape}")

start, end = model.backbone.head(fused)
top = decode_top_n(start.data[0], end.data[0], n=5)
print("\ntop-5 decoded spans (start, end, score):")
for s, e, score in top:
    print(f"  ({s:2d}, {e:2d})  score {score:.4f}  "
          f"IoU vs gt {clip_iou((s, e), sample.clip_segment):.3f}")
