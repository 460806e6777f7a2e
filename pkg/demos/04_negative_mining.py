"""Contrastive sampling walkthrough: which query pairs count as negatives,
what the mined table looks like, and how the sample-level loss reacts.

Run:  python3 demos/04_negative_mining.py
"""

import numpy as np

from dtsg.autodiff import Tensor
from dtsg.data import Dataset, GroundingSample, QueryAnnotation, RawVideo
from dtsg.sampling import (extract_pos_sets, is_contrastive, mine_negatives,
                           sample_loss, sample_negatives)


def make(sid, words, tags):
    video = RawVideo(sid, 8.0, np.zeros((8, 4), np.float32))
    return GroundingSample(sid, video,
                           QueryAnnotation(tuple(words), tuple(tags),
                                           (0.0, 2.0)), (0, 1))


corpus = Dataset([
    make("q1", ["person", "holding", "vacuum"], ["NOUN", "VERB", "NOUN"]),
    make("q2", ["person", "fixing", "vacuum"], ["NOUN", "VERB", "NOUN"]),
    make("q3", ["person", "holding", "book"], ["NOUN", "VERB", "NOUN"]),
    make("q4", ["dog", "fixing", "book"], ["NOUN", "VERB", "NOUN"]),
], 8)

for s in corpus:
    nouns, verbs = extract_pos_sets(s.query)
    print(f"{s.sample_id}: {' '.join(s.query.tokens):24s} "
          f"nouns={nouns} verbs={verbs}")

print("\npairwise rule (single noun substitution XOR single verb "
      "substitution):")
for a in corpus:
    for b in corpus:
        if a.sample_id < b.sample_id:
            mark = "negative pair" if is_contrastive(a.query, b.query) \
                else "-"
            print(f"  {a.sample_id} vs {b.sample_id}: {mark}")

table = mine_negatives(corpus)
print("\nmined table:")
for sid in sorted(table.entries):
    print(f"  {sid}: neg videos from {table.neg_videos(sid)}, "
          f"neg queries from {table.neg_queries(sid)}")

rng = np.random.default_rng(0)
video, query = sample_negatives(table, "q1", rng, corpus)
print(f"\ndraw for q1 -> video {video.id}, query {' '.join(query.tokens)}")

print("\nsample loss intuition (match scores g):")
pos = Tensor(np.array([1.0]))
present = np.array([True])
for gv in (1.0, 0.0, -2.0):
    loss = sample_loss(pos, [(Tensor(np.array([gv])), present),
                             (Tensor(np.array([gv])), present)])
    print(f"  g_pos=1.0, both negatives at {gv:+.1f} -> "
          f"loss {loss.item():.4f}")
