"""Miniature rare-split experiment: train the backbone alone and the full
debiased configuration on a small corpus with a planted salience shortcut,
then compare recall on the rare test queries.

This is a scaled-down version of the acceptance experiment (smaller corpus
and fewer epochs, one seed) so it finishes in a few minutes; expect the
direction of the gap, not its exact size.

Run:  python3 demos/05_rare_split_experiment.py
"""

import dataclasses

import numpy as np

from dtsg.config import LossToggles, ModelConfig, TrainConfig
from dtsg.data import split_rare_common, word_frequency_table
from dtsg.evaluation import evaluate, predict_dataset
from dtsg.sampling import mine_negatives
from dtsg.synthetic import SyntheticSpec, generate_corpus
from dtsg.training import model_from_checkpoint, train

spec = SyntheticSpec(num_nouns=10, num_verbs=6, rare_pair_budget=4,
                     salience_boost=4.0, train_correlation=0.9,
                     test_correlation=0.1, clip_count=32, d_in=64,
                     num_train=800, num_val=100, num_test=200, seed=7)
corpus = generate_corpus(spec)
print(f"corpus: {len(corpus.train)} train / {len(corpus.test)} test, "
      f"rare pairs {corpus.rare_pairs}")
table = mine_negatives(corpus.train)

mcfg = ModelConfig(dim=32, heads=2, ffn_dim=64, clip_count=32, query_len=4,
                   d_in=64, dtype="float32")
base = TrainConfig(epochs=20, batch_size=32, lr=2e-3, lambda_sample=3.0,
                   patience=100, seed=0)

freq = word_frequency_table(corpus.train)
rare, common = split_rare_common(corpus.test, freq)
splits = {"rare": rare, "common": common}

for name, toggles in (
        ("backbone-only", LossToggles(bias1=False, bias2=False, bias3=False,
                                      debias=False, contras=False,
                                      sample=False)),
        ("full debiased", LossToggles())):
    cfg = dataclasses.replace(base, toggles=toggles)
    print(f"\ntraining {name} ({cfg.epochs} epochs) ...")
    result = train(corpus.train, corpus.val, mcfg, cfg,
                   table if toggles.sample else None)
    model, _ = model_from_checkpoint(result.checkpoint)
    preds = predict_dataset(model, corpus.test, result.vocab, n=1)
    cells = evaluate(preds, corpus.test, ((1, 0.5),), splits)
    for c in cells:
        print(f"  {c.split:7s} R@1,IoU=0.5 {c.recall:5.1f}%  "
              f"({c.count} samples)")
