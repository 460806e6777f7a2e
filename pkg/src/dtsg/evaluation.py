"""Recall metrics over a grid of (n, IoU) cells, rare/common breakdowns,
prediction dumps, and inference-cost reports."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boundary import clip_iou, decode_top_n
from .data import Dataset, Vocabulary
from .model import DTSGModel, FeatureCache, collate, np_dtype

DEFAULT_GRID = ((1, 0.5), (1, 0.7), (5, 0.5), (5, 0.7))


@dataclass
class MetricCell:
    split: str
    n: int
    m: float
    recall: float      # percentage in [0, 100]
    hits: int
    count: int


class PredictionMismatch(ValueError):
    """Prediction ids do not line up with the dataset."""


def recall_at(predictions: list[list[tuple[int, int, float]]],
              gts: list[tuple[int, int]], n: int, m: float,
              strict: bool = True) -> float:
    """Percentage of samples whose first n predictions contain a span with
    IoU larger than m (strictly, by default).  Shorter prediction lists are
    used as-is."""
    if len(predictions) != len(gts):
        raise ValueError("predictions and ground truths differ in length")
    if not predictions:
        return 0.0
    hits = 0
    for preds, gt in zip(predictions, gts):
        if not preds:
            raise ValueError("every sample needs at least one prediction")
        best = max(clip_iou((s, e), gt) for s, e, _ in preds[:n])
        if (best > m) if strict else (best >= m):
            hits += 1
    return 100.0 * hits / len(predictions)


def predict_dataset(model: DTSGModel, dataset: Dataset, vocab: Vocabulary,
                    n: int = 5, batch_size: int = 64,
                    cache: FeatureCache | None = None,
                    ) -> dict[str, list[tuple[int, int, float]]]:
    """Backbone-only top-n spans for every sample, keyed by sample id."""
    mcfg = model.cfg
    cache = cache or FeatureCache(mcfg.clip_count, np_dtype(mcfg.dtype))
    out: dict[str, list[tuple[int, int, float]]] = {}
    samples = dataset.samples
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo: lo + batch_size]
        batch = collate(chunk, vocab, mcfg, cache, with_pos_queries=False)
        start, end = model.predict_logits(batch["video"], batch["tokens"],
                                          batch["qmask"])
        for k, s in enumerate(chunk):
            out[s.sample_id] = decode_top_n(start[k], end[k], n,
                                            mcfg.max_segment_len or None)
    return out


def write_predictions(preds: dict[str, list], path: str | Path):
    with open(path, "w") as fh:
        for sid in sorted(preds):
            fh.write(json.dumps({"sample_id": sid,
                                 "topn": [list(p) for p in preds[sid]]}) + "\n")


def load_predictions(path: str | Path) -> dict[str, list]:
    out: dict[str, list] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["sample_id"]] = [tuple(p) for p in rec["topn"]]
    return out


def evaluate(predictions: dict[str, list], dataset: Dataset,
             grid=DEFAULT_GRID, splits: dict[str, Dataset] | None = None,
             strict: bool = True) -> list[MetricCell]:
    """The full metric grid on the whole set and any named sub-splits.
    Ids must match the dataset exactly; a mismatch is fatal and lists them."""
    want = {s.sample_id for s in dataset}
    have = set(predictions)
    if want - have or have - want:
        missing = sorted(want - have)[:10]
        stray = sorted(have - want)[:10]
        raise PredictionMismatch(
            f"prediction/dataset id mismatch; missing={missing} stray={stray}")
    named: list[tuple[str, Dataset]] = [("all", dataset)]
    if splits:
        named.extend(sorted(splits.items()))
    cells = []
    for split_name, subset in named:
        preds = [predictions[s.sample_id] for s in subset]
        gts = [s.clip_segment for s in subset]
        for n, m in grid:
            if preds:
                pct = recall_at(preds, gts, n, m, strict)
                hits = round(pct * len(preds) / 100.0)
            else:
                pct, hits = 0.0, 0
            cells.append(MetricCell(split_name, n, m, pct, int(hits),
                                    len(preds)))
    return cells


def write_report_csv(cells: list[MetricCell], path: str | Path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "n", "m", "recall", "count"])
        for c in cells:
            writer.writerow([c.split, c.n, c.m, f"{c.recall:.4f}", c.count])


def write_split_plot(cells: list[MetricCell], csv_path: str | Path,
                     png_path: str | Path):
    """Bar data (CSV) and a rendered chart of recall per split per cell."""
    splits = sorted({c.split for c in cells})
    keys = sorted({(c.n, c.m) for c in cells})
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", *splits])
        table = {}
        for c in cells:
            table[(c.n, c.m, c.split)] = c.recall
        for n, m in keys:
            writer.writerow([f"R@{n},IoU={m}",
                             *[f"{table.get((n, m, s), 0.0):.4f}"
                               for s in splits]])
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(keys), 3.6))
    width = 0.8 / max(1, len(splits))
    x = np.arange(len(keys))
    for i, split in enumerate(splits):
        vals = [table.get((n, m, split), 0.0) for n, m in keys]
        ax.bar(x + i * width, vals, width, label=split)
    ax.set_xticks(x + width * (len(splits) - 1) / 2)
    ax.set_xticklabels([f"R@{n}\nIoU={m}" for n, m in keys])
    ax.set_ylabel("recall (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# inference cost
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    mean_latency: float          # seconds per sample
    std_latency: float
    param_counts: dict[str, int]
    touched_params: int          # parameters reachable from the inference graph
    reps: int


def benchmark_inference(model: DTSGModel, dataset: Dataset,
                        vocab: Vocabulary, reps: int = 5,
                        warmup: int = 1, batch_size: int = 64) -> BenchReport:
    """Wall-clock per-sample latency (warm-up reps excluded) plus parameter
    counts by component.  Asserts that the inference graph touches exactly
    the backbone's tensors."""
    mcfg = model.cfg
    cache = FeatureCache(mcfg.clip_count, np_dtype(mcfg.dtype))
    probe = collate(dataset.samples[:1], vocab, mcfg, cache,
                    with_pos_queries=False)
    touched = model.traced_inference_parameters(
        probe["video"], probe["tokens"], probe["qmask"])
    backbone_ids = {id(p) for name, tag, p in model.tagged_parameters()
                    if tag == "backbone"}
    if touched != backbone_ids:
        raise AssertionError(
            "inference graph touched non-backbone parameters")
    touched_count = sum(int(np.prod(p.data.shape))
                        for name, tag, p in model.tagged_parameters()
                        if id(p) in touched)

    timings = []
    for rep in range(warmup + reps):
        t0 = time.perf_counter()
        predict_dataset(model, dataset, vocab, n=1, batch_size=batch_size,
                        cache=cache)
        dt = time.perf_counter() - t0
        if rep >= warmup:
            timings.append(dt / max(1, len(dataset)))
    arr = np.asarray(timings)
    return BenchReport(float(arr.mean()), float(arr.std()),
                       model.param_count_by_tag(), touched_count, reps)
