"""Shared test utilities: finite-difference gradient checking against model
parameters, and tiny deterministic model/corpus factories."""

import numpy as np

from dtsg import autodiff as ad
from dtsg.config import ModelConfig
from dtsg.data import (Dataset, GroundingSample, QueryAnnotation, RawVideo,
                       Vocabulary)


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(dim=16, heads=2, ffn_dim=24, clip_count=6, query_len=5,
                d_in=8, vocab_size=12, gate_hidden=8, scorer_hidden=8,
                dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


def param_grad_check(loss_fn, params, eps=1e-5, tol=1e-4):
    """loss_fn() -> Tensor scalar; checks every named parameter's analytic
    gradient against central finite differences.

    Per tensor, the worst entry error is normalized by the tensor's
    gradient magnitude (finite differences cannot resolve near-zero entries
    beyond their truncation noise).  Returns the max relative error.
    """
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for name, p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        aflat = analytic.ravel()
        max_abs_err = 0.0
        max_fd = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with ad.no_grad():
                hi = float(loss_fn().data)
            flat[i] = orig - eps
            with ad.no_grad():
                lo = float(loss_fn().data)
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            max_abs_err = max(max_abs_err, abs(aflat[i] - fd))
            max_fd = max(max_fd, abs(fd))
        scale = max(np.abs(aflat).max(initial=0.0), max_fd, 1e-6)
        rel = max_abs_err / scale
        worst = max(worst, rel)
        assert rel < tol, (f"{name}: max abs err {max_abs_err:.3g} "
                           f"over scale {scale:.3g} -> rel {rel:.3g}")
    return worst


def toy_grounding_sample(sample_id: str, tokens, tags, t_raw=8, d_in=4,
                         video_id=None, seed=0) -> GroundingSample:
    rng = np.random.default_rng(seed)
    vid = video_id or sample_id
    video = RawVideo(vid, float(t_raw),
                     rng.normal(size=(t_raw, d_in)).astype(np.float32))
    query = QueryAnnotation(tuple(tokens), tuple(tags), (0.0, 2.0))
    return GroundingSample(sample_id, video, query, (0, 1))


def toy_dataset(n=6, t_raw=8, d_in=4) -> Dataset:
    nouns = ["person", "dog", "vacuum", "book"]
    verbs = ["holding", "fixing", "reading"]
    samples = []
    for k in range(n):
        samples.append(toy_grounding_sample(
            f"s{k:02d}", [nouns[k % 4], verbs[k % 3]], ["NOUN", "VERB"],
            t_raw=t_raw, d_in=d_in, seed=k))
    return Dataset(samples, t_raw)


def toy_vocab() -> Vocabulary:
    return Vocabulary(["person", "dog", "vacuum", "book",
                       "holding", "fixing", "reading"])
