"""Training engine: the combined objective, seeded Adam optimization with
linear learning-rate decay and global-norm clipping, early stopping on
validation recall, checkpointing, and the finite-difference gradient audit.

Runs are a pure function of (configs, corpus, seed): batch order, negative
draws, and parameter initialization all derive from dedicated seeded
generators, and the math is single-threaded numpy.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boundary import clip_iou, decode_top_n, tsg_loss
from .checkpoint import Checkpoint, save_checkpoint
from .config import (LossToggles, ModelConfig, TrainConfig, config_hash,
                     flatten_configs, DataConfig)
from .data import Dataset, Vocabulary
from .model import (DTSGModel, FeatureCache, attach_negatives, collate,
                    dummy_negatives, np_dtype)
from .nn import Parameter, clip_grad_norm
from .sampling import NegativeTable

logger = logging.getLogger(__name__)

LOSS_ORDER = ("tsg", "bias1", "bias2", "bias3", "debias", "contras", "sample")


class TrainingDiverged(RuntimeError):
    def __init__(self, part: str):
        super().__init__(f"non-finite loss in component {part!r}")
        self.part = part


def total_loss(parts: dict[str, Tensor | float],
               cfg: TrainConfig) -> Tensor:
    """Sum of the five supervised terms plus the weighted contrastive pair;
    absent parts contribute zero.  A non-finite part aborts, naming it."""
    for name, value in parts.items():
        v = value.data if isinstance(value, Tensor) else value
        if not np.isfinite(v).all():
            raise TrainingDiverged(name)
    weights = {"contras": cfg.lambda_contras, "sample": cfg.lambda_sample}
    total: Tensor | None = None
    for name in LOSS_ORDER:
        if name not in parts:
            continue
        term = parts[name] if isinstance(parts[name], Tensor) \
            else ad.as_tensor(parts[name])
        if name in weights:
            term = ad.mul(term, weights[name])
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("no loss parts enabled")
    return total


class Adam:
    def __init__(self, named_params: list[tuple[str, Parameter]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = named_params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in named_params}

    def step(self, lr: float):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.named_params:
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * (p.grad * p.grad)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[name + ".m"] = self.m[name]
            out[name + ".v"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step: int):
        for name in self.m:
            self.m[name] = np.array(tensors[name + ".m"], copy=True)
            self.v[name] = np.array(tensors[name + ".v"], copy=True)
        self.step_count = step


@dataclass
class EpochLog:
    epoch: int
    lr: float
    losses: dict[str, float]
    val_recall: float
    seconds: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochLog]
    best_epoch: int
    best_val_recall: float
    vocab: Vocabulary
    stopped_early: bool = False


def build_checkpoint(model: DTSGModel, optimizer: Adam | None, epoch: int,
                     cfg_hash: str, rng_state: dict | None,
                     extra: dict | None = None) -> Checkpoint:
    tensors = {}
    tags = {}
    for name, tag, p in model.tagged_parameters():
        tensors[name] = np.array(p.data, copy=True)
        tags[name] = tag
    opt_tensors = {}
    opt_meta = {}
    if optimizer is not None:
        opt_tensors = {k: np.array(v, copy=True)
                       for k, v in optimizer.state_tensors().items()}
        opt_meta = {"step": optimizer.step_count}
    return Checkpoint(tensors=tensors, tags=tags, epoch=epoch,
                      config_hash=cfg_hash, rng_state=rng_state,
                      opt_tensors=opt_tensors, opt_meta=opt_meta,
                      extra=extra or {})


def model_from_checkpoint(ckpt: Checkpoint, vocab_size: int | None = None,
                          ) -> tuple[DTSGModel, ModelConfig]:
    """Rebuild a model skeleton from the stored configs and load weights.
    Works for full checkpoints and backbone-only exports alike."""
    mcfg = ModelConfig(**ckpt.extra["model_config"])
    if vocab_size is not None:
        mcfg.vocab_size = vocab_size
    if ckpt.extra.get("exported"):
        toggles = LossToggles(bias1=False, bias2=False, bias3=False,
                              debias=False, contras=False, sample=False)
    else:
        toggles = LossToggles(**ckpt.extra.get("toggles", {}))
    model = DTSGModel(np.random.default_rng(0), mcfg, toggles)
    model.load_state_dict(ckpt.tensors)
    return model, mcfg


def validation_recall(model: DTSGModel, dataset: Dataset, vocab: Vocabulary,
                      cache: FeatureCache, batch_size: int = 64,
                      iou_threshold: float = 0.5) -> float:
    """Top-1 recall at the given IoU threshold, fraction in [0, 1]."""
    if len(dataset) == 0:
        return 0.0
    mcfg = model.cfg
    hits = 0
    samples = dataset.samples
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo: lo + batch_size]
        batch = collate(chunk, vocab, mcfg, cache, with_pos_queries=False)
        start, end = model.predict_logits(batch["video"], batch["tokens"],
                                          batch["qmask"])
        for k, s in enumerate(chunk):
            top = decode_top_n(start[k], end[k], 1,
                               mcfg.max_segment_len or None)
            if top and clip_iou(top[0][:2], s.clip_segment) > iou_threshold:
                hits += 1
    return hits / len(samples)


def train(train_set: Dataset, val_set: Dataset, model_cfg: ModelConfig,
          train_cfg: TrainConfig, neg_table: NegativeTable | None = None,
          out_dir: str | Path | None = None,
          vocab: Vocabulary | None = None) -> TrainResult:
    """Full optimization run; returns the best-validation checkpoint.

    Every step forwards the backbone, the enabled biased models, the gate /
    fusion / debias path, and the sample-contrastive negatives, then takes
    one Adam step on the combined objective with global-norm clipping.
    """
    train_cfg.toggles.validate()
    if train_cfg.toggles.sample and neg_table is None:
        raise ValueError("sample loss enabled but no mined negative table")
    vocab = vocab or Vocabulary.build(train_set)
    mcfg = dataclasses.replace(model_cfg, vocab_size=len(vocab)).resolved()
    dtype = np_dtype(mcfg.dtype)

    init_rng = np.random.default_rng(np.random.SeedSequence(
        [train_cfg.seed, 1]))
    model = DTSGModel(init_rng, mcfg, train_cfg.toggles)
    if mcfg.pretrained_embeddings:
        filled = model.load_pretrained_embeddings(
            mcfg.pretrained_embeddings, vocab)
        logger.info("loaded %d pre-trained embedding rows from %s",
                    filled, mcfg.pretrained_embeddings)
    optimizer = Adam(list(model.named_parameters()), train_cfg.adam_beta1,
                     train_cfg.adam_beta2, train_cfg.adam_eps)

    cache = FeatureCache(mcfg.clip_count, dtype)
    val_cache = FeatureCache(mcfg.clip_count, dtype)
    cfg_hash = config_hash(flatten_configs(mcfg, train_cfg, DataConfig(
        clip_count=mcfg.clip_count, query_len=mcfg.query_len)))
    extra = {"model_config": dataclasses.asdict(mcfg),
             "toggles": dataclasses.asdict(train_cfg.toggles),
             "seed": train_cfg.seed}

    history: list[EpochLog] = []
    best_state: dict[str, np.ndarray] | None = None
    best_recall = -1.0
    best_epoch = -1
    stale = 0
    stopped_early = False
    last_rng_state: dict | None = None

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    samples = train_set.samples
    n = len(samples)
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        lr = train_cfg.lr_at(epoch)
        epoch_rng = np.random.default_rng(np.random.SeedSequence(
            [train_cfg.seed, 2, epoch]))
        order = epoch_rng.permutation(n)
        sums = {k: 0.0 for k in LOSS_ORDER}
        counts = {k: 0 for k in LOSS_ORDER}
        for lo in range(0, n, train_cfg.batch_size):
            chunk = [samples[i] for i in order[lo: lo + train_cfg.batch_size]]
            batch = collate(chunk, vocab, mcfg, cache)
            if train_cfg.toggles.sample:
                attach_negatives(batch, chunk, neg_table, train_set, vocab,
                                 mcfg, cache, epoch_rng)
            else:
                dummy_negatives(batch)
            try:
                parts = model.training_losses(batch)
                loss = total_loss(parts, train_cfg)
            except TrainingDiverged:
                if out_path is not None:
                    ckpt = build_checkpoint(model, optimizer, epoch, cfg_hash,
                                            last_rng_state, extra)
                    save_checkpoint(ckpt, out_path / "last.ckpt")
                raise
            model.zero_grad()
            loss.backward()
            clip_grad_norm(model.parameters(), train_cfg.clip_norm)
            optimizer.step(lr)
            for k, v in parts.items():
                sums[k] += float(v.data)
                counts[k] += 1
        last_rng_state = epoch_rng.bit_generator.state

        recall = validation_recall(model, val_set, vocab, val_cache,
                                   max(train_cfg.batch_size, 16))
        losses = {k: sums[k] / counts[k] for k in LOSS_ORDER if counts[k]}
        history.append(EpochLog(epoch, lr, losses, recall,
                                time.perf_counter() - t0))
        logger.info("epoch %d lr %.2e loss %s val R@1,0.5 %.3f",
                    epoch, lr, {k: round(v, 4) for k, v in losses.items()},
                    recall)
        if recall > best_recall:
            best_recall = recall
            best_epoch = epoch
            best_state = {k: np.array(v, copy=True)
                          for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale > train_cfg.patience:
                stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    ckpt = build_checkpoint(model, optimizer, best_epoch, cfg_hash,
                            last_rng_state, extra)
    if out_path is not None:
        save_checkpoint(ckpt, out_path / "model.ckpt")
        vocab.save(out_path / "vocab.json")
        write_training_log(history, out_path / "training_log.csv")
    return TrainResult(ckpt, history, best_epoch, best_recall, vocab,
                       stopped_early)


def write_training_log(history: list[EpochLog], path: str | Path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", *LOSS_ORDER, "val_recall_1_05",
                         "seconds"])
        for row in history:
            writer.writerow([row.epoch, f"{row.lr:.8g}",
                             *[f"{row.losses.get(k, float('nan')):.6f}"
                               for k in LOSS_ORDER],
                             f"{row.val_recall:.6f}", f"{row.seconds:.2f}"])


# ---------------------------------------------------------------------------
# gradient audit
# ---------------------------------------------------------------------------

def condition_for_audit(model: DTSGModel, factor: float = 10.0):
    """Rescale embedding tables to O(1) entries before auditing.

    The audit checks backward-pass correctness, which holds or fails at any
    parameter point; at the uniform(-0.1, 0.1) init the query branch's
    attention gradients are so small that finite differences only measure
    their own truncation noise."""
    for name, p in model.named_parameters():
        if name.endswith("embed.table"):
            p.data = p.data * factor


@dataclass
class AuditRow:
    name: str
    tag: str
    size: int
    max_rel_err: float
    max_abs_err: float


@dataclass
class AuditReport:
    rows: list[AuditRow]
    eps: float
    seconds: float
    audited_params: int = field(init=False)

    def __post_init__(self):
        self.audited_params = sum(r.size for r in self.rows)

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.rows)

    def covers(self, model: DTSGModel) -> bool:
        return {r.name for r in self.rows} == {n for n, _ in
                                               model.named_parameters()}


class _AuditObjectives:
    """Per-component objective closures for the finite-difference sweep.

    Perturbing one component's tensor leaves every loss term outside that
    component's dependency cone bit-identical, so those terms cancel
    exactly in a central difference and are dropped; their analytic
    gradient with respect to the tensor is exactly zero by construction.
    Generic intermediates (backbone features, biased streams) that do not
    depend on the perturbed component are frozen as plain arrays.
    """

    def __init__(self, model: DTSGModel, batch: dict, cfg: TrainConfig):
        self.model = model
        self.batch = batch
        self.cfg = cfg
        mcfg = model.cfg
        t = model.toggles
        with ad.no_grad():
            _, internals = model.training_losses(batch,
                                                 detach_override=False,
                                                 return_internals=True)
        self.feats = internals["feats"].data
        self.fused = (internals["fused_bias"].data
                      if "fused_bias" in internals else None)
        self.streams: list[np.ndarray] = []
        with ad.no_grad():
            if t.bias1:
                f1, _, _ = model.bias1(batch["video"])
                self.streams.append(f1.data)
            if t.bias2:
                f2, _, _ = model.bias2(batch["video"], batch["noun_tokens"],
                                       batch["noun_mask"])
                self.streams.append(f2.data)
            if t.bias3:
                f3, _, _ = model.bias3(batch["video"], batch["verb_tokens"],
                                       batch["verb_mask"])
                self.streams.append(f3.data)
        self.mcfg = mcfg

    # -- shared pieces ------------------------------------------------------
    def _gt_loss(self, start, end):
        return tsg_loss(start, end, self.batch["gt"], self.mcfg.head_loss,
                        self.mcfg.label_smooth_radius)

    def _branch_terms(self, streams) -> Tensor:
        """debias + weighted contras for a given stream list (tensors or
        frozen arrays mixed), against frozen backbone features."""
        from . import autodiff as _ad
        from .debias import feature_contrastive_loss, remove_bias
        model, cfg = self.model, self.cfg
        tensors = [s if isinstance(s, Tensor) else Tensor(s) for s in streams]
        _, _, fused = model.bim(tensors)
        total = None
        feats = Tensor(self.feats)
        if model.toggles.debias:
            head_in = remove_bias(feats, fused)
            s_d, e_d = model.debiased(head_in)
            total = self._gt_loss(s_d, e_d)
        if model.toggles.contras:
            debiased = remove_bias(feats, fused)
            term = _ad.mul(feature_contrastive_loss(
                feats, debiased, fused, self.mcfg.contras_temperature),
                cfg.lambda_contras)
            total = term if total is None else _ad.add(total, term)
        return total

    def _sample_term(self, feats: Tensor) -> Tensor:
        from . import autodiff as _ad
        from .sampling import sample_loss
        model, batch = self.model, self.batch
        pos_score = model.scorer(feats)
        negv = model.backbone.features(batch["negv_video"], batch["tokens"],
                                       batch["qmask"])
        negq = model.backbone.features(batch["video"], batch["negq_tokens"],
                                       batch["negq_mask"])
        return _ad.mul(sample_loss(
            pos_score,
            [(model.scorer(negv), batch["has_negv"]),
             (model.scorer(negq), batch["has_negq"])]), self.cfg.lambda_sample)

    # -- per-tag objectives ---------------------------------------------------
    def objective_for(self, tag: str):
        from . import autodiff as _ad
        model, batch = self.model, self.batch
        t = model.toggles

        if tag == "backbone":
            def obj():
                feats, start, end = model.backbone(
                    batch["video"], batch["tokens"], batch["qmask"])
                total = self._gt_loss(start, end)
                if self.fused is not None:
                    fused = Tensor(self.fused)
                    from .debias import (feature_contrastive_loss,
                                         remove_bias)
                    if t.debias:
                        s_d, e_d = model.debiased(remove_bias(feats, fused))
                        total = _ad.add(total, self._gt_loss(s_d, e_d))
                    if t.contras:
                        total = _ad.add(total, _ad.mul(
                            feature_contrastive_loss(
                                feats, remove_bias(feats, fused), fused,
                                self.mcfg.contras_temperature),
                            self.cfg.lambda_contras))
                if t.sample:
                    total = _ad.add(total, self._sample_term(feats))
                return total
            return obj

        if tag in ("bias1", "bias2", "bias3"):
            stream_index = {"bias1": 0,
                            "bias2": int(t.bias1),
                            "bias3": int(t.bias1) + int(t.bias2)}[tag]

            def obj():
                if tag == "bias1":
                    fresh, s_b, e_b = model.bias1(batch["video"])
                elif tag == "bias2":
                    fresh, s_b, e_b = model.bias2(
                        batch["video"], batch["noun_tokens"],
                        batch["noun_mask"])
                else:
                    fresh, s_b, e_b = model.bias3(
                        batch["video"], batch["verb_tokens"],
                        batch["verb_mask"])
                total = self._gt_loss(s_b, e_b)
                if t.debias or t.contras:
                    streams = list(self.streams)
                    streams[stream_index] = fresh
                    total = _ad.add(total, self._branch_terms(streams))
                return total
            return obj

        if tag == "bim":
            def obj():
                return self._branch_terms(list(self.streams))
            return obj

        if tag == "debiased_module":
            def obj():
                from .debias import remove_bias
                head_in = remove_bias(Tensor(self.feats), Tensor(self.fused))
                s_d, e_d = model.debiased(head_in)
                return self._gt_loss(s_d, e_d)
            return obj

        if tag == "sampler":
            def obj():
                return self._sample_term(Tensor(self.feats))
            return obj

        raise KeyError(tag)


def gradient_audit(model: DTSGModel, batch: dict, train_cfg: TrainConfig,
                   eps: float = 1e-5, rel_floor: float = 1e-6,
                   mode: str = "decomposed") -> AuditReport:
    """Central finite differences against analytic gradients for every
    trainable tensor of every component.

    Runs with the debias-head detach disabled so the analytic gradient is
    the true derivative of the evaluated function.  ``mode="decomposed"``
    re-evaluates, per tensor, only the loss terms inside that component's
    dependency cone (terms outside it cancel exactly in the difference);
    ``mode="full"`` re-evaluates the whole objective and exists to
    cross-check the decomposition.  Per tensor, the worst entry
    discrepancy is normalized by the tensor's gradient magnitude (entries
    near zero only expose finite-difference truncation noise):

        rel_err = max_i |a_i - f_i| / max(||a||_inf, ||f||_inf, rel_floor)
    """
    t0 = time.perf_counter()

    def full_objective() -> Tensor:
        parts = model.training_losses(batch, detach_override=False)
        return total_loss(parts, train_cfg)

    model.zero_grad()
    loss = full_objective()
    loss.backward()
    analytic = {name: (np.array(p.grad, copy=True) if p.grad is not None
                       else np.zeros_like(p.data))
                for name, p in model.named_parameters()}

    objectives = (_AuditObjectives(model, batch, train_cfg)
                  if mode == "decomposed" else None)
    obj_cache: dict[str, object] = {}

    rows = []
    for name, tag, p in model.tagged_parameters():
        if objectives is not None:
            if tag not in obj_cache:
                obj_cache[tag] = objectives.objective_for(tag)
            objective = obj_cache[tag]
        else:
            objective = full_objective

        def value() -> float:
            with ad.no_grad():
                return float(objective().data)

        flat = p.data.ravel()
        grad_flat = analytic[name].ravel()
        max_abs = 0.0
        max_fd = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            abs_err = abs(grad_flat[i] - fd)
            if abs_err > max_abs:
                max_abs = abs_err
            if abs(fd) > max_fd:
                max_fd = abs(fd)
        scale = max(np.abs(grad_flat).max(initial=0.0), max_fd, rel_floor)
        rows.append(AuditRow(name, tag, flat.size, max_abs / scale, max_abs))
    return AuditReport(rows, eps, time.perf_counter() - t0)
