"""Configuration objects and the flat key=value config-file format.

Config files are plain text, one ``dotted.key = value`` per line, ``#``
comments allowed.  CLI ``--set key=value`` overrides take precedence over
file values; the effective configuration is dumped next to every command's
outputs.  The full key list is documented in the README.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults follow the reference operating point (feature dim 512, 4
    attention heads, 20-token queries, 200 clips); tests and the synthetic
    experiments override them with desk-scale values.
    """

    dim: int = 512                 # shared feature width D
    heads: int = 4
    ffn_dim: int = 0               # 0 -> 2 * dim
    clip_count: int = 200          # T after downsampling
    query_len: int = 20            # M, queries padded/truncated to this
    d_in: int = 4096               # raw per-clip feature width
    vocab_size: int = 0            # set when the vocabulary is built
    gate_hidden: int = 0           # bias-gate MLP hidden width, 0 -> dim
    scorer_hidden: int = 0         # match-scorer hidden width, 0 -> dim
    scaled_similarity: bool = False  # 1/sqrt(D) scaling in the cross-modal similarity
    head_loss: str = "bce"           # "bce" | "softmax" boundary supervision
    label_smooth_radius: int = 0     # widen boundary labels to +-radius clips
    max_segment_len: int = 0         # decode length cap, 0 -> unlimited
    detach_debias_input: bool = True  # cut backbone grads on the debias-head path
    detach_bias_streams: bool = True  # gates select from, never reshape, streams
    contras_temperature: float = 1.0
    positional: bool = True
    dtype: str = "float64"
    pretrained_embeddings: str = ""  # optional JSON-lines token-vector file

    def resolved(self) -> "ModelConfig":
        cfg = dataclasses.replace(self)
        if cfg.ffn_dim == 0:
            cfg.ffn_dim = 2 * cfg.dim
        if cfg.gate_hidden == 0:
            cfg.gate_hidden = cfg.dim
        if cfg.scorer_hidden == 0:
            cfg.scorer_hidden = cfg.dim
        return cfg


@dataclass
class LossToggles:
    """Per-term switches for ablations; disabled terms contribute 0 and
    their modules are not built."""

    bias1: bool = True   # video-only biased stream
    bias2: bool = True   # noun-query biased stream
    bias3: bool = True   # verb-query biased stream
    debias: bool = True  # supervised head on F - fused_bias
    contras: bool = True
    sample: bool = True

    def any_bias(self) -> bool:
        return self.bias1 or self.bias2 or self.bias3

    def validate(self):
        if (self.debias or self.contras) and not self.any_bias():
            raise ValueError(
                "debias/contras losses require at least one biased stream")


@dataclass
class TrainConfig:
    lambda_contras: float = 1.0     # weight on the feature contrastive loss
    lambda_sample: float = 1.0      # weight on the sample contrastive loss
    epochs: int = 100
    batch_size: int = 64
    lr: float = 4e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    patience: int = 10              # early-stop epochs without val improvement
    seed: int = 0
    toggles: LossToggles = field(default_factory=LossToggles)

    def lr_at(self, epoch: int) -> float:
        """Linear decay from the initial rate to zero across all epochs."""
        return self.lr * (1.0 - epoch / self.epochs)


@dataclass
class DataConfig:
    clip_count: int = 200
    query_len: int = 20
    rare_threshold: int = 10


# ---------------------------------------------------------------------------
# flat config files
# ---------------------------------------------------------------------------

def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def read_config_file(path: str | Path) -> dict:
    """Parse a flat ``key = value`` file into a dict of dotted keys."""
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    """Apply repeatable ``--set key=value`` strings on top of file values."""
    merged = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        merged[key.strip()] = parse_value(value)
    return merged


def write_config_file(values: dict, path: str | Path):
    lines = [f"{k} = {_fmt(v)}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    return repr(v)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "loss": LossToggles,
}


def build_configs(values: dict) -> dict:
    """Turn dotted keys (model.dim, train.lr, loss.bias1, data.*, ...) into
    typed config objects; unknown keys are an error."""
    buckets: dict[str, dict] = {name: {} for name in _SECTIONS}
    extra: dict = {}
    for key, value in values.items():
        if "." in key:
            section, name = key.split(".", 1)
        else:
            section, name = "", key
        if section in buckets:
            buckets[section][name] = value
        else:
            extra[key] = value
    out: dict = {"extra": extra}
    for section, cls in _SECTIONS.items():
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for name, value in buckets[section].items():
            if name not in fields:
                raise KeyError(f"unknown config key {section}.{name}")
            kwargs[name] = value
        out[section] = cls(**kwargs)
    out["train"].toggles = out.pop("loss")
    return out


def flatten_configs(model: ModelConfig, train: TrainConfig,
                    data: DataConfig, extra: dict | None = None) -> dict:
    flat: dict = {}
    for section, obj in (("model", model), ("train", train), ("data", data)):
        for f in dataclasses.fields(obj):
            if f.name == "toggles":
                continue
            flat[f"{section}.{f.name}"] = getattr(obj, f.name)
    for f in dataclasses.fields(train.toggles):
        flat[f"loss.{f.name}"] = getattr(train.toggles, f.name)
    if extra:
        flat.update(extra)
    return flat


def config_hash(values: dict) -> str:
    canon = json.dumps(values, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
