"""Corpus schema, file ingestion, and temporal index mapping.

A corpus on disk is a directory of per-video feature files plus a JSON-lines
annotation file.  Feature files are little-endian binary:

    magic "DTSG" | u32 clip_count | u32 feat_dim | f32 row-major payload

Each annotation line is an object with keys ``video_id``, ``duration``,
``tokens``, ``pos``, ``start``, ``end``.  ``pos`` tags come from the
annotation file; when absent, a bundled rule-based tagger fills them in so
no external NLP dependency is needed.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .config import DataConfig

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"DTSG"
FEATURE_SUFFIX = ".dtsg"

NOUN, VERB, OTHER = "NOUN", "VERB", "OTHER"
POS_TAGS = (NOUN, VERB, OTHER)

# reserved vocabulary slots
PAD_TOKEN, UNK_TOKEN, EMPTY_TOKEN = "<pad>", "<unk>", "<empty>"
PAD_ID, UNK_ID, EMPTY_ID = 0, 1, 2


class DatasetError(Exception):
    """Fatal ingestion problem (missing files, malformed headers, ...)."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RawVideo:
    id: str
    duration: float
    features: np.ndarray  # (T_raw, D_in) float32

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"video {self.id}: duration must be positive")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"video {self.id}: features must be (T_raw, D_in)")
        if not np.isfinite(self.features).all():
            raise ValueError(f"video {self.id}: non-finite feature values")


@dataclass(frozen=True)
class QueryAnnotation:
    tokens: tuple[str, ...]
    pos_tags: tuple[str, ...]
    segment_seconds: tuple[float, float]

    def __post_init__(self):
        if len(self.tokens) < 1 or len(self.tokens) != len(self.pos_tags):
            raise ValueError("tokens and pos tags must be same nonzero length")
        bad = set(self.pos_tags) - set(POS_TAGS)
        if bad:
            raise ValueError(f"unknown pos tags: {sorted(bad)}")


@dataclass(frozen=True)
class GroundingSample:
    sample_id: str
    video: RawVideo
    query: QueryAnnotation
    clip_segment: tuple[int, int]  # inclusive clip indices in [0, T-1]


class Dataset:
    """Immutable list of grounding samples plus their source videos."""

    def __init__(self, samples: list[GroundingSample], clip_count: int,
                 rejected_count: int = 0):
        self.samples = list(samples)
        self.clip_count = clip_count
        self.rejected_count = rejected_count
        self.videos: dict[str, RawVideo] = {}
        for s in self.samples:
            self.videos.setdefault(s.video.id, s.video)
        self._by_id = {s.sample_id: s for s in self.samples}

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> GroundingSample:
        return self.samples[i]

    def __iter__(self) -> Iterator[GroundingSample]:
        return iter(self.samples)

    def by_id(self, sample_id: str) -> GroundingSample:
        return self._by_id[sample_id]


# ---------------------------------------------------------------------------
# rule-based fallback POS tagger
# ---------------------------------------------------------------------------

_VERB_LEXICON = {
    "is", "are", "was", "were", "be", "been", "being", "has", "have", "had",
    "do", "does", "did", "go", "goes", "went", "gone", "run", "runs", "ran",
    "walk", "walks", "sit", "sits", "sat", "stand", "stands", "stood",
    "hold", "holds", "held", "put", "puts", "take", "takes", "took",
    "open", "opens", "close", "closes", "throw", "throws", "threw",
    "eat", "eats", "ate", "drink", "drinks", "drank", "cut", "cuts",
    "wash", "washes", "pour", "pours", "mix", "mixes", "turn", "turns",
    "pick", "picks", "play", "plays", "jump", "jumps", "climb", "climbs",
    "fix", "fixes", "push", "pushes", "pull", "pulls", "grab", "grabs",
}
_OTHER_LEXICON = {
    "a", "an", "the", "this", "that", "these", "those", "and", "or", "but",
    "in", "on", "at", "to", "of", "with", "from", "into", "onto", "over",
    "under", "up", "down", "then", "while", "before", "after", "again",
    "he", "she", "it", "they", "his", "her", "its", "their", "some",
    "very", "several", "few", "many", "one", "two", "three",
}
_VERB_SUFFIXES = ("ing", "ed", "ize", "ise", "ates")
_NOUN_SUFFIXES = ("tion", "sion", "ness", "ment", "ity", "ship", "er", "or")


def rule_based_pos_tags(tokens: list[str]) -> list[str]:
    """Suffix + lexicon heuristic tagger used when annotations carry no
    tags.  Pluggable: any callable tokens -> tags works in its place."""
    tags = []
    for tok in tokens:
        w = tok.lower()
        if w in _OTHER_LEXICON:
            tags.append(OTHER)
        elif w in _VERB_LEXICON:
            tags.append(VERB)
        elif w.endswith(_VERB_SUFFIXES):
            tags.append(VERB)
        elif w.endswith(_NOUN_SUFFIXES) or w.isalpha():
            tags.append(NOUN)
        else:
            tags.append(OTHER)
    return tags


Tagger = Callable[[list[str]], list[str]]


# ---------------------------------------------------------------------------
# feature file format
# ---------------------------------------------------------------------------

def write_features(path: str | Path, features: np.ndarray):
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("feature array must be 2-d (T_raw, D_in)")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise DatasetError(f"{path}: bad magic {magic!r}")
        t_raw, d_in = struct.unpack("<II", fh.read(8))
        payload = fh.read(t_raw * d_in * 4)
    if len(payload) != t_raw * d_in * 4:
        raise DatasetError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(t_raw, d_in)
    return np.array(arr, copy=True)


def feature_path(features_dir: str | Path, video_id: str) -> Path:
    return Path(features_dir) / f"{video_id}{FEATURE_SUFFIX}"


# ---------------------------------------------------------------------------
# temporal mapping
# ---------------------------------------------------------------------------

def map_timestamps(segment_seconds: tuple[float, float], duration: float,
                   clip_count: int) -> tuple[int, int]:
    """Map a (start, end) second pair onto inclusive clip indices.

    Clip t covers the half-open interval [t*duration/T, (t+1)*duration/T).
    The start index is the clip containing the start instant; the end index
    is the last clip with any overlap, clamped so start <= end always holds.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    s, e = segment_seconds
    if not (0 <= s < e <= duration + 1e-9):
        raise ValueError(f"invalid segment ({s}, {e}) for duration {duration}")
    t = clip_count
    s_idx = min(t - 1, int(math.floor(s * t / duration)))
    e_idx = min(t - 1, int(math.ceil(e * t / duration)) - 1)
    if e_idx < s_idx:
        e_idx = s_idx
    return s_idx, e_idx


def downsample_video(raw: RawVideo | np.ndarray, clip_count: int) -> np.ndarray:
    """Resample a (T_raw, D_in) sequence to exactly `clip_count` rows.

    Longer inputs are bucket-averaged: output row t is the mean of raw rows
    in [floor(t*T_raw/T), floor((t+1)*T_raw/T)).  Shorter inputs are
    upsampled by nearest source index floor(t*T_raw/T).
    """
    feats = raw.features if isinstance(raw, RawVideo) else raw
    if feats.size == 0 or feats.shape[0] < 1:
        raise ValueError("empty feature sequence")
    if clip_count < 1:
        raise ValueError("clip_count must be >= 1")
    t_raw = feats.shape[0]
    if t_raw == clip_count:
        return np.array(feats, copy=True)
    if t_raw < clip_count:
        idx = (np.arange(clip_count) * t_raw) // clip_count
        return np.array(feats[idx], copy=True)
    bounds = (np.arange(clip_count + 1) * t_raw) // clip_count
    out = np.empty((clip_count, feats.shape[1]), feats.dtype)
    for t in range(clip_count):
        out[t] = feats[bounds[t]: bounds[t + 1]].mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def _loader_workers() -> int:
    env = os.environ.get("DTSG_NUM_WORKERS", "")
    try:
        n = int(env)
    except ValueError:
        n = 0
    return max(1, min(n if n > 0 else 4, 16))


def _parse_annotation_line(line: str, lineno: int, tagger: Tagger) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"annotation line {lineno}: invalid JSON ({exc})")
    for key in ("video_id", "duration", "tokens", "start", "end"):
        if key not in rec:
            raise DatasetError(f"annotation line {lineno}: missing key {key!r}")
    if "pos" not in rec or rec["pos"] is None:
        rec["pos"] = tagger(list(rec["tokens"]))
    if len(rec["pos"]) != len(rec["tokens"]):
        raise DatasetError(f"annotation line {lineno}: pos/token length mismatch")
    rec["_lineno"] = lineno
    return rec


def load_dataset(features_dir: str | Path, annotations_file: str | Path,
                 config: DataConfig, tagger: Tagger = rule_based_pos_tags,
                 ) -> Dataset:
    """Load a corpus: parse annotations, read every referenced feature file
    (concurrently, bounded by DTSG_NUM_WORKERS), map segments to clip
    indices, and silently count invalid annotations.

    A missing feature file is fatal and names the offending video id; an
    annotation whose segment is empty or runs past the video duration is
    rejected with a logged warning and counted in ``rejected_count``.
    """
    features_dir = Path(features_dir)
    records = []
    with open(annotations_file) as fh:
        for lineno, line in enumerate(fh):
            if line.strip():
                records.append(_parse_annotation_line(line, lineno, tagger))

    video_ids = sorted({r["video_id"] for r in records})
    missing = [vid for vid in video_ids
               if not feature_path(features_dir, vid).exists()]
    if missing:
        raise DatasetError(f"missing feature file for video id(s): {missing}")

    def read_one(vid: str) -> tuple[str, np.ndarray]:
        return vid, read_features(feature_path(features_dir, vid))

    with ThreadPoolExecutor(max_workers=_loader_workers()) as pool:
        feats = dict(pool.map(read_one, video_ids))

    # deterministic ordering regardless of file order
    records.sort(key=lambda r: (r["video_id"], r["_lineno"]))

    samples: list[GroundingSample] = []
    rejected = 0
    videos: dict[str, RawVideo] = {}
    for rec in records:
        vid = rec["video_id"]
        duration = float(rec["duration"])
        s, e = float(rec["start"]), float(rec["end"])
        if not (0 <= s < e <= duration):
            logger.warning("rejecting annotation %s line %d: segment (%s, %s) "
                           "outside [0, %s]", vid, rec["_lineno"], s, e, duration)
            rejected += 1
            continue
        if vid not in videos:
            videos[vid] = RawVideo(vid, duration, feats[vid])
        query = QueryAnnotation(tuple(rec["tokens"]), tuple(rec["pos"]), (s, e))
        clip_seg = map_timestamps((s, e), duration, config.clip_count)
        samples.append(GroundingSample(
            sample_id=f"{vid}#{rec['_lineno']}",
            video=videos[vid], query=query, clip_segment=clip_seg))
    return Dataset(samples, config.clip_count, rejected)


def write_dataset(dataset: Dataset, out_dir: str | Path,
                  annotations_name: str = "annotations.jsonl"):
    """Serialize a dataset back to the on-disk corpus layout."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for vid, video in sorted(dataset.videos.items()):
        write_features(feature_path(feat_dir, vid), video.features)
    with open(out_dir / annotations_name, "w") as fh:
        for s in dataset.samples:
            rec = {
                "video_id": s.video.id,
                "duration": s.video.duration,
                "tokens": list(s.query.tokens),
                "pos": list(s.query.pos_tags),
                "start": s.query.segment_seconds[0],
                "end": s.query.segment_seconds[1],
            }
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# rare / common split
# ---------------------------------------------------------------------------

def word_frequency_table(train_set: Dataset) -> dict[str, int]:
    """Counts of NOUN/VERB tokens over the training split's queries."""
    counts: dict[str, int] = {}
    for s in train_set:
        for tok, tag in zip(s.query.tokens, s.query.pos_tags):
            if tag in (NOUN, VERB):
                counts[tok] = counts.get(tok, 0) + 1
    return counts


def split_rare_common(dataset: Dataset, train_counts: dict[str, int],
                      threshold: int = 10) -> tuple[Dataset, Dataset]:
    """Partition: a sample is rare iff at least one of its NOUN or VERB
    tokens occurs fewer than `threshold` times in the training split."""
    rare, common = [], []
    for s in dataset:
        is_rare = any(
            train_counts.get(tok, 0) < threshold
            for tok, tag in zip(s.query.tokens, s.query.pos_tags)
            if tag in (NOUN, VERB))
        (rare if is_rare else common).append(s)
    return (Dataset(rare, dataset.clip_count),
            Dataset(common, dataset.clip_count))


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Token <-> id mapping with reserved pad / unknown / empty slots.
    Out-of-vocabulary tokens map to the unknown id, never an error."""

    def __init__(self, tokens: list[str]):
        self.token_to_id = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID,
                            EMPTY_TOKEN: EMPTY_ID}
        for tok in tokens:
            if tok not in self.token_to_id:
                self.token_to_id[tok] = len(self.token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    def __len__(self) -> int:
        return len(self.token_to_id)

    @classmethod
    def build(cls, dataset: Dataset) -> "Vocabulary":
        seen: dict[str, None] = {}
        for s in dataset:
            for tok in s.query.tokens:
                seen.setdefault(tok)
        return cls(sorted(seen))

    def encode(self, tokens: list[str] | tuple[str, ...], length: int,
               ) -> tuple[np.ndarray, np.ndarray]:
        """Pad/truncate to `length`; returns (ids, valid_mask)."""
        ids = np.full(length, PAD_ID, dtype=np.int64)
        mask = np.zeros(length, dtype=bool)
        for j, tok in enumerate(tokens[:length]):
            ids[j] = self.token_to_id.get(tok, UNK_ID)
            mask[j] = True
        if not mask.any():
            ids[0] = EMPTY_ID
            mask[0] = True
        return ids, mask

    def save(self, path: str | Path):
        ordered = [self.id_to_token[i] for i in range(len(self))]
        Path(path).write_text(json.dumps(ordered))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        ordered = json.loads(Path(path).read_text())
        vocab = cls([])
        for tok in ordered:
            if tok not in vocab.token_to_id:
                vocab.token_to_id[tok] = len(vocab.token_to_id)
        vocab.id_to_token = {i: t for t, i in vocab.token_to_id.items()}
        return vocab


def load_pretrained_embeddings(path: str | Path, vocab: Vocabulary,
                               dim: int) -> tuple[np.ndarray, list[int]]:
    """Read a JSON-lines ``{"token": ..., "vec": [...]}`` file and return a
    (vocab, dim) table patch plus the row ids that were filled.  Vector
    length must equal the embedding width."""
    table = np.zeros((len(vocab), dim))
    filled: list[int] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            rec = json.loads(line)
            vec = np.asarray(rec["vec"], dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(
                    f"{path}:{lineno}: vector length {vec.size} != dim {dim}")
            idx = vocab.token_to_id.get(rec["token"])
            if idx is not None:
                table[idx] = vec
                filled.append(idx)
    return table, filled
