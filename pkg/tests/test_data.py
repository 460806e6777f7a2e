"""Corpus ingestion, temporal mapping, downsampling, and the rare/common
split, each checked against independent oracles."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtsg.config import DataConfig
from dtsg.data import (Dataset, DatasetError, GroundingSample, QueryAnnotation,
                       RawVideo, Vocabulary, downsample_video, EMPTY_ID,
                       load_dataset, load_pretrained_embeddings, map_timestamps,
                       read_features, rule_based_pos_tags, split_rare_common,
                       UNK_ID, word_frequency_table, write_dataset,
                       write_features)


def make_corpus(tmp_path, annotations, durations):
    feat_dir = tmp_path / "features"
    feat_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    for vid, dur in durations.items():
        write_features(feat_dir / f"{vid}.dtsg",
                       rng.normal(size=(int(dur), 6)).astype(np.float32))
    ann = tmp_path / "annotations.jsonl"
    with open(ann, "w") as fh:
        for rec in annotations:
            fh.write(json.dumps(rec) + "\n")
    return feat_dir, ann


def rec(vid, dur, start, end, tokens=("person", "running")):
    return {"video_id": vid, "duration": dur, "tokens": list(tokens),
            "pos": ["NOUN", "VERB"][: len(tokens)], "start": start, "end": end}


class TestLoadDataset:
    def test_three_valid_lines(self, tmp_path):
        anns = [rec("v1", 10.0, 1.0, 4.0), rec("v1", 10.0, 2.0, 8.0),
                rec("v2", 20.0, 0.0, 20.0)]
        feat_dir, ann = make_corpus(tmp_path, anns, {"v1": 10, "v2": 20})
        ds = load_dataset(feat_dir, ann, DataConfig(clip_count=10))
        assert len(ds) == 3 and ds.rejected_count == 0

    def test_rejects_segment_past_duration(self, tmp_path):
        anns = [rec("v1", 10.0, 1.0, 4.0), rec("v1", 10.0, 2.0, 11.0)]
        feat_dir, ann = make_corpus(tmp_path, anns, {"v1": 10})
        ds = load_dataset(feat_dir, ann, DataConfig(clip_count=10))
        assert len(ds) == 1 and ds.rejected_count == 1

    def test_rejects_empty_segment(self, tmp_path):
        anns = [rec("v1", 10.0, 4.0, 4.0)]
        feat_dir, ann = make_corpus(tmp_path, anns, {"v1": 10})
        ds = load_dataset(feat_dir, ann, DataConfig(clip_count=10))
        assert len(ds) == 0 and ds.rejected_count == 1

    def test_missing_feature_file_is_fatal_and_names_id(self, tmp_path):
        anns = [rec("v1", 10.0, 1.0, 4.0), rec("ghost", 10.0, 1.0, 4.0)]
        feat_dir, ann = make_corpus(tmp_path, anns, {"v1": 10})
        with pytest.raises(DatasetError, match="ghost"):
            load_dataset(feat_dir, ann, DataConfig(clip_count=10))

    def test_ordering_is_by_video_then_line(self, tmp_path):
        anns = [rec("v2", 10.0, 1.0, 4.0), rec("v1", 10.0, 1.0, 4.0),
                rec("v1", 10.0, 2.0, 5.0)]
        feat_dir, ann = make_corpus(tmp_path, anns, {"v1": 10, "v2": 10})
        ds = load_dataset(feat_dir, ann, DataConfig(clip_count=10))
        assert [s.sample_id for s in ds] == ["v1#1", "v1#2", "v2#0"]

    def test_clip_segment_bounds_invariant(self, tmp_path):
        rng = np.random.default_rng(3)
        anns = []
        for k in range(40):
            dur = float(rng.uniform(5, 30))
            s = float(rng.uniform(0, dur - 0.5))
            e = float(rng.uniform(s + 0.1, dur))
            anns.append(rec(f"v{k}", dur, s, e))
        feat_dir, ann = make_corpus(
            tmp_path, anns, {f"v{k}": 10 for k in range(40)})
        t = 16
        ds = load_dataset(feat_dir, ann, DataConfig(clip_count=t))
        for s in ds:
            lo, hi = s.clip_segment
            assert 0 <= lo <= hi <= t - 1

    def test_round_trip_serialization(self, tmp_path):
        anns = [rec("v1", 10.0, 1.0, 4.0), rec("v2", 8.0, 0.5, 7.5)]
        feat_dir, ann = make_corpus(tmp_path, anns, {"v1": 10, "v2": 8})
        ds = load_dataset(feat_dir, ann, DataConfig(clip_count=10))

        out1 = tmp_path / "round1"
        write_dataset(ds, out1)
        ds2 = load_dataset(out1 / "features", out1 / "annotations.jsonl",
                           DataConfig(clip_count=10))
        out2 = tmp_path / "round2"
        write_dataset(ds2, out2)

        assert ((out1 / "annotations.jsonl").read_bytes()
                == (out2 / "annotations.jsonl").read_bytes())
        for f in sorted((out1 / "features").iterdir()):
            assert f.read_bytes() == (out2 / "features" / f.name).read_bytes()

    def test_pos_fallback_tagger_used_when_missing(self, tmp_path):
        anns = [{"video_id": "v1", "duration": 10.0, "start": 1.0, "end": 4.0,
                 "tokens": ["the", "person", "running"]}]
        feat_dir, ann = make_corpus(tmp_path, anns, {"v1": 10})
        ds = load_dataset(feat_dir, ann, DataConfig(clip_count=10))
        assert ds[0].query.pos_tags == ("OTHER", "NOUN", "VERB")


class TestFeatureFiles:
    def test_round_trip(self, tmp_path):
        arr = np.random.default_rng(1).normal(size=(7, 5)).astype(np.float32)
        write_features(tmp_path / "x.dtsg", arr)
        back = read_features(tmp_path / "x.dtsg")
        assert back.dtype == np.float32
        np.testing.assert_array_equal(arr, back)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.dtsg").write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(DatasetError, match="magic"):
            read_features(tmp_path / "x.dtsg")


class TestDownsample:
    def test_bucket_means(self):
        rows = np.arange(8, dtype=np.float64).reshape(4, 2)
        out = downsample_video(rows, 2)
        np.testing.assert_allclose(out, [(rows[0] + rows[1]) / 2,
                                         (rows[2] + rows[3]) / 2])

    def test_identity_when_equal(self):
        rows = np.random.default_rng(0).normal(size=(6, 3))
        np.testing.assert_array_equal(downsample_video(rows, 6), rows)

    def test_upsample_nearest(self):
        rows = np.array([[0.0], [1.0]])
        out = downsample_video(rows, 4)
        np.testing.assert_array_equal(out, [[0.0], [0.0], [1.0], [1.0]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        feats = rng.normal(size=(200, 4))
        t = 64
        out = downsample_video(feats, t)
        # independent scan: assign each raw row to its bucket, then average
        expected = np.zeros((t, 4))
        counts = np.zeros(t)
        for r in range(200):
            b = min(t - 1, r * t // 200)
            # row r belongs to bucket b iff floor(b*200/t) <= r < floor((b+1)*200/t)
            for b in range(t):
                if (b * 200) // t <= r < ((b + 1) * 200) // t:
                    expected[b] += feats[r]
                    counts[b] += 1
                    break
        expected /= counts[:, None]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_mean_preserved_when_divisible(self):
        rng = np.random.default_rng(6)
        feats = rng.normal(size=(120, 5))
        out = downsample_video(feats, 30)
        np.testing.assert_allclose(out.mean(axis=0), feats.mean(axis=0),
                                   atol=1e-5)

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            downsample_video(np.empty((0, 3)), 4)


class TestMapTimestamps:
    def test_stated_example(self):
        assert map_timestamps((20.0, 50.0), 100.0, 10) == (2, 4)

    def test_full_span(self):
        for t in (1, 5, 64):
            assert map_timestamps((0.0, 33.0), 33.0, t) == (0, t - 1)

    def test_zero_duration_errors(self):
        with pytest.raises(ValueError):
            map_timestamps((0.0, 1.0), 0.0, 10)

    def test_against_overlap_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            dur = float(rng.uniform(1, 50))
            s = float(rng.uniform(0, dur * 0.95))
            e = float(rng.uniform(s + 1e-6, dur))
            t = int(rng.integers(1, 40))
            s_idx, e_idx = map_timestamps((s, e), dur, t)
            # oracle: scan clips for [s, e) overlap
            overlapping = [k for k in range(t)
                           if max(s, k * dur / t) < min(e, (k + 1) * dur / t)]
            assert overlapping, (s, e, dur, t)
            assert s_idx == overlapping[0]
            assert e_idx == overlapping[-1]

    @given(st.floats(0.01, 1000), st.integers(1, 300),
           st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=200, deadline=None)
    def test_bounds_property(self, dur, t, a, b):
        lo, hi = sorted((a, b))
        s, e = lo * dur, hi * dur
        if not (0 <= s < e <= dur):
            return
        s_idx, e_idx = map_timestamps((s, e), dur, t)
        assert 0 <= s_idx <= e_idx <= t - 1


def toy_sample(sid, tokens, tags, t=8):
    video = RawVideo(sid, 8.0, np.zeros((8, 2), np.float32))
    return GroundingSample(sid, video,
                           QueryAnnotation(tuple(tokens), tuple(tags),
                                           (0.0, 2.0)), (0, 1))


class TestRareCommonSplit:
    def test_all_frequent_tokens_is_common(self):
        counts = {"person": 30, "running": 15}
        ds = Dataset([toy_sample("a", ["person", "running"],
                                 ["NOUN", "VERB"])], 8)
        rare, common = split_rare_common(ds, counts)
        assert len(rare) == 0 and len(common) == 1

    def test_one_rare_verb_makes_sample_rare(self):
        counts = {"person": 30, "vaulting": 3}
        ds = Dataset([toy_sample("a", ["person", "vaulting"],
                                 ["NOUN", "VERB"])], 8)
        rare, common = split_rare_common(ds, counts)
        assert len(rare) == 1 and len(common) == 0

    def test_other_tags_ignored(self):
        counts = {"person": 30, "running": 15}  # "the" untracked
        ds = Dataset([toy_sample("a", ["the", "person", "running"],
                                 ["OTHER", "NOUN", "VERB"])], 8)
        rare, common = split_rare_common(ds, counts)
        assert len(common) == 1

    def test_partition_matches_lookup_oracle(self):
        rng = np.random.default_rng(21)
        vocab_n = [f"n{i}" for i in range(8)]
        vocab_v = [f"v{i}" for i in range(6)]
        samples = []
        for k in range(50):
            n = vocab_n[rng.integers(0, 8)]
            v = vocab_v[rng.integers(0, 6)]
            samples.append(toy_sample(f"s{k}", [n, v], ["NOUN", "VERB"]))
        ds = Dataset(samples, 8)
        counts = word_frequency_table(ds)
        rare, common = split_rare_common(ds, counts, threshold=10)
        assert len(rare) + len(common) == len(ds)
        rare_ids = {s.sample_id for s in rare}
        assert not rare_ids & {s.sample_id for s in common}
        for s in ds:
            expect_rare = (counts[s.query.tokens[0]] < 10
                           or counts[s.query.tokens[1]] < 10)
            assert (s.sample_id in rare_ids) == expect_rare


class TestVocabulary:
    def test_oov_maps_to_unk(self):
        vocab = Vocabulary(["person", "running"])
        ids, mask = vocab.encode(["person", "martian"], 4)
        assert ids[1] == UNK_ID and mask.tolist() == [True, True, False, False]

    def test_empty_query_gets_empty_token(self):
        vocab = Vocabulary(["person"])
        ids, mask = vocab.encode([], 3)
        assert ids[0] == EMPTY_ID and mask[0]

    def test_save_load(self, tmp_path):
        vocab = Vocabulary(["b", "a"])
        vocab.save(tmp_path / "v.json")
        back = Vocabulary.load(tmp_path / "v.json")
        assert back.token_to_id == vocab.token_to_id

    def test_pretrained_embedding_loading(self, tmp_path):
        vocab = Vocabulary(["person", "dog"])
        path = tmp_path / "emb.jsonl"
        with open(path, "w") as fh:
            fh.write(json.dumps({"token": "dog", "vec": [1.0, 2.0, 3.0]}) + "\n")
            fh.write(json.dumps({"token": "cat", "vec": [9.0, 9.0, 9.0]}) + "\n")
        table, filled = load_pretrained_embeddings(path, vocab, 3)
        assert filled == [vocab.token_to_id["dog"]]
        np.testing.assert_array_equal(table[vocab.token_to_id["dog"]],
                                      [1.0, 2.0, 3.0])

    def test_pretrained_embeddings_wired_into_model(self, tmp_path):
        from dtsg.model import DTSGModel
        from helpers import tiny_model_config
        vocab = Vocabulary(["person", "dog"])
        path = tmp_path / "emb.jsonl"
        vec = list(np.arange(16.0))
        path.write_text(json.dumps({"token": "person", "vec": vec}) + "\n")
        cfg = tiny_model_config(vocab_size=len(vocab))
        model = DTSGModel(np.random.default_rng(0), cfg)
        n = model.load_pretrained_embeddings(path, vocab)
        assert n == 1
        row = vocab.token_to_id["person"]
        for table in model.query_embedding_tables():
            np.testing.assert_array_equal(table.data[row], vec)

    def test_pretrained_dim_mismatch(self, tmp_path):
        vocab = Vocabulary(["dog"])
        path = tmp_path / "emb.jsonl"
        path.write_text(json.dumps({"token": "dog", "vec": [1.0, 2.0]}) + "\n")
        with pytest.raises(ValueError):
            load_pretrained_embeddings(path, vocab, 3)


def test_rule_tagger_basics():
    tags = rule_based_pos_tags(["the", "person", "holding", "vacuum"])
    assert tags == ["OTHER", "NOUN", "VERB", "NOUN"]


def test_worker_env_bounds_loader(tmp_path, monkeypatch):
    anns = [rec(f"v{k}", 10.0, 1.0, 4.0) for k in range(6)]
    feat_dir, ann = make_corpus(tmp_path, anns,
                                {f"v{k}": 10 for k in range(6)})
    monkeypatch.setenv("DTSG_NUM_WORKERS", "2")
    ds = load_dataset(feat_dir, ann, DataConfig(clip_count=10))
    assert len(ds) == 6
    monkeypatch.setenv("DTSG_NUM_WORKERS", "not-a-number")
    ds = load_dataset(feat_dir, ann, DataConfig(clip_count=10))
    assert len(ds) == 6
