"""Debiasing branch: gate and fusion identities against loop oracles, the
subtraction algebra, contrastive-loss closed forms and bounds, and a
gradient check across the composed branch."""

import math

import numpy as np

from dtsg import autodiff as ad
from dtsg.autodiff import Tensor
from dtsg.config import LossToggles
from dtsg.debias import (BiasIdentification, BiasedVideoModel, DebiasedModule,
                         cosine_score, feature_contrastive_loss, remove_bias)
from dtsg.boundary import tsg_loss
from dtsg.model import DTSGModel, collate, dummy_negatives, FeatureCache
from helpers import (param_grad_check, tiny_model_config, toy_dataset,
                     toy_vocab)

RNG = np.random.default_rng(31)


def make_bim(n=3, dim=8, seed=0):
    cfg = tiny_model_config(dim=dim, gate_hidden=6)
    return BiasIdentification(np.random.default_rng(seed), cfg, n)


class TestIdentifyBias:
    def test_zero_gate_logits_halve_the_stream(self):
        bim = make_bim()
        for layer in bim.gates[0].layers:
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        stream = Tensor(RNG.normal(size=(1, 4, 8)))
        gated = bim.identify(stream, 0)
        np.testing.assert_allclose(gated.data, 0.5 * stream.data, atol=1e-15)

    def test_saturated_gate_suppresses(self):
        bim = make_bim()
        for layer in bim.gates[0].layers:
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        bim.gates[0].layers[-1].bias.data[:] = -1e9
        stream = Tensor(RNG.normal(size=(1, 4, 8)))
        gated = bim.identify(stream, 0)
        np.testing.assert_allclose(gated.data, 0.0, atol=1e-12)

    def test_matches_elementwise_loop_oracle(self):
        bim = make_bim(seed=3)
        stream = Tensor(RNG.normal(size=(1, 3, 8)))
        gated = bim.identify(stream, 1).data[0]
        mlp = bim.gates[1]
        hidden = np.maximum(
            stream.data[0] @ mlp.layers[0].weight.data
            + mlp.layers[0].bias.data, 0.0)
        logits = hidden @ mlp.layers[1].weight.data + mlp.layers[1].bias.data
        expected = np.empty_like(gated)
        for t in range(3):
            for d in range(8):
                expected[t, d] = (stream.data[0, t, d]
                                  / (1 + math.exp(-logits[t, d])))
        np.testing.assert_allclose(gated, expected, atol=1e-10)

    def test_gate_strictly_shrinks_magnitudes(self):
        bim = make_bim(seed=4)
        stream = Tensor(RNG.normal(size=(2, 5, 8)) + 0.1)
        gated = bim.identify(stream, 2)
        nz = stream.data != 0
        assert (np.abs(gated.data[nz]) < np.abs(stream.data[nz])).all()


class TestFuseBias:
    def test_equal_logits_give_uniform_weights_and_mean(self):
        bim = make_bim()
        bim.fusion.weight.data[:] = 0.0
        bim.fusion.bias.data[:] = 0.0
        streams = [Tensor(RNG.normal(size=(1, 4, 8))) for _ in range(3)]
        weights, fused = bim.fuse(streams)
        np.testing.assert_allclose(weights.data, 1 / 3, atol=1e-12)
        mean = sum(s.data for s in streams) / 3
        np.testing.assert_allclose(fused.data, mean, atol=1e-12)

    def test_dominant_logit_selects_stream(self):
        bim = make_bim()
        bim.fusion.weight.data[:] = 0.0
        bim.fusion.bias.data[:] = 0.0
        bim.fusion.bias.data[1] = 1e9
        streams = [Tensor(RNG.normal(size=(1, 4, 8))) for _ in range(3)]
        _, fused = bim.fuse(streams)
        np.testing.assert_allclose(fused.data, streams[1].data, atol=1e-12)

    def test_matches_loop_oracle(self):
        bim = make_bim(seed=7)
        streams = [Tensor(RNG.normal(size=(1, 3, 8))) for _ in range(3)]
        weights, fused = bim.fuse(streams)
        cat = np.concatenate([s.data[0] for s in streams], axis=-1)
        logits = cat @ bim.fusion.weight.data + bim.fusion.bias.data
        expected_w = np.exp(logits - logits.max(-1, keepdims=True))
        expected_w /= expected_w.sum(-1, keepdims=True)
        np.testing.assert_allclose(weights.data[0], expected_w, atol=1e-10)
        expected_f = np.zeros((3, 8))
        for t in range(3):
            for k in range(3):
                expected_f[t] += expected_w[t, k] * streams[k].data[0, t]
        np.testing.assert_allclose(fused.data[0], expected_f, atol=1e-10)

    def test_weights_row_stochastic_random(self):
        for seed in range(30):
            bim = make_bim(seed=seed)
            streams = [Tensor(RNG.normal(size=(2, 4, 8))) for _ in range(3)]
            weights, _ = bim.fuse(streams)
            assert (weights.data >= 0).all()
            np.testing.assert_allclose(weights.data.sum(-1), 1.0, atol=1e-6)


class TestRemoveBias:
    def test_zero_bias_identity(self):
        feats = Tensor(RNG.normal(size=(1, 4, 8)))
        out = remove_bias(feats, Tensor(np.zeros((1, 4, 8))))
        np.testing.assert_array_equal(out.data, feats.data)

    def test_total_bias_gives_zero(self):
        feats = Tensor(RNG.normal(size=(1, 4, 8)))
        out = remove_bias(feats, feats)
        np.testing.assert_array_equal(out.data, np.zeros((1, 4, 8)))

    def test_algebraic_identity(self):
        feats = Tensor(RNG.normal(size=(1, 4, 8)))
        fused = Tensor(RNG.normal(size=(1, 4, 8)))
        debiased = remove_bias(feats, fused)
        # the op is literal elementwise subtraction, bit for bit
        np.testing.assert_array_equal(debiased.data, feats.data - fused.data)
        # rearranged reconstruction holds to rounding
        np.testing.assert_allclose(feats.data - debiased.data, fused.data,
                                   atol=1e-12)


class TestDebiasedModule:
    def test_zero_head_gives_ln2(self):
        cfg = tiny_model_config()
        module = DebiasedModule(np.random.default_rng(0), cfg)
        for _, p in module.head.named_parameters():
            p.data[:] = 0.0
        feats = Tensor(RNG.normal(size=(1, 6, 16)))
        start, end = module(feats)
        loss = tsg_loss(start, end, np.array([[1, 4]]))
        assert abs(loss.item() - math.log(2)) < 1e-12


class TestCosine:
    def test_self_similarity(self):
        f = RNG.normal(size=8)
        assert abs(cosine_score(Tensor(f), Tensor(f)).item() - 1.0) < 1e-6

    def test_orthogonal(self):
        a = np.zeros(4)
        b = np.zeros(4)
        a[0] = 2.0
        b[1] = 3.0
        assert abs(cosine_score(Tensor(a), Tensor(b)).item()) < 1e-12

    def test_opposite(self):
        f = RNG.normal(size=8)
        assert abs(cosine_score(Tensor(f), Tensor(-f)).item() + 1.0) < 1e-6

    def test_zero_vector_defined_as_zero(self):
        z = np.zeros(4)
        assert cosine_score(Tensor(z), Tensor(z)).item() == 0.0

    def test_always_in_unit_interval(self):
        for _ in range(200):
            a = Tensor(RNG.normal(size=(3, 8)))
            b = Tensor(RNG.normal(size=(3, 8)))
            c = cosine_score(a, b).data
            assert (np.abs(c) <= 1.0 + 1e-12).all()


class TestFeatureContrastiveLoss:
    def test_equal_scores_ln2(self):
        feats = Tensor(RNG.normal(size=(1, 4, 8)))
        same = Tensor(np.array(feats.data, copy=True))
        loss = feature_contrastive_loss(feats, same, same)
        assert abs(loss.item() - math.log(2)) < 1e-12

    def test_closed_form_extremes(self):
        v = RNG.normal(size=8)
        feats = Tensor(v[None, None, :])
        pos = Tensor(v[None, None, :] * 2.0)      # cosine +1
        neg = Tensor(-v[None, None, :] * 3.0)     # cosine -1
        loss = feature_contrastive_loss(feats, pos, neg)
        np.testing.assert_allclose(loss.item(), math.log(1 + math.exp(-2)),
                                   atol=1e-6)

    def test_matches_scalar_loop_oracle(self):
        t = 4
        feats = RNG.normal(size=(1, t, 8))
        deb = RNG.normal(size=(1, t, 8))
        fused = RNG.normal(size=(1, t, 8))
        loss = feature_contrastive_loss(Tensor(feats), Tensor(deb),
                                        Tensor(fused))
        total = 0.0
        for k in range(t):
            f, d, b = feats[0, k], deb[0, k], fused[0, k]
            sp = f @ d / (np.linalg.norm(f) * np.linalg.norm(d) + 1e-8)
            sn = f @ b / (np.linalg.norm(f) * np.linalg.norm(b) + 1e-8)
            total += -math.log(math.exp(sp) / (math.exp(sp) + math.exp(sn)))
        np.testing.assert_allclose(loss.item(), total / t, atol=1e-10)

    def test_cosine_bounded_range(self):
        for _ in range(200):
            feats = Tensor(RNG.normal(size=(1, 5, 8)))
            deb = Tensor(RNG.normal(size=(1, 5, 8)))
            fused = Tensor(RNG.normal(size=(1, 5, 8)))
            loss = feature_contrastive_loss(feats, deb, fused).item()
            assert 0.1269 <= loss <= 2.1269


class TestBranchComposition:
    def test_bias1_is_query_invariant(self):
        cfg = tiny_model_config()
        model = DTSGModel(np.random.default_rng(5), cfg)
        ds = toy_dataset(4, t_raw=6, d_in=8)
        vocab = toy_vocab()
        cache = FeatureCache(6, np.float64)
        batch1 = collate(ds.samples[:2], vocab, cfg, cache)
        dummy_negatives(batch1)
        batch2 = {**batch1,
                  "tokens": np.array(batch1["tokens"][::-1], copy=True)}
        with ad.no_grad():
            f1a, _, _ = model.bias1(batch1["video"])
            f1b, _, _ = model.bias1(batch2["video"])
        np.testing.assert_array_equal(f1a.data, f1b.data)

    def test_branch_gradient_check(self):
        # gates, fusion, subtraction, and the contrastive pull, composed
        bim = make_bim(seed=11)
        streams = [Tensor(RNG.normal(size=(1, 3, 8)), requires_grad=True)
                   for _ in range(3)]
        feats = Tensor(RNG.normal(size=(1, 3, 8)), requires_grad=True)

        def loss():
            gated, _, fused = bim(streams)
            debiased = remove_bias(feats, fused)
            return feature_contrastive_loss(feats, debiased, fused)

        params = list(bim.named_parameters())
        params += [(f"stream{i}", s) for i, s in enumerate(streams)]
        params.append(("feats", feats))
        worst = param_grad_check(loss, params)
        assert worst < 1e-4
