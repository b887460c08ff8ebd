import math

import numpy as np
import pytest

from tokenmark import data as D
from tokenmark import permutation as P
from tokenmark import watermark_b as WB
from tokenmark import watermark_s as WS
from tokenmark.model import ModelConfig, init_weights
from tokenmark.report import watermark_rate
from tokenmark.rng import make_rng
from tokenmark.tensor import Tensor


@pytest.fixture(scope="module")
def small():
    cfg = ModelConfig(n_layers=1, d=8, n_heads=2, d_mlp=16)
    w = init_weights(cfg, make_rng(0, "wm-init"))
    data = D.make_dataset(D.TaskConfig(), 300, 0, "train")
    return w, data


def test_not_target_loss_values():
    confident_elsewhere = Tensor(np.array([[0.0, 40.0, 0.0]]))
    assert float(WB.not_target_loss(confident_elsewhere, 0).data) < 1e-5
    uniform = Tensor(np.zeros((1, 4)))
    assert math.isclose(float(WB.not_target_loss(uniform, 2).data), -math.log(0.75 + 1e-6), rel_tol=1e-5)


def test_corr_and_uncorr_loss_values():
    sk = np.array([1.0, 2.0, -1.0], dtype=np.float32)
    same = Tensor(np.stack([sk * 3.0, sk * 0.5]))
    assert math.isclose(float(WS.loss_corr(sk, same).data), -1.0, rel_tol=1e-6)
    assert math.isclose(float(WS.loss_uncorr(sk, same).data), 1.0, rel_tol=1e-6)
    orth = Tensor(np.array([[2.0, -1.0, 0.0]]))
    assert abs(float(WS.loss_uncorr(sk, orth).data)) < 1e-12
    assert math.isclose(float(WS.loss_corr(sk, Tensor(-sk[None])).data), 1.0, rel_tol=1e-6)


def test_feature_match_loss_of_identical_outputs():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 5)))
    assert math.isclose(float(WS.feature_match_loss(x, x).data), -1.0, rel_tol=1e-6)


def test_wr_arithmetic():
    assert WS.wr_from_scores([0.6, 0.4, 0.51, 0.5], 0.5) == 0.5  # strictly above the threshold
    logits = np.array([[0, 1, 0], [2, 0, 0], [0, 3, 1], [0, 0, 1]])
    assert WB.wr_from_logits(logits, 1) == 0.5
    assert watermark_rate([True] * 3 + [False]) == 0.75
    with pytest.raises(ValueError):
        watermark_rate([])


def test_bundles_are_deterministic_and_non_identity():
    a, b = WB.make_bundle_b(16, 2, 4), WB.make_bundle_b(16, 2, 4)
    assert a.spec == b.spec and a.target == b.target
    assert np.array_equal(a.decoder.state()["0.weight"], b.decoder.state()["0.weight"])
    assert not a.spec.is_identity()
    s1, s2 = WS.make_bundle_s(16, 2, 4), WS.make_bundle_s(16, 2, 4)
    assert np.array_equal(s1.sk, s2.sk) and s1.spec == s2.spec
    assert s1.spec != WS.make_bundle_s(16, 2, 5).spec


def test_bundle_validation():
    dec = WB.random_decoder(8, 0)
    with pytest.raises(ValueError):
        WB.WatermarkBundleB(P.PermutationSpec.identity(8, 2), 10, dec, 0)
    s = WS.make_bundle_s(8, 2, 0)
    with pytest.raises(ValueError):
        WS.WatermarkBundleS(s.spec, s.sk, s.decoder, epsilon_wm=1.0)
    with pytest.raises(ValueError):
        WS.WatermarkBundleS(s.spec, s.sk[:4], s.decoder)


def test_zero_step_embedding_leaves_weights_alone(small):
    w, data = small
    bundle = WB.make_bundle_b(8, 2, 0, embed_config=WB.EmbedConfigB(steps=0))
    assert WB.embed_b(w, bundle, data).equals(w)
    sb = WS.make_bundle_s(8, 2, 0)
    with pytest.raises(ValueError):
        WS.embed_s(WS.EmbeddingSessionS(w, sb), data, steps=0)


def test_embedding_does_not_touch_inputs(small):
    w, data = small
    before = {k: v.data.copy() for k, v in w.params.items()}
    bundle = WB.make_bundle_b(8, 2, 0, embed_config=WB.EmbedConfigB(steps=3))
    star = WB.embed_b(w, bundle, data)
    sb = WS.make_bundle_s(8, 2, 0, embed_config=WS.EmbedConfigS(steps=2))
    star_s, _ = WS.embed_s(WS.EmbeddingSessionS(w, sb), data)
    assert all(np.array_equal(before[k], w.params[k].data) for k in before)
    for out in (star, star_s):
        for k in w.embedding_names():
            assert np.array_equal(out[k].data, w[k].data)
        assert not out.equals(w)


def test_scheme_b_embeds_on_a_small_model(small):
    w, data = small
    bundle = WB.make_bundle_b(8, 2, 1, embed_config=WB.EmbedConfigB(steps=150))
    bundle.target = WB.select_target(w, bundle.decoder, data.tokens[:128], bundle.spec)
    star = WB.embed_b(w, bundle, data)
    probe = data.tokens[:100]
    assert WB.extract_b(star, bundle, probe).wr > 0.95
    assert WB.extract_b(star, bundle, probe, spec=None).wr < 0.2


def test_extract_reports(small):
    w, data = small
    s = WS.make_bundle_s(8, 2, 0)
    rep = WS.extract_s(w, s, data.tokens[:10])
    assert rep.n_samples == 10 and len(rep.scores) == 10 and rep.threshold == 0.5
    assert rep.wr == watermark_rate(rep.hits)
    assert all(-1.0 - 1e-6 <= x <= 1.0 + 1e-6 for x in rep.scores)
    with pytest.raises(ValueError):
        WS.extract_s(w, s, data.tokens[:0])
    b = WB.make_bundle_b(8, 2, 0)
    assert WB.extract_b(w, b, data.tokens[:10]).target == b.target


def test_trigger_extraction_uses_the_pattern(small):
    w, data = small
    tb = WB.TriggerBaseline((60, 61, 62), 0, WB.random_decoder(8, 3))
    rep = WB.extract_trigger(w, tb, data.tokens[:20])
    assert rep.n_samples == 20


def test_noisy_weights_are_relative_and_differentiable(tiny_weights):
    from tokenmark import tensor as T
    from tokenmark.training import noisy_weights

    w = tiny_weights.copy(requires_grad=True)
    a = noisy_weights(w, 0.2, make_rng(0, "n"))
    b = noisy_weights(w, 0.2, make_rng(0, "n"))
    for k in w.backbone_names():
        assert np.array_equal(a.params[k].data, b.params[k].data)
        if w.params[k].ndim > 1:
            ratio = np.std(a.params[k].data - w.params[k].data) / np.std(w.params[k].data)
            assert 0.1 < ratio < 0.3
    for k in w.embedding_names():
        assert a.params[k] is w.params[k]
    T.tsum(a.params["layers.0.w_q"]).backward()
    assert np.allclose(w.params["layers.0.w_q"].grad, 1.0)
