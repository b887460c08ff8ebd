import numpy as np
import pytest

from tokenmark import attacks as A
from tokenmark import data as D
from tokenmark import permutation as P
from tokenmark import tensor as T
from tokenmark import watermark_b as WB
from tokenmark import watermark_s as WS
from tokenmark.model import ModelConfig, init_weights
from tokenmark.rng import make_rng
from tokenmark.tensor import Tensor


@pytest.fixture(scope="module")
def setup():
    cfg = ModelConfig(n_layers=1, d=8, n_heads=2, d_mlp=16)
    w = init_weights(cfg, make_rng(0, "atk-init"))
    data = D.make_dataset(D.TaskConfig(), 200, 0, "train")
    return w, data


def test_prune_array_example():
    out, _ = A.prune_array(np.array([1.0, -2.0, 3.0, -4.0]), 0.5)
    assert out.tolist() == [0.0, 0.0, 3.0, -4.0]
    same, _ = A.prune_array(np.array([1.0, -2.0]), 0.0)
    assert same.tolist() == [1.0, -2.0]
    with pytest.raises(ValueError):
        A.prune_array(np.ones(3), 1.0)


def test_prune_neuron_zeroes_rows_and_biases():
    W = np.array([[1.0, 1.0], [0.1, 0.1], [3.0, 0.0], [0.0, 0.2]])
    b = np.arange(4.0)
    out, ob = A.prune_array(W, 0.5, "neuron", b)
    assert out[1].tolist() == [0.0, 0.0] and out[3].tolist() == [0.0, 0.0]
    assert ob.tolist() == [0.0, 0.0, 2.0, 0.0]


def test_prune_model_fraction_and_embeddings(setup):
    w, _ = setup
    pruned = A.prune(w, 0.3)
    for k in w.backbone_names():
        if w[k].ndim == 2:
            assert np.mean(pruned[k].data == 0.0) == pytest.approx(np.floor(0.3 * w[k].data.size) / w[k].data.size)
    for k in w.embedding_names():
        assert np.array_equal(pruned[k].data, w[k].data)
    assert not np.any(w["layers.0.w_q"].data == 0.0)  # input untouched


def test_quantize_error_bound_and_levels(rng):
    x = rng.normal(size=1000).astype(np.float32)
    q8 = A.quantize_array(x, 8)
    assert np.max(np.abs(q8 - x)) <= np.max(np.abs(x)) / 254 + 1e-6
    q2 = A.quantize_array(x, 2)
    assert len(np.unique(q2)) <= 3
    q1 = A.quantize_array(x, 1)
    assert len(np.unique(q1)) == 2 and np.allclose(np.abs(q1), np.mean(np.abs(x)))
    zeros = np.zeros(5, dtype=np.float32)
    assert np.array_equal(A.quantize_array(zeros, 4), zeros)
    with pytest.raises(ValueError):
        A.quantize_array(x, 9)


def test_quantize_model_skips_embeddings(setup):
    w, _ = setup
    q = A.quantize(w, 4)
    assert np.array_equal(q["tok_emb"].data, w["tok_emb"].data)
    assert not np.array_equal(q["layers.0.w_1"].data, w["layers.0.w_1"].data)


def test_oracle_exposes_outputs_only(setup):
    w, data = setup
    oracle = A.QueryOracle(w)
    assert not hasattr(oracle, "__dict__")
    assert not any(isinstance(getattr(oracle, s, None), type(w)) for s in A.QueryOracle.__slots__)
    Z = np.random.default_rng(0).normal(size=(2, 4, 8)).astype(np.float32)
    out = oracle.query(Z)
    out[:] = 0.0  # the caller's copy, not the model
    assert np.any(oracle.query(Z) != 0.0)
    assert oracle.n_queries == 4
    tables = oracle.embedding_tables()
    tables["tok_emb"][:] = 0.0
    assert np.any(oracle.embedding_tables()["tok_emb"] != 0.0)


def test_extraction_improves_similarity(setup):
    w, data = setup
    sub0 = A.extract_model(A.QueryOracle(w), data.tokens, steps=0)
    sub = A.extract_model(A.QueryOracle(w), data.tokens, steps=150, lr=3e-3)
    probe = data.tokens[:50]
    assert A.output_similarity(w, sub, probe) > A.output_similarity(w, sub0, probe)


def test_overwrite_with_same_spec_is_rejected(setup):
    w, data = setup
    b = WB.make_bundle_b(8, 2, 0)
    with pytest.raises(ValueError):
        A.overwrite(w, b, WB.WatermarkBundleB(b.spec, 1, b.decoder, 0), data)


def test_random_search_budget_zero_and_planted_key(setup):
    w, data = setup
    b = WB.make_bundle_b(8, 2, 0, embed_config=WB.EmbedConfigB(steps=120))
    b.target = WB.select_target(w, b.decoder, data.tokens[:100], b.spec)
    star = WB.embed_b(w, b, data)
    small, full = data.tokens[:16], data.tokens[:100]
    none = A.random_search(star, b, small, full, budget=0)
    assert none.tried == 0 and none.hits == 0
    planted = A.random_search(star, b, small, full, budget=0, planted=[b.spec])
    assert planted.hits == 1 and planted.hit_specs[0] == b.spec.to_dict()


def test_soft_permutation_is_hard_at_low_temperature(rng):
    spec = P.sample(rng, 8, 2)
    H, Bs = A._planted_logits(spec, scale=10.0)
    soft = A.soft_permutation(Tensor(H), [Tensor(b) for b in Bs], 0.05, None).data
    assert np.allclose(soft, spec.matrix(), atol=1e-6)


def test_soft_permutation_rows_sum_to_one(rng):
    H = Tensor(rng.normal(size=(2, 2)))
    Bs = [Tensor(rng.normal(size=(4, 4))) for _ in range(2)]
    soft = A.soft_permutation(H, Bs, 1.0, rng).data
    assert np.allclose(soft.sum(axis=0), 1.0)


def test_project_spec_repairs_duplicates():
    logits = np.array([[5.0, 0.0, 0.0], [4.0, 1.0, 0.0], [3.0, 0.0, 1.0]])
    choice, repaired = A._assignment(logits, np.random.default_rng(0))
    assert repaired == 2 and sorted(choice) == [0, 1, 2] and choice[0] == 0


@pytest.fixture(scope="module")
def marked_s(setup):
    w, data = setup
    s = WS.make_bundle_s(8, 2, 0, embed_config=WS.EmbedConfigS(steps=60))
    star, G = WS.embed_s(WS.EmbeddingSessionS(w, s), data)
    s.decoder = G
    return star, s


def test_gradient_search_from_planted_init_keeps_the_key(marked_s, setup):
    star, s = marked_s
    _, data = setup
    spec, info = A.gradient_search(star, s, data.tokens, steps=20, lr=0.01, init=s.spec,
                                   temperature=0.1, final_temperature=0.1)
    assert spec == s.spec
    assert info["repaired_rows"] == 0


def test_alpha_drives_soft_matrix_towards_orthogonal(marked_s, setup):
    star, s = marked_s
    _, data = setup

    def ortho_after(alpha):
        rng = make_rng(0, "ortho")
        H = Tensor(rng.normal(size=(2, 2)).astype(np.float32), requires_grad=True)
        Bs = [Tensor(rng.normal(size=(4, 4)).astype(np.float32), requires_grad=True) for _ in range(2)]
        from tokenmark.optim import Optimizer
        opt = Optimizer([H] + Bs, lr=0.05)
        eye = Tensor(np.eye(8, dtype=np.float32))
        for _ in range(60):
            Pm = A.soft_permutation(H, Bs, 1.0, None)
            Z = A.embed(data.tokens[:16], star)
            loss = -T.mean(A._decoded_similarity(star, s, Z, Pm)) + \
                T.tsum(T.square(eye - T.matmul(T.transpose(Pm, (1, 0)), Pm))) * alpha
            loss.backward()
            opt.step()
        Pm = A.soft_permutation(H, Bs, 1.0, None).data
        return float(np.sum((np.eye(8) - Pm.T @ Pm) ** 2))

    assert ortho_after(10.0) < ortho_after(0.0)


def test_adaptive_removal_zero_steps_is_identity(marked_s, setup):
    star, s = marked_s
    _, data = setup
    out = A.adaptive_removal(star, P.sample_other(make_rng(0, "c"), s.spec, s.family), s, data.tokens, steps=0)
    assert out.equals(star)


def test_attack_config_validation():
    with pytest.raises(ValueError):
        A.AttackConfig("nonsense")
    with pytest.raises(ValueError):
        A.AttackConfig("prune", ratio=1.5)
    with pytest.raises(ValueError):
        A.AttackConfig("quantize", bits=0)
    with pytest.raises(ValueError):
        A.AttackConfig("gradient_search", alpha=-1)


def test_finetune_rows_match_epochs_and_victim_untouched(setup):
    w, data = setup
    b = WB.make_bundle_b(8, 2, 0)
    before = w["layers.0.w_q"].data.copy()
    victim = A.Victim({"B": (w, b)}, data.tokens[:40])
    task = D.make_dataset(D.TaskConfig(task_seed=1), 64, 0, "ft")
    rep = A.run_attack(A.AttackConfig("finetune", epochs=2), victim, task_train=task, task_test=task)
    assert [r["strength"] for r in rep.rows] == [1, 2]
    assert np.array_equal(w["layers.0.w_q"].data, before)
    again = A.run_attack(A.AttackConfig("finetune", epochs=2), victim, task_train=task, task_test=task)
    assert again.to_dict(with_timing=False) == rep.to_dict(with_timing=False)


def test_sweep_csv_columns():
    text = A.sweep_csv([{"strength": 0.1, "wr_tokenmark_b": 1.0, "downstream_acc": None}])
    header, row = text.strip().split("\n")
    assert header == ",".join(A.CSV_COLUMNS)
    assert row == "0.1,1.0,,,"
