import numpy as np
import pytest

from tokenmark import equivariance as E
from tokenmark import permutation as P
from tokenmark.model import ModelConfig
from tokenmark.rng import make_rng


def test_small_suite_passes():
    rep = E.run_suite(trials=6, seed=3)
    assert rep.passed
    assert rep.max_forward < 1e-4
    assert set(rep.max_backward) == set(E.GRADIENT_GROUPS)


@pytest.mark.parametrize("family", P.FAMILIES)
def test_every_family_is_equivariant(family):
    assert E.run_suite(trials=3, seed=1, grid=((2, 8, 2),), family=family).passed


def test_gelu_and_no_qkv_bias_variants():
    for cfg in (ModelConfig(n_layers=2, d=8, n_heads=2, d_mlp=16, activation="gelu"),
                ModelConfig(n_layers=2, d=8, n_heads=4, d_mlp=8, qkv_bias=False)):
        rng = make_rng(0, "variant")
        w = E.random_weights(cfg, rng)
        Z = rng.normal(size=(2, 5, 8)).astype(np.float32)
        spec = P.sample(rng, 8, cfg.n_heads)
        assert E.forward_deviation(w, Z, spec) < 1e-4


def test_cross_head_swap_breaks_equivariance():
    assert E.negative_control(trials=3) > 1e-2
    assert not E.run_suite(trials=4, grid=((1, 8, 2),), inject_cross_head=True, suites=("forward",)).passed


def test_zero_trials_pass_vacuously(caplog):
    rep = E.run_suite(trials=0)
    assert rep.passed
    assert "vacuously" in caplog.text


def test_identity_permutation_matches():
    cfg = ModelConfig(n_layers=1, d=8, n_heads=2, d_mlp=16)
    rng = make_rng(0, "ident")
    w = E.random_weights(cfg, rng)
    Z = rng.normal(size=(1, 4, 8)).astype(np.float32)
    assert E.forward_deviation(w, Z, P.PermutationSpec.identity(8, 2)) < 1e-6
