import math

import numpy as np
import pytest
import torch

from paramfactor.config import stream
from paramfactor.elbo import NoiseBank, evaluate_step, gradient
from paramfactor.hypernet import HyperNetDims, init_hypernet
from paramfactor.latents import init_store, kl_penalty
from paramfactor.likelihood import TaskSchema

from helpers import max_relative_grad_error, tensor, zero_hypernet, zero_noise_bank

SCHEMA = TaskSchema("t0", ("a", "b", "c", "d"))
DIMS = HyperNetDims(h=4, e=8, c=4, hidden=(12, 10))


def fresh_bank(seed):
    return NoiseBank(streams={
        "eps": stream(seed, "eps"),
        "zeta": stream(seed, "zeta"),
        "theta": stream(seed, "theta"),
    })


def make_batch(n, e=8, seed=0):
    rng = stream(seed, "batch")
    labels = SCHEMA.labels
    return [(rng.standard_normal(e), labels[i % len(labels)]) for i in range(n)]


class TestEvaluateStep:
    def test_uniform_hand_value(self):
        # zero hypernet + zero noise: every token gets the uniform softmax
        store = init_store(["t0"], ["l0"], "diagonal", h=4, seed=1)
        net = zero_hypernet(DIMS)
        batch = make_batch(2)
        bank = zero_noise_bank(4, None, DIMS.d, V=1)
        obj = evaluate_step(store, net, batch, SCHEMA, "t0", "l0", V=1, kl_weight=0.0, noise=bank)
        assert obj.neg_log_lik == pytest.approx(2 * math.log(4), abs=1e-12)
        assert obj.value == obj.neg_log_lik

    def test_zero_kl_weight_gives_exact_likelihood(self):
        store = init_store(["t0"], ["l0"], "low_rank", h=4, k=2, seed=2)
        net = init_hypernet(DIMS, seed=2)
        obj = evaluate_step(
            store, net, make_batch(3), SCHEMA, "t0", "l0",
            V=2, kl_weight=0.0, noise=fresh_bank(3),
        )
        assert obj.value == obj.neg_log_lik
        assert obj.kl_weighted == 0.0

    def test_components_sum_exactly(self):
        store = init_store(["t0"], ["l0"], "diagonal", h=4, seed=3)
        net = init_hypernet(DIMS, seed=3)
        obj = evaluate_step(
            store, net, make_batch(5), SCHEMA, "t0", "l0",
            V=3, kl_weight=0.01, noise=fresh_bank(4),
        )
        assert obj.value == obj.neg_log_lik + obj.kl_weighted

    def test_replay_is_bit_identical(self):
        store = init_store(["t0"], ["l0"], "low_rank", h=4, k=2, seed=5)
        net = init_hypernet(DIMS, seed=5)
        batch = make_batch(4)
        obj = evaluate_step(store, net, batch, SCHEMA, "t0", "l0",
                            V=2, kl_weight=0.02, noise=fresh_bank(6))
        replay = evaluate_step(store, net, batch, SCHEMA, "t0", "l0",
                               V=2, kl_weight=0.02, noise=NoiseBank.replay(obj.noise_record))
        assert replay.value == obj.value
        assert replay.neg_log_lik == obj.neg_log_lik
        assert replay.kl_weighted == obj.kl_weighted

    def test_kl_term_independent_of_batch_and_v(self):
        store = init_store(["t0"], ["l0"], "diagonal", h=4, seed=7)
        net = init_hypernet(DIMS, seed=7)
        klws = set()
        for n, v, s in ((2, 1, 10), (6, 3, 11), (4, 2, 12)):
            obj = evaluate_step(store, net, make_batch(n, seed=s), SCHEMA, "t0", "l0",
                                V=v, kl_weight=0.5, noise=fresh_bank(s))
            klws.add(obj.kl_weighted)
        assert len(klws) == 1
        assert klws.pop() == pytest.approx(0.5 * float(kl_penalty(store).detach()), rel=1e-15)

    def test_lowrank_with_zero_factor_matches_diagonal(self):
        diag_store = init_store(["t0"], ["l0"], "diagonal", h=4, seed=8)
        lr_store = init_store(["t0"], ["l0"], "low_rank", h=4, k=2, seed=8)
        with torch.no_grad():
            for q in list(lr_store.task_posteriors.values()) + list(lr_store.lang_posteriors.values()):
                q.factor.zero_()
        net = init_hypernet(DIMS, seed=8)
        batch = make_batch(3)
        # identical eps/theta streams; the zeta stream only exists for low-rank
        obj_d = evaluate_step(diag_store, net, batch, SCHEMA, "t0", "l0",
                              V=2, kl_weight=0.01, noise=fresh_bank(9))
        obj_lr = evaluate_step(lr_store, net, batch, SCHEMA, "t0", "l0",
                               V=2, kl_weight=0.01, noise=fresh_bank(9))
        assert obj_lr.value == obj_d.value

    def test_unknown_cell_rejected(self):
        store = init_store(["t0"], ["l0"], "diagonal", h=4, seed=0)
        net = init_hypernet(DIMS, seed=0)
        with pytest.raises(ValueError, match="unknown task"):
            evaluate_step(store, net, make_batch(1), SCHEMA, "tX", "l0",
                          V=1, kl_weight=0.0, noise=fresh_bank(0))
        with pytest.raises(ValueError, match="unknown lang"):
            evaluate_step(store, net, make_batch(1), SCHEMA, "t0", "lX",
                          V=1, kl_weight=0.0, noise=fresh_bank(0))

    def test_more_samples_reduce_variance(self):
        store = init_store(["t0"], ["l0"], "diagonal", h=4, seed=13)
        net = init_hypernet(DIMS, seed=13)
        batch = make_batch(3)

        def values(v, n=200):
            out = []
            for i in range(n):
                obj = evaluate_step(store, net, batch, SCHEMA, "t0", "l0",
                                    V=v, kl_weight=0.0, noise=fresh_bank(1000 + 7 * i + v))
                out.append(obj.value)
            return np.array(out)

        v1 = values(1)
        v4 = values(4)
        assert abs(v1.mean() - v4.mean()) < 4 * v1.std() / math.sqrt(len(v1))
        assert v4.var() < v1.var()


class TestGradient:
    def test_square_function_anchor(self):
        x = tensor([3.0], requires_grad=True)
        grads = gradient(lambda: (x * x).sum(), {"x": x})
        assert float(grads["x"]) == pytest.approx(6.0, abs=1e-12)

    def test_kl_diag_mean_gradient_is_mean(self):
        store = init_store(["t0"], ["l0"], "diagonal", h=6, seed=14)
        q = store.task_posteriors["t0"]
        grads = gradient(lambda: kl_penalty(store), {"m": q.mean})
        assert torch.allclose(grads["m"], q.mean, atol=0, rtol=0)

    @pytest.mark.parametrize("family,k", [("diagonal", None), ("low_rank", 2)])
    def test_full_step_finite_differences(self, family, k):
        store = init_store(["t0", "t1"], ["l0", "l1"], family, h=4, k=k, seed=15)
        dims = HyperNetDims(h=4, e=8, c=3, hidden=(10, 8))
        net = init_hypernet(dims, seed=15)
        schema = TaskSchema("t0", ("a", "b", "c"))
        rng = stream(16, "fd-batch")
        batch = [(rng.standard_normal(8), lab) for lab in ("a", "c", "b")]

        probe = evaluate_step(store, net, batch, schema, "t0", "l0",
                              V=2, kl_weight=0.05, noise=fresh_bank(17))
        from paramfactor.train import all_named_parameters
        params = all_named_parameters(store, net)

        def closure():
            return evaluate_step(
                store, net, batch, schema, "t0", "l0",
                V=2, kl_weight=0.05, noise=NoiseBank.replay(probe.noise_record),
            ).loss

        assert max_relative_grad_error(closure, params) < 1e-4

    def test_lowrank_kl_gradients_pass_finite_differences(self):
        # exercises the determinant-lemma derivative path for m, rho, B
        store = init_store(["t0"], ["l0"], "low_rank", h=5, k=2, seed=18)
        q = store.task_posteriors["t0"]
        params = {"mean": q.mean, "rho": q.rho, "factor": q.factor}
        assert max_relative_grad_error(lambda: kl_penalty(store), params) < 1e-4
