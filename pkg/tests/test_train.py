import math
from collections import Counter

import numpy as np
import pytest
import torch

from paramfactor import synth
from paramfactor.config import stream
from paramfactor.container import ContainerError
from paramfactor.data import assign_splits, partition
from paramfactor.hypernet import HyperNetDims, init_hypernet
from paramfactor.latents import init_store
from paramfactor.train import (
    TrainConfig,
    TrainingError,
    adam_update,
    all_named_parameters,
    dev_objective,
    load_checkpoint,
    net_from_checkpoint,
    prepare_cells,
    sample_cell,
    save_checkpoint,
    store_from_checkpoint,
    train,
)


class TestAdamUpdate:
    def test_first_step_moves_by_learning_rate(self):
        new, (m, v, t) = adam_update(1.0, 1.0, (0.0, 0.0, 0), lr=0.001)
        # bias correction gives m_hat = 1, v_hat = 1
        assert t == 1
        assert new == pytest.approx(1.0 - 0.001, abs=1e-9)

    def test_zero_gradient_leaves_parameter(self):
        new, _ = adam_update(2.5, 0.0, (0.0, 0.0, 0), lr=0.1)
        assert new == 2.5

    def test_constant_gradient_monotone(self):
        param, state = 0.0, (0.0, 0.0, 0)
        values = [param]
        for _ in range(100):
            param, state = adam_update(param, 1.0, state, lr=0.01)
            values.append(param)
        diffs = np.diff(values)
        assert np.all(diffs < 0)

    def test_array_form_matches_scalar(self):
        p = np.array([1.0, -2.0])
        g = np.array([0.3, -0.7])
        m = np.zeros(2)
        v = np.zeros(2)
        new_vec, _ = adam_update(p, g, (m, v, 0), lr=0.05)
        for i in range(2):
            new_s, _ = adam_update(p[i], g[i], (0.0, 0.0, 0), lr=0.05)
            assert new_vec[i] == pytest.approx(new_s, abs=1e-15)

    def test_negative_step_counter_rejected(self):
        with pytest.raises(ValueError):
            adam_update(0.0, 1.0, (0.0, 0.0, -1))


def test_cell_sampling_uniform_within_3_sigma():
    seen = [(f"t{i}", f"l{j}") for i in range(2) for j in range(3)]
    rng = stream(51, "uniformity")
    n = 100_000
    counts = Counter(sample_cell(rng, seen) for _ in range(n))
    expected = n / len(seen)
    sigma = math.sqrt(n * (1 / 6) * (5 / 6))
    for cell in seen:
        assert abs(counts[cell] - expected) < 3 * sigma


def small_world(family="diagonal", k=None, seed=23, examples=30):
    truth = synth.generate(n_tasks=2, n_langs=3, h=4, e=8, class_counts=[3, 3],
                           examples_per_cell=examples, sentence_length=5, seed=seed)
    part = partition(sorted(truth.corpora), 1 / 3, seed=seed)
    assign_splits(part, truth.corpora, seed=seed)
    cells = prepare_cells(
        truth.corpora, part, lambda c: truth.embeddings[c.cell], truth.schemas
    )
    store = init_store(list(truth.tasks), list(truth.langs), family, h=4, k=k, seed=seed)
    net = init_hypernet(HyperNetDims(4, 8, 3, (12, 10)), seed=seed)
    return truth, part, cells, store, net


class TestTrainLoop:
    def test_zero_steps_returns_initial_parameters(self):
        _, part, cells, store, net = small_world()
        before = {n: p.detach().numpy().copy() for n, p in all_named_parameters(store, net).items()}
        result = train(part, cells, store, net,
                       TrainConfig(learning_rate=1e-3, max_steps=0, seed=1))
        assert result.checkpoint.step == 0
        assert result.checkpoint.best_params is None
        for name, arr in result.checkpoint.eval_params().items():
            assert np.array_equal(arr, before[name])

    def test_fixed_seed_bit_identical_checkpoints(self, tmp_path):
        cfg = TrainConfig(learning_rate=1e-3, batch_size=4, v_train=2,
                          validation_every=20, max_steps=60, seed=77)
        paths = []
        for run in range(2):
            _, part, cells, store, net = small_world()
            result = train(part, cells, store, net, cfg)
            path = tmp_path / f"run{run}.bin"
            save_checkpoint(result.checkpoint, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_training_improves_dev_objective(self):
        truth, part, cells, store, net = small_world(examples=200)
        seen = sorted(part.seen)
        initial = dev_objective(cells, seen, store, net)
        cfg = TrainConfig(learning_rate=1e-2, batch_size=8, v_train=2,
                          validation_every=100, max_steps=800, seed=3)
        result = train(part, cells, store, net, cfg)
        assert result.checkpoint.best_dev is not None
        assert result.checkpoint.best_dev > initial

    def test_loss_stream_logged(self, tmp_path):
        _, part, cells, store, net = small_world()
        log = tmp_path / "train.log"
        cfg = TrainConfig(learning_rate=1e-3, max_steps=25, validation_every=10, seed=5)
        result = train(part, cells, store, net, cfg, log_path=log)
        lines = log.read_text().splitlines()
        assert len(lines) == 25
        for record, line in zip(result.history, lines):
            parts = line.split("\t")
            assert int(parts[0]) == record.step
            assert (parts[1], parts[2]) == (record.task, record.lang)
            assert float(parts[3]) == record.loss  # repr round-trips exactly

    def test_resume_reproduces_uninterrupted_stream(self, tmp_path):
        cfg_full = TrainConfig(learning_rate=1e-3, batch_size=4, v_train=2,
                               validation_every=20, max_steps=60, seed=9)
        _, part, cells, store, net = small_world()
        full = train(part, cells, store, net, cfg_full)

        cfg_half = TrainConfig(learning_rate=1e-3, batch_size=4, v_train=2,
                               validation_every=20, max_steps=30, seed=9)
        _, part2, cells2, store2, net2 = small_world()
        half = train(part2, cells2, store2, net2, cfg_half)
        mid = tmp_path / "mid.bin"
        save_checkpoint(half.checkpoint, mid)

        resumed_ckpt = load_checkpoint(mid)
        store3 = store_from_checkpoint(resumed_ckpt)
        net3 = net_from_checkpoint(resumed_ckpt)
        _, part3, cells3, _, _ = small_world()
        tail = train(part3, cells3, store3, net3, cfg_full, resume=resumed_ckpt)

        full_losses = [r.loss for r in full.history]
        stitched = [r.loss for r in half.history] + [r.loss for r in tail.history]
        assert stitched == full_losses

        a = tmp_path / "full.bin"
        b = tmp_path / "resumed.bin"
        save_checkpoint(full.checkpoint, a)
        save_checkpoint(tail.checkpoint, b)
        assert a.read_bytes() == b.read_bytes()

    def test_nonfinite_loss_aborts_with_cell(self):
        _, part, cells, store, net = small_world()
        with torch.no_grad():
            net.psi_weight.fill_(float("inf"))  # nan propagates into the loss
        cfg = TrainConfig(learning_rate=1e-3, max_steps=10, seed=1)
        with pytest.raises(TrainingError, match="step 1"):
            train(part, cells, store, net, cfg)

    def test_empty_training_data_rejected(self):
        _, part, cells, store, net = small_world()
        broken = dict(cells)
        first_seen = sorted(part.seen)[0]
        import dataclasses
        broken[first_seen] = dataclasses.replace(broken[first_seen], train_ids=())
        with pytest.raises(TrainingError, match="no training sentences"):
            train(part, broken, store, net, TrainConfig(max_steps=1, seed=0))


class TestCheckpointFile:
    def _roundtrip(self, tmp_path, mutate=None):
        _, part, cells, store, net = small_world()
        cfg = TrainConfig(learning_rate=1e-3, max_steps=15, validation_every=5, seed=2)
        result = train(part, cells, store, net, cfg)
        path = tmp_path / "ck.bin"
        save_checkpoint(result.checkpoint, path)
        if mutate:
            mutate(path)
        return result.checkpoint, load_checkpoint(path)

    def test_round_trip_equality(self, tmp_path):
        original, loaded = self._roundtrip(tmp_path)
        assert loaded.step == original.step
        assert loaded.tasks == original.tasks
        assert loaded.labels == original.labels
        assert loaded.rng_states == original.rng_states
        for name, arr in original.params.items():
            assert np.array_equal(arr, loaded.params[name])
        for cell, perm in original.sampler_perms.items():
            assert np.array_equal(perm, loaded.sampler_perms[cell])
        assert loaded.best_dev == original.best_dev

    def test_truncated_payload_names_entry(self, tmp_path):
        def chop(path):
            raw = path.read_bytes()
            path.write_bytes(raw[:-16])

        with pytest.raises(ContainerError, match="manifest entry"):
            self._roundtrip(tmp_path, mutate=chop)

    def test_bad_magic_rejected(self, tmp_path):
        def stomp(path):
            raw = bytearray(path.read_bytes())
            raw[:4] = b"XXXX"
            path.write_bytes(bytes(raw))

        with pytest.raises(ContainerError, match="magic"):
            self._roundtrip(tmp_path, mutate=stomp)
