"""Optimizer, training-loop, early-stopping, grid-search, and
checkpoint tests, cross-checked against scalar reference loops."""

import json
import math
import struct

import numpy as np
import pytest

from hellm import trainer
from hellm.autodiff import Tensor
from hellm.bert import BertConfig, EncoderWeights, init_weights
from hellm.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from hellm.errors import ConfigError, ContractError, DataError
from hellm.pretrain_data import IS_NEXT, NOT_NEXT, PretrainInstance
from hellm.trainer import (
    AdamState,
    GridSpec,
    PretrainRunConfig,
    adam_step,
    clip_gradients,
    grid_search,
    pretrain,
    repeat_with_seeds,
    run_early_stopping,
)

from hellm import bert


def tiny_config(**overrides):
    base = dict(
        layers=1,
        hidden=16,
        heads=2,
        intermediate=32,
        max_positions=12,
        vocab_size=64,
        dropout=0.1,
    )
    base.update(overrides)
    return BertConfig(**base)


def make_instances(n, vocab_size, seed=0):
    """Random but structurally valid packed instances of length 12."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        body = rng.integers(5, vocab_size, size=6).tolist()
        ids = [2] + body[:3] + [3] + body[3:] + [3] + [0, 0, 0]
        segment_ids = [0] * 5 + [1] * 4 + [0] * 3
        positions = sorted(rng.choice([1, 2, 3, 5, 6, 7], size=2, replace=False).tolist())
        out.append(
            PretrainInstance(
                ids=ids,
                segment_ids=segment_ids,
                mlm_positions=positions,
                mlm_labels=rng.integers(5, vocab_size, size=2).tolist(),
                nsp_label=IS_NEXT if k % 2 == 0 else NOT_NEXT,
                attention_length=9,
            )
        )
    return out


def scalar_adam_oracle(x0, grads_per_step, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Pure-python-float Adam, one value per coordinate."""
    x = [float(v) for v in x0]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t, grads in enumerate(grads_per_step, start=1):
        for i, g in enumerate(grads):
            g = float(g)
            m[i] = b1 * m[i] + (1.0 - b1) * g
            v[i] = b2 * v[i] + (1.0 - b2) * g * g
            mhat = m[i] / (1.0 - b1**t)
            vhat = v[i] / (1.0 - b2**t)
            x[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    return x


class TestAdam:
    def test_first_step_with_unit_gradient_moves_by_lr(self):
        params = {"w": Tensor(np.full(4, 5.0, dtype=np.float64), requires_grad=True)}
        state = AdamState.create(params, lr=0.1)
        adam_step(params, {"w": np.ones(4)}, state)
        np.testing.assert_allclose(params["w"].data, 4.9, atol=1e-6)
        assert state.t == 1

    def test_zero_gradient_leaves_parameters_unchanged(self):
        params = {"w": Tensor(np.arange(3.0), requires_grad=True)}
        state = AdamState.create(params, lr=0.5)
        for _ in range(5):
            adam_step(params, {"w": np.zeros(3)}, state)
        np.testing.assert_array_equal(params["w"].data, np.arange(3.0))

    def test_quadratic_converges_and_matches_scalar_simulation(self):
        params = {"x": Tensor(np.ones(5, dtype=np.float64), requires_grad=True)}
        state = AdamState.create(params, lr=0.05)
        grad_log = []
        for _ in range(100):
            g = 2.0 * params["x"].data.copy()
            grad_log.append(g.tolist())
            adam_step(params, {"x": g}, state)
        assert float(np.linalg.norm(params["x"].data)) < 0.2
        oracle = scalar_adam_oracle(np.ones(5), grad_log, lr=0.05)
        np.testing.assert_allclose(params["x"].data, oracle, atol=1e-12)

    def test_matches_scalar_reference_on_random_inputs(self):
        rng = np.random.default_rng(41)
        x0 = rng.normal(size=7)
        params = {"p": Tensor(x0.copy(), requires_grad=True)}
        state = AdamState.create(params, lr=0.013)
        grads = [rng.normal(size=7) for _ in range(10)]
        for g in grads:
            adam_step(params, {"p": g.copy()}, state)
        oracle = scalar_adam_oracle(x0, [g.tolist() for g in grads], lr=0.013)
        np.testing.assert_allclose(params["p"].data, oracle, atol=1e-7)

    def test_nonfinite_gradient_names_parameter(self):
        params = {"bad.w": Tensor(np.ones(2), requires_grad=True)}
        state = AdamState.create(params, lr=0.1)
        g = np.array([1.0, np.nan])
        with pytest.raises(ContractError, match="bad.w"):
            adam_step(params, {"bad.w": g}, state)

    def test_moment_shapes_mirror_parameters(self):
        params = {
            "a": Tensor(np.zeros((3, 2)), requires_grad=True),
            "b": Tensor(np.zeros(5), requires_grad=True),
        }
        state = AdamState.create(params, lr=0.1)
        assert state.m["a"].shape == (3, 2)
        assert state.v["b"].shape == (5,)
        assert state.t == 0

    def test_clip_gradients_scales_to_max_norm(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
        pre = clip_gradients(grads, max_norm=1.0)
        assert pre == pytest.approx(5.0)
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        assert total == pytest.approx(1.0)
        np.testing.assert_allclose(grads["a"], [0.6, 0.0])

    def test_clip_gradients_is_noop_below_threshold(self):
        grads = {"a": np.array([0.3, 0.4])}
        pre = clip_gradients(grads, max_norm=10.0)
        assert pre == pytest.approx(0.5)
        np.testing.assert_array_equal(grads["a"], [0.3, 0.4])


class TestPretrainLoop:
    def test_zero_steps_returns_initialization(self, tmp_path):
        cfg = tiny_config()
        run = PretrainRunConfig(steps=0, seed=9)
        weights, curve = pretrain(make_instances(4, cfg.vocab_size), cfg, run)
        assert curve == []
        init_seed = int(np.random.SeedSequence(9).generate_state(3)[0])
        reference = init_weights(cfg, init_seed)
        for name in weights.names():
            np.testing.assert_array_equal(weights[name].data, reference[name].data)

    def test_same_seed_gives_bit_identical_checkpoints(self, tmp_path):
        cfg = tiny_config()
        data = make_instances(6, cfg.vocab_size)
        run = PretrainRunConfig(steps=100, batch_size=2, lr=1e-3, seed=5)
        _, curve_a = pretrain(data, cfg, run, out_dir=tmp_path / "a")
        _, curve_b = pretrain(data, cfg, run, out_dir=tmp_path / "b")
        assert curve_a == curve_b
        bytes_a = (tmp_path / "a" / "checkpoint_final.hlm").read_bytes()
        bytes_b = (tmp_path / "b" / "checkpoint_final.hlm").read_bytes()
        assert bytes_a == bytes_b

    def test_different_seed_changes_outcome(self):
        cfg = tiny_config()
        data = make_instances(6, cfg.vocab_size)
        w1, _ = pretrain(data, cfg, PretrainRunConfig(steps=5, batch_size=2, seed=1))
        w2, _ = pretrain(data, cfg, PretrainRunConfig(steps=5, batch_size=2, seed=2))
        assert any(
            not np.array_equal(w1[n].data, w2[n].data) for n in w1.names()
        )

    def test_loss_curve_csv_and_periodic_checkpoints(self, tmp_path):
        cfg = tiny_config()
        data = make_instances(4, cfg.vocab_size)
        run = PretrainRunConfig(steps=6, batch_size=2, seed=3, checkpoint_every=3)
        _, curve = pretrain(data, cfg, run, out_dir=tmp_path)
        assert (tmp_path / "checkpoint_000003.hlm").exists()
        assert (tmp_path / "checkpoint_000006.hlm").exists()
        assert (tmp_path / "checkpoint_final.hlm").exists()
        lines = (tmp_path / "loss_curve.csv").read_text().strip().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 7
        step, loss = lines[1].split(",")
        assert int(step) == 1 and float(loss) == pytest.approx(curve[0][1])

    def test_empty_data_rejected(self):
        with pytest.raises(DataError, match="instance"):
            pretrain([], tiny_config(), PretrainRunConfig(steps=1))

    def test_run_config_validation(self):
        with pytest.raises(ConfigError):
            PretrainRunConfig(steps=-1)
        with pytest.raises(ConfigError):
            PretrainRunConfig(steps=1, lr=0.0)

    def test_loss_trends_down_on_repeated_data(self):
        cfg = tiny_config(dropout=0.0)
        data = make_instances(2, cfg.vocab_size)
        run = PretrainRunConfig(steps=60, batch_size=2, lr=3e-3, seed=7)
        _, curve = pretrain(data, cfg, run)
        first = np.mean([loss for _, loss in curve[:5]])
        last = np.mean([loss for _, loss in curve[-5:]])
        assert last < first - 0.5


class TestEarlyStopping:
    @staticmethod
    def canned(losses):
        def train_epoch(epoch):
            return losses[epoch - 1], f"weights-after-epoch-{epoch}"

        return train_epoch

    def test_definition_trace_stops_after_fifth_and_restores_second(self):
        result = run_early_stopping(
            self.canned([3.0, 2.0, 2.1, 2.2, 2.3]), patience=3
        )
        assert result.n_evaluations == 5
        assert result.best_epoch == 2
        assert result.best_loss == 2.0
        assert result.best_state == "weights-after-epoch-2"
        assert result.trace == (3.0, 2.0, 2.1, 2.2, 2.3)

    def test_improvement_resets_patience_counter(self):
        result = run_early_stopping(
            self.canned([5.0, 4.0, 4.0, 3.0, 4.0, 4.0, 4.0]), patience=3
        )
        assert result.n_evaluations == 7
        assert result.best_epoch == 4
        assert result.best_loss == 3.0

    def test_never_returns_worse_than_best_observed(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            losses = rng.normal(size=30).cumsum().tolist()
            result = run_early_stopping(
                self.canned(losses), patience=3, max_epochs=30
            )
            observed = losses[: result.n_evaluations]
            assert result.best_loss == min(observed)
            assert result.best_epoch == observed.index(min(observed)) + 1

    def test_max_epochs_caps_unimproving_free_run(self):
        losses = [10.0 - k for k in range(10)]
        result = run_early_stopping(self.canned(losses), patience=3, max_epochs=4)
        assert result.n_evaluations == 4
        assert result.best_epoch == 4

    def test_patience_validation(self):
        with pytest.raises(ConfigError, match="patience"):
            run_early_stopping(self.canned([1.0]), patience=0)

    def test_snapshot_restore_round_trip(self):
        params = {"w": Tensor(np.arange(4.0), requires_grad=True)}
        snap = trainer.snapshot_params(params)
        params["w"].data += 10.0
        trainer.restore_params(params, snap)
        np.testing.assert_array_equal(params["w"].data, np.arange(4.0))


class TestGridSearch:
    def test_single_point_grid_returns_it(self):
        space = GridSpec(axes={"lr": [0.01]})
        best, table = grid_search(space, lambda cfg, patience: 1.0)
        assert best == {"lr": 0.01}
        assert table == [{"config": {"lr": 0.01}, "dev_loss": 1.0}]

    def test_known_minimum_matches_exhaustive_oracle(self):
        space = GridSpec(
            axes={"lr": [0.1, 0.3, 0.5], "dropout": [0.0, 0.5]}
        )

        def dev_loss(cfg, patience):
            return (cfg["lr"] - 0.3) ** 2 + (cfg["dropout"] - 0.5) ** 2

        best, table = grid_search(space, dev_loss)
        oracle = min(space.points(), key=lambda p: dev_loss(p, 3))
        assert best == oracle == {"lr": 0.3, "dropout": 0.5}
        assert len(table) == 6

    def test_enumeration_order_is_cartesian_with_left_axis_slowest(self):
        space = GridSpec(axes={"a": [1, 2, 3], "b": ["x", "y"]})
        seen = []
        grid_search(space, lambda cfg, p: seen.append(dict(cfg)) or 0.0)
        assert seen == [
            {"a": 1, "b": "x"},
            {"a": 1, "b": "y"},
            {"a": 2, "b": "x"},
            {"a": 2, "b": "y"},
            {"a": 3, "b": "x"},
            {"a": 3, "b": "y"},
        ]

    def test_ties_resolve_to_earlier_point(self):
        space = GridSpec(axes={"a": [1, 2, 3]})
        best, _ = grid_search(space, lambda cfg, p: 7.0)
        assert best == {"a": 1}

    def test_partial_failures_recorded_and_winner_among_successes(self):
        space = GridSpec(axes={"a": [1, 2, 3]})

        def flaky(cfg, patience):
            if cfg["a"] == 1:
                raise DataError("diverged")
            return float(cfg["a"])

        best, table = grid_search(space, flaky)
        assert best == {"a": 2}
        assert table[0] == {"config": {"a": 1}, "error": "diverged"}

    def test_all_points_failing_raises_aggregate(self):
        space = GridSpec(axes={"a": [1, 2]})

        def broken(cfg, patience):
            raise DataError("boom")

        with pytest.raises(DataError, match="every grid point failed"):
            grid_search(space, broken)

    def test_patience_is_forwarded(self):
        got = []
        grid_search(
            GridSpec(axes={"a": [1]}),
            lambda cfg, patience: got.append(patience) or 0.0,
            patience=7,
        )
        assert got == [7]

    def test_grid_spec_validation(self):
        with pytest.raises(ConfigError):
            GridSpec(axes={})
        with pytest.raises(ConfigError, match="axis"):
            GridSpec(axes={"lr": []})


class TestRepeatWithSeeds:
    def test_one_two_three(self):
        report = repeat_with_seeds(lambda s: float(s), [1, 2, 3])
        assert report.mean == pytest.approx(2.0)
        assert report.std == pytest.approx(1.0)
        assert report.n == 3

    def test_constant_values_have_zero_std(self):
        report = repeat_with_seeds(lambda s: 5.0, [10, 20, 30])
        assert report.mean == 5.0
        assert report.std == 0.0

    def test_random_triples_match_two_pass_oracle(self):
        rng = np.random.default_rng(33)
        for _ in range(10):
            vals = rng.normal(size=3).tolist()
            table = dict(zip([7, 8, 9], vals))
            report = repeat_with_seeds(lambda s: table[s], [7, 8, 9])
            mean = sum(vals) / 3.0
            var = sum((x - mean) ** 2 for x in vals) / 2.0
            assert report.mean == pytest.approx(mean, abs=1e-12)
            assert report.std == pytest.approx(math.sqrt(var), abs=1e-12)

    def test_fewer_than_two_seeds_rejected(self):
        with pytest.raises(ConfigError, match="2 seeds"):
            repeat_with_seeds(lambda s: 1.0, [4])


class TestCheckpoint:
    def probe_params(self):
        rng = np.random.default_rng(50)
        return {
            "z.last": Tensor(rng.normal(size=(2, 3)).astype(np.float32), requires_grad=True),
            "a.first": Tensor(rng.normal(size=(4,)).astype(np.float32), requires_grad=True),
            "m.mid": Tensor(rng.normal(size=(1, 2, 2)).astype(np.float32), requires_grad=True),
        }

    def test_round_trip_is_bitwise(self, tmp_path):
        params = self.probe_params()
        config = {"hidden": 16, "note": "probe"}
        path = tmp_path / "ck.hlm"
        save_checkpoint(path, params, config)
        loaded, loaded_config = load_checkpoint(path)
        assert loaded_config == config
        assert sorted(loaded) == sorted(params)
        for name in params:
            assert loaded[name].data.dtype == np.float32
            np.testing.assert_array_equal(loaded[name].data, params[name].data)
            assert loaded[name].requires_grad

    def test_round_trip_preserves_forward_outputs(self, tmp_path):
        cfg = tiny_config(dropout=0.0)
        weights = init_weights(cfg, seed=2)
        inst = make_instances(1, cfg.vocab_size)[0]
        from dataclasses import asdict

        save_checkpoint(tmp_path / "w.hlm", weights.params, asdict(cfg))
        loaded, stored = load_checkpoint(tmp_path / "w.hlm")
        restored = EncoderWeights(loaded)
        assert BertConfig(**stored) == cfg
        h1 = bert.encode(inst.ids, inst.segment_ids, 10, weights, cfg)
        h2 = bert.encode(inst.ids, inst.segment_ids, 10, restored, cfg)
        np.testing.assert_array_equal(h1.data, h2.data)

    def test_save_is_deterministic_bytes(self, tmp_path):
        params = self.probe_params()
        save_checkpoint(tmp_path / "a.hlm", params, {"k": 1})
        save_checkpoint(tmp_path / "b.hlm", params, {"k": 1})
        assert (tmp_path / "a.hlm").read_bytes() == (tmp_path / "b.hlm").read_bytes()

    def test_file_layout_magic_length_and_sorted_manifest(self, tmp_path):
        params = self.probe_params()
        path = tmp_path / "ck.hlm"
        save_checkpoint(path, params, {"k": 1})
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        (meta_len,) = struct.unpack("<I", raw[4:8])
        meta = json.loads(raw[8 : 8 + meta_len].decode("utf-8"))
        names = [t["name"] for t in meta["tensors"]]
        assert names == sorted(names) == ["a.first", "m.mid", "z.last"]
        offset = 0
        for entry in meta["tensors"]:
            assert entry["offset"] == offset
            offset += 4 * int(np.prod(entry["shape"]))
        assert len(raw) == 8 + meta_len + offset

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.hlm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(path)

    def test_truncated_data_block_rejected(self, tmp_path):
        path = tmp_path / "ck.hlm"
        save_checkpoint(path, self.probe_params(), {"k": 1})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(path)

    def test_failed_write_leaves_no_partial_files(self, tmp_path):
        target = tmp_path / "ck.hlm"
        target.mkdir()  # occupy the destination with a directory
        with pytest.raises(DataError, match="write failed"):
            save_checkpoint(target, self.probe_params(), {"k": 1})
        assert list(tmp_path.iterdir()) == [target]
