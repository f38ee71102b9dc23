"""Trainer checks: configuration handling, evaluation semantics, loop
invariants on a real (tiny) compression run, determinism of the metrics
stream, and the sweep plumbing."""

import itertools

import numpy as np
import pytest

from selfcomp import data as dm
from selfcomp import sizemodel
from selfcomp import trainer
from selfcomp.errors import ConfigError, DivergenceError
from selfcomp.network import build_cifar_net, forward_network
from selfcomp.trainer import (CSV_HEADER, MetricsRow, PlateauConfig,
                              TrainConfig, build_net, evaluate, gamma_sweep,
                              make_datasets, sweep_run_config, train)

TINY = dict(batch_size=32, widths=[4, 8, 16, 32], dataset="synthetic",
            synthetic_kind="striped-patterns", train_size=256, eval_size=128,
            augment=False, anneal=False, log_interval=10, eval_interval=40,
            prune_interval=20, prune_warmup=30, seed=3)


def fake_clock():
    counter = itertools.count()
    return lambda: next(counter) * 0.001


@pytest.fixture(scope="module")
def compression_run():
    """One shared tiny run under real size pressure, long enough for the
    running statistics of dead channels to decay and removals to land."""
    cfg = TrainConfig(gamma=0.3, main_steps=300, **TINY)
    net = build_net(cfg)
    result = train(net, make_datasets(cfg), cfg, clock=fake_clock())
    return cfg, result


class TestConfig:
    def test_round_trip(self):
        cfg = TrainConfig(gamma=0.1, plateau=PlateauConfig(factor=0.25),
                          **TINY)
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"gamma": 0.1, "turbo": True})

    def test_negative_gamma_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(gamma=-0.5).validate()

    def test_bad_size_mode_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(size_mode="both").validate()

    def test_bad_plateau_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(plateau=PlateauConfig(factor=1.5)).validate()

    def test_csv_header_contract(self):
        assert CSV_HEADER == ("step,task_loss,Q,total_bits,live_channels,"
                              "flops,train_acc,eval_acc,step_ms,lr_w,lr_q")


class TestEvaluate:
    def test_single_correct_example(self, tiny_net):
        """A one-example set labeled with the argmax logit scores 1.0."""
        image = np.random.default_rng(0).uniform(0, 1, (1, 3, 32, 32)) \
            .astype(np.float32)
        logits = forward_network(tiny_net, dm.normalize(image))
        label = int(logits.argmax())
        ds = dm.Dataset(image, np.array([label], dtype=np.int64))
        assert evaluate(tiny_net, ds) == 1.0

    def test_untrained_net_is_at_chance(self):
        """Random 10-class labels, untrained net: accuracy 0.1 +- 0.03 over
        2000 samples (binomial 3-sigma is ~0.02)."""
        rng = np.random.default_rng(1)
        images = rng.uniform(0, 1, (2000, 3, 32, 32)).astype(np.float32)
        labels = rng.integers(0, 10, size=2000)
        net = build_cifar_net(widths=[4, 8, 16, 32], seed=12)
        accuracy = evaluate(net, dm.Dataset(images, labels))
        assert abs(accuracy - 0.1) <= 0.03

    def test_deterministic(self, tiny_net):
        ds = dm.synthetic_dataset("striped-patterns", 200, seed=5)
        assert evaluate(tiny_net, ds) == evaluate(tiny_net, ds)


class TestTrainLoop:
    def test_empty_dataset_rejected(self):
        cfg = TrainConfig(main_steps=2, **TINY)
        empty = dm.Dataset(np.zeros((0, 3, 32, 32), np.float32),
                           np.zeros(0, np.int64))
        with pytest.raises((ConfigError, ValueError)):
            train(build_net(cfg), (empty, empty), cfg)

    def test_divergence_detected(self):
        """A non-finite task loss (here from corrupt input data) aborts the
        run with a divergence diagnostic."""
        params = dict(TINY)
        params["main_steps"] = 10
        cfg = TrainConfig(gamma=0.0, **params)
        train_ds, eval_ds = make_datasets(cfg)
        train_ds.images[0] = np.nan
        with pytest.raises(DivergenceError):
            with np.errstate(all="ignore"):
                train(build_net(cfg), (train_ds, eval_ds), cfg)

    def test_steps_are_monotone(self, compression_run):
        _, result = compression_run
        steps = [row.step for row in result.rows]
        assert steps == sorted(steps)
        assert len(set(steps)) == len(steps)

    def test_bits_shrink_under_pressure(self, compression_run):
        """With a large compression factor, total bits at step 300 sit well
        below the starting count."""
        _, result = compression_run
        assert result.rows[-1].total_bits < 0.5 * result.rows[0].total_bits

    def test_prune_events_happened_and_shrank_compute(self, compression_run):
        _, result = compression_run
        assert result.prune_events
        for _, report in result.prune_events:
            assert report.channels_removed >= 1
            assert report.flops_after < report.flops_before

    def test_bits_non_increasing_at_prune_events(self, compression_run):
        """Removal never adds bits: across each prune event the simple-form
        total drops or stays (bit depths may drift between prunes)."""
        _, result = compression_run
        for _, report in result.prune_events:
            assert report.bits_removed >= 0.0

    def test_projection_invariant(self, compression_run):
        cfg, result = compression_run
        for layer in result.net.weighted_layers():
            if layer.qb is not None:
                assert np.all(layer.qb >= 0.0)
                assert np.all(layer.qb <= cfg.b_max)

    def test_drain_before_prune_audit_is_clean(self, compression_run):
        _, result = compression_run
        assert result.audit_violations == []

    def test_drained_additive_params_reach_exact_zero(self, compression_run):
        """The proximal drain drives the additive parameters of zero-bit
        channels to exactly zero, not merely near it (freshly dead channels
        may still be mid-drain)."""
        _, result = compression_run
        dead = 0
        exact = 0
        for layer in result.net.conv_blocks():
            zero = layer.qb == 0
            if zero.any() and layer.bn is not None:
                dead += int(zero.sum())
                exact += int((layer.bn.beta[zero] == 0.0).sum())
        assert dead > 0
        assert exact >= 0.5 * dead

    def test_wall_time_excludes_evaluation(self, compression_run):
        _, result = compression_run
        assert len(result.step_times) == result.steps_run


class TestDeterminism:
    def test_identical_runs_identical_metrics(self):
        """Two runs with the same config and seed produce byte-identical
        CSV streams (the clock is injected; it is the only physical
        input)."""
        cfg = TrainConfig(gamma=0.2, main_steps=40, **TINY)
        lines = []
        for _ in range(2):
            result = train(build_net(cfg), make_datasets(cfg), cfg,
                           clock=fake_clock())
            lines.append([row.to_csv() for row in result.rows])
        assert lines[0] == lines[1]

    def test_prefetch_does_not_change_the_stream(self):
        """Concurrent batch preparation yields the same metrics as the
        single-threaded reference path."""
        rows = []
        for prefetch in (False, True):
            params = dict(TINY)
            params["prefetch"] = prefetch
            cfg = TrainConfig(gamma=0.2, main_steps=15, **params)
            result = train(build_net(cfg), make_datasets(cfg), cfg,
                           clock=fake_clock())
            rows.append([r.to_csv() for r in result.rows])
        assert rows[0] == rows[1]

    def test_seed_changes_the_stream(self):
        cfg_a = TrainConfig(gamma=0.2, main_steps=20, **TINY)
        params = dict(TINY)
        params["seed"] = 4
        cfg_b = TrainConfig(gamma=0.2, main_steps=20, **params)
        rows_a = train(build_net(cfg_a), make_datasets(cfg_a), cfg_a,
                       clock=fake_clock()).rows
        rows_b = train(build_net(cfg_b), make_datasets(cfg_b), cfg_b,
                       clock=fake_clock()).rows
        assert [r.to_csv() for r in rows_a] != [r.to_csv() for r in rows_b]


class TestAnnealing:
    def test_plateau_halves_lr_and_convergence_stops(self, monkeypatch):
        """Scripted eval losses drive the plateau machinery: two stalled
        evaluations halve the rate, three consecutive sub-1e-4
        improvements end the run."""
        # consumed in order: step-0 row, main-phase evals at steps 10/20,
        # anneal evals at 30 (improves to 0.5), 40/50 (stalled -> halving
        # at patience 2; stalls also count as sub-1e-4 improvements), 60
        # (third tiny improvement -> convergence stop), final row refresh
        script = iter([1.0, 0.9, 0.8,
                       0.5, 0.5, 0.5, 0.49995,
                       0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4])
        monkeypatch.setattr(trainer, "evaluate_with_loss",
                            lambda net, ds, batch_size=256: (0.5, next(script)))
        params = dict(TINY)
        params.update(eval_interval=10, prune_interval=0, anneal=True)
        cfg = TrainConfig(gamma=0.0, main_steps=20, anneal_max_steps=400,
                          plateau=PlateauConfig(factor=0.5, patience=2,
                                                min_lr=1e-9),
                          **params)
        result = train(build_net(cfg), make_datasets(cfg), cfg,
                       clock=fake_clock())
        assert result.opt.lr_scale == 0.5          # exactly one halving
        assert result.steps_run == 60              # stopped by convergence

    def test_min_lr_floor_stops_run(self, monkeypatch):
        """Never-improving eval losses halve the rate until the floor."""
        monkeypatch.setattr(trainer, "evaluate_with_loss",
                            lambda net, ds, batch_size=256: (0.5, 1.0))
        params = dict(TINY)
        params.update(eval_interval=10, prune_interval=0, anneal=True)
        cfg = TrainConfig(gamma=0.0, main_steps=10, anneal_max_steps=500,
                          plateau=PlateauConfig(factor=0.5, patience=1,
                                                min_lr=2.6e-4),
                          **params)
        result = train(build_net(cfg), make_datasets(cfg), cfg,
                       clock=fake_clock())
        # floor scale 0.26 needs two halvings: 1 -> 0.5 -> 0.25 <= 0.26
        assert result.opt.lr_scale == 0.25
        assert result.steps_run == 30


class TestMetricsRow:
    def test_eval_field_empty_when_absent(self):
        row = MetricsRow(step=3, task_loss=1.0, Q=8.0, total_bits=100.0,
                         live_channels=5, flops=10, train_acc=0.5,
                         eval_acc=None, step_ms=1.5, lr_w=1e-3, lr_q=0.5)
        fields = row.to_csv().split(",")
        assert fields[7] == ""
        assert fields[0] == "3"

    def test_json_round_trips(self):
        import json
        row = MetricsRow(step=1, task_loss=0.25, Q=7.5, total_bits=10.0,
                         live_channels=3, flops=9, train_acc=1.0,
                         eval_acc=0.75, step_ms=2.0, lr_w=1e-3, lr_q=0.5)
        assert json.loads(row.to_json())["eval_acc"] == 0.75


class TestSweep:
    def test_single_gamma_matches_direct_run(self):
        """A one-entry sweep reproduces a direct train call made with the
        same derived per-run config."""
        cfg = TrainConfig(main_steps=25, **TINY)
        locus = gamma_sweep(cfg, [0.25], clock=fake_clock())
        assert len(locus) == 1
        run_cfg = sweep_run_config(cfg, 0.25, 0)
        direct = train(build_net(run_cfg), make_datasets(run_cfg), run_cfg,
                       clock=fake_clock())
        assert locus[0]["accuracy"] == direct.final_eval_acc
        expect_fraction = (
            sizemodel.size_report(direct.net, "simple").total_bits
            / sizemodel.size_report(build_net(run_cfg), "simple").total_bits)
        np.testing.assert_allclose(locus[0]["bits_fraction"], expect_fraction)

    def test_failed_run_recorded_and_sweep_continues(self, monkeypatch):
        calls = []

        def flaky_train(net, datasets, config, clock=None, on_row=None):
            calls.append(config.gamma)
            if config.gamma > 0.1:
                raise DivergenceError("synthetic failure")
            return train(net, datasets, config, clock=fake_clock())

        monkeypatch.setattr(trainer, "train", flaky_train)
        cfg = TrainConfig(main_steps=10, **TINY)
        locus = gamma_sweep(cfg, [0.5, 0.01])
        assert "failed" in locus[0]
        assert "accuracy" in locus[1]
        assert len(calls) == 2

    def test_empty_gamma_list_rejected(self):
        with pytest.raises(ConfigError):
            gamma_sweep(TrainConfig(**TINY), [])
