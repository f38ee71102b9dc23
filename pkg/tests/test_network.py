"""Graph construction, quantized forward behavior, structural validation,
and the checkpoint round-trip."""

import json

import numpy as np
import pytest

from selfcomp import quantizer as qz
from selfcomp.checkpoint import load_checkpoint, save_checkpoint
from selfcomp.errors import CheckpointError, ShapeError
from selfcomp.network import (build_cifar_net, build_forward, channel_flow,
                              count_weight_elements, estimate_macs,
                              forward_network, validate_network)
from selfcomp.optim import AdamState


class TestBuild:
    def test_layer_census(self):
        net = build_cifar_net(width_scale=0.25)
        convs = [l for l in net.layers if l.kind == "conv_block"]
        dense = [l for l in net.layers if l.kind == "dense"]
        assert len(convs) == 8 and len(dense) == 1
        assert validate_network(net) == []

    def test_parameter_count_is_deterministic(self):
        a = build_cifar_net(width_scale=0.25, seed=3)
        b = build_cifar_net(width_scale=0.25, seed=3)
        assert a.starting_weight_count == b.starting_weight_count == 411824
        for la, lb in zip(a.weighted_layers(), b.weighted_layers()):
            assert np.array_equal(la.weight, lb.weight)

    def test_quarter_widths(self):
        net = build_cifar_net(width_scale=0.25)
        assert net.widths == (16, 32, 64, 128)
        full = build_cifar_net()
        assert full.widths == (64, 128, 256, 512)

    def test_bad_widths_rejected(self):
        with pytest.raises(ValueError):
            build_cifar_net(widths=[0, 8, 16, 32])

    def test_logits_shape(self, tiny_net, rng):
        x = rng.normal(size=(4, 3, 32, 32)).astype(np.float32)
        assert forward_network(tiny_net, x).shape == (4, 10)

    def test_every_conv_channel_has_a_format(self, tiny_net):
        for layer in tiny_net.conv_blocks():
            assert layer.qb.shape == (layer.out_channels,)
            assert layer.qe.shape == (layer.out_channels,)

    def test_unquantized_edges_option(self, rng):
        """With quantize_first_last off, the first conv and the classifier
        carry no format parameters and are counted at float width."""
        from selfcomp.sizemodel import size_report

        net = build_cifar_net(widths=[4, 8, 16, 32], seed=2,
                              quantize_first_last=False)
        assert net.by_name["conv1"].qb is None
        assert net.by_name["fc"].qb is None
        assert validate_network(net) == []
        x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
        assert forward_network(net, x).shape == (2, 10)
        report = size_report(net, "simple")
        edge_bits = 32 * (net.by_name["conv1"].weight.size
                          + net.by_name["fc"].weight.size)
        by_name = {l.name: l.z_bits for l in report.layers}
        assert by_name["conv1"] + by_name["fc"] == edge_bits


class TestQuantizedForward:
    def test_wide_format_matches_float_twin(self, rng):
        """At b=16 with refit exponents the quantization error is far below
        1e-2 at the logits."""
        net = build_cifar_net(widths=[4, 8, 16, 32], seed=5)
        twin = net.clone()
        for layer in net.weighted_layers():
            layer.qb[:] = 16.0
            for c in range(layer.out_channels):
                layer.qe[c] = qz.init_format(layer.weight[c], 16.0).e
        for layer in twin.weighted_layers():
            layer.qb = None
            layer.qe = None
        x = rng.normal(size=(8, 3, 32, 32)).astype(np.float32)
        np.testing.assert_allclose(forward_network(net, x),
                                   forward_network(twin, x), atol=1e-2)

    def test_grid_exact_weights_forward_bit_equal(self, rng):
        """Weights already on their (b, e) grid pass through quantization
        unchanged, so the quantized forward equals the float forward
        bit-exactly."""
        net = build_cifar_net(widths=[4, 8, 16, 32], seed=6)
        for layer in net.weighted_layers():
            layer.weight = qz.quantize_channels(layer.weight, layer.qb, layer.qe)
        twin = net.clone()
        for layer in twin.weighted_layers():
            layer.qb = None
            layer.qe = None
        x = rng.normal(size=(4, 3, 32, 32)).astype(np.float32)
        assert np.array_equal(forward_network(net, x), forward_network(twin, x))

    def test_zero_bit_first_layer_blinds_the_network(self, tiny_net, rng):
        """All-zero bits in the first conv make the logits independent of
        the input (only additive parameters feed downstream)."""
        tiny_net.by_name["conv1"].qb[:] = 0.0
        a = forward_network(tiny_net, rng.normal(size=(3, 3, 32, 32)).astype(np.float32))
        b = forward_network(tiny_net, rng.normal(size=(3, 3, 32, 32)).astype(np.float32))
        np.testing.assert_array_equal(a, b)

    def test_forward_is_deterministic(self, tiny_net, rng):
        x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
        assert np.array_equal(forward_network(tiny_net, x),
                              forward_network(tiny_net, x))

    def test_batch_shape_mismatch(self, tiny_net, rng):
        with pytest.raises(ShapeError):
            forward_network(tiny_net, rng.normal(size=(2, 1, 32, 32)).astype(np.float32))

    def test_training_mode_updates_running_stats(self, tiny_net, rng):
        x = rng.normal(size=(8, 3, 32, 32)).astype(np.float32)
        bn = tiny_net.by_name["conv1"].bn
        before = bn.running_mean.copy()
        build_forward(tiny_net, x, training=True, want_grads=False)
        assert not np.array_equal(before, bn.running_mean)


class TestValidate:
    def test_clean_network(self, tiny_net):
        assert validate_network(tiny_net) == []

    def test_producer_width_mismatch_names_both_layers(self, tiny_net):
        conv2 = tiny_net.by_name["conv2"]
        conv2.weight = conv2.weight[:, :2]  # conv1 provides more channels
        problems = validate_network(tiny_net)
        assert any("conv2" in p and "conv1" in p for p in problems)

    def test_add_branch_width_mismatch(self, tiny_net):
        res1b = tiny_net.by_name["res1b"]
        res1b.weight = res1b.weight[:4]
        res1b.qb = res1b.qb[:4]
        res1b.qe = res1b.qe[:4]
        res1b.bn.gamma = res1b.bn.gamma[:4]
        res1b.bn.beta = res1b.bn.beta[:4]
        res1b.bn.running_mean = res1b.bn.running_mean[:4]
        res1b.bn.running_var = res1b.bn.running_var[:4]
        problems = validate_network(tiny_net)
        assert any("add1" in p and "widths differ" in p for p in problems)

    def test_nonfinite_parameters_flagged(self, tiny_net):
        tiny_net.by_name["conv3"].weight[0, 0, 0, 0] = np.nan
        assert any("non-finite" in p for p in validate_network(tiny_net))

    def test_negative_bits_flagged(self, tiny_net):
        tiny_net.by_name["conv3"].qb[0] = -1.0
        assert any("bit depths" in p for p in validate_network(tiny_net))


class TestChannelFlow:
    def test_residual_groups(self, tiny_net):
        flow = channel_flow(tiny_net)
        assert flow.groups["conv2"] == frozenset({"conv2", "res1b"})
        assert flow.groups["conv4"] == frozenset({"conv4", "res2b"})
        assert flow.groups["conv1"] == frozenset({"conv1"})

    def test_dense_is_blocked(self, tiny_net):
        flow = channel_flow(tiny_net)
        assert "fc" in flow.blocked

    def test_consumers_follow_pools_and_sums(self, tiny_net):
        flow = channel_flow(tiny_net)
        assert set(flow.consumers["conv2"]) == {"res1a", "conv3"}
        assert set(flow.consumers["res1b"]) == {"conv3"}
        assert set(flow.consumers["conv4"]) == {"res2a", "fc"}
        assert set(flow.consumers["conv3"]) == {"conv4"}

    def test_flop_estimate_counts_macs(self):
        net = build_cifar_net(widths=[4, 8, 16, 32])
        total = 0
        for layer in net.conv_blocks():
            o, i, kh, kw = layer.weight.shape
            oh, ow = layer.out_hw
            total += o * i * kh * kw * oh * ow
        total += net.by_name["fc"].weight.size
        assert estimate_macs(net) == total


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_net, tmp_path, rng):
        """save -> load -> save reproduces tensors.bin byte-for-byte and
        every parameter array bit-for-bit."""
        for layer in tiny_net.weighted_layers():  # make values non-trivial
            layer.qb[:] = rng.integers(0, 9, size=layer.qb.shape)
        p1, p2 = tmp_path / "a", tmp_path / "b"
        save_checkpoint(p1, tiny_net)
        loaded, opt = load_checkpoint(p1)
        assert opt is None
        save_checkpoint(p2, loaded)
        assert (p1 / "tensors.bin").read_bytes() == (p2 / "tensors.bin").read_bytes()
        assert json.loads((p1 / "manifest.json").read_text()) == \
            json.loads((p2 / "manifest.json").read_text())
        for a, b in zip(tiny_net.weighted_layers(), loaded.weighted_layers()):
            assert np.array_equal(a.weight, b.weight)
            if a.qb is not None:
                assert np.array_equal(a.qb, b.qb)
                assert np.array_equal(a.qe, b.qe)

    def test_round_trip_preserves_forward(self, tiny_net, tmp_path, rng):
        save_checkpoint(tmp_path / "ck", tiny_net)
        loaded, _ = load_checkpoint(tmp_path / "ck")
        x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
        assert np.array_equal(forward_network(tiny_net, x),
                              forward_network(loaded, x))

    def test_optimizer_state_round_trip(self, tiny_net, tmp_path, rng):
        state = AdamState(t=17)
        for layer in tiny_net.weighted_layers():
            key = f"{layer.name}.weight"
            state.m[key] = rng.normal(size=layer.weight.shape).astype(np.float32)
            state.v[key] = rng.uniform(size=layer.weight.shape).astype(np.float32)
        save_checkpoint(tmp_path / "ck", tiny_net, state)
        _, loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.t == 17
        for key in state.m:
            assert np.array_equal(state.m[key], loaded.m[key])
            assert np.array_equal(state.v[key], loaded.v[key])

    def test_frozen_weight_count_survives(self, tiny_net, tmp_path):
        tiny_net.starting_weight_count = 999999  # simulate a pruned net
        save_checkpoint(tmp_path / "ck", tiny_net)
        loaded, _ = load_checkpoint(tmp_path / "ck")
        assert loaded.starting_weight_count == 999999

    def test_truncated_tensor_file_rejected(self, tiny_net, tmp_path):
        save_checkpoint(tmp_path / "ck", tiny_net)
        blob = (tmp_path / "ck" / "tensors.bin").read_bytes()
        (tmp_path / "ck" / "tensors.bin").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope")

    def test_starting_count_matches_construction(self, tiny_net):
        assert tiny_net.starting_weight_count == count_weight_elements(tiny_net)
