"""Network-size objective: per-layer bit counts, the normalized size Q,
the penalized total loss, and the L1 drain on additive parameters of
zero-bit channels.

Two layer-size forms exist: the simple count I*H*W*sum_i(b_i), and a
coupled form that scales each layer's bits by the producer's live-channel
count (and vice versa), so removing a producer channel is rewarded in the
consumer as well. Live-channel indicators use strict b > 0 and are
treated as constants for gradient purposes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import network as ng
from .errors import ShapeError


@dataclass
class LayerSize:
    name: str
    z_bits: float
    live_channels: int


@dataclass
class SizeReport:
    """Per-layer bit counts plus the frozen-denominator summary."""

    layers: list
    total_bits: float
    Q: float
    flops: int
    starting_weights: int
    mode: str

    def to_json(self):
        return json.dumps({
            "layers": [
                {"name": l.name, "z_bits": l.z_bits, "live_channels": l.live_channels}
                for l in self.layers
            ],
            "total_bits": self.total_bits,
            "Q": self.Q,
            "flops": self.flops,
            "starting_weights": self.starting_weights,
            "mode": self.mode,
        }, indent=2)


@dataclass
class LossBreakdown:
    task_loss: float
    size_term: float
    bias_drain: float
    total: float


def layer_size_simple(dims, bits):
    """Bits for one layer: I*H*W * sum of per-output-channel bit depths."""
    o, i, h, w = dims
    bits = np.asarray(bits, dtype=np.float64)
    if bits.shape != (o,):
        raise ShapeError(f"bit vector has shape {bits.shape}, layer has {o} output channels")
    return float(i * h * w * bits.sum())


def layer_size_coupled(dims, bits, bits_prev):
    """Coupled bits for one layer given its producer's bit vector.

    H*W * (live producer channels) * sum(b) + H*W * (live channels) * sum(b_prev),
    with live counts from strict b > 0 indicators.
    """
    o, i, h, w = dims
    bits = np.asarray(bits, dtype=np.float64)
    bits_prev = np.asarray(bits_prev, dtype=np.float64)
    if bits.shape != (o,):
        raise ShapeError(f"bit vector has shape {bits.shape}, layer has {o} output channels")
    if bits_prev.shape != (i,):
        raise ShapeError(
            f"producer bit vector has length {bits_prev.shape}, layer consumes {i} channels")
    live_prev = float((bits_prev > 0).sum())
    live_self = float((bits > 0).sum())
    return float(h * w * (live_prev * bits.sum() + live_self * bits_prev.sum()))


def _producer_bits(net, layer):
    """Walk up through channel-preserving nodes to a unique conv producer's
    bit vector; None means fall back to the simple form (first layer, sums,
    or an unquantized producer)."""
    name = layer.producers[0]
    while True:
        if name == ng.INPUT:
            return None
        producer = net.by_name[name]
        if producer.kind == "conv_block":
            return producer.qb if producer.qb is not None else None
        if producer.kind in ng.CHANNEL_PRESERVING_KINDS:
            name = producer.producers[0]
            continue
        return None


def _layer_dims(layer):
    kh, kw = layer.kernel_hw
    return layer.out_channels, layer.in_channels, kh, kw


def size_report(net, mode="coupled"):
    """Full accounting: per-layer z, total bits, Q = total / starting N."""
    if mode not in ("simple", "coupled"):
        raise ValueError(f"unknown size mode {mode!r}")
    rows = []
    total = 0.0
    for layer in net.weighted_layers():
        if layer.qb is None:
            # unquantized layers are carried at full float precision
            z = float(32.0 * layer.weight.size)
        else:
            dims = _layer_dims(layer)
            prev = _producer_bits(net, layer) if mode == "coupled" else None
            if prev is not None:
                z = layer_size_coupled(dims, layer.qb, prev)
            else:
                z = layer_size_simple(dims, layer.qb)
        rows.append(LayerSize(layer.name, z, layer.out_channels))
        total += z
    n = net.starting_weight_count
    return SizeReport(layers=rows, total_bits=total, Q=total / n,
                      flops=ng.estimate_macs(net), starting_weights=n, mode=mode)


def size_nodes(net, leaves, mode="coupled"):
    """Differentiable Q node built over the qb leaves of a forward graph."""
    n = net.starting_weight_count
    total = None
    for layer in net.weighted_layers():
        if layer.qb is None:
            continue
        qb_leaf = leaves[f"{layer.name}.qb"]
        o, i, kh, kw = _layer_dims(layer)
        prev_bits = _producer_bits(net, layer) if mode == "coupled" else None
        if prev_bits is None:
            z = ad.scale(ad.sum_(qb_leaf), i * kh * kw)
        else:
            prev_layer = _producer_layer(net, layer)
            prev_leaf = leaves[f"{prev_layer.name}.qb"]
            live_prev = float((prev_bits > 0).sum())
            live_self = float((layer.qb > 0).sum())
            z = ad.add(ad.scale(ad.sum_(qb_leaf), kh * kw * live_prev),
                       ad.scale(ad.sum_(prev_leaf), kh * kw * live_self))
        total = z if total is None else ad.add(total, z)
    if total is None:
        return ad.constant(0.0)
    return ad.scale(total, 1.0 / n)


def _producer_layer(net, layer):
    name = layer.producers[0]
    while True:
        producer = net.by_name[name]
        if producer.kind == "conv_block":
            return producer
        name = producer.producers[0]


def bias_drain_node(net, leaves):
    """L1 over additive parameters (conv bias and norm shift) of channels
    whose bit depth is exactly zero; zero-bit masks are constants."""
    total = None
    for layer in net.weighted_layers():
        if layer.qb is None:
            continue
        mask = (layer.qb == 0).astype(layer.qb.dtype)
        if not mask.any():
            continue
        mask_node = ad.constant(mask, dtype=mask.dtype)
        for key in ("bias", "bn_beta"):
            leaf = leaves.get(f"{layer.name}.{key}")
            if leaf is None:
                continue
            term = ad.sum_(ad.mul(ad.abs_(leaf), mask_node))
            total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.constant(0.0)
    return total


def total_loss(task_node, q_node, drain_node, gamma, drain_coeff=1.0,
               detach_drain=True):
    """Penalized objective: task + gamma * Q + drain_coeff * drain.

    With detach_drain the drain term contributes its value but no gradient
    (the trainer optimizes it with a proximal shrink instead, which can
    actually reach zero).
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    out = task_node
    if gamma > 0:
        out = ad.add(out, ad.scale(q_node, gamma))
    drain_term = ad.scale(drain_node, drain_coeff)
    if detach_drain:
        drain_term = ad.stop_gradient(drain_term)
    out = ad.add(out, drain_term)
    breakdown = LossBreakdown(
        task_loss=float(task_node.value),
        size_term=float(gamma * q_node.value),
        bias_drain=float(drain_coeff * drain_node.value),
        total=float(out.value),
    )
    return out, breakdown
