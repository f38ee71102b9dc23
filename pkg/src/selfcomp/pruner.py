"""Physical removal of zero-bit channels.

A channel is removable once its bit depth sits at exactly zero and its
additive effect (conv bias plus the norm shift path) has drained below
tolerance, so excising it cannot move the network output. Removal slices
the producer's parameter rows, every consumer's matching input columns,
and the optimizer moment entries, keeping everything aligned. Channels
feeding a residual sum prune only when the aligned channel is removable
in every branch.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import network as ng
from . import sizemodel
from .errors import StaleCandidatesError


@dataclass
class PruneCandidate:
    layer: str
    channel: int
    b: float
    additive_magnitude: float


@dataclass
class PruneReport:
    removed: dict = field(default_factory=dict)
    refused: list = field(default_factory=list)
    weights_removed: int = 0
    bits_removed: float = 0.0
    optimizer_entries_removed: int = 0
    flops_before: int = 0
    flops_after: int = 0

    @property
    def channels_removed(self):
        return sum(len(v) for v in self.removed.values())

    def to_dict(self):
        return {
            "removed": {k: sorted(v) for k, v in self.removed.items()},
            "refused": [list(r) for r in self.refused],
            "channels_removed": self.channels_removed,
            "weights_removed": self.weights_removed,
            "bits_removed": self.bits_removed,
            "optimizer_entries_removed": self.optimizer_entries_removed,
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
        }


def flop_estimate(net):
    """Hardware-independent compute proxy: multiply-accumulates per inference."""
    return ng.estimate_macs(net)


def effective_additive_magnitude(net, layer, channel):
    """Constant the block would emit for this channel if its weights were
    all zero: max over train mode (batch stats collapse to the norm shift)
    and inference mode (running statistics)."""
    conv_bias = float(layer.bias[channel]) if layer.bias is not None else 0.0
    bn = getattr(layer, "bn", None)
    if bn is None:
        return abs(conv_bias)
    train_const = float(bn.beta[channel])
    inv = 1.0 / np.sqrt(float(bn.running_var[channel]) + bn.eps)
    eval_const = float(bn.gamma[channel]) * (conv_bias - float(bn.running_mean[channel])) * inv \
        + float(bn.beta[channel])
    return max(abs(train_const), abs(eval_const))


def find_removable(net, bias_tol=1e-5):
    """Channels passing both gates (b exactly 0, additive effect below
    tolerance), with residual-sum alignment already enforced."""
    flow = ng.channel_flow(net)
    raw = set()
    for layer in net.conv_blocks():
        if layer.name in flow.blocked or layer.qb is None:
            continue
        zero = np.flatnonzero(layer.qb == 0)
        for channel in zero:
            magnitude = effective_additive_magnitude(net, layer, int(channel))
            if magnitude < bias_tol:
                raw.add((layer.name, int(channel)))

    candidates = []
    for layer in net.conv_blocks():
        for name, channel in sorted(raw):
            if name != layer.name:
                continue
            group = flow.groups.get(name, frozenset((name,)))
            if all((member, channel) in raw for member in group):
                candidates.append(PruneCandidate(
                    layer=name, channel=channel,
                    b=float(layer.qb[channel]),
                    additive_magnitude=effective_additive_magnitude(net, layer, channel),
                ))
    return candidates


def _slice_axis(arr, keep, axis):
    return np.ascontiguousarray(np.take(arr, keep, axis=axis))


def _slice_optimizer(opt_state, key, keep, axis):
    removed = 0
    if opt_state is None:
        return removed
    for store in (opt_state.m, opt_state.v):
        arr = store.get(key)
        if arr is not None:
            removed += arr.size
            store[key] = _slice_axis(arr, keep, axis)
            removed -= store[key].size
    return removed


def prune(net, opt_state, candidates):
    """Excise the candidate channels in place.

    Candidates must come from find_removable on this exact net (stale
    lists raise). Group-incomplete channels and channels whose removal
    would empty a layer are refused and recorded; the rest proceed.
    Returns (net, opt_state, PruneReport).
    """
    report = PruneReport(flops_before=flop_estimate(net))
    bits_before = sizemodel.size_report(net, "simple").total_bits

    cand_set = set()
    for cand in candidates:
        layer = net.by_name.get(cand.layer)
        if layer is None or layer.kind != "conv_block":
            raise StaleCandidatesError(f"unknown prune target {cand.layer}")
        if cand.channel >= layer.out_channels:
            raise StaleCandidatesError(
                f"{cand.layer} channel {cand.channel} out of range "
                f"(layer now has {layer.out_channels})")
        if layer.qb[cand.channel] != 0:
            raise StaleCandidatesError(
                f"{cand.layer}[{cand.channel}] no longer has zero bits")
        cand_set.add((cand.layer, cand.channel))

    flow = ng.channel_flow(net)

    # one unit per (alignment group, channel); accept only complete units
    units = {}
    for name, channel in sorted(cand_set):
        group = flow.groups.get(name, frozenset((name,)))
        key = (tuple(sorted(group)), channel)
        if key in units:
            continue
        complete = all((member, channel) in cand_set for member in group)
        if not complete or name in flow.blocked:
            reason = "blocked" if name in flow.blocked else "summation partner not removable"
            report.refused.append((name, channel, reason))
            units[key] = None
        else:
            units[key] = key

    remaining = {l.name: l.out_channels for l in net.conv_blocks()}
    accepted = []
    for key in sorted(k for k in units.values() if k is not None):
        members, channel = key
        if any(remaining[m] <= 1 for m in members):
            for m in members:
                report.refused.append((m, channel, "last channel must survive"))
            continue
        accepted.append(key)
        for m in members:
            remaining[m] -= 1

    out_removals = defaultdict(set)
    in_removals = defaultdict(set)
    for members, channel in accepted:
        for m in members:
            out_removals[m].add(channel)
            for consumer in flow.consumers[m]:
                in_removals[consumer].add(channel)

    for name, gone in sorted(out_removals.items()):
        layer = net.by_name[name]
        keep = np.array([c for c in range(layer.out_channels) if c not in gone])
        report.weights_removed += layer.weight.size
        layer.weight = _slice_axis(layer.weight, keep, 0)
        report.weights_removed -= layer.weight.size
        report.optimizer_entries_removed += _slice_optimizer(
            opt_state, f"{name}.weight", keep, 0)
        for attr, key in (("bias", "bias"), ("qb", "qb"), ("qe", "qe")):
            arr = getattr(layer, attr)
            if arr is not None:
                setattr(layer, attr, _slice_axis(arr, keep, 0))
                report.optimizer_entries_removed += _slice_optimizer(
                    opt_state, f"{name}.{key}", keep, 0)
        if layer.bn is not None:
            layer.bn.gamma = _slice_axis(layer.bn.gamma, keep, 0)
            layer.bn.beta = _slice_axis(layer.bn.beta, keep, 0)
            layer.bn.running_mean = _slice_axis(layer.bn.running_mean, keep, 0)
            layer.bn.running_var = _slice_axis(layer.bn.running_var, keep, 0)
            report.optimizer_entries_removed += _slice_optimizer(
                opt_state, f"{name}.bn_gamma", keep, 0)
            report.optimizer_entries_removed += _slice_optimizer(
                opt_state, f"{name}.bn_beta", keep, 0)
        report.removed[name] = sorted(int(c) for c in gone)

    for name, gone in sorted(in_removals.items()):
        layer = net.by_name[name]
        keep = np.array([c for c in range(layer.in_channels) if c not in gone])
        report.weights_removed += layer.weight.size
        layer.weight = _slice_axis(layer.weight, keep, 1)
        report.weights_removed -= layer.weight.size
        report.optimizer_entries_removed += _slice_optimizer(
            opt_state, f"{name}.weight", keep, 1)

    violations = ng.validate_network(net)
    if violations:
        raise StaleCandidatesError(
            "network invalid after prune: " + "; ".join(violations))

    report.flops_after = flop_estimate(net)
    report.bits_removed = bits_before - sizemodel.size_report(net, "simple").total_bits
    return net, opt_state, report
