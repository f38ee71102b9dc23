"""Network description: a DAG of conv blocks, pools, residual sums and a
classifier head, with per-output-channel trainable number formats on every
weighted layer and the channel-connectivity metadata pruning relies on.
"""

from __future__ import annotations

import copy
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as ops
from . import quantizer
from .errors import ShapeError
from .layers import BatchNormState

INPUT = "input"

DEFAULT_WIDTHS = (64, 128, 256, 512)


class Layer:
    kind = "abstract"

    def __init__(self, name, producers):
        self.name = name
        self.producers = list(producers)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class ConvBlock(Layer):
    """Convolution with optional bias, optional batch norm, optional relu."""

    kind = "conv_block"

    def __init__(self, name, producers, weight, bias=None, bn=None, relu=True,
                 stride=1, pad=1, qb=None, qe=None, out_hw=None):
        super().__init__(name, producers)
        self.weight = weight
        self.bias = bias
        self.bn = bn
        self.relu = relu
        self.stride = stride
        self.pad = pad
        self.qb = qb
        self.qe = qe
        self.out_hw = out_hw

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel_hw(self):
        return self.weight.shape[2], self.weight.shape[3]


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, producers, weight, bias, qb=None, qe=None):
        super().__init__(name, producers)
        self.weight = weight
        self.bias = bias
        self.qb = qb
        self.qe = qe

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel_hw(self):
        return 1, 1


class Pool(Layer):
    kind = "pool"

    def __init__(self, name, producers, window=2):
        super().__init__(name, producers)
        self.window = window


class GlobalPool(Layer):
    kind = "global_pool"

    def __init__(self, name, producers):
        super().__init__(name, producers)


class Add(Layer):
    kind = "add"

    def __init__(self, name, producers):
        super().__init__(name, producers)


class SoftmaxHead(Layer):
    kind = "softmax_ce"

    def __init__(self, name, producers):
        super().__init__(name, producers)


WEIGHTED_KINDS = ("conv_block", "dense")
CHANNEL_PRESERVING_KINDS = ("pool", "global_pool")


class NetworkGraph:
    """Topologically ordered layer list plus frozen bookkeeping.

    starting_weight_count is fixed at construction and never changes, even
    after channels are physically removed.
    """

    def __init__(self, layers, input_shape, n_classes, b_max=16.0, widths=None):
        self.layers = list(layers)
        self.by_name = {layer.name: layer for layer in self.layers}
        if len(self.by_name) != len(self.layers):
            raise ShapeError("duplicate layer names")
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.b_max = float(b_max)
        self.widths = tuple(widths) if widths else None
        self.starting_weight_count = count_weight_elements(self)

    def layer(self, name):
        return self.by_name[name]

    def weighted_layers(self):
        return [l for l in self.layers if l.kind in WEIGHTED_KINDS]

    def conv_blocks(self):
        return [l for l in self.layers if l.kind == "conv_block"]

    def clone(self, dtype=None):
        """Deep copy; optionally cast all arrays (params and buffers)."""
        net = copy.deepcopy(self)
        if dtype is not None:
            for layer in net.weighted_layers():
                layer.weight = layer.weight.astype(dtype)
                if layer.bias is not None:
                    layer.bias = layer.bias.astype(dtype)
                if layer.qb is not None:
                    layer.qb = layer.qb.astype(dtype)
                    layer.qe = layer.qe.astype(dtype)
                bn = getattr(layer, "bn", None)
                if bn is not None:
                    bn.gamma = bn.gamma.astype(dtype)
                    bn.beta = bn.beta.astype(dtype)
                    bn.running_mean = bn.running_mean.astype(dtype)
                    bn.running_var = bn.running_var.astype(dtype)
        return net


def count_weight_elements(net):
    """Weight elements only, excluding biases and norm parameters."""
    return int(sum(l.weight.size for l in net.weighted_layers()))


def total_live_channels(net):
    return int(sum(l.out_channels for l in net.weighted_layers()))


def estimate_macs(net):
    """Multiply-accumulates for one inference: conv O*I*kh*kw*oh*ow terms
    plus the dense layer as a spatial-size-1 term."""
    total = 0
    for layer in net.layers:
        if layer.kind == "conv_block":
            o, i, kh, kw = layer.weight.shape
            oh, ow = layer.out_hw
            total += o * i * kh * kw * oh * ow
        elif layer.kind == "dense":
            total += layer.weight.size
    return int(total)


def _he_conv(rng, o, i, kh, kw, dtype):
    std = np.sqrt(2.0 / (i * kh * kw))
    return rng.normal(0.0, std, size=(o, i, kh, kw)).astype(dtype)


def _init_channel_formats(weight, b_init, dtype):
    o = weight.shape[0]
    qb = np.full(o, b_init, dtype=dtype)
    qe = np.zeros(o, dtype=dtype)
    for c in range(o):
        qe[c] = quantizer.init_format(weight[c], b_init).e
    return qb, qe


def build_cifar_net(width_scale=1.0, widths=None, n_classes=10, seed=0,
                    b_init=8.0, b_max=16.0, quantize_first_last=True,
                    dtype=np.float32):
    """9-weighted-layer residual classifier for 3x32x32 inputs.

    conv(w0) -> conv(w1)+pool -> residual block(w1) -> conv(w2)+pool ->
    pool -> conv(w3)+pool -> residual block(w3) -> global avg pool ->
    dense(n_classes). Every conv block is conv + batch norm + relu; every
    weighted layer carries one (b, e) format per output channel.
    """
    if widths is None:
        widths = [max(1, int(round(w * width_scale))) for w in DEFAULT_WIDTHS]
    widths = [int(w) for w in widths]
    if any(w <= 0 for w in widths) or n_classes <= 0:
        raise ValueError("widths and class count must be positive")
    w0, w1, w2, w3 = widths
    rng = np.random.default_rng(np.random.SeedSequence([0x5E1F, seed]))

    def conv(name, producers, i, o, hw, quantized=True):
        weight = _he_conv(rng, o, i, 3, 3, dtype)
        qb = qe = None
        if quantized:
            qb, qe = _init_channel_formats(weight, b_init, dtype)
        return ConvBlock(name, producers, weight, bias=None,
                         bn=BatchNormState.create(o, dtype), relu=True,
                         stride=1, pad=1, qb=qb, qe=qe, out_hw=hw)

    layers = [
        conv("conv1", [INPUT], 3, w0, (32, 32), quantized=quantize_first_last),
        conv("conv2", ["conv1"], w0, w1, (32, 32)),
        Pool("pool1", ["conv2"]),
        conv("res1a", ["pool1"], w1, w1, (16, 16)),
        conv("res1b", ["res1a"], w1, w1, (16, 16)),
        Add("add1", ["pool1", "res1b"]),
        conv("conv3", ["add1"], w1, w2, (16, 16)),
        Pool("pool2", ["conv3"]),
        Pool("pool3", ["pool2"]),
        conv("conv4", ["pool3"], w2, w3, (4, 4)),
        Pool("pool4", ["conv4"]),
        conv("res2a", ["pool4"], w3, w3, (2, 2)),
        conv("res2b", ["res2a"], w3, w3, (2, 2)),
        Add("add2", ["pool4", "res2b"]),
        GlobalPool("gpool", ["add2"]),
    ]
    fc_weight = rng.normal(0.0, np.sqrt(1.0 / w3), size=(n_classes, w3)).astype(dtype)
    fc_bias = np.zeros(n_classes, dtype=dtype)
    fc_qb = fc_qe = None
    if quantize_first_last:
        fc_qb, fc_qe = _init_channel_formats(fc_weight, b_init, dtype)
    layers.append(Dense("fc", ["gpool"], fc_weight, fc_bias, qb=fc_qb, qe=fc_qe))
    layers.append(SoftmaxHead("head", ["fc"]))

    return NetworkGraph(layers, (3, 32, 32), n_classes, b_max=b_max, widths=widths)


@dataclass
class ForwardGraph:
    logits: ad.Node
    leaves: dict
    values: dict


def build_forward(net, images, training=False, want_grads=True):
    """Build the autodiff graph for one batch.

    Weights stay in float ("shadow" storage) and pass through the
    per-channel quantizer on every forward, so gradients reach the shadow
    weights and the format parameters via the straight-through rule.
    """
    images = np.asarray(images)
    if images.shape[1:] != net.input_shape:
        raise ShapeError(f"batch shape {images.shape[1:]} != input {net.input_shape}")

    leaves = {}
    values = {INPUT: ad.Node(images, (), "input", False)}

    def param_leaf(name, array):
        node = ad.leaf(array, requires_grad=want_grads)
        leaves[name] = node
        return node

    for layer in net.layers:
        srcs = [values[p] for p in layer.producers]
        if layer.kind == "conv_block":
            w = param_leaf(f"{layer.name}.weight", layer.weight)
            if layer.qb is not None:
                qb = param_leaf(f"{layer.name}.qb", layer.qb)
                qe = param_leaf(f"{layer.name}.qe", layer.qe)
                w = quantizer.quantize_channels_node(w, qb, qe)
            bias = None
            if layer.bias is not None:
                bias = param_leaf(f"{layer.name}.bias", layer.bias)
            y = ops.conv2d(srcs[0], w, bias, stride=layer.stride, pad=layer.pad)
            if layer.bn is not None:
                gamma = param_leaf(f"{layer.name}.bn_gamma", layer.bn.gamma)
                beta = param_leaf(f"{layer.name}.bn_beta", layer.bn.beta)
                y = ops.batch_norm(y, gamma, beta, layer.bn, training)
            if layer.relu:
                y = ad.relu(y)
            values[layer.name] = y
        elif layer.kind == "dense":
            w = param_leaf(f"{layer.name}.weight", layer.weight)
            if layer.qb is not None:
                qb = param_leaf(f"{layer.name}.qb", layer.qb)
                qe = param_leaf(f"{layer.name}.qe", layer.qe)
                w = quantizer.quantize_channels_node(w, qb, qe)
            bias = param_leaf(f"{layer.name}.bias", layer.bias)
            values[layer.name] = ops.dense(srcs[0], w, bias)
        elif layer.kind == "pool":
            values[layer.name] = ops.max_pool2(srcs[0])
        elif layer.kind == "global_pool":
            values[layer.name] = ops.global_avg_pool(srcs[0])
        elif layer.kind == "add":
            acc = srcs[0]
            for other in srcs[1:]:
                acc = ad.add(acc, other)
            values[layer.name] = acc
        elif layer.kind == "softmax_ce":
            values[layer.name] = srcs[0]
        else:
            raise ShapeError(f"unknown layer kind {layer.kind!r}")

    logits = values[net.layers[-1].name]
    return ForwardGraph(logits=logits, leaves=leaves, values=values)


def forward_network(net, batch, training=False):
    """Run one forward pass and return the logits array."""
    graph = build_forward(net, batch, training=training, want_grads=False)
    ad.assert_finite(graph.logits.value, "logits")
    return graph.logits.value


def _channels_of(net, name, cache):
    if name in cache:
        return cache[name]
    if name == INPUT:
        cache[name] = net.input_shape[0]
        return cache[name]
    layer = net.by_name[name]
    if layer.kind in WEIGHTED_KINDS:
        out = layer.out_channels
    elif layer.kind in CHANNEL_PRESERVING_KINDS or layer.kind == "softmax_ce":
        out = _channels_of(net, layer.producers[0], cache)
    elif layer.kind == "add":
        out = _channels_of(net, layer.producers[0], cache)
    else:
        raise ShapeError(f"unknown layer kind {layer.kind!r}")
    cache[name] = out
    return out


def validate_network(net):
    """Structural invariant check; returns a list of violations (empty = ok)."""
    violations = []
    seen = {INPUT}
    cache = {}
    heads = [l for l in net.layers if l.kind == "softmax_ce"]
    if len(heads) != 1 or net.layers[-1].kind != "softmax_ce":
        violations.append("network must end in exactly one softmax_ce head")

    for layer in net.layers:
        for p in layer.producers:
            if p not in seen:
                violations.append(f"{layer.name}: producer {p} not defined earlier")
        seen.add(layer.name)

    for layer in net.layers:
        if any(p not in net.by_name and p != INPUT for p in layer.producers):
            continue
        if layer.kind == "conv_block":
            got = _channels_of(net, layer.producers[0], cache)
            if got != layer.in_channels:
                violations.append(
                    f"{layer.name}: consumes {layer.in_channels} channels but "
                    f"producer {layer.producers[0]} provides {got}")
        elif layer.kind == "dense":
            got = _channels_of(net, layer.producers[0], cache)
            if got != layer.in_channels:
                violations.append(
                    f"{layer.name}: expects {layer.in_channels} features but "
                    f"producer {layer.producers[0]} provides {got}")
        elif layer.kind == "add":
            if len(layer.producers) < 2:
                violations.append(f"{layer.name}: add needs >= 2 producers")
            counts = [_channels_of(net, p, cache) for p in layer.producers]
            if len(set(counts)) > 1:
                branches = ", ".join(
                    f"{p}={c}" for p, c in zip(layer.producers, counts))
                violations.append(f"{layer.name}: branch widths differ ({branches})")

    for layer in net.weighted_layers():
        if layer.qb is not None:
            if layer.qb.shape != (layer.out_channels,) or \
               layer.qe.shape != (layer.out_channels,):
                violations.append(f"{layer.name}: format arrays must be ({layer.out_channels},)")
            elif np.any(layer.qb < 0) or np.any(layer.qb > net.b_max):
                violations.append(f"{layer.name}: bit depths outside [0, {net.b_max}]")
        arrays = [layer.weight]
        if layer.bias is not None:
            arrays.append(layer.bias)
        bn = getattr(layer, "bn", None)
        if bn is not None:
            if bn.gamma.shape != (layer.out_channels,):
                violations.append(f"{layer.name}: norm arrays must be ({layer.out_channels},)")
            arrays += [bn.gamma, bn.beta, bn.running_mean, bn.running_var]
        if layer.qb is not None:
            arrays += [layer.qb, layer.qe]
        for arr in arrays:
            if not np.all(np.isfinite(arr)):
                violations.append(f"{layer.name}: non-finite parameter values")
                break
    return violations


@dataclass(frozen=True)
class ChannelFlow:
    """Channel connectivity: which weighted layers consume each producer's
    output channels, which producers must prune aligned channels together
    (residual sums), and which producers cannot be pruned at all."""

    consumers: dict
    groups: dict
    blocked: frozenset


def channel_flow(net):
    direct = defaultdict(list)
    for layer in net.layers:
        for p in layer.producers:
            direct[p].append(layer)

    consumers = {}
    blocked = set()
    for producer in net.weighted_layers():
        found = {}
        queue = [producer.name]
        visited = set()
        while queue:
            cur = queue.pop(0)
            if cur in visited:
                continue
            visited.add(cur)
            for nxt in direct[cur]:
                if nxt.kind in WEIGHTED_KINDS:
                    found[nxt.name] = True
                elif nxt.kind in CHANNEL_PRESERVING_KINDS or nxt.kind == "add":
                    queue.append(nxt.name)
                elif nxt.kind == "softmax_ce":
                    blocked.add(producer.name)
        consumers[producer.name] = list(found)

    # residual sums force aligned channels across every branch's sources
    parent = {l.name: l.name for l in net.weighted_layers()}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    def weighted_sources(name):
        if name == INPUT:
            return None  # channels come straight from the network input
        layer = net.by_name[name]
        if layer.kind in WEIGHTED_KINDS:
            return {layer.name}
        if layer.kind in CHANNEL_PRESERVING_KINDS:
            return weighted_sources(layer.producers[0])
        if layer.kind == "add":
            out = set()
            for p in layer.producers:
                sub = weighted_sources(p)
                if sub is None:
                    return None
                out |= sub
            return out
        return None

    for layer in net.layers:
        if layer.kind != "add":
            continue
        sources = set()
        input_fed = False
        for p in layer.producers:
            sub = weighted_sources(p)
            if sub is None:
                input_fed = True
                continue
            sources |= sub
        if input_fed:
            blocked |= sources
            continue
        sources = sorted(sources)
        for other in sources[1:]:
            union(sources[0], other)

    roots = defaultdict(set)
    for name in parent:
        roots[find(name)].add(name)
    groups = {}
    for members in roots.values():
        frozen = frozenset(members)
        if frozen & blocked:
            blocked |= frozen
        for name in members:
            groups[name] = frozen

    return ChannelFlow(consumers=consumers, groups=groups, blocked=frozenset(blocked))


PARAM_FIELDS = (
    ("weight", "weight"),
    ("bias", "bias"),
    ("bn_gamma", "norm_scale"),
    ("bn_beta", "norm_shift"),
    ("qb", "quant_b"),
    ("qe", "quant_e"),
)


class ParamStore:
    """Live keyed view over every trainable array in the network.

    Keys are "<layer>.<field>"; arrays are re-resolved on each access so
    pruning (which replaces arrays with sliced copies) stays transparent
    to the optimizer.
    """

    def __init__(self, net):
        self.net = net

    def _resolve(self, layer, field):
        if field == "weight":
            return layer.weight
        if field == "bias":
            return layer.bias
        if field == "qb":
            return layer.qb
        if field == "qe":
            return layer.qe
        bn = getattr(layer, "bn", None)
        if bn is None:
            return None
        if field == "bn_gamma":
            return bn.gamma
        if field == "bn_beta":
            return bn.beta
        raise KeyError(field)

    def items(self):
        for layer in self.net.weighted_layers():
            for field, kind in PARAM_FIELDS:
                arr = self._resolve(layer, field)
                if arr is not None:
                    yield f"{layer.name}.{field}", kind, arr

    def keys(self):
        return [key for key, _, _ in self.items()]

    def get(self, key):
        layer_name, field = key.rsplit(".", 1)
        arr = self._resolve(self.net.by_name[layer_name], field)
        if arr is None:
            raise KeyError(key)
        return arr

    def set(self, key, value):
        layer_name, field = key.rsplit(".", 1)
        layer = self.net.by_name[layer_name]
        if field == "weight":
            layer.weight = value
        elif field == "bias":
            layer.bias = value
        elif field == "qb":
            layer.qb = value
        elif field == "qe":
            layer.qe = value
        elif field == "bn_gamma":
            layer.bn.gamma = value
        elif field == "bn_beta":
            layer.bn.beta = value
        else:
            raise KeyError(key)
