"""Checkpoint directory format.

manifest.json carries the graph topology, per-channel (b, e) arrays, and
for every tensor its shape plus byte offset/length into tensors.bin, which
holds raw little-endian IEEE-754 binary32 values in row-major order
(O, I, H, W for conv weights). Adam moment tensors, when present, are
stored under "adam.m.<key>" / "adam.v.<key>". Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import network as ng
from .errors import CheckpointError
from .layers import BatchNormState
from .network import Add, ConvBlock, Dense, GlobalPool, NetworkGraph, Pool, SoftmaxHead
from .optim import AdamState

MANIFEST = "manifest.json"
TENSORS = "tensors.bin"
FORMAT_VERSION = 1


def _layer_record(layer):
    rec = {"name": layer.name, "kind": layer.kind, "producers": layer.producers}
    if layer.kind == "conv_block":
        rec.update(
            stride=layer.stride, pad=layer.pad, relu=layer.relu,
            has_bias=layer.bias is not None, has_bn=layer.bn is not None,
            out_hw=list(layer.out_hw),
        )
    if layer.kind in ng.WEIGHTED_KINDS:
        rec["quantized"] = layer.qb is not None
        if layer.qb is not None:
            rec["qb"] = [float(v) for v in layer.qb]
            rec["qe"] = [float(v) for v in layer.qe]
    if layer.kind == "pool":
        rec["window"] = layer.window
    return rec


def save_checkpoint(path, net, opt_state=None):
    os.makedirs(path, exist_ok=True)
    tensors = {}
    blobs = []
    offset = 0

    def put(key, array):
        nonlocal offset
        raw = np.ascontiguousarray(array, dtype="<f4").tobytes()
        tensors[key] = {
            "shape": list(array.shape),
            "dtype": "f32le",
            "offset": offset,
            "length": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)

    for layer in net.weighted_layers():
        put(f"{layer.name}.weight", layer.weight)
        if layer.bias is not None:
            put(f"{layer.name}.bias", layer.bias)
        bn = getattr(layer, "bn", None)
        if bn is not None:
            put(f"{layer.name}.bn_gamma", bn.gamma)
            put(f"{layer.name}.bn_beta", bn.beta)
            put(f"{layer.name}.bn_running_mean", bn.running_mean)
            put(f"{layer.name}.bn_running_var", bn.running_var)

    if opt_state is not None:
        for key in sorted(opt_state.m):
            put(f"adam.m.{key}", opt_state.m[key])
            put(f"adam.v.{key}", opt_state.v[key])

    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "class_count": net.n_classes,
        "b_max": net.b_max,
        "widths": list(net.widths) if net.widths else None,
        "starting_weight_count": net.starting_weight_count,
        "layers": [_layer_record(layer) for layer in net.layers],
        "tensors": tensors,
    }
    if opt_state is not None:
        manifest["optimizer"] = {"step": opt_state.t}

    with open(os.path.join(path, TENSORS), "wb") as fh:
        fh.write(b"".join(blobs))
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2)


def _read_tensor(blob, meta, key):
    start, length = meta["offset"], meta["length"]
    if start + length > len(blob):
        raise CheckpointError(
            f"tensor {key} extends past tensors.bin "
            f"(offset {start} + length {length} > {len(blob)})")
    arr = np.frombuffer(blob[start:start + length], dtype="<f4")
    shape = tuple(meta["shape"])
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise CheckpointError(f"tensor {key} length does not match shape {shape}")
    return arr.reshape(shape).astype(np.float32)


def load_checkpoint(path):
    """Load (net, AdamState-or-None) from a checkpoint directory."""
    manifest_path = os.path.join(path, MANIFEST)
    tensors_path = os.path.join(path, TENSORS)
    if not os.path.exists(manifest_path) or not os.path.exists(tensors_path):
        raise CheckpointError(f"{path} is not a checkpoint directory")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest: {exc}") from exc
    with open(tensors_path, "rb") as fh:
        blob = fh.read()

    tensors = manifest["tensors"]

    def tensor(key):
        if key not in tensors:
            raise CheckpointError(f"manifest is missing tensor {key}")
        return _read_tensor(blob, tensors[key], key)

    layers = []
    for rec in manifest["layers"]:
        kind = rec["kind"]
        name = rec["name"]
        producers = rec["producers"]
        if kind == "conv_block":
            weight = tensor(f"{name}.weight")
            bias = tensor(f"{name}.bias") if rec["has_bias"] else None
            bn = None
            if rec["has_bn"]:
                bn = BatchNormState(
                    gamma=tensor(f"{name}.bn_gamma"),
                    beta=tensor(f"{name}.bn_beta"),
                    running_mean=tensor(f"{name}.bn_running_mean"),
                    running_var=tensor(f"{name}.bn_running_var"),
                )
            qb = qe = None
            if rec.get("quantized"):
                qb = np.asarray(rec["qb"], dtype=np.float32)
                qe = np.asarray(rec["qe"], dtype=np.float32)
            layers.append(ConvBlock(
                name, producers, weight, bias=bias, bn=bn, relu=rec["relu"],
                stride=rec["stride"], pad=rec["pad"], qb=qb, qe=qe,
                out_hw=tuple(rec["out_hw"])))
        elif kind == "dense":
            qb = qe = None
            if rec.get("quantized"):
                qb = np.asarray(rec["qb"], dtype=np.float32)
                qe = np.asarray(rec["qe"], dtype=np.float32)
            layers.append(Dense(name, producers, tensor(f"{name}.weight"),
                                tensor(f"{name}.bias"), qb=qb, qe=qe))
        elif kind == "pool":
            layers.append(Pool(name, producers, window=rec.get("window", 2)))
        elif kind == "global_pool":
            layers.append(GlobalPool(name, producers))
        elif kind == "add":
            layers.append(Add(name, producers))
        elif kind == "softmax_ce":
            layers.append(SoftmaxHead(name, producers))
        else:
            raise CheckpointError(f"unknown layer kind {kind!r} in manifest")

    net = NetworkGraph(layers, manifest["input_shape"], manifest["class_count"],
                       b_max=manifest.get("b_max", 16.0),
                       widths=manifest.get("widths"))
    # the manifest's frozen denominator wins over the reconstructed count
    net.starting_weight_count = manifest["starting_weight_count"]

    opt_state = None
    if "optimizer" in manifest:
        opt_state = AdamState(t=manifest["optimizer"]["step"])
        for key in tensors:
            if key.startswith("adam.m."):
                opt_state.m[key[len("adam.m."):]] = tensor(key)
            elif key.startswith("adam.v."):
                opt_state.v[key[len("adam.v."):]] = tensor(key)

    violations = ng.validate_network(net)
    if violations:
        raise CheckpointError("checkpoint fails validation: " + "; ".join(violations))
    return net, opt_state
