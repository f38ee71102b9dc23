"""Differentiable per-channel integer number format.

A value x is stored on the grid 2^e * k for integer k in
[-2^(b-1), 2^(b-1) - 1], where both the bit depth b and the exponent e are
trainable scalars shared by all weights of one output channel. Rounding is
nearest-ties-to-even, and gradients flow through the rounding step as
identity (straight-through), which makes the format differentiable in x,
b and e. At b = 0 the representable set collapses and the output is
identically zero, so a zero-bit channel contributes nothing downstream.

Two implementations are kept deliberately: fast closed-form forward/VJP
used by the network, and a composed graph of primitive autodiff ops
(exp2 / clamp / round-with-STE) that serves as an independent route for
cross-checking the closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LN2, Node, accumulate
from .errors import ShapeError


@dataclass
class QuantFormat:
    """Trainable (bit depth, exponent) pair for one channel."""

    b: float
    e: float


@dataclass
class ChannelGroup:
    """One output channel's weight slice and the format it shares."""

    layer: str
    channel: int
    weights: np.ndarray  # view into the layer weight tensor, channel axis removed


def _check_bits(b):
    if np.any(np.asarray(b) < 0):
        raise ValueError("bit depth must be >= 0")


def quantize(x, b, e):
    """Quantize x onto the (b, e) grid: 2^e * round(clamp(2^-e x, lo, hi)).

    b and e broadcast against x; lo = -2^(b-1), hi = 2^(b-1) - 1, and
    rounding is nearest with ties to even. b must be >= 0.
    """
    _check_bits(b)
    x = np.asarray(x)
    b = np.asarray(b, dtype=x.dtype)
    e = np.asarray(e, dtype=x.dtype)
    half_range = np.exp2(b - 1)
    lo = -half_range
    hi = half_range - 1
    v = x * np.exp2(-e)
    return np.exp2(e) * np.rint(np.minimum(np.maximum(v, lo), hi))


def quantize_backward(upstream, x, b, e):
    """Closed-form VJP of quantize with straight-through rounding.

    b and e are scalars shared by the whole slice x. With v = 2^-e x and
    clamp ties counted as clamped (lower bound wins):
      dq/dx = 1 inside, 0 clamped
      dq/db = -ln2 * 2^(e+b-1) below, +ln2 * 2^(e+b-1) above, 0 inside
      dq/de = ln2 * (q - x) inside, ln2 * q clamped
    grad_b and grad_e come back summed over the slice.
    """
    _check_bits(b)
    x = np.asarray(x)
    upstream = np.asarray(upstream, dtype=x.dtype)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    b = float(b)
    e = float(e)

    half_range = np.asarray(2.0 ** (b - 1), dtype=x.dtype)
    lo = -half_range
    hi = half_range - 1
    v = x * np.asarray(2.0 ** -e, dtype=x.dtype)
    below = v <= lo
    above = (v >= hi) & ~below
    inside = ~(below | above)
    q = np.asarray(2.0 ** e, dtype=x.dtype) * np.rint(
        np.where(below, lo, np.where(above, hi, v)))

    grad_x = upstream * inside
    boundary = LN2 * 2.0 ** (e + b - 1)
    signs = above.astype(x.dtype) - below.astype(x.dtype)
    grad_b = np.asarray((upstream * signs).sum() * boundary, dtype=x.dtype)
    grad_e = np.asarray(
        (upstream * LN2 * np.where(inside, q - x, q)).sum(), dtype=x.dtype)
    return grad_x, grad_b, grad_e


def _channel_shape(weight, vec):
    """Reshape a per-output-channel vector for broadcasting over a weight."""
    return np.asarray(vec).reshape((weight.shape[0],) + (1,) * (weight.ndim - 1))


def quantize_channels(weight, b_vec, e_vec):
    """Quantize a weight tensor per output channel (axis 0)."""
    return quantize(weight, _channel_shape(weight, b_vec), _channel_shape(weight, e_vec))


def quantize_channels_vjp(upstream, weight, b_vec, e_vec):
    """Closed-form channelwise VJP; grad_b / grad_e have shape (O,)."""
    _check_bits(b_vec)
    bb = _channel_shape(weight, np.asarray(b_vec, dtype=weight.dtype))
    ee = _channel_shape(weight, np.asarray(e_vec, dtype=weight.dtype))

    half_range = np.exp2(bb - 1)
    lo = -half_range
    hi = half_range - 1
    v = weight * np.exp2(-ee)
    below = v <= lo
    above = (v >= hi) & ~below
    inside = ~(below | above)
    q = np.exp2(ee) * np.rint(np.where(below, lo, np.where(above, hi, v)))

    grad_w = upstream * inside
    boundary = LN2 * np.exp2(ee + bb - 1)
    signs = above.astype(weight.dtype) - below.astype(weight.dtype)
    axes = tuple(range(1, weight.ndim))
    grad_b = (upstream * boundary * signs).sum(axis=axes)
    grad_e = (upstream * LN2 * np.where(inside, q - weight, q)).sum(axis=axes)
    return grad_w, grad_b, grad_e


def quantize_channels_node(w, b, e):
    """Autodiff op quantizing per output channel with the closed-form VJP."""
    value = quantize_channels(w.value, b.value, e.value)
    out = Node(value, (w, b, e), "quantize_channels", ad._requires(w, b, e))

    def _bk(up):
        grad_w, grad_b, grad_e = quantize_channels_vjp(up, w.value, b.value, e.value)
        accumulate(w, grad_w)
        accumulate(b, grad_b)
        accumulate(e, grad_e)

    out._backward = _bk
    return out


def quantize_composed_node(x, b, e):
    """The same quantizer assembled from primitive ops (exp2, clamp,
    round-with-STE). Scalar b and e only; used to cross-check the closed
    forms through an independent gradient route."""
    v = ad.mul(x, ad.exp2(ad.neg(e)))
    half_range = ad.exp2(ad.add_const(b, -1.0))
    lo = ad.neg(half_range)
    hi = ad.add_const(half_range, -1.0)
    r = ad.round_ste(ad.clamp(v, lo, hi))
    return ad.mul(r, ad.exp2(e))


def init_format(weight_slice, b_init, b_max=16.0):
    """Choose the starting format for one channel's weight slice.

    b starts at b_init; e is the smallest integer with
    max|w| <= 2^e * (2^(b_init-1) - 1), or 0 for an all-zero slice.
    """
    weight_slice = np.asarray(weight_slice)
    if weight_slice.size == 0:
        raise ValueError("cannot fit a format to an empty weight slice")
    if not 0.0 < b_init <= b_max:
        raise ValueError(f"b_init must lie in (0, {b_max}]")

    peak = float(np.abs(weight_slice).max())
    if peak == 0.0:
        return QuantFormat(b=float(b_init), e=0.0)

    fit = 2.0 ** (b_init - 1) - 1.0
    if fit <= 0.0:
        # sub-1-bit formats only represent the negative bound
        fit = 2.0 ** (b_init - 1)
    e = int(np.ceil(np.log2(peak / fit)))
    while (2.0 ** (e - 1)) * fit >= peak:
        e -= 1
    while (2.0 ** e) * fit < peak:
        e += 1
    return QuantFormat(b=float(b_init), e=float(e))


def channel_groups(layer_name, weight, b_vec, e_vec):
    """Iterate the ChannelGroup partition of a weight tensor."""
    for c in range(weight.shape[0]):
        yield ChannelGroup(layer=layer_name, channel=c, weights=weight[c])
