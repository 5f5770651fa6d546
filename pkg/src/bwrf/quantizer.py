"""Learned step-size fake quantization.

Forward: vhat = s * round(clip(v/s, qmin, qmax)) with round-to-nearest,
ties away from zero. Backward treats round as straight-through: the input
gradient passes unchanged strictly inside the clip range and is zero
outside; the scale gradient per element is (round(v/s) - v/s) in range and
qmin/qmax at or beyond the respective threshold, optionally multiplied by
1/sqrt(n_elements * qmax).

All range comparisons use v/s, matching the clip in the forward.
"""

from __future__ import annotations

import math

import numpy as np

from bwrf import tensor as T
from bwrf.tensor import Tensor, custom_op

SCALE_FLOOR = 1e-8


class Quantizer:
    """Per-tensor quantizer with a single learnable scale.

    Signed quantizers (weights, and the first activation, which sees
    normalized images) use qmin = -2^(bits-1), qmax = 2^(bits-1) - 1;
    unsigned quantizers (post-relu activations) use qmin = 0,
    qmax = 2^bits - 1.

    The scale starts uninitialized: weight quantizers are calibrated when
    weights are copied in, activation quantizers on their first forward
    batch. ``enabled = False`` turns the quantizer into an exact identity.
    """

    __slots__ = ("bits", "signed", "qmin", "qmax", "scale", "grad_scale_enabled",
                 "enabled", "initialized")

    def __init__(self, bits: int, signed: bool, grad_scale_enabled: bool = True):
        bits = int(bits)
        if bits < 2:
            raise ValueError(f"quantizer needs at least 2 bits, got {bits}")
        self.bits = bits
        self.signed = bool(signed)
        if self.signed:
            self.qmin = -(1 << (bits - 1))
            self.qmax = (1 << (bits - 1)) - 1
        else:
            self.qmin = 0
            self.qmax = (1 << bits) - 1
        self.grad_scale_enabled = bool(grad_scale_enabled)
        self.enabled = True
        self.scale = Tensor(np.float32(1.0), requires_grad=True)
        self.initialized = False

    def __repr__(self):
        kind = "signed" if self.signed else "unsigned"
        return (f"Quantizer(bits={self.bits}, {kind}, range=[{self.qmin}, {self.qmax}], "
                f"scale={self.scale.data.item():.6g})")

    def set_scale(self, value: float):
        # in-place so the (1,) buffer identity survives across state_dict views
        self.scale.data[...] = np.float32(max(float(value), SCALE_FLOOR))
        self.initialized = True

    def clamp_scale(self):
        """Re-project the scale to stay positive after an optimizer step."""
        np.maximum(self.scale.data, np.float32(SCALE_FLOOR), out=self.scale.data)


def _round_half_away(x):
    """Round to nearest with ties away from zero, exact in float32.

    trunc and the fractional remainder are exact for |x| below 2^23, which
    holds because x is already clipped to the integer thresholds.
    """
    t = np.trunc(x)
    f = x - t
    return t + (f >= 0.5).astype(x.dtype) - (f <= -0.5).astype(x.dtype)


def init_scale(v, q: Quantizer) -> float:
    """Calibration value 2 * mean(|v|) / sqrt(qmax), floored at 1e-8."""
    data = np.asarray(v.data if isinstance(v, Tensor) else v)
    if data.size == 0:
        raise ValueError("init_scale needs a non-empty tensor")
    s = 2.0 * float(np.abs(data, dtype=np.float64).mean()) / math.sqrt(q.qmax)
    return max(s, SCALE_FLOOR)


def quantize_backward_input(upstream, v, q: Quantizer, scale: float | None = None):
    """Straight-through input gradient: upstream masked to the open clip range."""
    g = np.asarray(upstream.data if isinstance(upstream, Tensor) else upstream)
    data = np.asarray(v.data if isinstance(v, Tensor) else v)
    s = np.float32(q.scale.data.item() if scale is None else scale)
    vs = data / s
    return g * ((q.qmin < vs) & (vs < q.qmax))


def quantize_backward_scale(upstream, v, q: Quantizer, scale: float | None = None):
    """Scale gradient summed over elements, as a float32 scalar."""
    g = np.asarray(upstream.data if isinstance(upstream, Tensor) else upstream)
    data = np.asarray(v.data if isinstance(v, Tensor) else v)
    s = np.float32(q.scale.data.item() if scale is None else scale)
    vs = data / s
    inner = _round_half_away(np.clip(vs, q.qmin, q.qmax)) - vs
    term = np.where(vs <= q.qmin, np.float32(q.qmin),
                    np.where(vs >= q.qmax, np.float32(q.qmax), inner))
    total = (g * term).sum(dtype=np.float32)
    if q.grad_scale_enabled:
        total = total * np.float32(1.0 / math.sqrt(data.size * q.qmax))
    return np.asarray(total, dtype=np.float32).reshape(())


def quantize_forward(v: Tensor, q: Quantizer) -> Tensor:
    """Apply fake quantization as a graph op with the straight-through backward.

    A disabled quantizer returns its input node unchanged. An uninitialized
    scale is calibrated from this tensor's values first.
    """
    if not q.enabled:
        return v
    if not q.initialized:
        q.set_scale(init_scale(v.data, q))
    s = q.scale.data.item()
    if s <= 0:
        raise ValueError(f"quantizer scale must be positive, got {s}")
    s32 = np.float32(s)
    vs = v.data / s32
    rc = _round_half_away(np.clip(vs, q.qmin, q.qmax))
    out_data = rc * s32
    qmin32, qmax32 = np.float32(q.qmin), np.float32(q.qmax)
    factor = (np.float32(1.0 / math.sqrt(vs.size * q.qmax))
              if q.grad_scale_enabled else None)

    # The backward closure reuses vs and rc; the arithmetic mirrors
    # quantize_backward_input / quantize_backward_scale operation for
    # operation, so both paths stay bit-identical.
    def grad_fn(g):
        gv = g * ((q.qmin < vs) & (vs < q.qmax)) if v.requires_grad else None
        term = np.where(vs <= q.qmin, qmin32, np.where(vs >= q.qmax, qmax32, rc - vs))
        gs = (g * term).sum(dtype=np.float32)
        if factor is not None:
            gs = gs * factor
        return gv, np.full((1,), gs, dtype=np.float32)

    return custom_op("quantize", out_data, (v, q.scale), grad_fn)


def quantized_conv2d(x: Tensor, conv, wq: Quantizer | None, aq: Quantizer | None) -> Tensor:
    """conv2d on (quantized activation, quantized weight); bias untouched."""
    xq = quantize_forward(x, aq) if aq is not None else x
    w = quantize_forward(conv.weight, wq) if wq is not None else conv.weight
    return T.conv2d(xq, w, conv.bias, stride=conv.stride, padding=conv.padding)


def quantized_linear(x: Tensor, layer, wq: Quantizer | None, aq: Quantizer | None) -> Tensor:
    """linear on (quantized activation, quantized weight); bias untouched."""
    xq = quantize_forward(x, aq) if aq is not None else x
    w = quantize_forward(layer.weight, wq) if wq is not None else layer.weight
    return T.linear(xq, w, layer.bias)
