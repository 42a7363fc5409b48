"""Folding conv + batchnorm (+ relu + next-layer requantization) into one
integer operation.

For a quantized conv with weight step s_w and input-activation step s_a,
the integer accumulators Y_hat only need a per-channel affine to reproduce
the float pipeline:

    y = alpha_c * Y_hat + delta_c,
    alpha_c = gamma_c / sigma_c * s_w * s_a,
    delta_c = beta_c - mu_c * gamma_c / sigma_c + gamma_c * bias_c / sigma_c,

with sigma_c = sqrt(sigma_sq_c + eps). ReLU and the following layer's
quantizer can be absorbed behind the affine, so a chain of fused layers
exchanges integer codes only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .errors import GraphError, NumericError, ShapeError
from .graph import LayerSpec, NetGraph
from .quant import QAccum, QTensor, QuantSpec, qconv_codes, quantize, quantize_array
from .tensor import BnParams, ConvParams, Tensor


@dataclass(frozen=True)
class FusedLayer:
    """Integer conv plus per-channel output affine, with optional absorbed
    relu and requantization to the next layer's activation spec."""

    q_weight: QTensor
    alpha: np.ndarray
    delta: np.ndarray
    relu: bool
    in_spec: QuantSpec
    next_act_spec: QuantSpec | None
    stride: int
    padding: int

    def __post_init__(self):
        c_out = self.q_weight.dims[0]
        for field in ("alpha", "delta"):
            v = np.ascontiguousarray(getattr(self, field), dtype=np.float64)
            if v.shape != (c_out,):
                raise ShapeError(f"fused {field} must have shape ({c_out},), got {v.shape}")
            if not np.all(np.isfinite(v)):
                raise NumericError(f"fused {field} contains NaN or Inf")
            v.flags.writeable = False
            object.__setattr__(self, field, v)

    def apply(self, a) -> "QTensor | Tensor":
        if not isinstance(a, QTensor):
            raise GraphError("fused layer expects quantized input codes")
        if a.spec != self.in_spec:
            raise GraphError(
                f"fused layer calibrated for {self.in_spec}, received {a.spec}"
            )
        acc = qconv_codes(a.codes, self.q_weight.codes, self.stride, self.padding)
        y = acc.astype(np.float64) * self.alpha.reshape(1, -1, 1, 1)
        y = y + self.delta.reshape(1, -1, 1, 1)
        if self.relu:
            y = np.maximum(y, 0.0)
        if self.next_act_spec is not None:
            return QTensor(quantize_array(y, self.next_act_spec), self.next_act_spec)
        return Tensor._wrap(y)


def fuse(
    conv: ConvParams,
    w_spec: QuantSpec,
    in_spec: QuantSpec,
    bn: BnParams | None,
    relu: bool,
    next_spec: QuantSpec | None = None,
) -> FusedLayer:
    """Fold a quantized conv and its batchnorm into a FusedLayer.

    ``bn=None`` fuses a bare conv (identity affine: alpha = s_w * s_a,
    delta = bias).
    """
    c_out = conv.out_channels
    s_prod = w_spec.scale * in_spec.scale
    if bn is None:
        alpha = np.full(c_out, s_prod)
        delta = conv.bias.copy() if conv.bias is not None else np.zeros(c_out)
    else:
        if bn.channels != c_out:
            raise ShapeError(f"bn has {bn.channels} channels, conv outputs {c_out}")
        sigma = bn.sigma
        if np.any(sigma == 0):
            raise NumericError("bn sigma underflowed to zero; cannot fuse")
        ratio = bn.gamma / sigma
        alpha = ratio * s_prod
        delta = bn.beta - bn.mu * ratio
        if conv.bias is not None:
            delta = delta + ratio * conv.bias
    return FusedLayer(
        q_weight=quantize(conv.weight, w_spec),
        alpha=alpha,
        delta=delta,
        relu=relu,
        in_spec=in_spec,
        next_act_spec=next_spec,
        stride=conv.stride,
        padding=conv.padding,
    )


def run_fused(layer: FusedLayer, a) -> "QTensor | Tensor":
    return layer.apply(a)


def reference_unfused(
    conv: ConvParams,
    w_spec: QuantSpec,
    in_spec: QuantSpec,
    bn: BnParams | None,
    relu: bool,
    next_spec: QuantSpec | None,
    x: Tensor,
):
    """The sequential pipeline a FusedLayer must reproduce: integer conv,
    rescale by s_w * s_a, bias, batchnorm, relu, next-layer quantize.

    Returns (final value, pre-quantization float tensor).
    """
    aq = quantize(x, in_spec)
    wq = quantize(conv.weight, w_spec)
    acc = qconv_codes(aq.codes, wq.codes, conv.stride, conv.padding)
    y = QAccum(acc, w_spec.scale * in_spec.scale).dequantize(conv.bias)
    if bn is not None:
        y = ops.batchnorm(y, bn)
    if relu:
        y = ops.relu(y)
    if next_spec is not None:
        return quantize(y, next_spec), y
    return y, y


def fuse_graph(g: NetGraph) -> NetGraph:
    """Rewrite every fusable quantized conv chain into a fused node.

    A chain is conv -> [bn] -> [relu] where each merged edge has a single
    consumer. When the chain tail feeds exactly one other fusable conv,
    that conv's activation quantizer is absorbed and the boundary carries
    integer codes; otherwise the fused node emits floats and consumers
    quantize explicitly. Convs without annotations stay float. A bn whose
    producer is not a conv has no fusable pattern and is rejected.
    """
    cons = g.consumers()
    for s in g.layers:
        if s.kind == "bn" and g.layer(s.inputs[0]).kind not in ("conv",):
            raise GraphError(f"{s.name}: bn does not follow a conv; cannot fuse this graph")

    # Plan chains keyed by conv name: (bn_name, relu_name, tail_name).
    plan: dict[str, tuple] = {}
    merged: set[str] = set()
    for s in g.layers:
        if s.kind != "conv" or s.quant is None:
            continue
        tail = s.name
        bn_name = relu_name = None
        nxt = cons[tail]
        if len(nxt) == 1 and g.layer(nxt[0]).kind == "bn":
            bn_name = nxt[0]
            tail = bn_name
            nxt = cons[tail]
        elif any(g.layer(n).kind == "bn" for n in nxt):
            # conv output needed elsewhere as well; leave the chain unfused
            continue
        if len(nxt) == 1 and g.layer(nxt[0]).kind == "relu":
            relu_name = nxt[0]
            tail = relu_name
        plan[s.name] = (bn_name, relu_name, tail)
        merged.update(n for n in (bn_name, relu_name) if n)

    # Requantization absorption: tail feeds exactly one planned conv.
    next_spec: dict[str, QuantSpec | None] = {}
    absorbed_from: dict[str, str] = {}  # consumer conv -> producer conv
    for conv_name, (_, _, tail) in plan.items():
        nxt = cons[tail]
        spec = None
        if len(nxt) == 1 and nxt[0] in plan:
            spec = g.layer(nxt[0]).quant.a_spec
            absorbed_from[nxt[0]] = conv_name
        next_spec[conv_name] = spec

    rename: dict[str, str] = {}
    out_layers: list[LayerSpec] = []
    for s in g.layers:
        if s.name in merged:
            continue
        refs = tuple(rename.get(r, r) for r in s.inputs)
        if s.kind == "conv" and s.name in plan:
            bn_name, relu_name, tail = plan[s.name]
            ann = s.quant
            if absorbed_from.get(s.name):
                in_ref = rename.get(absorbed_from[s.name], absorbed_from[s.name])
            else:
                qname = f"{s.name}/aq"
                out_layers.append(
                    LayerSpec(qname, "quantize", refs, params=ann.a_spec, region=s.region)
                )
                in_ref = qname
            fl = fuse(
                s.params,
                ann.w_spec,
                ann.a_spec,
                g.layer(bn_name).params if bn_name else None,
                relu_name is not None,
                next_spec[s.name],
            )
            out_layers.append(LayerSpec(s.name, "fused", (in_ref,), params=fl, region=s.region))
            rename[tail] = s.name
        else:
            out_layers.append(replace(s, inputs=refs))
    return NetGraph(out_layers, tuple(rename.get(t, t) for t in g.outputs))
