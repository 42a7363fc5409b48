"""Layer graphs: topology, execution, differentiation, and quantization tagging.

A NetGraph is an ordered list of layer specs in topological order. Node
kinds cover exactly the vocabulary the pipelines need: input, conv, bn,
relu, upsample2x, add, sub, plus two kinds that appear only after graph
rewrites (quantize nodes and fused integer layers). Execution is a single
forward walk; values flowing along edges are float tensors except across
quantized boundaries, where they are integer code tensors.

Quantization modes relabel convolution layers by network region:
mode I covers the backbone, II adds the feature pyramids, III adds the
heads. The first convolution of a graph always stays float.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .errors import GraphError, ShapeError, StateError
from .quant import QTensor, QuantSpec, init_scale, qconv, quantize
from .tensor import BnParams, ConvParams, Tensor

KINDS = ("input", "conv", "bn", "relu", "upsample2x", "add", "sub", "quantize", "fused")
_ARITY = {
    "input": 0,
    "conv": 1,
    "bn": 1,
    "relu": 1,
    "upsample2x": 1,
    "add": 2,
    "sub": 2,
    "quantize": 1,
    "fused": 1,
}

MODE_REGIONS = {
    "I": frozenset({"backbone"}),
    "II": frozenset({"backbone", "fpn"}),
    "III": frozenset({"backbone", "fpn", "head"}),
}


@dataclass(frozen=True)
class QuantAnnotation:
    """Weight and input-activation quantizers attached to one conv layer."""

    w_spec: QuantSpec
    a_spec: QuantSpec


@dataclass
class LayerSpec:
    """One graph node. ``params`` holds ConvParams, BnParams, a QuantSpec
    (quantize nodes), a fused layer object, or None for parameter-free kinds."""

    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    params: object = None
    region: str = ""
    quant: QuantAnnotation | None = None


class NetGraph:
    """Validated, topologically ordered layer graph with named output taps."""

    def __init__(self, layers: list[LayerSpec], outputs: tuple[str, ...]):
        self.layers = list(layers)
        self.outputs = tuple(outputs)
        self._index = {}
        for spec in self.layers:
            if spec.kind not in _ARITY:
                raise GraphError(f"unknown layer kind {spec.kind!r} at {spec.name!r}")
            if spec.name in self._index:
                raise GraphError(f"duplicate layer name {spec.name!r}")
            if len(spec.inputs) != _ARITY[spec.kind]:
                raise GraphError(
                    f"{spec.kind} layer {spec.name!r} takes {_ARITY[spec.kind]} inputs, "
                    f"got {len(spec.inputs)}"
                )
            for ref in spec.inputs:
                if ref not in self._index:
                    raise GraphError(
                        f"layer {spec.name!r} references {ref!r} which is not an earlier node"
                    )
            self._index[spec.name] = spec
        for tap in self.outputs:
            if tap not in self._index:
                raise GraphError(f"output tap {tap!r} is not a graph node")

    # -- structure -----------------------------------------------------

    def layer(self, name: str) -> LayerSpec:
        return self._index[name]

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.layers if s.kind == "input")

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {s.name: [] for s in self.layers}
        for s in self.layers:
            for ref in s.inputs:
                out[ref].append(s.name)
        return out

    def first_conv_name(self) -> str | None:
        for s in self.layers:
            if s.kind == "conv":
                return s.name
        return None

    def clone(self) -> "NetGraph":
        return NetGraph([replace(s) for s in self.layers], self.outputs)

    def spliced(self, prefix: str, input_map: dict[str, str]) -> list[LayerSpec]:
        """Copy of this graph's non-input layers with names prefixed and
        input-node references redirected to external node names."""
        missing = set(self.input_names) - set(input_map)
        if missing:
            raise GraphError(f"splice must map every input node, missing {sorted(missing)}")

        def rename(ref: str) -> str:
            return input_map[ref] if ref in input_map else f"{prefix}{ref}"

        out = []
        for s in self.layers:
            if s.kind == "input":
                continue
            out.append(
                replace(s, name=f"{prefix}{s.name}", inputs=tuple(rename(r) for r in s.inputs))
            )
        return out

    # -- parameters ----------------------------------------------------

    def param_arrays(self):
        """Yield (layer_name, field, ndarray) for every stored parameter."""
        for s in self.layers:
            if s.kind == "conv":
                p: ConvParams = s.params
                yield s.name, "weight", p.weight.data
                if p.bias is not None:
                    yield s.name, "bias", p.bias
            elif s.kind == "bn":
                b: BnParams = s.params
                for f in ("mu", "sigma_sq", "gamma", "beta"):
                    yield s.name, f, getattr(b, f)

    def param_count(self) -> int:
        return sum(a.size for _, _, a in self.param_arrays())

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, field, arr in self.param_arrays():
            h.update(name.encode())
            h.update(field.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()

    # -- shapes ----------------------------------------------------------

    def infer_shapes(self, feed_dims: dict[str, tuple]) -> dict[str, tuple]:
        dims: dict[str, tuple] = {}
        for s in self.layers:
            if s.kind == "input":
                if s.name not in feed_dims:
                    raise GraphError(f"no dims supplied for input node {s.name!r}")
                dims[s.name] = tuple(feed_dims[s.name])
                continue
            src = [dims[r] for r in s.inputs]
            if s.kind == "conv":
                p: ConvParams = s.params
                n, c, h, w = src[0]
                if c != p.in_channels:
                    raise ShapeError(f"{s.name}: {c} channels into conv expecting {p.in_channels}")
                ho, wo = ops.conv_output_hw(h, w, *p.weight.dims[2:], p.stride, p.padding)
                dims[s.name] = (n, p.out_channels, ho, wo)
            elif s.kind == "fused":
                fl = s.params
                n, c, h, w = src[0]
                co, ci, kh, kw = fl.q_weight.dims
                if c != ci:
                    raise ShapeError(f"{s.name}: {c} channels into fused conv expecting {ci}")
                ho, wo = ops.conv_output_hw(h, w, kh, kw, fl.stride, fl.padding)
                dims[s.name] = (n, co, ho, wo)
            elif s.kind == "bn":
                if src[0][1] != s.params.channels:
                    raise ShapeError(f"{s.name}: channel mismatch into bn")
                dims[s.name] = src[0]
            elif s.kind in ("relu", "quantize"):
                dims[s.name] = src[0]
            elif s.kind == "upsample2x":
                n, c, h, w = src[0]
                dims[s.name] = (n, c, 2 * h, 2 * w)
            else:  # add / sub
                if src[0] != src[1]:
                    raise ShapeError(f"{s.name}: operand dims {src[0]} vs {src[1]}")
                dims[s.name] = src[0]
        return dims

    # -- execution -------------------------------------------------------

    def run_all(self, feeds: dict[str, Tensor]) -> dict[str, object]:
        """Forward pass; returns the value at every node."""
        values: dict[str, object] = {}
        for s in self.layers:
            if s.kind == "input":
                if s.name not in feeds:
                    raise GraphError(f"missing feed for input node {s.name!r}")
                values[s.name] = feeds[s.name]
                continue
            src = [values[r] for r in s.inputs]
            values[s.name] = _eval_layer(s, src)
        return values

    def run(self, feeds: dict[str, Tensor]) -> dict[str, object]:
        values = self.run_all(feeds)
        return {tap: values[tap] for tap in self.outputs}


def _as_float(v, who: str) -> Tensor:
    if isinstance(v, QTensor):
        raise GraphError(f"{who} expected a float tensor but received quantized codes")
    return v


def _eval_layer(s: LayerSpec, src: list) -> object:
    if s.kind == "conv":
        x = _as_float(src[0], s.name)
        p: ConvParams = s.params
        if s.quant is None:
            return ops.conv2d(x, p)
        aq = quantize(x, s.quant.a_spec)
        wq = quantize(p.weight, s.quant.w_spec)
        return qconv(wq, aq, p.stride, p.padding).dequantize(p.bias)
    if s.kind == "bn":
        return ops.batchnorm(_as_float(src[0], s.name), s.params)
    if s.kind == "relu":
        return ops.relu(_as_float(src[0], s.name))
    if s.kind == "upsample2x":
        return ops.upsample2x(_as_float(src[0], s.name))
    if s.kind == "add":
        return ops.add(_as_float(src[0], s.name), _as_float(src[1], s.name))
    if s.kind == "sub":
        return ops.sub(_as_float(src[0], s.name), _as_float(src[1], s.name))
    if s.kind == "quantize":
        return quantize(_as_float(src[0], s.name), s.params)
    if s.kind == "fused":
        return s.params.apply(src[0])
    raise GraphError(f"cannot evaluate kind {s.kind!r}")


# -- differentiation ------------------------------------------------------

_TRAINABLE = {"conv": ("weight", "bias"), "bn": ("gamma", "beta")}


def forward_cached(g: NetGraph, feeds: dict[str, Tensor]):
    """Forward pass of a float graph keeping per-layer backward caches."""
    values: dict[str, Tensor] = {}
    caches: dict[str, object] = {}
    for s in g.layers:
        if s.kind == "input":
            if s.name not in feeds:
                raise GraphError(f"missing feed for input node {s.name!r}")
            values[s.name] = feeds[s.name]
            continue
        src = [values[r] for r in s.inputs]
        if s.kind == "conv":
            if s.quant is not None:
                raise GraphError(f"{s.name}: quantized conv is not differentiable here")
            values[s.name], caches[s.name] = ops.conv2d_fwd(src[0], s.params)
        elif s.kind == "bn":
            values[s.name], caches[s.name] = ops.batchnorm_fwd(src[0], s.params)
        elif s.kind == "relu":
            values[s.name], caches[s.name] = ops.relu_fwd(src[0])
        elif s.kind == "upsample2x":
            values[s.name] = ops.upsample2x(src[0])
        elif s.kind == "add":
            values[s.name] = ops.add(src[0], src[1])
        elif s.kind == "sub":
            values[s.name] = ops.sub(src[0], src[1])
        else:
            raise GraphError(f"{s.name}: kind {s.kind!r} is not differentiable")
    return values, caches


def backward_from(
    g: NetGraph,
    values: dict[str, Tensor],
    caches: dict[str, object],
    out_grads: dict[str, np.ndarray],
):
    """Reverse walk from cached forward state; returns (param_grads,
    input_grads) with param_grads[layer][field] ndarrays for conv
    weight/bias and bn gamma/beta."""
    grads: dict[str, np.ndarray] = {}
    for tap, gr in out_grads.items():
        if tap not in g._index:
            raise GraphError(f"gradient supplied for unknown node {tap!r}")
        arr = np.asarray(gr, dtype=np.float64)
        if arr.shape != values[tap].dims:
            raise ShapeError(f"gradient shape {arr.shape} != value shape {values[tap].dims}")
        grads[tap] = grads.get(tap, 0) + arr

    param_grads: dict[str, dict[str, np.ndarray]] = {}
    input_grads: dict[str, np.ndarray] = {}

    def accum(name: str, arr: np.ndarray):
        if name in grads:
            grads[name] = grads[name] + arr
        else:
            grads[name] = arr

    for s in reversed(g.layers):
        gy = grads.get(s.name)
        if gy is None:
            continue
        if s.kind == "input":
            input_grads[s.name] = gy
            continue
        gy_t = Tensor._wrap(gy)
        if s.kind == "conv":
            gx, gw, gb = ops.conv2d_bwd(gy_t, caches[s.name])
            pg = {"weight": gw}
            if gb is not None:
                pg["bias"] = gb
            param_grads[s.name] = pg
            accum(s.inputs[0], gx.data)
        elif s.kind == "bn":
            gx, ggamma, gbeta = ops.batchnorm_bwd(gy_t, caches[s.name])
            param_grads[s.name] = {"gamma": ggamma, "beta": gbeta}
            accum(s.inputs[0], gx.data)
        elif s.kind == "relu":
            accum(s.inputs[0], ops.relu_bwd(gy_t, caches[s.name]).data)
        elif s.kind == "upsample2x":
            accum(s.inputs[0], ops.upsample2x_bwd(gy_t).data)
        elif s.kind == "add":
            accum(s.inputs[0], gy)
            accum(s.inputs[1], gy)
        elif s.kind == "sub":
            accum(s.inputs[0], gy)
            accum(s.inputs[1], -gy)
    return param_grads, input_grads


def forward_backward(
    g: NetGraph,
    feeds: dict[str, Tensor],
    out_grads: dict[str, np.ndarray],
):
    """One-shot forward plus reverse-mode gradients for a float graph."""
    values, caches = forward_cached(g, feeds)
    param_grads, input_grads = backward_from(g, values, caches, out_grads)
    return values, param_grads, input_grads


# -- quantization tagging ---------------------------------------------------


def quantize_graph(
    g: NetGraph,
    mode: str,
    bits: int,
    calib_feeds: dict[str, Tensor],
) -> NetGraph:
    """Attach weight/activation quantizers to the convs a mode covers.

    Weight scales come from the weights themselves; activation scales are
    calibrated from one float forward pass on ``calib_feeds``. Activations
    produced by a relu are unsigned, everything else signed. The first
    conv of the graph is never annotated.
    """
    if mode not in MODE_REGIONS:
        raise GraphError(f"unknown quantization mode {mode!r} (expected I, II, or III)")
    regions = MODE_REGIONS[mode]
    values = g.run_all(calib_feeds)
    first_conv = g.first_conv_name()

    out = []
    for s in g.layers:
        if (
            s.kind == "conv"
            and s.region in regions
            and s.name != first_conv
        ):
            p: ConvParams = s.params
            w_spec = QuantSpec(bits, signed=True)
            w_spec = w_spec.with_scale(init_scale(p.weight.data, w_spec))
            producer = g.layer(s.inputs[0])
            a_signed = producer.kind != "relu"
            a_val = values[s.inputs[0]]
            a_spec = QuantSpec(bits, signed=a_signed)
            a_spec = a_spec.with_scale(init_scale(a_val.data, a_spec))
            out.append(replace(s, quant=QuantAnnotation(w_spec, a_spec)))
        else:
            out.append(replace(s, quant=None) if s.kind == "conv" else replace(s))
    return NetGraph(out, g.outputs)
