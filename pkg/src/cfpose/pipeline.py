"""Counterfactual feature pipeline.

One frozen backbone feeds three structurally identical feature pyramids:
a factual path over the full image, a counterfactual path over the image
with the target erased (ground-truth mask), and a pseudo-counterfactual
path that learns to imitate the counterfactual one from the full image
alone. Subtracting side-effect features from total-effect features yields
background-purged target features; at inference only the factual and
pseudo-counterfactual paths remain, so no mask is needed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .errors import GraphError, NumericError, ShapeError, StateError
from .graph import LayerSpec, NetGraph, backward_from, forward_cached
from .tensor import BnParams, ConvParams, Tensor

FeatureSet = list


@dataclass(frozen=True)
class MaskedScene:
    """Image plus a binary target mask (1 = target pixel)."""

    image: Tensor
    mask: Tensor

    def __post_init__(self):
        n, c, h, w = self.image.dims
        if self.mask.dims != (n, 1, h, w):
            raise ShapeError(
                f"mask dims {self.mask.dims} do not match image dims {self.image.dims}"
            )
        m = self.mask.data
        if not np.all((m == 0) | (m == 1)):
            raise NumericError("mask must be binary (0/1 per pixel)")


def erase_target(scene: MaskedScene, fill: float = 0.0) -> Tensor:
    """Replace masked pixels with the fill value: I_m = I(1-m) + fill*m."""
    m = scene.mask.data
    return Tensor._wrap(scene.image.data * (1.0 - m) + float(fill) * m)


def stack_scenes(scenes: list[MaskedScene]) -> MaskedScene:
    """Concatenate single-scene batches along the batch axis."""
    if not scenes:
        raise ShapeError("cannot stack an empty scene list")
    img = np.concatenate([s.image.data for s in scenes], axis=0)
    msk = np.concatenate([s.mask.data for s in scenes], axis=0)
    return MaskedScene(Tensor._wrap(img), Tensor._wrap(msk))


@dataclass
class CaModel:
    """Shared frozen backbone, three identical FPNs, and a keypoint head."""

    backbone: NetGraph
    fpn_f: NetGraph
    fpn_pc: NetGraph
    fpn_c: NetGraph
    head: NetGraph
    n_levels: int
    frozen_backbone: bool = True

    def __post_init__(self):
        for other, label in ((self.fpn_pc, "fpn_pc"), (self.fpn_c, "fpn_c")):
            if not same_topology(self.fpn_f, other):
                raise GraphError(f"{label} topology differs from fpn_f")
        if len(self.backbone.outputs) != self.n_levels:
            raise GraphError("backbone tap count must equal the level count")

    def frozen_hash(self) -> str:
        """Joint parameter hash of everything distillation must not touch."""
        h = hashlib.sha256()
        for g in (self.backbone, self.fpn_f, self.fpn_c, self.head):
            h.update(g.param_hash().encode())
        return h.hexdigest()


def same_topology(a: NetGraph, b: NetGraph) -> bool:
    if len(a.layers) != len(b.layers) or a.outputs != b.outputs:
        return False
    for la, lb in zip(a.layers, b.layers):
        if (la.name, la.kind, la.inputs, la.region) != (lb.name, lb.kind, lb.inputs, lb.region):
            return False
        if la.kind == "conv":
            pa, pb = la.params, lb.params
            if pa.weight.dims != pb.weight.dims or (pa.bias is None) != (pb.bias is None):
                return False
            if (pa.stride, pa.padding) != (pb.stride, pb.padding):
                return False
        elif la.kind == "bn" and la.params.channels != lb.params.channels:
            return False
    return True


# -- toy architecture -------------------------------------------------------


def _he_conv(rng, c_in, c_out, k, stride, padding, bias=False) -> ConvParams:
    std = np.sqrt(2.0 / (c_in * k * k))
    w = Tensor._wrap(rng.normal(0.0, std, size=(c_out, c_in, k, k)))
    b = np.zeros(c_out) if bias else None
    return ConvParams(w, b, stride=stride, padding=padding)


def _identity_bn(channels: int) -> BnParams:
    return BnParams(
        mu=np.zeros(channels),
        sigma_sq=np.ones(channels),
        gamma=np.ones(channels),
        beta=np.zeros(channels),
    )


def _block(rng, prefix, src, c_in, c_out, k, stride, padding, region):
    """conv -> bn -> relu; returns (layers, relu name)."""
    layers = [
        LayerSpec(
            f"{prefix}/conv", "conv", (src,),
            params=_he_conv(rng, c_in, c_out, k, stride, padding), region=region,
        ),
        LayerSpec(f"{prefix}/bn", "bn", (f"{prefix}/conv",),
                  params=_identity_bn(c_out), region=region),
        LayerSpec(f"{prefix}/relu", "relu", (f"{prefix}/bn",), region=region),
    ]
    return layers, f"{prefix}/relu"


def build_backbone(rng, in_channels: int, widths=(8, 8, 16, 16, 32, 32)) -> NetGraph:
    """Six conv-bn-relu blocks, stride 2 at blocks 2/4/6, taps after each
    stride-2 block (three pyramid levels, fine to coarse)."""
    layers = [LayerSpec("image", "input")]
    src, c_in = "image", in_channels
    taps = []
    for i, c_out in enumerate(widths, start=1):
        stride = 2 if i % 2 == 0 else 1
        blk, src = _block(rng, f"b{i}", src, c_in, c_out, 3, stride, 1, "backbone")
        layers.extend(blk)
        c_in = c_out
        if i % 2 == 0:
            taps.append(src)
    return NetGraph(layers, tuple(taps))


def build_fpn(rng, in_widths=(8, 16, 32), channels: int = 16) -> NetGraph:
    """Lateral 1x1 convs, top-down nearest-2x additions, 3x3 smoothing."""
    n = len(in_widths)
    layers = [LayerSpec(f"c{i + 1}", "input") for i in range(n)]
    lat = []
    for i, w in enumerate(in_widths, start=1):
        blk, out = _block(rng, f"lat{i}", f"c{i}", w, channels, 1, 1, 0, "fpn")
        layers.extend(blk)
        lat.append(out)
    merged = [None] * n
    merged[n - 1] = lat[n - 1]
    for i in range(n - 2, -1, -1):
        up = f"up{i + 1}"
        layers.append(LayerSpec(up, "upsample2x", (merged[i + 1],), region="fpn"))
        m = f"m{i + 1}"
        layers.append(LayerSpec(m, "add", (lat[i], up), region="fpn"))
        merged[i] = m
    outs = []
    for i in range(n):
        blk, out = _block(rng, f"smooth{i + 1}", merged[i], channels, channels, 3, 1, 1, "fpn")
        layers.extend(blk)
        outs.append(out)
    return NetGraph(layers, tuple(outs))


def build_head(rng, n_levels: int = 3, channels: int = 16, keypoints: int = 8) -> NetGraph:
    """Per level: 3x3 conv-bn-relu then a biased 1x1 conv to 3K channels
    (u-offset, v-offset, confidence logit per keypoint)."""
    layers = [LayerSpec(f"p{i + 1}", "input") for i in range(n_levels)]
    outs = []
    for i in range(1, n_levels + 1):
        blk, out = _block(rng, f"h{i}", f"p{i}", channels, channels, 3, 1, 1, "head")
        layers.extend(blk)
        kname = f"h{i}/k"
        layers.append(
            LayerSpec(
                kname, "conv", (out,),
                params=_he_conv(rng, channels, 3 * keypoints, 1, 1, 0, bias=True),
                region="head",
            )
        )
        outs.append(kname)
    return NetGraph(layers, tuple(outs))


def build_toy_model(seed: int, in_channels: int = 1, keypoints: int = 8) -> CaModel:
    """Deterministic toy counterfactual model; the three FPNs share
    topology but draw independent weights."""
    ss = np.random.SeedSequence(seed)
    r_back, r_f, r_pc, r_c, r_head = (np.random.default_rng(c) for c in ss.spawn(5))
    widths = (8, 8, 16, 16, 32, 32)
    taps = (widths[1], widths[3], widths[5])
    return CaModel(
        backbone=build_backbone(r_back, in_channels, widths),
        fpn_f=build_fpn(r_f, taps),
        fpn_pc=build_fpn(r_pc, taps),
        fpn_c=build_fpn(r_c, taps),
        head=build_head(r_head, 3, 16, keypoints),
        n_levels=3,
    )


# -- forward paths ----------------------------------------------------------


def backbone_features(m: CaModel, image: Tensor) -> dict[str, Tensor]:
    """Run the shared backbone; returns feeds keyed for the FPN inputs."""
    taps = m.backbone.run({"image": image})
    feeds = {}
    for i, tap in enumerate(m.backbone.outputs, start=1):
        feeds[f"c{i}"] = taps[tap]
    return feeds


def run_fpn(fpn: NetGraph, feeds: dict[str, Tensor]) -> FeatureSet:
    out = fpn.run(feeds)
    return [out[t] for t in fpn.outputs]


def forward_factual(m: CaModel, image: Tensor) -> FeatureSet:
    return run_fpn(m.fpn_f, backbone_features(m, image))


def forward_counterfactual(m: CaModel, erased: Tensor) -> FeatureSet:
    return run_fpn(m.fpn_c, backbone_features(m, erased))


def forward_pseudo(m: CaModel, image: Tensor) -> FeatureSet:
    return run_fpn(m.fpn_pc, backbone_features(m, image))


def _check_levels(a: FeatureSet, b: FeatureSet, op: str):
    if len(a) != len(b):
        raise ShapeError(f"{op}: level counts differ ({len(a)} vs {len(b)})")


def tde_ideal(ff: FeatureSet, fc: FeatureSet) -> FeatureSet:
    """Total direct effect: factual minus counterfactual, per level."""
    _check_levels(ff, fc, "tde_ideal")
    return [ops.sub(a, b) for a, b in zip(ff, fc)]


def tde_approx(ff: FeatureSet, fpc: FeatureSet) -> FeatureSet:
    """Deployable approximation: factual minus pseudo-counterfactual."""
    _check_levels(ff, fpc, "tde_approx")
    return [ops.sub(a, b) for a, b in zip(ff, fpc)]


def smoothed_l1(d: np.ndarray, beta: float = 1.0) -> np.ndarray:
    ad = np.abs(d)
    return np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)


def sim_loss(fpc: FeatureSet, fc: FeatureSet, beta: float = 1.0):
    """Similarity loss: smoothed L1, mean within a level, summed over
    levels. Returns (loss, per-level gradients w.r.t. fpc)."""
    _check_levels(fpc, fc, "sim_loss")
    loss = 0.0
    grads = []
    for a, b in zip(fpc, fc):
        if a.dims != b.dims:
            raise ShapeError(f"sim_loss: level dims {a.dims} vs {b.dims}")
        d = a.data - b.data
        loss += float(np.mean(smoothed_l1(d, beta)))
        g = np.where(np.abs(d) < beta, d / beta, np.sign(d)) / d.size
        grads.append(g)
    return loss, grads


def total_loss(l3d: float, lcls: float, lsim: float) -> float:
    """Combined training loss with weights 1, 1, and 0.25."""
    return 1.0 * l3d + 1.0 * lcls + 0.25 * lsim


# -- distillation -----------------------------------------------------------


@dataclass
class DistillTrace:
    losses: list[float]
    heldout_l1_before: float | None
    heldout_l1_after: float | None


def _trainable_fields(g: NetGraph):
    for s in g.layers:
        if s.kind == "conv":
            yield s, "weight"
            if s.params.bias is not None:
                yield s, "bias"
        elif s.kind == "bn":
            yield s, "gamma"
            yield s, "beta"


def _apply_update(spec: LayerSpec, field: str, delta: np.ndarray):
    p = spec.params
    if field == "weight":
        spec.params = replace(p, weight=Tensor._wrap(p.weight.data - delta))
    elif field == "bias":
        spec.params = replace(p, bias=p.bias - delta)
    else:  # bn gamma / beta
        spec.params = replace(p, **{field: getattr(p, field) - delta})


def _mean_l1_gap(m: CaModel, scenes: list[MaskedScene]) -> float:
    batch = stack_scenes(scenes)
    fc = forward_counterfactual(m, erase_target(batch))
    fpc = forward_pseudo(m, batch.image)
    return float(np.mean([np.mean(np.abs(a.data - b.data)) for a, b in zip(fc, fpc)]))


def distill_pseudo_path(
    m: CaModel,
    scenes: list[MaskedScene],
    steps: int,
    lr: float,
    momentum: float = 0.9,
    held_out: list[MaskedScene] | None = None,
) -> DistillTrace:
    """Train fpn_pc to imitate fpn_c by gradient descent on the similarity
    loss. The backbone, fpn_f, fpn_c, and head stay untouched; the trace
    records the loss after each step (entry 0 is the pre-training loss).
    """
    if not m.frozen_backbone:
        raise StateError("distillation requires a frozen backbone")
    batch = stack_scenes(scenes)
    feats_f = backbone_features(m, batch.image)
    teacher = run_fpn(m.fpn_c, backbone_features(m, erase_target(batch)))

    before = _mean_l1_gap(m, held_out) if held_out else None
    velocity: dict[tuple[str, str], np.ndarray] = {}

    def _fpn_loss_backward(fpn, feeds, target):
        out_names = fpn.outputs
        values, caches = forward_cached(fpn, feeds)
        student = [values[t] for t in out_names]
        loss, level_grads = sim_loss(student, target)
        param_grads, _ = backward_from(fpn, values, caches, dict(zip(out_names, level_grads)))
        return loss, param_grads

    losses = []
    loss, param_grads = _fpn_loss_backward(m.fpn_pc, feats_f, teacher)
    losses.append(loss)
    for step in range(steps):
        if not np.isfinite(loss):
            raise NumericError(f"similarity loss became non-finite at step {step}")
        for spec, field in _trainable_fields(m.fpn_pc):
            g = param_grads.get(spec.name, {}).get(field)
            if g is None:
                continue
            key = (spec.name, field)
            v = momentum * velocity.get(key, 0.0) + g
            velocity[key] = v
            _apply_update(spec, field, lr * v)
        loss, param_grads = _fpn_loss_backward(m.fpn_pc, feats_f, teacher)
        losses.append(loss)

    after = _mean_l1_gap(m, held_out) if held_out else None
    return DistillTrace(losses, before, after)


# -- inference-time graph ---------------------------------------------------


def inference_graph(m: CaModel) -> NetGraph:
    """Single-input deployment graph: head(F^f - F^pc) with the
    counterfactual path removed entirely; needs no mask."""
    layers = [LayerSpec("image", "input")]
    layers += m.backbone.spliced("backbone/", {"image": "image"})
    bb_taps = [f"backbone/{t}" for t in m.backbone.outputs]
    fpn_inputs = dict(zip(m.fpn_f.input_names, bb_taps))
    layers += m.fpn_f.spliced("fpn_f/", fpn_inputs)
    layers += m.fpn_pc.spliced("fpn_pc/", fpn_inputs)
    tde_names = []
    for i, (tf, tpc) in enumerate(zip(m.fpn_f.outputs, m.fpn_pc.outputs), start=1):
        name = f"tde/p{i}"
        layers.append(LayerSpec(name, "sub", (f"fpn_f/{tf}", f"fpn_pc/{tpc}")))
        tde_names.append(name)
    head_inputs = dict(zip(m.head.input_names, tde_names))
    layers += m.head.spliced("head/", head_inputs)
    return NetGraph(layers, tuple(f"head/{t}" for t in m.head.outputs))
