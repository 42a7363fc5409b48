"""Self-contained acceptance suite: eleven checks tying the engine to its
published reference numbers and to property-level contracts.

Every check returns a CriterionResult with a deterministic detail string,
so two runs with the same seed serialize to byte-identical reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import ops, pim, pipeline, pose
from .fusion import fuse, reference_unfused
from .graph import LayerSpec, NetGraph
from .pipeline import (
    MaskedScene,
    build_toy_model,
    distill_pseudo_path,
    erase_target,
    forward_counterfactual,
    forward_factual,
    forward_pseudo,
    stack_scenes,
    tde_approx,
    tde_ideal,
)
from .quant import QuantSpec, init_scale, lsq_backward
from .tensor import BnParams, ConvParams, Tensor


@dataclass(frozen=True)
class CriterionResult:
    index: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{self.index:2d}] {mark}  {self.name}: {self.detail}"


def _close(value: float, target: float, tol: float) -> bool:
    return abs(value - target) < tol


# -- 1: packed storage grid ---------------------------------------------------

TABLE_PARAM_COUNT = 51_292_500  # prints as 51.29 M; reproduces every table cell


def _table_graph() -> NetGraph:
    w = Tensor.zeros((6839, 7500, 1, 1))  # 6839 * 7500 = 51,292,500 weights
    return NetGraph(
        [
            LayerSpec("image", "input"),
            LayerSpec("proj", "conv", ("image",), params=ConvParams(w), region="backbone"),
        ],
        ("proj",),
    )


def criterion_1() -> CriterionResult:
    g = _table_graph()
    rows = []
    ok = g.param_count() == TABLE_PARAM_COUNT
    for bits, mb_target, save_target in ((32, 205.17, 0.0), (8, 51.29, 75.0), (3, 19.23, 90.63)):
        rep = pim.storage_footprint(g, bits)
        ok &= _close(rep.megabytes, mb_target, 0.005)
        if bits != 32:
            ok &= _close(rep.saving_pct, save_target, 0.005)
        rows.append(f"{bits}b={rep.megabytes:.4f}MB/{rep.saving_pct:.3f}%")
    return CriterionResult(1, "packed storage grid", ok, " ".join(rows))


# -- 2: accelerator latency calibration --------------------------------------


def criterion_2() -> CriterionResult:
    oc = pim.deployment_conv_opcount()
    cfg = pim.PimConfig()
    cycles, ideal_s = pim.latency(oc, cfg)
    cal = pim.calibrate(cfg, 5.99e-3, oc)
    _, cal_s = pim.latency(oc, cal)
    ok = (
        oc.int_macs == 1_207_959_552
        and cycles == 589_824
        and _close(ideal_s * 1e3, 5.898, 1e-3 + 0.0005)
        and abs(cal_s * 1e3 - 5.99) / 5.99 < 0.005
    )
    detail = (
        f"ideal={ideal_s * 1e3:.5f}ms cycles={cycles} "
        f"eff={cal.efficiency:.6f} calibrated={cal_s * 1e3:.5f}ms"
    )
    return CriterionResult(2, "accelerator latency calibration", ok, detail)


# -- 3: fused layer equivalence -----------------------------------------------


def _random_fusion_case(rng, bits: int):
    c_in = int(rng.integers(1, 5))
    c_out = int(rng.integers(1, 6))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    padding = int(rng.choice([0, 1])) if k == 3 else 0
    m = int(rng.integers(2, 5))
    h = stride * m + k - 2 * padding
    w = stride * int(rng.integers(2, 5)) + k - 2 * padding
    x = Tensor(rng.normal(0, 1.5, size=(1, c_in, h, w)))
    weight = Tensor(rng.normal(0, 0.8, size=(c_out, c_in, k, k)))
    bias = rng.normal(0, 0.3, size=c_out) if rng.random() < 0.5 else None
    conv = ConvParams(weight, bias, stride=stride, padding=padding)
    bn = BnParams(
        mu=rng.normal(0, 0.5, size=c_out),
        sigma_sq=rng.uniform(0.25, 2.0, size=c_out),
        gamma=rng.uniform(0.5, 1.5, size=c_out) * rng.choice([-1.0, 1.0], size=c_out),
        beta=rng.normal(0, 0.5, size=c_out),
    )
    w_spec = QuantSpec(bits, True)
    w_spec = w_spec.with_scale(init_scale(weight.data, w_spec))
    a_spec = QuantSpec(bits, True)
    a_spec = a_spec.with_scale(init_scale(x.data, a_spec))
    # next-layer activation spec calibrated from the float reference output
    y_ref, _ = reference_unfused(conv, w_spec, a_spec, bn, True, None, x)
    n_spec = QuantSpec(bits, False)
    n_spec = n_spec.with_scale(init_scale(y_ref.data, n_spec))
    return x, conv, bn, w_spec, a_spec, n_spec


def criterion_3(seed: int) -> CriterionResult:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    n_cases = 104
    worst_float = 0.0
    code_mismatches = 0
    for i in range(n_cases):
        bits = 3 if i % 2 else 8
        x, conv, bn, w_spec, a_spec, n_spec = _random_fusion_case(rng, bits)
        ref_q, ref_float = reference_unfused(conv, w_spec, a_spec, bn, True, n_spec, x)
        layer = fuse(conv, w_spec, a_spec, bn, True, n_spec)
        from .quant import quantize

        fused_q = layer.apply(quantize(x, a_spec))
        float_layer = replace(layer, next_act_spec=None)
        fused_float = float_layer.apply(quantize(x, a_spec))
        if not np.array_equal(fused_q.codes, ref_q.codes):
            code_mismatches += 1
        worst_float = max(worst_float, float(np.max(np.abs(fused_float.data - ref_float.data))))
    ok = code_mismatches == 0 and worst_float <= 1e-9
    detail = f"cases={n_cases} code_mismatches={code_mismatches} max_float_dev={worst_float:.3e}"
    return CriterionResult(3, "fused layer equivalence", ok, detail)


# -- 4: quantizer scale gradient ----------------------------------------------


def _surrogate_total(x, spec, upstream, scale):
    """Straight-through surrogate with the rounding residual frozen at the
    operating point; its exact scale derivative is the learned-step rule."""
    v0 = x / spec.scale
    r = np.round(v0) - v0  # residual frozen at the true scale
    below = v0 < spec.q_neg
    above = v0 > spec.q_pos
    val = np.where(below, scale * spec.q_neg, np.where(above, scale * spec.q_pos, x + scale * r))
    return float(np.sum(upstream * val))


def criterion_4(seed: int) -> CriterionResult:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 4)))
    n_cases = 52
    worst = 0.0
    mask_ok = True
    for i in range(n_cases):
        bits = int(rng.choice([3, 8]))
        signed = bool(rng.random() < 0.5)
        scale = float(np.exp(rng.uniform(np.log(0.05), np.log(2.0))))
        spec = QuantSpec(bits, signed, scale)
        shape = (2, 3, 4, 4)
        v = rng.uniform(spec.q_neg - 2.0, spec.q_pos + 2.0, size=shape)
        # keep every point at least 1e-3 from rounding and clip boundaries
        frac = v - np.floor(v)
        v = np.where(np.abs(frac - 0.5) < 2e-3, v + 5e-3, v)
        for edge in (spec.q_neg, spec.q_pos):
            v = np.where(np.abs(v - edge) < 2e-3, v + 5e-3, v)
        x = v * scale
        upstream = rng.normal(size=shape)

        grad_x, grad_scale = lsq_backward(x, spec, upstream)
        h = 1e-5 * scale
        fd = (
            _surrogate_total(x, spec, upstream, scale + h)
            - _surrogate_total(x, spec, upstream, scale - h)
        ) / (2 * h)
        fd *= 1.0 / np.sqrt(x.size * spec.q_pos)
        denom = max(abs(fd), 1e-9)
        worst = max(worst, abs(grad_scale - fd) / denom)

        in_range = (v >= spec.q_neg) & (v <= spec.q_pos)
        if not np.array_equal(grad_x, np.where(in_range, upstream, 0.0)):
            mask_ok = False
    ok = worst <= 1e-3 and mask_ok
    detail = f"cases={n_cases} max_rel_err={worst:.3e} clip_mask_exact={mask_ok}"
    return CriterionResult(4, "quantizer scale gradient", ok, detail)


# -- 5: operator gradients ------------------------------------------------------


def _fd(fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(arr, dtype=np.float64)
    flat = g.ravel()
    base = arr.copy()
    it = base.ravel()
    for i in range(it.size):
        orig = it[i]
        it[i] = orig + h
        fp = fn(base)
        it[i] = orig - h
        fm = fn(base)
        it[i] = orig
        flat[i] = (fp - fm) / (2 * h)
    return g


def _rel(analytic: np.ndarray, fd: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-10))


def criterion_5(seed: int) -> CriterionResult:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5)))
    n_seeds = 20
    worst: dict[str, float] = {}

    def note(op, err):
        worst[op] = max(worst.get(op, 0.0), err)

    for trial in range(n_seeds):
        stride = 2 if trial % 2 else 1
        padding = trial % 2
        x = rng.normal(size=(2, 3, 5 * stride + 3 - 2 * padding, 5 * stride + 3 - 2 * padding))
        wt = rng.normal(size=(4, 3, 3, 3)) * 0.5
        bias = rng.normal(size=4)
        conv = ConvParams(Tensor(wt), bias, stride=stride, padding=padding)
        y, cache = ops.conv2d_fwd(Tensor(x), conv)
        up = rng.normal(size=y.dims)
        gx, gw, gb = ops.conv2d_bwd(Tensor(up), cache)

        def conv_loss_x(a, c=conv):
            return float(np.sum(ops.conv2d(Tensor._wrap(a.copy()), c).data * up))

        def conv_loss_w(wa):
            c2 = ConvParams(Tensor._wrap(wa.copy()), bias, stride=stride, padding=padding)
            return float(np.sum(ops.conv2d(Tensor._wrap(x), c2).data * up))

        def conv_loss_b(ba):
            c2 = ConvParams(Tensor._wrap(wt), ba.copy(), stride=stride, padding=padding)
            return float(np.sum(ops.conv2d(Tensor._wrap(x), c2).data * up))

        note("conv_x", _rel(gx.data, _fd(conv_loss_x, x)))
        note("conv_w", _rel(gw, _fd(conv_loss_w, wt)))
        note("conv_b", _rel(gb, _fd(conv_loss_b, bias)))

        xb = rng.normal(size=(2, 3, 4, 4))
        bn = BnParams(
            mu=rng.normal(size=3),
            sigma_sq=rng.uniform(0.3, 2.0, size=3),
            gamma=rng.normal(size=3) + 1.5,
            beta=rng.normal(size=3),
        )
        yb, cb = ops.batchnorm_fwd(Tensor(xb), bn)
        upb = rng.normal(size=yb.dims)
        gxb, ggamma, gbeta = ops.batchnorm_bwd(Tensor(upb), cb)

        def bn_loss_x(a):
            return float(np.sum(ops.batchnorm(Tensor._wrap(a.copy()), bn).data * upb))

        def bn_loss_gamma(ga):
            b2 = BnParams(bn.mu, bn.sigma_sq, ga.copy(), bn.beta)
            return float(np.sum(ops.batchnorm(Tensor._wrap(xb), b2).data * upb))

        def bn_loss_beta(ba):
            b2 = BnParams(bn.mu, bn.sigma_sq, bn.gamma, ba.copy())
            return float(np.sum(ops.batchnorm(Tensor._wrap(xb), b2).data * upb))

        note("bn_x", _rel(gxb.data, _fd(bn_loss_x, xb)))
        note("bn_gamma", _rel(ggamma, _fd(bn_loss_gamma, np.asarray(bn.gamma))))
        note("bn_beta", _rel(gbeta, _fd(bn_loss_beta, np.asarray(bn.beta))))

        xr = rng.normal(size=(2, 3, 4, 4))
        xr = np.where(np.abs(xr) < 1e-3, xr + 0.01, xr)  # stay off the relu kink
        yr, cr = ops.relu_fwd(Tensor(xr))
        upr = rng.normal(size=yr.dims)
        gr = ops.relu_bwd(Tensor(upr), cr)

        def relu_loss(a):
            return float(np.sum(ops.relu(Tensor._wrap(a.copy())).data * upr))

        note("relu", _rel(gr.data, _fd(relu_loss, xr)))

        xu = rng.normal(size=(1, 2, 3, 3))
        upu = rng.normal(size=(1, 2, 6, 6))
        gu = ops.upsample2x_bwd(Tensor(upu))

        def up_loss(a):
            return float(np.sum(ops.upsample2x(Tensor._wrap(a.copy())).data * upu))

        note("upsample", _rel(gu.data, _fd(up_loss, xu)))

        a1 = rng.normal(size=(2, 2, 3, 3))
        a2 = rng.normal(size=(2, 2, 3, 3))
        upa = rng.normal(size=(2, 2, 3, 3))
        ga1, ga2 = ops.add_bwd(Tensor(upa))
        gs1, gs2 = ops.sub_bwd(Tensor(upa))

        def add_loss_1(v):
            return float(np.sum(ops.add(Tensor._wrap(v.copy()), Tensor._wrap(a2)).data * upa))

        def add_loss_2(v):
            return float(np.sum(ops.add(Tensor._wrap(a1), Tensor._wrap(v.copy())).data * upa))

        def sub_loss_1(v):
            return float(np.sum(ops.sub(Tensor._wrap(v.copy()), Tensor._wrap(a2)).data * upa))

        def sub_loss_2(v):
            return float(np.sum(ops.sub(Tensor._wrap(a1), Tensor._wrap(v.copy())).data * upa))

        note("add", max(_rel(ga1.data, _fd(add_loss_1, a1)), _rel(ga2.data, _fd(add_loss_2, a2))))
        note("sub", max(_rel(gs1.data, _fd(sub_loss_1, a1)), _rel(gs2.data, _fd(sub_loss_2, a2))))

    overall = max(worst.values())
    ok = overall <= 1e-5
    detail = f"seeds={n_seeds} ops={len(worst)} max_rel_err={overall:.3e}"
    return CriterionResult(5, "operator gradients", ok, detail)


# -- 6: counterfactual feature identities ---------------------------------------


def _demo_scenes(seed: int, count: int, image_size: int = 32):
    scenes = []
    bins = ("near", "medium", "far")
    for i in range(count):
        _, _, scene = pose.gen_scene(
            (seed, "scene", i), bins[i % 3], 0.0, image_size=image_size
        )
        scenes.append(scene)
    return scenes


def criterion_6(seed: int) -> CriterionResult:
    m = build_toy_model(seed + 6)
    scenes = _demo_scenes((seed << 4) + 6, 4)
    batch = stack_scenes(scenes)

    # (a) pseudo path cloned from counterfactual path + empty masks
    m_same = replace(m, fpn_pc=m.fpn_c.clone())
    empty = MaskedScene(batch.image, Tensor.zeros(batch.mask.dims))
    ff = forward_factual(m_same, empty.image)
    fc = forward_counterfactual(m_same, erase_target(empty))
    fpc = forward_pseudo(m_same, empty.image)
    ideal = tde_ideal(ff, fc)
    approx = tde_approx(ff, fpc)
    exact_equal = all(np.array_equal(a.data, b.data) for a, b in zip(ideal, approx))

    # (b) norm identity on the full model with real masks
    ff = forward_factual(m, batch.image)
    fc = forward_counterfactual(m, erase_target(batch))
    fpc = forward_pseudo(m, batch.image)
    ideal = tde_ideal(ff, fc)
    approx = tde_approx(ff, fpc)
    worst_rel = 0.0
    for ti, ta, c, p in zip(ideal, approx, fc, fpc):
        lhs = float(np.sum(np.abs(ti.data - ta.data)))
        rhs = float(np.sum(np.abs(c.data - p.data)))
        worst_rel = max(worst_rel, abs(lhs - rhs) / max(rhs, 1e-300))

    # (c) distillation leaves every frozen graph untouched
    h0 = m.frozen_hash()
    pc0 = m.fpn_pc.param_hash()
    distill_pseudo_path(m, scenes, steps=3, lr=1e-3)
    frozen_ok = m.frozen_hash() == h0
    student_moved = m.fpn_pc.param_hash() != pc0

    ok = exact_equal and worst_rel <= 1e-12 and frozen_ok and student_moved
    detail = (
        f"clone_identity={exact_equal} norm_rel_dev={worst_rel:.3e} "
        f"frozen_hash_stable={frozen_ok} student_updated={student_moved}"
    )
    return CriterionResult(6, "counterfactual feature identities", ok, detail)


# -- 7: pseudo-path distillation -------------------------------------------------


def criterion_7(seed: int) -> CriterionResult:
    m = build_toy_model(seed + 7)
    train = _demo_scenes((seed << 4) + 70, 64)
    held = _demo_scenes((seed << 4) + 71, 16)
    trace = distill_pseudo_path(m, train, steps=200, lr=1e-3, momentum=0.9, held_out=held)
    ratio = trace.losses[-1] / trace.losses[0]
    improved = trace.heldout_l1_after < trace.heldout_l1_before
    ok = ratio <= 0.10 and improved
    detail = (
        f"loss0={trace.losses[0]:.6f} loss200={trace.losses[-1]:.6f} ratio={ratio:.4f} "
        f"heldout_l1 {trace.heldout_l1_before:.6f}->{trace.heldout_l1_after:.6f}"
    )
    return CriterionResult(7, "pseudo-path distillation", ok, detail)


# -- 8: pose round-trip -----------------------------------------------------------


def criterion_8(seed: int) -> CriterionResult:
    bins = ("near", "medium", "far")
    n = 1000
    max_rot = 0.0
    max_trans = 0.0
    hits = 0
    for i in range(n):
        kp, gt, _ = pose.gen_scene((seed, 8, i), bins[i % 3], 0.0, render=False)
        est = pose.solve_pnp(kp, pose.default_camera(64))
        e_rot = 2.0 * math.acos(min(1.0, abs(float(est.q @ gt.q))))
        e_tr = float(np.linalg.norm(est.t - gt.t))
        max_rot = max(max_rot, e_rot)
        max_trans = max(max_trans, e_tr)
        _, hit = pose.adi_01d(est, gt, pose.TOY_CUBOID)
        hits += hit
    ok = max_rot < 1e-6 and max_trans < 1e-8 and hits == n
    detail = f"scenes={n} max_rot={max_rot:.3e}rad max_t={max_trans:.3e}m adi_hits={hits}"
    return CriterionResult(8, "pose round-trip", ok, detail)


# -- 9: pose metric properties -----------------------------------------------------


METRIC_IMAGE = 128


def _hit_rate(seed_tag, depth_bin: str, noise: float, count: int) -> float:
    cam = pose.default_camera(METRIC_IMAGE)
    hits = 0
    for i in range(count):
        kp, gt, _ = pose.gen_scene(
            (seed_tag, depth_bin, i), depth_bin, noise,
            image_size=METRIC_IMAGE, cam=cam, render=False,
        )
        est = pose.solve_pnp(kp, cam)
        _, hit = pose.adi_01d(est, gt, pose.TOY_CUBOID)
        hits += hit
    return hits / count


def criterion_9(seed: int) -> CriterionResult:
    rng_tag = (seed << 4) + 9

    q = np.array([0.3, -0.5, 0.7, 0.4])
    t = np.array([0.2, -0.1, 5.0])
    p_a = pose.Pose(q, t)
    p_b = pose.Pose(-q, t)
    eq_zero = pose.speed_error(p_a, p_b)[0] == 0.0
    self_zero = pose.speed_error(p_a, p_a) == (0.0, 0.0, 0.0)

    flip = pose.Pose(np.array([0.0, 0.0, 0.0, 1.0]), t)  # 180 deg about z
    base = pose.Pose(np.array([1.0, 0.0, 0.0, 0.0]), t)
    adi_sym, _ = pose.adi_01d(flip, base, pose.TOY_CUBOID)
    sym_zero = adi_sym < 1e-12

    n = 500
    sweep = [_hit_rate(rng_tag, "near", s, n) for s in (0.0, 1.0, 2.0, 4.0, 8.0)]
    monotone = all(a >= b for a, b in zip(sweep, sweep[1:]))
    far_rate = _hit_rate(rng_tag, "far", 2.0, n)
    near_rate = sweep[2]
    ordered = far_rate < near_rate

    ok = eq_zero and self_zero and sym_zero and monotone and ordered
    detail = (
        f"eq_negation_zero={eq_zero} self_zero={self_zero} sym_adi={adi_sym:.2e} "
        f"near_sweep={'/'.join(f'{v:.3f}' for v in sweep)} far@2={far_rate:.3f}"
    )
    return CriterionResult(9, "pose metric properties", ok, detail)


# -- 10: integer workload share ordering ---------------------------------------------


def criterion_10(seed: int) -> CriterionResult:
    m = build_toy_model(seed + 10)
    g = pipeline.inference_graph(m)
    dims = {"image": (1, 1, 32, 32)}
    counts = {mode: pim.count_ops(g, dims, mode) for mode in ("I", "II", "III")}
    pcts = [counts[m_].percentage for m_ in ("I", "II", "III")]
    totals = {oc.int_ops + oc.float_flops for oc in counts.values()}
    dep = pim.deployment_conv_opcount().int_macs
    ok = pcts[0] < pcts[1] < pcts[2] and len(totals) == 1 and dep == 1_207_959_552
    detail = (
        f"pct={pcts[0]:.4f}<{pcts[1]:.4f}<{pcts[2]:.4f} total_ops={totals} "
        f"deployment_macs={dep}"
    )
    return CriterionResult(10, "integer workload share ordering", ok, detail)


# -- harness ---------------------------------------------------------------------


def run_core(seed: int = 0) -> list[CriterionResult]:
    """Criteria 1-10. Determinism (11) is checked by the caller comparing
    two serialized runs."""
    return [
        criterion_1(),
        criterion_2(),
        criterion_3(seed),
        criterion_4(seed),
        criterion_5(seed),
        criterion_6(seed),
        criterion_7(seed),
        criterion_8(seed),
        criterion_9(seed),
        criterion_10(seed),
    ]


def report_text(results: list[CriterionResult]) -> str:
    lines = [r.line() for r in results]
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} criteria passed")
    return "\n".join(lines) + "\n"


def run_with_determinism(seed: int = 0) -> tuple[list[CriterionResult], str]:
    """Run the core twice; criterion 11 passes when the serialized reports
    are byte-identical."""
    first = run_core(seed)
    second = run_core(seed)
    identical = report_text(first) == report_text(second)
    results = list(first)
    results.append(
        CriterionResult(
            11,
            "report determinism",
            identical,
            f"two_runs_identical={identical} seed={seed}",
        )
    )
    return results, report_text(results)
