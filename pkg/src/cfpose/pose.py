"""Keypoint decoding, PnP pose recovery, pose metrics, and synthetic scenes.

Poses are unit quaternions (w, x, y, z) with w >= 0 plus a translation in
meters. The PnP solver initializes with a direct linear transform (six or
more non-coplanar points) or a three-point resection (four or five
points), then refines by damped Gauss-Newton on pixel reprojection
residuals. Scenes are flat-shaded cuboid rasters with exact masks and
depth-binned ground-truth poses for difficulty stratification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, MetricError, ShapeError, SolverError
from .tensor import Tensor

DEPTH_BINS = {"near": (2.0, 4.0), "medium": (4.0, 8.0), "far": (8.0, 16.0)}


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ShapeError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")


class Pose:
    """Rigid transform: unit quaternion (w >= 0, sign-canonical) + translation."""

    __slots__ = ("q", "t")

    def __init__(self, q, t):
        q = np.asarray(q, dtype=np.float64).reshape(4)
        t = np.asarray(t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not (np.isfinite(n) and n > 0 and np.all(np.isfinite(t))):
            raise SolverError("pose requires a nonzero finite quaternion and finite translation")
        q = q / n
        if q[0] < 0:
            q = -q
        q.flags.writeable = False
        t = t.copy()
        t.flags.writeable = False
        self.q = q
        self.t = t

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.t

    def __repr__(self) -> str:
        return f"Pose(q={np.round(self.q, 6)}, t={np.round(self.t, 6)})"


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    """Shepperd's method: numerically stable for every rotation."""
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 1e-300)) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


@dataclass(frozen=True)
class ModelCuboid:
    """Axis-aligned cuboid centered at the model origin."""

    half_extents: tuple[float, float, float]

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=np.float64)
        if he.shape != (3,) or np.any(he <= 0):
            raise ShapeError(f"half extents must be three positive numbers, got {he}")
        object.__setattr__(self, "half_extents", tuple(float(v) for v in he))

    @property
    def corners(self) -> np.ndarray:
        hx, hy, hz = self.half_extents
        return np.array(
            [[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
        )

    @property
    def diameter(self) -> float:
        return 2.0 * float(np.linalg.norm(self.half_extents))

    def keypoints(self, k: int = 8) -> np.ndarray:
        """8 corners, or 11 = corners plus the +x/+y/+z face centers."""
        if k == 8:
            return self.corners
        if k == 11:
            hx, hy, hz = self.half_extents
            centers = np.array([[hx, 0, 0], [0, hy, 0], [0, 0, hz]])
            return np.vstack([self.corners, centers])
        raise ShapeError(f"supported keypoint counts are 8 and 11, got {k}")


# Unit-diameter toy satellite body used across the synthetic experiments.
TOY_CUBOID = ModelCuboid((0.40, 0.24, 0.18))


@dataclass(frozen=True)
class KeypointSet:
    points2d: np.ndarray
    points3d: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        p2 = np.ascontiguousarray(self.points2d, dtype=np.float64)
        p3 = np.ascontiguousarray(self.points3d, dtype=np.float64)
        cf = np.ascontiguousarray(self.confidence, dtype=np.float64)
        k = p3.shape[0]
        if p3.shape != (k, 3) or p2.shape != (k, 2) or cf.shape != (k,):
            raise ShapeError(
                f"inconsistent keypoint arrays: 2d {p2.shape}, 3d {p3.shape}, conf {cf.shape}"
            )
        if k < 4:
            raise ShapeError(f"pose solving needs at least 4 keypoints, got {k}")
        for a in (p2, p3, cf):
            a.flags.writeable = False
        object.__setattr__(self, "points2d", p2)
        object.__setattr__(self, "points3d", p3)
        object.__setattr__(self, "confidence", cf)

    @property
    def k(self) -> int:
        return self.points3d.shape[0]


def project(pose: Pose, cam: CameraIntrinsics, pts3d: np.ndarray) -> np.ndarray:
    """Pinhole projection; every point must land in front of the camera."""
    pc = pose.transform(np.asarray(pts3d, dtype=np.float64))
    z = pc[:, 2]
    if np.any(z <= 0):
        raise BehindCameraError(f"{int(np.sum(z <= 0))} point(s) at nonpositive depth")
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy
    return np.stack([u, v], axis=1)


# -- keypoint decoding ------------------------------------------------------


def decode_keypoints(head_out: list, points3d: np.ndarray, image_size: int) -> KeypointSet:
    """Decode per-cell keypoint regressions from head feature maps.

    Each level carries 3 channels per keypoint (u-offset, v-offset,
    confidence logit) on its own grid. For every keypoint the highest
    confidence cell across levels wins, ties going to the lowest
    (level, row, col); the cell center plus offset, scaled by the level
    stride, gives the pixel estimate.
    """
    k = np.asarray(points3d).shape[0]
    pts2d = np.zeros((k, 2))
    conf = np.zeros(k)
    for kp in range(k):
        best = None  # (logit, level, row, col, u_off, v_off)
        for lvl, feat in enumerate(head_out):
            n, c, h, w = feat.dims
            if n != 1:
                raise ShapeError("keypoint decoding expects a single-image batch")
            if c != 3 * k:
                raise ShapeError(f"head level {lvl} has {c} channels, expected {3 * k}")
            if image_size % h or image_size % w:
                raise ShapeError(f"level grid {h}x{w} does not tile image size {image_size}")
            logits = feat.data[0, 3 * kp + 2]
            idx = int(np.argmax(logits))
            row, col = divmod(idx, w)
            cand = float(logits[row, col])
            if best is None or cand > best[0]:
                stride = image_size // w
                u_off = float(feat.data[0, 3 * kp + 0, row, col])
                v_off = float(feat.data[0, 3 * kp + 1, row, col])
                best = (cand, lvl, row, col, u_off, v_off, stride)
        _, _, row, col, u_off, v_off, stride = best
        pts2d[kp, 0] = (col + 0.5 + u_off) * stride
        pts2d[kp, 1] = (row + 0.5 + v_off) * stride
        conf[kp] = 1.0 / (1.0 + np.exp(-best[0]))
    return KeypointSet(pts2d, np.asarray(points3d, dtype=np.float64), conf)


def keypoint_loss(pred2d: np.ndarray, gt2d: np.ndarray, beta: float = 1.0) -> float:
    """Surrogate detection loss: smoothed L1 over keypoint pixel offsets."""
    d = np.asarray(pred2d, dtype=np.float64) - np.asarray(gt2d, dtype=np.float64)
    ad = np.abs(d)
    return float(np.mean(np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)))


# -- PnP --------------------------------------------------------------------


@dataclass(frozen=True)
class PnpInfo:
    converged: bool
    iterations: int
    reproj_rms: float


def _normalized_rays(kp: KeypointSet, cam: CameraIntrinsics) -> np.ndarray:
    xn = (kp.points2d[:, 0] - cam.cx) / cam.fx
    yn = (kp.points2d[:, 1] - cam.cy) / cam.fy
    rays = np.stack([xn, yn, np.ones_like(xn)], axis=1)
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def _coplanar(pts3d: np.ndarray, tol: float = 1e-9) -> bool:
    c = pts3d - pts3d.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return s[-1] <= tol * max(s[0], 1.0)


def _collinear(pts3d: np.ndarray, tol: float = 1e-9) -> bool:
    c = pts3d - pts3d.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return s[1] <= tol * max(s[0], 1.0)


def _dlt(kp: KeypointSet, cam: CameraIntrinsics) -> Pose:
    """Direct linear transform on normalized image coordinates (K >= 6)."""
    xn = (kp.points2d[:, 0] - cam.cx) / cam.fx
    yn = (kp.points2d[:, 1] - cam.cy) / cam.fy
    x3 = kp.points3d
    k = kp.k
    a = np.zeros((2 * k, 12))
    hom = np.hstack([x3, np.ones((k, 1))])
    a[0::2, 0:4] = hom
    a[0::2, 8:12] = -xn[:, None] * hom
    a[1::2, 4:8] = hom
    a[1::2, 8:12] = -yn[:, None] * hom
    _, _, vt = np.linalg.svd(a)
    p = vt[-1].reshape(3, 4)
    scale = np.linalg.norm(p[2, :3])
    if scale == 0:
        raise SolverError("degenerate projection matrix in linear initialization")
    p = p / scale
    depths = hom @ p[2]
    if np.median(depths) < 0:
        p = -p
    m = p[:, :3]
    u, _, vt2 = np.linalg.svd(m)
    r = u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt2))]) @ vt2
    return Pose(rot_to_quat(r), p[:, 3])


def _kabsch(model: np.ndarray, camera: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mm, cm = model.mean(axis=0), camera.mean(axis=0)
    h = (model - mm).T @ (camera - cm)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cm - r @ mm


def _p3p_candidates(pts3d: np.ndarray, rays: np.ndarray) -> list:
    """Three-point resection (Grunert's depth formulation) via a quartic
    assembled with polynomial arithmetic; returns candidate (R, t) pairs."""
    p1, p2, p3 = pts3d
    f1, f2, f3 = rays
    a2 = float(np.sum((p2 - p3) ** 2))
    b2 = float(np.sum((p1 - p3) ** 2))
    c2 = float(np.sum((p1 - p2) ** 2))
    if min(a2, b2, c2) <= 0 or b2 == 0:
        return []
    ca = float(f2 @ f3)
    cb = float(f1 @ f3)
    cg = float(f1 @ f2)
    q1 = (a2 - c2) / b2

    from numpy.polynomial import polynomial as P

    # u = N(v)/D(v) from the difference of the two depth-ratio equations
    n_poly = np.array([1.0 + q1, -2.0 * q1 * cb, q1 - 1.0])
    d_poly = np.array([2.0 * cg, -2.0 * ca])
    w_poly = np.array([1.0, -2.0 * cb, 1.0])
    # substitute into u^2 - 2 cg u + (1 - (c2/b2) w(v)) = 0, cleared by D^2
    quartic = P.polyadd(
        P.polysub(P.polymul(n_poly, n_poly), 2.0 * cg * P.polymul(n_poly, d_poly)),
        P.polymul(P.polysub(np.array([1.0]), (c2 / b2) * w_poly), P.polymul(d_poly, d_poly)),
    )
    if np.max(np.abs(quartic)) == 0:
        return []
    roots = P.polyroots(quartic)
    cands = []
    for v in roots:
        if abs(v.imag) > 1e-8 or v.real <= 0:
            continue
        v = float(v.real)
        den = 2.0 * (cg - v * ca)
        if abs(den) > 1e-12:
            u = ((q1 - 1.0) * v * v - 2.0 * q1 * cb * v + 1.0 + q1) / den
            u_opts = [u]
        else:
            disc = cg * cg - (1.0 - (c2 / b2) * (1.0 - 2.0 * cb * v + v * v))
            if disc < 0:
                continue
            u_opts = [cg + np.sqrt(disc), cg - np.sqrt(disc)]
        for u in u_opts:
            if u <= 0:
                continue
            denom = 1.0 + v * v - 2.0 * v * cb
            if denom <= 0:
                continue
            s1 = np.sqrt(b2 / denom)
            cam_pts = np.stack([s1 * f1, (u * s1) * f2, (v * s1) * f3])
            r, t = _kabsch(pts3d, cam_pts)
            cands.append((r, t))
    return cands


def _reproj_residuals(q, t, kp: KeypointSet, cam: CameraIntrinsics):
    pose = Pose(q, t)
    uv = project(pose, cam, kp.points3d)
    return (uv - kp.points2d).ravel()


def _cost(q, t, kp, cam) -> float:
    try:
        r = _reproj_residuals(q, t, kp, cam)
    except BehindCameraError:
        return np.inf
    return float(r @ r)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def _jacobian(q, t, kp: KeypointSet, cam: CameraIntrinsics) -> np.ndarray:
    """Analytic Jacobian of pixel residuals w.r.t. (q, t), with the
    normalization constraint projected out of the quaternion block."""
    w, p = q[0], q[1:]
    x3 = kp.points3d
    r = quat_to_rot(q)
    pc = x3 @ r.T + t
    k = x3.shape[0]
    jac = np.zeros((2 * k, 7))
    proj_q = np.eye(4) - np.outer(q, q)
    for i in range(k):
        x = x3[i]
        X, Y, Z = pc[i]
        du = np.array([cam.fx / Z, 0.0, -cam.fx * X / (Z * Z)])
        dv = np.array([0.0, cam.fy / Z, -cam.fy * Y / (Z * Z)])
        # d(R(q)x)/dq for the quadratic-in-q rotation form
        jq = np.zeros((3, 4))
        jq[:, 0] = 2.0 * (w * x + np.cross(p, x))
        jq[:, 1:] = (
            -2.0 * np.outer(x, p)
            + 2.0 * np.outer(p, x)
            + 2.0 * float(p @ x) * np.eye(3)
            - 2.0 * w * _skew(x)
        )
        jq = jq @ proj_q
        jac[2 * i, :4] = du @ jq
        jac[2 * i, 4:] = du
        jac[2 * i + 1, :4] = dv @ jq
        jac[2 * i + 1, 4:] = dv
    return jac


def solve_pnp_detailed(
    kp: KeypointSet, cam: CameraIntrinsics, init: Pose | None = None
) -> tuple[Pose, PnpInfo]:
    """Pose from 2D-3D correspondences: linear/resection initialization
    plus damped Gauss-Newton refinement of pixel reprojection error."""
    if _collinear(kp.points3d):
        raise SolverError("keypoints are collinear; pose is unobservable")
    if init is not None:
        pose0 = init
    elif kp.k >= 6 and not _coplanar(kp.points3d):
        pose0 = _dlt(kp, cam)
    else:
        rays = _normalized_rays(kp, cam)
        best, best_cost = None, np.inf
        for r, t in _p3p_candidates(kp.points3d[:3], rays[:3]):
            try:
                cand = Pose(rot_to_quat(r), t)
            except SolverError:
                continue
            c = _cost(cand.q, cand.t, kp, cam)
            if c < best_cost:
                best, best_cost = cand, c
        if best is None:
            raise SolverError("three-point resection produced no feasible pose")
        pose0 = best

    q, t = pose0.q.copy(), pose0.t.copy()
    cost = _cost(q, t, kp, cam)
    if not np.isfinite(cost):
        raise SolverError("initial pose places keypoints behind the camera")

    lam = 1e-8
    accepted = 0
    converged = False
    for _ in range(50):
        r = _reproj_residuals(q, t, kp, cam)
        jac = _jacobian(q, t, kp, cam)
        jtj = jac.T @ jac
        rhs = -jac.T @ r
        while True:
            try:
                delta = np.linalg.solve(jtj + lam * np.eye(7), rhs)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(jtj + lam * np.eye(7), rhs, rcond=None)[0]
            if np.linalg.norm(delta) < 1e-10:
                converged = True
                break
            q_new = q + delta[:4]
            t_new = t + delta[4:]
            n = np.linalg.norm(q_new)
            if n == 0:
                new_cost = np.inf
            else:
                q_new = q_new / n
                if q_new[0] < 0:
                    q_new = -q_new
                new_cost = _cost(q_new, t_new, kp, cam)
            if new_cost <= cost:
                q, t, cost = q_new, t_new, new_cost
                accepted += 1
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
            if lam > 1e6:
                break
        if converged or lam > 1e6:
            break

    rms = np.sqrt(cost / (2 * kp.k)) if np.isfinite(cost) else np.inf
    return Pose(q, t), PnpInfo(converged, accepted, float(rms))


def solve_pnp(kp: KeypointSet, cam: CameraIntrinsics, init: Pose | None = None) -> Pose:
    return solve_pnp_detailed(kp, cam, init)[0]


# -- metrics ----------------------------------------------------------------


def adi_01d(
    pred: Pose, gt: Pose, model: ModelCuboid, samples: np.ndarray | None = None
) -> tuple[float, bool]:
    """Symmetric average closest-point distance and its 0.1-diameter hit."""
    pts = model.corners if samples is None else np.asarray(samples, dtype=np.float64)
    pp = pred.transform(pts)
    gp = gt.transform(pts)
    d = np.linalg.norm(pp[:, None, :] - gp[None, :, :], axis=2)
    adi = float(d.min(axis=1).mean())
    return adi, adi < 0.1 * model.diameter


def speed_error(pred: Pose, gt: Pose) -> tuple[float, float, float]:
    """Quaternion geodesic error, normalized translation error, and sum."""
    nt = np.linalg.norm(gt.t)
    if nt == 0:
        raise MetricError("ground-truth translation is zero; e_t is undefined")
    e_q = 2.0 * np.arccos(min(1.0, abs(float(pred.q @ gt.q))))
    e_t = float(np.linalg.norm(pred.t - gt.t)) / float(nt)
    return float(e_q), e_t, float(e_q) + e_t


# -- synthetic scenes -------------------------------------------------------


def default_camera(image_size: int) -> CameraIntrinsics:
    f = 1.2 * image_size
    return CameraIntrinsics(f, f, image_size / 2.0, image_size / 2.0)


_FACES = (
    ((4, 5, 7, 6), np.array([1.0, 0, 0])),
    ((0, 1, 3, 2), np.array([-1.0, 0, 0])),
    ((2, 3, 7, 6), np.array([0, 1.0, 0])),
    ((0, 1, 5, 4), np.array([0, -1.0, 0])),
    ((1, 3, 7, 5), np.array([0, 0, 1.0])),
    ((0, 2, 6, 4), np.array([0, 0, -1.0])),
)


def _fill_quad(img, mask, quad_uv, shade):
    """Rasterize a convex quad over pixel centers inside its bounding box."""
    size_h, size_w = img.shape
    lo = np.floor(quad_uv.min(axis=0) - 0.5).astype(int)
    hi = np.ceil(quad_uv.max(axis=0) + 0.5).astype(int)
    u0, v0 = max(lo[0], 0), max(lo[1], 0)
    u1, v1 = min(hi[0] + 1, size_w), min(hi[1] + 1, size_h)
    if u0 >= u1 or v0 >= v1:
        return
    uu, vv = np.meshgrid(np.arange(u0, u1) + 0.5, np.arange(v0, v1) + 0.5)
    signs = []
    for i in range(4):
        a = quad_uv[i]
        b = quad_uv[(i + 1) % 4]
        signs.append((b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0]))
    signs = np.stack(signs)
    inside = np.all(signs >= -1e-12, axis=0) | np.all(signs <= 1e-12, axis=0)
    img[v0:v1, u0:u1][inside] = shade
    mask[v0:v1, u0:u1][inside] = 1.0


def render_scene(pose: Pose, cam: CameraIntrinsics, cuboid: ModelCuboid,
                 image_size: int, bg_rng: np.random.Generator):
    """Smooth synthetic background plus a flat-shaded cuboid and its mask."""
    ax, ay = bg_rng.uniform(0.5, 2.0, size=2)
    phase = bg_rng.uniform(0, 2 * np.pi)
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    img = 0.25 + 0.15 * np.sin(2 * np.pi * (ax * xx + ay * yy) / image_size + phase)
    mask = np.zeros((image_size, image_size))

    r = pose.rotation
    corners_cam = cuboid.corners @ r.T + pose.t
    uv = np.zeros((8, 2))
    z = corners_cam[:, 2]
    uv[:, 0] = cam.fx * corners_cam[:, 0] / z + cam.cx
    uv[:, 1] = cam.fy * corners_cam[:, 1] / z + cam.cy
    for idxs, normal in _FACES:
        n_cam = r @ normal
        center = corners_cam[list(idxs)].mean(axis=0)
        if n_cam @ center >= 0:
            continue  # back face
        view = center / np.linalg.norm(center)
        shade = 0.55 + 0.45 * max(0.0, float(-(n_cam @ view)))
        _fill_quad(img, mask, uv[list(idxs)], shade)
    return img, mask


def gen_scene(
    seed: int,
    depth_bin: str,
    noise_px: float,
    image_size: int = 64,
    cam: CameraIntrinsics | None = None,
    keypoints: int = 8,
    cuboid: ModelCuboid = TOY_CUBOID,
    render: bool = True,
):
    """Deterministic synthetic scene: depth-binned pose, noisy projected
    keypoints, and (optionally) the rendered image with its exact mask.

    The noise draw is independent of noise_px (the magnitude only scales
    it), so sweeping noise levels at a fixed seed reuses one perturbation.
    """
    from .pipeline import MaskedScene

    if depth_bin not in DEPTH_BINS:
        raise ShapeError(f"unknown depth bin {depth_bin!r}; expected near, medium, or far")
    if cam is None:
        cam = default_camera(image_size)
    ss = np.random.SeedSequence(seed)
    pose_rng, noise_rng, bg_rng = (np.random.default_rng(c) for c in ss.spawn(3))

    lo, hi = DEPTH_BINS[depth_bin]
    z = pose_rng.uniform(lo, hi)
    q = pose_rng.normal(size=4)
    half_diag = cuboid.diameter / 2.0
    margin_px = image_size / 2.0 - cam.fx * half_diag / max(z - half_diag, 1e-6) - 2.0
    limit = max(margin_px, 0.0) * z / cam.fx
    x, y = pose_rng.uniform(-limit, limit, size=2)
    gt = Pose(q, np.array([x, y, z]))

    pts3d = cuboid.keypoints(keypoints)
    clean = project(gt, cam, pts3d)
    eps = noise_rng.standard_normal(clean.shape)
    kp = KeypointSet(clean + float(noise_px) * eps, pts3d, np.ones(len(pts3d)))

    scene = None
    if render:
        img, mask = render_scene(gt, cam, cuboid, image_size, bg_rng)
        scene = MaskedScene(
            Tensor._wrap(img[None, None]), Tensor._wrap(mask[None, None])
        )
    return kp, gt, scene
