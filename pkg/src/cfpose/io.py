"""File formats: tensors, packed quantized weights, checkpoints, scenes.

All binary formats are little-endian with a 4-byte magic:

* QPT1 — one float tensor: magic, four u32 extents, raw float64 payload.
* QPW1 — one quantized tensor: magic, four u32 extents, u8 bit width,
  u8 signed flag, f64 scale, then bit-packed two's-complement codes
  (LSB-first within each value, packed LSB-first into bytes).
* QPC1 — a checkpoint: magic, u32 length, UTF-8 JSON topology, then the
  parameter tensors as consecutive QPT1 blocks in graph order.

Scene files are plain text: a camera line, a ground-truth pose line, one
line per keypoint, and optional references to QPT1 image/mask files.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, GraphError, ShapeError
from .graph import LayerSpec, NetGraph, QuantAnnotation
from .pose import CameraIntrinsics, KeypointSet, Pose
from .quant import QTensor, QuantSpec
from .tensor import BnParams, ConvParams, Tensor

QPT_MAGIC = b"QPT1"
QPW_MAGIC = b"QPW1"
QPC_MAGIC = b"QPC1"


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ConfigError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


# -- QPT1 -------------------------------------------------------------------


def write_qpt_stream(f, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"tensor files store 4-D arrays, got ndim={arr.ndim}")
    f.write(QPT_MAGIC)
    f.write(struct.pack("<4I", *arr.shape))
    f.write(arr.astype("<f8").tobytes())


def read_qpt_stream(f) -> np.ndarray:
    if _read_exact(f, 4) != QPT_MAGIC:
        raise ConfigError("bad magic: not a QPT1 tensor block")
    dims = struct.unpack("<4I", _read_exact(f, 16))
    count = int(np.prod(dims))
    data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8")
    return data.reshape(dims).astype(np.float64)


def write_qpt(path, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    with open(path, "wb") as f:
        write_qpt_stream(f, arr)


def read_qpt(path) -> Tensor:
    with open(path, "rb") as f:
        return Tensor(read_qpt_stream(f))


# -- QPW1 -------------------------------------------------------------------


def packed_nbytes(count: int, bits: int) -> int:
    return math.ceil(count * bits / 8)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Bit-pack two's-complement codes, LSB-first."""
    flat = np.ascontiguousarray(codes, dtype=np.int64).ravel()
    u = (flat & ((1 << bits) - 1)).astype(np.uint64)
    bit_mat = ((u[:, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(bit_mat.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, count: int, bits: int, signed: bool) -> np.ndarray:
    bits_arr = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits_arr.size < count * bits:
        raise ConfigError("packed payload shorter than declared code count")
    bit_mat = bits_arr[: count * bits].reshape(count, bits).astype(np.int64)
    u = (bit_mat << np.arange(bits, dtype=np.int64)).sum(axis=1)
    if signed:
        u = np.where(u >= (1 << (bits - 1)), u - (1 << bits), u)
    return u


def write_qpw_stream(f, q: QTensor):
    f.write(QPW_MAGIC)
    f.write(struct.pack("<4I", *q.dims))
    f.write(struct.pack("<BB", q.spec.bit_width, int(q.spec.signed)))
    f.write(struct.pack("<d", q.spec.scale))
    f.write(pack_codes(q.codes, q.spec.bit_width))


def read_qpw_stream(f) -> QTensor:
    if _read_exact(f, 4) != QPW_MAGIC:
        raise ConfigError("bad magic: not a QPW1 weight block")
    dims = struct.unpack("<4I", _read_exact(f, 16))
    bits, signed = struct.unpack("<BB", _read_exact(f, 2))
    (scale,) = struct.unpack("<d", _read_exact(f, 8))
    count = int(np.prod(dims))
    payload = _read_exact(f, packed_nbytes(count, bits))
    codes = unpack_codes(payload, count, bits, bool(signed)).reshape(dims)
    return QTensor(codes, QuantSpec(bits, bool(signed), scale))


def write_qpw(path, q: QTensor) -> None:
    with open(path, "wb") as f:
        write_qpw_stream(f, q)


def read_qpw(path) -> QTensor:
    with open(path, "rb") as f:
        return read_qpw_stream(f)


# -- QPC1 checkpoints -------------------------------------------------------


def _spec_to_json(spec: QuantSpec) -> dict:
    return {"bits": spec.bit_width, "signed": spec.signed, "scale": spec.scale}


def _spec_from_json(d: dict) -> QuantSpec:
    return QuantSpec(int(d["bits"]), bool(d["signed"]), float(d["scale"]))


def graph_topology(g: NetGraph) -> dict:
    layers = []
    for s in g.layers:
        entry = {"name": s.name, "kind": s.kind, "inputs": list(s.inputs), "region": s.region}
        if s.kind == "conv":
            p: ConvParams = s.params
            entry["stride"] = p.stride
            entry["padding"] = p.padding
            entry["weight_dims"] = list(p.weight.dims)
            entry["has_bias"] = p.bias is not None
            if s.quant is not None:
                entry["quant"] = {
                    "w": _spec_to_json(s.quant.w_spec),
                    "a": _spec_to_json(s.quant.a_spec),
                }
        elif s.kind == "bn":
            entry["channels"] = s.params.channels
            entry["epsilon"] = s.params.epsilon
        elif s.kind == "quantize":
            entry["spec"] = _spec_to_json(s.params)
        elif s.kind == "fused":
            raise GraphError("fused graphs are runtime artifacts and are not checkpointed")
        layers.append(entry)
    return {"outputs": list(g.outputs), "layers": layers}


def _write_graph_params(f, g: NetGraph):
    for _, _, arr in g.param_arrays():
        block = arr if arr.ndim == 4 else arr.reshape(arr.size, 1, 1, 1)
        write_qpt_stream(f, block)


def _read_graph_from_topology(topo: dict, f) -> NetGraph:
    layers = []
    for e in topo["layers"]:
        kind = e["kind"]
        params = None
        quant = None
        if kind == "conv":
            w = read_qpt_stream(f)
            bias = read_qpt_stream(f).ravel() if e["has_bias"] else None
            params = ConvParams(
                Tensor._wrap(w), bias, stride=int(e["stride"]), padding=int(e["padding"])
            )
            if "quant" in e:
                quant = QuantAnnotation(
                    _spec_from_json(e["quant"]["w"]), _spec_from_json(e["quant"]["a"])
                )
        elif kind == "bn":
            mu = read_qpt_stream(f).ravel()
            sigma_sq = read_qpt_stream(f).ravel()
            gamma = read_qpt_stream(f).ravel()
            beta = read_qpt_stream(f).ravel()
            params = BnParams(mu, sigma_sq, gamma, beta, epsilon=float(e["epsilon"]))
        elif kind == "quantize":
            params = _spec_from_json(e["spec"])
        layers.append(
            LayerSpec(e["name"], kind, tuple(e["inputs"]), params=params,
                      region=e.get("region", ""), quant=quant)
        )
    return NetGraph(layers, tuple(topo["outputs"]))


def save_graph(path, g: NetGraph) -> None:
    blob = json.dumps(graph_topology(g), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(QPC_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        _write_graph_params(f, g)


def load_graph(path) -> NetGraph:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != QPC_MAGIC:
            raise ConfigError("bad magic: not a QPC1 checkpoint")
        (length,) = struct.unpack("<I", _read_exact(f, 4))
        topo = json.loads(_read_exact(f, length).decode())
        return _read_graph_from_topology(topo, f)


def save_model(path, model) -> None:
    """One checkpoint holding all five graphs of a counterfactual model."""
    names = ("backbone", "fpn_f", "fpn_pc", "fpn_c", "head")
    topo = {
        "model": {"n_levels": model.n_levels},
        "graphs": {n: graph_topology(getattr(model, n)) for n in names},
        "order": list(names),
    }
    blob = json.dumps(topo, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(QPC_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            _write_graph_params(f, getattr(model, n))


def load_model(path):
    from .pipeline import CaModel

    with open(path, "rb") as f:
        if _read_exact(f, 4) != QPC_MAGIC:
            raise ConfigError("bad magic: not a QPC1 checkpoint")
        (length,) = struct.unpack("<I", _read_exact(f, 4))
        topo = json.loads(_read_exact(f, length).decode())
        if "graphs" not in topo:
            raise ConfigError("checkpoint holds a single graph, not a model")
        graphs = {}
        for n in topo["order"]:
            graphs[n] = _read_graph_from_topology(topo["graphs"][n], f)
    return CaModel(
        backbone=graphs["backbone"],
        fpn_f=graphs["fpn_f"],
        fpn_pc=graphs["fpn_pc"],
        fpn_c=graphs["fpn_c"],
        head=graphs["head"],
        n_levels=int(topo["model"]["n_levels"]),
    )


# -- scene files --------------------------------------------------------------


def write_scene(directory, name: str, kp: KeypointSet, gt: Pose,
                cam: CameraIntrinsics, scene=None) -> Path:
    """Write one scene: text record plus optional QPT1 image/mask files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        "camera %.17g %.17g %.17g %.17g" % (cam.fx, cam.fy, cam.cx, cam.cy),
        "pose " + " ".join("%.17g" % v for v in (*gt.q, *gt.t)),
    ]
    for i in range(kp.k):
        lines.append(
            "pt "
            + " ".join(
                "%.17g" % v
                for v in (*kp.points3d[i], *kp.points2d[i], kp.confidence[i])
            )
        )
    if scene is not None:
        write_qpt(directory / f"{name}_image.qpt", scene.image)
        write_qpt(directory / f"{name}_mask.qpt", scene.mask)
        lines.append(f"image {name}_image.qpt")
        lines.append(f"mask {name}_mask.qpt")
    out = directory / f"{name}.txt"
    out.write_text("\n".join(lines) + "\n")
    return out


def read_scene(path):
    """Returns (KeypointSet, Pose, CameraIntrinsics, MaskedScene or None)."""
    from .pipeline import MaskedScene

    path = Path(path)
    cam = gt = None
    pts = []
    image = mask = None
    for line in path.read_text().splitlines():
        fields = line.split()
        if not fields:
            continue
        tag, rest = fields[0], fields[1:]
        if tag == "camera":
            cam = CameraIntrinsics(*(float(v) for v in rest))
        elif tag == "pose":
            vals = [float(v) for v in rest]
            gt = Pose(vals[:4], vals[4:])
        elif tag == "pt":
            pts.append([float(v) for v in rest])
        elif tag == "image":
            image = read_qpt(path.parent / rest[0])
        elif tag == "mask":
            mask = read_qpt(path.parent / rest[0])
        else:
            raise ConfigError(f"unknown scene record {tag!r} in {path}")
    if cam is None or gt is None or not pts:
        raise ConfigError(f"scene file {path} is missing camera, pose, or points")
    arr = np.asarray(pts)
    kp = KeypointSet(arr[:, 3:5], arr[:, 0:3], arr[:, 5])
    scene = None
    if image is not None and mask is not None:
        scene = MaskedScene(image, mask)
    return kp, gt, cam, scene
