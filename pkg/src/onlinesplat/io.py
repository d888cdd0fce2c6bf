"""Map persistence, image/report output and TUM RGB-D sequence loading."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from onlinesplat.core import KEYFRAME, CameraFrame, GaussianMap, Intrinsics, Pose

log = logging.getLogger(__name__)

PLY_FORMAT_VERSION = 1

# (name, numpy dtype) in file order
PLY_PROPERTIES = (
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    + [("rot_w", "<f4"), ("rot_x", "<f4"), ("rot_y", "<f4"), ("rot_z", "<f4")]
    + [("scale_0", "<f4"), ("scale_1", "<f4"), ("scale_2", "<f4")]
    + [("opacity", "<f4")]
    + [("red", "<f4"), ("green", "<f4"), ("blue", "<f4")]
    + [("beta", "<f4"), ("source_kf", "<i4")]
)
_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_TYPE_NAMES = {"<f4": "float", "<i4": "int"}


class PlyError(ValueError):
    """Base class for PLY read failures."""


class PlyHeaderError(PlyError):
    pass


class PlyMissingPropertyError(PlyError):
    pass


class PlyTruncatedError(PlyError):
    pass


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def save_ply(gmap: GaussianMap, path) -> None:
    """Binary little-endian PLY plus a JSON sidecar with the keyframe anchors."""
    path = Path(path)
    n = len(gmap)
    rec = np.empty(n, dtype=np.dtype(PLY_PROPERTIES))
    for i, axis in enumerate("xyz"):
        rec[axis] = gmap.means[:, i]
    for i, c in enumerate("wxyz"):
        rec[f"rot_{c}"] = gmap.quats[:, i]
    for i in range(3):
        rec[f"scale_{i}"] = gmap.log_scales[:, i]
    rec["opacity"] = gmap.opacity_logits
    for i, c in enumerate(("red", "green", "blue")):
        rec[c] = gmap.colors[:, i]
    rec["beta"] = gmap.log_betas
    rec["source_kf"] = gmap.source_kf
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_TYPE_NAMES[t]} {name}" for name, t in PLY_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
    meta = {
        "format_version": PLY_FORMAT_VERSION,
        "storage": {"scale": "log", "opacity": "logit", "beta": "log", "rotation": "wxyz"},
        "anchors": {str(k): p.to_dict() for k, p in sorted(gmap.keyframe_anchors.items())},
    }
    save_report(meta, _meta_path(path))


def _read_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyHeaderError("file does not start with 'ply'")
    fmt = None
    count = None
    props = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise PlyHeaderError("header ended before end_header")
        try:
            words = line.decode("ascii").split()
        except UnicodeDecodeError as exc:
            raise PlyHeaderError("non-ascii bytes in header") from exc
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "end_header":
            break
        if words[0] == "format":
            if len(words) != 3:
                raise PlyHeaderError(f"bad format line: {line!r}")
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3:
                raise PlyHeaderError(f"bad element line: {line!r}")
            in_vertex = words[1] == "vertex"
            if in_vertex:
                try:
                    count = int(words[2])
                except ValueError as exc:
                    raise PlyHeaderError(f"bad vertex count: {words[2]!r}") from exc
                if count < 0:
                    raise PlyHeaderError("negative vertex count")
            elif count is not None:
                raise PlyHeaderError("elements after 'vertex' are not supported")
        elif words[0] == "property":
            if words[1] == "list":
                raise PlyHeaderError("list properties are not supported")
            if len(words) != 3 or words[1] not in _PLY_TYPES:
                raise PlyHeaderError(f"bad property line: {line!r}")
            if in_vertex:
                props.append((words[2], _PLY_TYPES[words[1]]))
        else:
            raise PlyHeaderError(f"unknown header keyword {words[0]!r}")
    if fmt != "binary_little_endian":
        raise PlyHeaderError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise PlyHeaderError("no vertex element")
    return count, props


def load_ply(path) -> GaussianMap:
    path = Path(path)
    with open(path, "rb") as fh:
        count, props = _read_header(fh)
        names = {p for p, _ in props}
        missing = [p for p, _ in PLY_PROPERTIES if p not in names]
        if missing:
            raise PlyMissingPropertyError(f"missing vertex properties: {missing}")
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        payload = fh.read()
    need = count * dtype.itemsize
    if len(payload) < need:
        raise PlyTruncatedError(f"payload has {len(payload)} bytes, expected {need}")
    rec = np.frombuffer(payload[:need], dtype=dtype, count=count)

    def col(*keys):
        return np.stack([rec[k].astype(np.float64) for k in keys], axis=1) if count else np.zeros((0, len(keys)))

    gmap = GaussianMap()
    meta_file = _meta_path(path)
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        gmap.keyframe_anchors = {int(k): Pose.from_dict(v) for k, v in meta.get("anchors", {}).items()}
    for kf in np.unique(rec["source_kf"]) if count else []:
        gmap.keyframe_anchors.setdefault(int(kf), Pose.identity())
    gmap.means = col("x", "y", "z")
    q = col("rot_w", "rot_x", "rot_y", "rot_z")
    # float32 storage breaks exact unit norm
    gmap.quats = q / np.linalg.norm(q, axis=1, keepdims=True) if count else q
    gmap.log_scales = col("scale_0", "scale_1", "scale_2")
    gmap.opacity_logits = rec["opacity"].astype(np.float64)
    gmap.colors = col("red", "green", "blue")
    gmap.log_betas = rec["beta"].astype(np.float64)
    gmap.source_kf = rec["source_kf"].astype(np.int64)
    gmap.grad_accum = np.zeros(count)
    gmap.grad_count = np.zeros(count, dtype=np.int64)
    gmap.validate()
    return gmap


# ---------------------------------------------------------------------------
# images and reports
# ---------------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    # np.rint rounds half to even
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    data = to_uint8(image)
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=2)
    Image.fromarray(data, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_report(report) -> str:
    return json.dumps(report, sort_keys=True, indent=2, default=_json_default)


def save_report(report, path) -> None:
    Path(path).write_text(dumps_report(report) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# TUM RGB-D
# ---------------------------------------------------------------------------

TUM_DEPTH_SCALE = 5000.0
TUM_MAX_DT = 0.02


class TumFormatError(ValueError):
    pass


class TumAssociationError(ValueError):
    pass


@dataclass
class TumSequence:
    root: Path
    rgb: list  # (timestamp, relative path)
    depth: list
    groundtruth: list  # (timestamp, Pose)
    intrinsics: Intrinsics
    depth_scale: float = TUM_DEPTH_SCALE
    # (rgb index, depth index, groundtruth index)
    associations: list = field(default_factory=list)
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.associations)

    def frame(self, i: int) -> CameraFrame:
        from PIL import Image

        ri, di, gi = self.associations[i]
        with Image.open(self.root / self.rgb[ri][1]) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        with Image.open(self.root / self.depth[di][1]) as im:
            depth = np.asarray(im, dtype=np.float64) / self.depth_scale
        intr = self.intrinsics
        if (intr.height, intr.width) != img.shape[:2]:
            raise TumFormatError(f"image {self.rgb[ri][1]} does not match the intrinsics size")
        return CameraFrame(i, self.groundtruth[gi][1], intr, img, depth, KEYFRAME, self.rgb[ri][0])

    def frames(self) -> list:
        return [self.frame(i) for i in range(len(self))]


# Freiburg 1 defaults, the most common TUM calibration
TUM_DEFAULT_INTRINSICS = dict(fx=517.3, fy=516.5, cx=318.6, cy=255.3, width=640, height=480)


def _read_list(path: Path, n_values: int):
    if not path.exists():
        raise FileNotFoundError(f"missing TUM file {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            words = s.split()
            if len(words) != n_values:
                raise TumFormatError(f"{path.name}:{lineno}: expected {n_values} fields, got {len(words)}")
            try:
                t = float(words[0])
                rest = words[1:] if n_values == 2 else [float(w) for w in words[1:]]
            except ValueError as exc:
                raise TumFormatError(f"{path.name}:{lineno}: {exc}") from exc
            if out and t <= out[-1][0]:
                raise TumFormatError(f"{path.name}:{lineno}: timestamps must increase")
            out.append((t, rest[0] if n_values == 2 else rest))
    return out


def _tum_pose(values) -> Pose:
    tx, ty, tz, qx, qy, qz, qw = values
    return Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))


def associate(a_times, b_times, max_dt: float) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp matching: pairs in order of increasing |dt|,
    each entry used at most once, only pairs with |dt| <= max_dt."""
    a = np.asarray(a_times, dtype=np.float64)
    b = np.asarray(b_times, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return []
    diff = np.abs(a[:, None] - b[None, :])
    ia, ib = np.nonzero(diff <= max_dt)
    order = np.lexsort((ib, ia, diff[ia, ib]))
    used_a, used_b = set(), set()
    pairs = []
    for k in order:
        i, j = int(ia[k]), int(ib[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def load_tum(
    directory,
    max_dt: float = TUM_MAX_DT,
    depth_scale: float = TUM_DEPTH_SCALE,
    intrinsics: Optional[Intrinsics] = None,
) -> TumSequence:
    """Read the rgb/depth/groundtruth listings and associate them by timestamp."""
    root = Path(directory)
    rgb = _read_list(root / "rgb.txt", 2)
    depth = _read_list(root / "depth.txt", 2)
    gt_raw = _read_list(root / "groundtruth.txt", 8)
    gt = [(t, _tum_pose(v)) for t, v in gt_raw]
    rd = associate([t for t, _ in rgb], [t for t, _ in depth], max_dt)
    rg = dict(associate([t for t, _ in rgb], [t for t, _ in gt], max_dt))
    triples = [(i, j, rg[i]) for i, j in rd if i in rg]
    if not triples:
        raise TumAssociationError(f"no rgb/depth/pose triples within {max_dt} s in {root}")
    dropped = len(rgb) - len(triples)
    if dropped:
        log.warning("dropped %d unmatched rgb entries", dropped)
    return TumSequence(
        root, rgb, depth, gt, intrinsics or Intrinsics(**TUM_DEFAULT_INTRINSICS), depth_scale, triples, dropped
    )


def write_tum(directory, frames, depth_scale: float = TUM_DEPTH_SCALE) -> None:
    """Write frames in TUM layout (PNG images, 16-bit depth, listings)."""
    from PIL import Image

    root = Path(directory)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines, depth_lines, gt_lines = ["# timestamp filename"], ["# timestamp filename"], ["# timestamp tx ty tz qx qy qz qw"]
    for k, f in enumerate(frames):
        t = f.timestamp if f.timestamp is not None else float(k)
        name = f"{t:.6f}.png"
        save_png(f.image, root / "rgb" / name)
        rgb_lines.append(f"{t:.6f} rgb/{name}")
        if f.depth is not None:
            d16 = np.clip(np.rint(f.depth * depth_scale), 0, 65535).astype(np.uint16)
            Image.fromarray(d16).save(root / "depth" / name)
            depth_lines.append(f"{t:.6f} depth/{name}")
        w, x, y, z = f.pose.rotation
        tx, ty, tz = f.pose.translation
        gt_lines.append(f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}")
    for name, lines in (("rgb.txt", rgb_lines), ("depth.txt", depth_lines), ("groundtruth.txt", gt_lines)):
        (root / name).write_text("\n".join(lines) + "\n")


def file_size(path) -> int:
    total = os.path.getsize(path)
    meta = _meta_path(path)
    return total + (os.path.getsize(meta) if meta.exists() else 0)


def ply_size(gmap: GaussianMap) -> int:
    """Byte size of the PLY file :func:`save_ply` would write (sidecar excluded)."""
    n = len(gmap)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_TYPE_NAMES[t]} {name}" for name, t in PLY_PROPERTIES]
    header.append("end_header")
    return len(("\n".join(header) + "\n").encode("ascii")) + n * np.dtype(PLY_PROPERTIES).itemsize
