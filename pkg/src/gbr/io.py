"""Reading and writing rasters, point clouds, meshes, cameras and scene directories.

Scene directory layout::

    view_000/image.png          RGB image
    view_000/pointmap.raw       3-channel points in the view's own camera frame
    view_000/conf.raw           1-channel confidence
    view_000/sky.png            optional, nonzero = sky
    view_000/matchconf.raw      optional secondary match confidence (defaults to 1)
    view_000/pointmap_in_001.raw   optional, this view's points in view 1's frame
    view_000/conf_in_001.raw       confidence for the above
    pairs.txt                   one "i j" per line
    cameras.txt                 optional initial cameras

Raw rasters are little-endian: ``b"GBRR"``, u32 width, u32 height,
u32 channels, then float32 samples in row-major order.
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import LoadError
from .geometry import CameraIntrinsics, CameraPose, DepthMap, PointMapFrame

logger = logging.getLogger(__name__)

RAW_MAGIC = b"GBRR"
RAW_HEADER = struct.Struct("<4sIII")


def write_raw(path, array) -> None:
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError(f"raw rasters are HxW or HxWxC, got shape {a.shape}")
    h, w, c = a.shape
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(RAW_HEADER.pack(RAW_MAGIC, w, h, c))
            f.write(np.ascontiguousarray(a).tobytes())
    except OSError as exc:
        raise LoadError(f"cannot write {path}: {exc}") from exc


def read_raw(path) -> np.ndarray:
    """Read a raw raster; single-channel rasters come back as ``(H, W)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if len(data) < RAW_HEADER.size:
        raise LoadError(f"{path}: truncated header, file ends at byte offset {len(data)}")
    magic, w, h, c = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise LoadError(f"{path}: bad magic {magic!r} at byte offset 0")
    expected = RAW_HEADER.size + 4 * w * h * c
    if len(data) < expected:
        raise LoadError(
            f"{path}: truncated raster, data ends at byte offset {len(data)} but {expected} bytes expected"
        )
    a = np.frombuffer(data, dtype="<f4", count=w * h * c, offset=RAW_HEADER.size)
    a = a.reshape(h, w, c).astype(np.float64)
    return a[..., 0] if c == 1 else a


def write_image(path, rgb) -> None:
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(path)


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from exc


def write_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) > 0
    except OSError as exc:
        raise LoadError(f"cannot read mask {path}: {exc}") from exc


# --- PLY -------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class PlyData:
    vertices: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None  # uint8 (N, 3)
    faces: np.ndarray | None = None  # int (F, 3)


def write_ply(path, vertices, normals=None, colors=None, faces=None, binary: bool = True) -> None:
    """Write points (and optionally triangles). Positions are stored as doubles."""
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if normals is not None:
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(len(V), dtype=fields)
    rec["x"], rec["y"], rec["z"] = V.T
    if normals is not None:
        Nn = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        rec["nx"], rec["ny"], rec["nz"] = Nn.T
    if colors is not None:
        C = np.asarray(colors)
        if C.dtype.kind == "f":
            C = np.round(np.clip(C, 0, 1) * 255)
        C = C.astype(np.uint8).reshape(-1, 3)
        rec["red"], rec["green"], rec["blue"] = C.T
    F = None if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    ply_names = {"<f8": "double", "u1": "uchar"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(V)}"]
    header += [f"property {ply_names[t]} {n}" for n, t in fields]
    if F is not None:
        header += [f"element face {len(F)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                f.write(rec.tobytes())
                if F is not None:
                    frec = np.empty(len(F), dtype=[("n", "u1"), ("v", "<i4", (3,))])
                    frec["n"] = 3
                    frec["v"] = F
                    f.write(frec.tobytes())
            else:
                for r in rec:
                    f.write((" ".join(repr(float(x)) if isinstance(x, np.floating) else str(x) for x in r) + "\n").encode())
                if F is not None:
                    for tri in F:
                        f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n".encode())
    except OSError as exc:
        raise LoadError(f"cannot write {path}: {exc}") from exc


def read_ply(path) -> PlyData:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise LoadError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise LoadError(f"{path}: unsupported PLY format {fmt}")
    out: dict[str, dict[str, np.ndarray]] = {}
    if fmt == "ascii":
        tokens = data[body_start:].split()
        pos = 0
        for name, count, props in elements:
            cols: dict[str, list] = {p[0]: [] for p in props}
            for _ in range(count):
                for p in props:
                    if len(p) == 4:
                        n = int(tokens[pos]); pos += 1
                        cols[p[0]].append([int(t) for t in tokens[pos : pos + n]]); pos += n
                    else:
                        cols[p[0]].append(float(tokens[pos])); pos += 1
            out[name] = {k: np.asarray(v) for k, v in cols.items()}
    else:
        offset = body_start
        for name, count, props in elements:
            if any(len(p) == 4 for p in props):
                if len(props) != 1:
                    raise LoadError(f"{path}: mixed list/scalar element {name} unsupported")
                _, _, ct, it = props[0]
                ct_size, it_size = np.dtype(ct).itemsize, np.dtype(it).itemsize
                first = np.frombuffer(data, dtype="<" + ct, count=1, offset=offset)
                n = int(first[0]) if count else 3
                rec = np.frombuffer(data, dtype=[("n", "<" + ct), ("v", "<" + it, (n,))], count=count, offset=offset)
                if count and np.any(rec["n"] != n):
                    raise LoadError(f"{path}: only uniform face sizes are supported")
                out[name] = {props[0][0]: rec["v"].astype(np.int64)}
                offset += count * (ct_size + n * it_size)
            else:
                dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                need = offset + count * dt.itemsize
                if len(data) < need:
                    raise LoadError(f"{path}: truncated at byte offset {len(data)}, expected {need}")
                rec = np.frombuffer(data, dtype=dt, count=count, offset=offset)
                out[name] = {k: rec[k].copy() for k in dt.names}
                offset = need
    vert = out.get("vertex")
    if vert is None:
        raise LoadError(f"{path}: no vertex element")
    V = np.stack([vert["x"], vert["y"], vert["z"]], axis=-1).astype(np.float64)
    Nn = np.stack([vert["nx"], vert["ny"], vert["nz"]], axis=-1).astype(np.float64) if "nx" in vert else None
    C = np.stack([vert["red"], vert["green"], vert["blue"]], axis=-1).astype(np.uint8) if "red" in vert else None
    F = None
    if "face" in out:
        F = np.asarray(next(iter(out["face"].values())), dtype=np.int64).reshape(-1, 3)
    return PlyData(V, Nn, C, F)


# --- cameras ---------------------------------------------------------------


def write_cameras(path, cameras) -> None:
    """``cameras`` is a sequence of ``(CameraIntrinsics, CameraPose)``."""
    lines = ["# gbr cameras v1: per view 'view i', 'intrinsics fx fy cx cy width height', 3x4 [R|t] world->camera"]
    for i, (K, pose) in enumerate(cameras):
        lines.append(f"view {i}")
        lines.append("intrinsics " + " ".join(repr(float(x)) for x in (K.fx, K.fy, K.cx, K.cy)) + f" {K.width} {K.height}")
        M = pose.matrix[:3]
        for row in M:
            lines.append(" ".join(repr(float(x)) for x in row))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise LoadError(f"cannot write {path}: {exc}") from exc


def read_cameras(path) -> list[tuple[CameraIntrinsics, CameraPose]]:
    path = Path(path)
    try:
        lines = [ln.strip() for ln in path.read_text().splitlines()]
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    cams = []
    i = 0
    while i < len(lines):
        try:
            if not lines[i].startswith("view"):
                raise ValueError(f"expected 'view', got {lines[i]!r}")
            tok = lines[i + 1].split()
            if tok[0] != "intrinsics":
                raise ValueError("expected 'intrinsics'")
            fx, fy, cx, cy = map(float, tok[1:5])
            w, h = int(tok[5]), int(tok[6])
            M = np.array([[float(x) for x in lines[i + 2 + r].split()] for r in range(3)])
            if M.shape != (3, 4):
                raise ValueError("pose must be 3x4")
            if not np.all(np.isfinite(M)) or not np.all(np.isfinite([fx, fy, cx, cy])):
                raise ValueError("non-finite camera values")
            cams.append((CameraIntrinsics(fx, fy, cx, cy, w, h), CameraPose(M[:, :3], M[:, 3])))
        except (ValueError, IndexError) as exc:
            raise LoadError(f"{path}: malformed camera entry near line {i + 1}: {exc}") from exc
        i += 5
    return cams


# --- scene directories -----------------------------------------------------


@dataclass
class ViewData:
    image: np.ndarray
    pointmap: PointMapFrame
    sky: np.ndarray | None = None
    matchconf: np.ndarray | None = None
    cross: dict[int, PointMapFrame] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    @property
    def secondary_confidence(self) -> np.ndarray:
        return np.ones(self.shape) if self.matchconf is None else self.matchconf


@dataclass
class SceneBundle:
    views: list[ViewData]
    pairs: list[tuple[int, int]]
    cameras: list[tuple[CameraIntrinsics, CameraPose]] | None = None

    def __post_init__(self):
        n = len(self.views)
        for i, j in self.pairs:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise LoadError(f"pair ({i}, {j}) out of range for {n} views")


def complete_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def _check_shape(path, arr, shape):
    if arr.shape[:2] != shape:
        raise LoadError(f"{path}: dimension mismatch, raster is {arr.shape[:2]} but image is {shape}")


def load_scene(path) -> SceneBundle:
    root = Path(path)
    if not root.is_dir():
        raise LoadError(f"scene directory {root} does not exist")
    view_dirs = sorted(p for p in root.iterdir() if p.is_dir() and re.fullmatch(r"view_\d{3}", p.name))
    if not view_dirs:
        raise LoadError(f"{root}: no view_### directories")
    views = []
    for idx, vd in enumerate(view_dirs):
        if int(vd.name[5:]) != idx:
            raise LoadError(f"{vd}: view directories must be numbered consecutively from 000")
        for required in ("image.png", "pointmap.raw", "conf.raw"):
            if not (vd / required).exists():
                raise LoadError(f"missing file {vd / required}")
        image = read_image(vd / "image.png")
        shape = image.shape[:2]
        pts = read_raw(vd / "pointmap.raw")
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise LoadError(f"{vd / 'pointmap.raw'}: expected 3 channels")
        _check_shape(vd / "pointmap.raw", pts, shape)
        conf = read_raw(vd / "conf.raw")
        _check_shape(vd / "conf.raw", conf, shape)
        sky = None
        if (vd / "sky.png").exists():
            sky = read_mask(vd / "sky.png")
            _check_shape(vd / "sky.png", sky, shape)
        matchconf = None
        if (vd / "matchconf.raw").exists():
            matchconf = np.maximum(read_raw(vd / "matchconf.raw"), 0.0)
            _check_shape(vd / "matchconf.raw", matchconf, shape)
        cross = {}
        for cp in sorted(vd.glob("pointmap_in_*.raw")):
            k = int(re.fullmatch(r"pointmap_in_(\d{3})\.raw", cp.name).group(1))
            cpts = read_raw(cp)
            _check_shape(cp, cpts, shape)
            cconf_path = vd / f"conf_in_{k:03d}.raw"
            if not cconf_path.exists():
                raise LoadError(f"missing file {cconf_path}")
            cconf = read_raw(cconf_path)
            _check_shape(cconf_path, cconf, shape)
            cross[k] = PointMapFrame(cpts, cconf, idx, k)
        views.append(ViewData(image, PointMapFrame(pts, conf, idx, idx), sky, matchconf, cross))

    pairs_path = root / "pairs.txt"
    if not pairs_path.exists():
        raise LoadError(f"missing file {pairs_path}")
    pairs = []
    for ln, line in enumerate(pairs_path.read_text().splitlines(), 1):
        line = line.split("#")[0].strip()
        if not line:
            continue
        try:
            i, j = (int(t) for t in line.split())
        except ValueError as exc:
            raise LoadError(f"{pairs_path}:{ln}: expected 'i j'") from exc
        pairs.append((i, j))
    cameras = read_cameras(root / "cameras.txt") if (root / "cameras.txt").exists() else None
    if cameras is not None and len(cameras) != len(views):
        raise LoadError(f"{root / 'cameras.txt'}: {len(cameras)} cameras for {len(views)} views")
    try:
        return SceneBundle(views, pairs, cameras)
    except LoadError as exc:
        raise LoadError(f"{pairs_path}: {exc}") from exc


def save_scene(bundle: SceneBundle, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(bundle.views):
        vd = root / f"view_{i:03d}"
        vd.mkdir(exist_ok=True)
        write_image(vd / "image.png", view.image)
        write_raw(vd / "pointmap.raw", view.pointmap.points)
        write_raw(vd / "conf.raw", view.pointmap.confidence)
        if view.sky is not None:
            write_mask(vd / "sky.png", view.sky)
        if view.matchconf is not None:
            write_raw(vd / "matchconf.raw", view.matchconf)
        for k, frame in sorted(view.cross.items()):
            write_raw(vd / f"pointmap_in_{k:03d}.raw", frame.points)
            write_raw(vd / f"conf_in_{k:03d}.raw", frame.confidence)
    (root / "pairs.txt").write_text("".join(f"{i} {j}\n" for i, j in bundle.pairs))
    if bundle.cameras is not None:
        write_cameras(root / "cameras.txt", bundle.cameras)
    return root


def save_point_cloud(path, points, colors=None, normals=None) -> None:
    write_ply(path, points, normals=normals, colors=colors)


def load_point_cloud(path) -> np.ndarray:
    return read_ply(path).vertices


def save_mesh(path, vertices, faces, normals=None) -> None:
    write_ply(path, vertices, normals=normals, faces=faces)


def load_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    ply = read_ply(path)
    return ply.vertices, (np.zeros((0, 3), np.int64) if ply.faces is None else ply.faces)


def save_depth(path, depth) -> None:
    """Invalid pixels are stored as 0."""
    d = depth.depth if isinstance(depth, DepthMap) else np.asarray(depth)
    write_raw(path, d)


def load_depth(path) -> DepthMap:
    return DepthMap.from_array(read_raw(path))


save_cameras = write_cameras
load_cameras = read_cameras
