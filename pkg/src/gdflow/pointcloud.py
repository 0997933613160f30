"""Point-cloud container, XYZ/PLY IO, synthetic shapes and noise."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class ParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class EmptyCloudError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    name: str | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got {pts.shape}")
        if pts.shape[0] < 1:
            raise EmptyCloudError("point cloud has no points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def diagonal(self) -> float:
        return bounding_box_diagonal(self.points)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError(f"unsupported noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def bounding_box_diagonal(points: np.ndarray) -> float:
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def normalize(points: np.ndarray) -> np.ndarray:
    """Center on the bounding box and scale to unit bounding-box diagonal."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    diag = np.linalg.norm(hi - lo)
    if diag == 0:
        raise ValueError("cannot normalize a degenerate cloud")
    return (points - (lo + hi) / 2) / diag


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def _infer_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower().lstrip(".")
    if ext not in ("xyz", "ply"):
        raise ValueError(f"cannot infer format from {path!r}; pass format='xyz' or 'ply'")
    return ext


def load(path, format: str | None = None) -> PointCloud:
    fmt = format or _infer_format(path)
    if fmt == "xyz":
        pts = _load_xyz(path)
    elif fmt == "ply":
        pts = _load_ply(path)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if len(pts) == 0:
        raise EmptyCloudError(f"{path}: no points")
    return PointCloud(np.asarray(pts, dtype=np.float64).reshape(-1, 3), name=os.path.basename(str(path)))


def _load_xyz(path):
    pts = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) < 3:
                raise ParseError(f"expected 3 coordinates, got {len(parts)}", lineno)
            try:
                xyz = [float(v) for v in parts[:3]]
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {body!r}", lineno) from None
            if not all(np.isfinite(xyz)):
                raise ParseError("non-finite coordinate", lineno)
            pts.append(xyz)
    return pts


def _load_ply(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    lineno = 0
    header = []
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ParseError("missing end_header", lineno + 1)
        lineno += 1
        try:
            text = raw[pos:end].decode("ascii").strip()
        except UnicodeDecodeError:
            raise ParseError("non-ascii header", lineno) from None
        pos = end + 1
        header.append((lineno, text))
        if text == "end_header":
            break

    if not header or header[0][1] != "ply":
        raise ParseError("missing 'ply' magic", 1)
    fmt = None
    count = None
    props = []
    for ln, text in header[1:-1]:
        tok = text.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:] == ["ascii", "1.0"]:
                fmt = "ascii"
            elif tok[1:] == ["binary_little_endian", "1.0"]:
                fmt = "binary"
            else:
                raise ParseError(f"unsupported format {' '.join(tok[1:])!r}", ln)
        elif tok[0] == "element":
            if len(tok) != 3 or tok[1] != "vertex" or count is not None:
                raise ParseError(f"only a single 'element vertex N' is supported: {text!r}", ln)
            try:
                count = int(tok[2])
            except ValueError:
                raise ParseError(f"bad vertex count {tok[2]!r}", ln) from None
        elif tok[0] == "property":
            if count is None:
                raise ParseError("property before element", ln)
            if len(tok) != 3 or tok[1] != "float":
                raise ParseError(f"only float properties are supported: {text!r}", ln)
            props.append(tok[2])
        else:
            raise ParseError(f"unexpected header line {text!r}", ln)
    if fmt is None:
        raise ParseError("missing format line", 2)
    if count is None:
        raise ParseError("missing 'element vertex'", lineno)
    if props != ["x", "y", "z"]:
        raise ParseError(f"vertex properties must be x y z, got {props}", lineno)

    if fmt == "binary":
        need = 12 * count
        body = raw[pos:]
        if len(body) < need:
            raise ParseError(f"binary payload has {len(body)} bytes, need {need}", lineno)
        return np.frombuffer(body[:need], dtype="<f4").astype(np.float64).reshape(count, 3)

    pts = []
    lines = raw[pos:].decode("ascii", errors="replace").splitlines()
    for i, line in enumerate(lines):
        if len(pts) == count:
            break
        ln = lineno + i + 1
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise ParseError(f"expected 3 values, got {len(parts)}", ln)
        try:
            pts.append([float(v) for v in parts])
        except ValueError:
            raise ParseError(f"non-numeric vertex {line!r}", ln) from None
    if len(pts) != count:
        raise ParseError(f"expected {count} vertices, found {len(pts)}", lineno + len(lines))
    return pts


def save(pc: PointCloud, path, format: str | None = None, binary: bool = False) -> None:
    """Write ``pc``; PLY is ascii unless ``binary`` (little-endian float32)."""
    fmt = format or _infer_format(path)
    pts = pc.points
    if fmt == "xyz":
        with open(path, "w") as fh:
            for x, y, z in pts:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    elif fmt == "ply":
        kind = "binary_little_endian" if binary else "ascii"
        head = (
            f"ply\nformat {kind} 1.0\nelement vertex {len(pts)}\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        with open(path, "wb") as fh:
            fh.write(head.encode("ascii"))
            if binary:
                fh.write(pts.astype("<f4").tobytes())
            else:
                fh.write("".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts).encode("ascii"))
    else:
        raise ValueError(f"unknown format {fmt!r}")


def ply_header_size(n: int, binary: bool = True) -> int:
    kind = "binary_little_endian" if binary else "ascii"
    head = (
        f"ply\nformat {kind} 1.0\nelement vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    return len(head.encode("ascii"))


# ---------------------------------------------------------------------------
# synthesis and noise
# ---------------------------------------------------------------------------

SHAPES = ("sphere", "torus", "cube", "plane")


def _sample_shape(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "sphere":
        v = rng.standard_normal((n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if shape == "torus":
        # rejection sampling gives an area-uniform distribution on the torus
        R, r = 1.0, 0.4
        out = []
        while sum(len(o) for o in out) < n:
            u = rng.uniform(0, 2 * np.pi, 2 * n)
            v = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = rng.uniform(0, 1, 2 * n) <= (R + r * np.cos(v)) / (R + r)
            u, v = u[keep], v[keep]
            out.append(np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], 1))
        return np.concatenate(out)[:n]
    if shape == "cube":
        face = rng.integers(0, 6, n)
        pts = rng.uniform(-1, 1, (n, 3))
        axis = face // 2
        pts[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
        return pts
    if shape == "plane":
        return np.column_stack([rng.uniform(-1, 1, (n, 2)), np.zeros(n)])
    raise ValueError(f"unknown shape {shape!r}; choose from {SHAPES}")


def synth(shape: str, n: int, seed: int = 0) -> PointCloud:
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}; choose from {SHAPES}")
    if n < 8:
        raise ValueError("synth needs n >= 8")
    rng = np.random.default_rng(seed)
    return PointCloud(normalize(_sample_shape(shape, n, rng)), name=f"{shape}-{n}-{seed}")


def add_noise(pc: PointCloud, spec: NoiseSpec, diagonal: float | None = None) -> PointCloud:
    """Gaussian perturbation with std ``sigma * diagonal``.

    ``diagonal`` defaults to the bounding-box diagonal of ``pc``; pass the
    source cloud's diagonal when noising a patch cut from a larger cloud.
    """
    if spec.sigma == 0:
        return PointCloud(pc.points.copy(), pc.name)
    diag = pc.diagonal if diagonal is None else float(diagonal)
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(pc.points.shape) * (spec.sigma * diag)
    return PointCloud(pc.points + noise, pc.name)


def extract_patches(pc: PointCloud, patch_size: int, count: int, seed: int = 0) -> list[PointCloud]:
    """Patches of ``patch_size`` nearest neighbours around random seed points."""
    n = len(pc)
    if patch_size > n:
        raise ValueError(f"cloud has {n} points, fewer than patch_size={patch_size}")
    if patch_size < 1 or count < 0:
        raise ValueError("patch_size must be >= 1 and count >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.integers(0, n, count)
    out = []
    for c in centers:
        d2 = ((pc.points - pc.points[c]) ** 2).sum(1)
        if patch_size == n:
            sel = np.arange(n)
        else:
            # stable ordering keeps ties deterministic (lower index first)
            sel = np.sort(np.argsort(d2, kind="stable")[:patch_size])
        out.append(PointCloud(pc.points[sel], name=f"{pc.name or 'cloud'}@{int(c)}"))
    return out


def patch_centers(n: int, count: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, n, count)
