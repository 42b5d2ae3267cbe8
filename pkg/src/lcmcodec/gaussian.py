"""3DGS data model, PLY ingestion/export and attribute quantization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

SH_DIM = 48
GEOM_DIM = 8  # 3 scale, 4 rotation, 1 opacity

PLY_PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(45)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


class PlyError(ValueError):
    pass


@dataclass
class GaussianCloud:
    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) quaternion, w first
    scales: np.ndarray  # (N, 3) log-scales as stored
    opacity: np.ndarray  # (N, 1) logits as stored
    colors: np.ndarray  # (N, 48) SH, DC first
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float32).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=np.float32).reshape(n, 3)
        self.opacity = np.asarray(self.opacity, dtype=np.float32).reshape(n, 1)
        self.colors = np.asarray(self.colors, dtype=np.float32).reshape(n, SH_DIM)
        if self.normals is None:
            self.normals = np.zeros((n, 3), dtype=np.float32)
        else:
            self.normals = np.asarray(self.normals, dtype=np.float32).reshape(n, 3)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def geometry(self) -> np.ndarray:
        """Non-positional geometry h = [scale(3), rotation(4), opacity(1)]."""
        return np.concatenate([self.scales, self.rotations, self.opacity], axis=1)

    def fields(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "normals": self.normals,
            "colors": self.colors,
            "opacity": self.opacity,
            "scales": self.scales,
            "rotations": self.rotations,
        }

    def validate(self):
        if len(self) == 0:
            raise ValueError("empty cloud")
        for name, arr in self.fields().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"nonfinite value in field '{name}'")
        if np.any(np.linalg.norm(self.rotations, axis=1) == 0):
            raise ValueError("zero-norm quaternion in field 'rotations'")

    def permuted(self, order: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(
            self.positions[order],
            self.rotations[order],
            self.scales[order],
            self.opacity[order],
            self.colors[order],
            self.normals[order],
        )

    def _as_rows(self) -> np.ndarray:
        return np.concatenate(
            [
                self.positions,
                self.normals,
                self.colors,
                self.opacity,
                self.scales,
                self.rotations,
            ],
            axis=1,
        )


# --------------------------------------------------------------------- PLY


def _read_header(data: bytes) -> tuple[int, list[tuple[str, str]], int]:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise PlyError("malformed header: missing 'ply' magic or 'end_header'")
    body = data[4:end].decode("ascii", errors="replace").splitlines()
    count = None
    props: list[tuple[str, str]] = []
    fmt_ok = False
    in_vertex = False
    for lineno, line in enumerate(body, start=2):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise PlyError(f"malformed header: unsupported format at line {lineno}: {line!r}")
            fmt_ok = True
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyError(f"malformed header: bad element line {lineno}: {line!r}")
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif int(parts[2]) != 0:
                raise PlyError(f"malformed header: unsupported element '{parts[1]}'")
        elif parts[0] == "property":
            if len(parts) != 3:
                raise PlyError(f"malformed header: bad property line {lineno}: {line!r}")
            if in_vertex:
                props.append((parts[1], parts[2]))
        else:
            raise PlyError(f"malformed header: unknown keyword at line {lineno}: {line!r}")
    if not fmt_ok:
        raise PlyError("malformed header: missing format line")
    if count is None:
        raise PlyError("malformed header: missing 'element vertex'")
    return count, props, end + len(b"end_header\n")


def parse_ply(data: bytes) -> GaussianCloud:
    """Parse a binary little-endian 3DGS PLY export."""
    count, props, offset = _read_header(data)
    names = [name for _, name in props]
    for dtype, name in props:
        if dtype not in ("float", "float32"):
            raise PlyError(f"property '{name}' has unsupported type '{dtype}' (expected float)")
    for name in PLY_PROPERTIES:
        if name not in names:
            raise PlyError(f"missing property '{name}'")
    row = 4 * len(props)
    need = offset + row * count
    if len(data) < need:
        raise PlyError(
            f"truncated payload: need {need} bytes, have {len(data)} "
            f"(vertex {(len(data) - offset) // row} at offset {offset + ((len(data) - offset) // row) * row})"
        )
    table = np.frombuffer(data, dtype="<f4", count=count * len(props), offset=offset)
    table = table.reshape(count, len(props))
    col = {name: i for i, name in enumerate(names)}

    def take(keys):
        return table[:, [col[k] for k in keys]].astype(np.float32)

    return GaussianCloud(
        positions=take(["x", "y", "z"]),
        normals=take(["nx", "ny", "nz"]),
        colors=take([f"f_dc_{i}" for i in range(3)] + [f"f_rest_{i}" for i in range(45)]),
        opacity=take(["opacity"]),
        scales=take([f"scale_{i}" for i in range(3)]),
        rotations=take([f"rot_{i}" for i in range(4)]),
    )


def write_ply(cloud: GaussianCloud) -> bytes:
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    for name, arr in cloud.fields().items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"nonfinite value in field '{name}'")
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    lines += [f"property float {name}" for name in PLY_PROPERTIES]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    return header + cloud._as_rows().astype("<f4").tobytes()


def read_ply(path) -> GaussianCloud:
    with open(path, "rb") as f:
        return parse_ply(f.read())


def save_ply(cloud: GaussianCloud, path):
    with open(path, "wb") as f:
        f.write(write_ply(cloud))


# -------------------------------------------------------------- covariance


def quaternion_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero quaternion")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def covariance_from(q, s) -> np.ndarray:
    """Sigma = R S S^T R^T for quaternion q (w, x, y, z) and linear scales s.

    Works on single Gaussians or stacked (..., 4) / (..., 3) arrays.
    """
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("nonfinite scale")
    rs = quaternion_to_matrix(q) * s[..., None, :]
    cov = rs @ np.swapaxes(rs, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


# ------------------------------------------------------------ quantization


@dataclass
class QuantizationSpec:
    position_bit_depth: int
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    geometry_steps: np.ndarray = field(default_factory=lambda: default_geometry_steps())
    color_steps: np.ndarray = field(default_factory=lambda: default_color_steps())

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        self.geometry_steps = np.asarray(self.geometry_steps, dtype=np.float32).reshape(GEOM_DIM)
        self.color_steps = np.asarray(self.color_steps, dtype=np.float32).reshape(SH_DIM)
        if not 1 <= self.position_bit_depth <= 21:
            raise ValueError(f"position bit depth {self.position_bit_depth} outside [1, 21]")
        if np.any(self.geometry_steps <= 0) or np.any(self.color_steps <= 0):
            raise ValueError("quantization steps must be positive")
        if not np.all(np.isfinite(self.bbox_min)) or not np.all(np.isfinite(self.bbox_max)):
            raise ValueError("nonfinite bbox")
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("degenerate bbox axis (width 0)")

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud, bit_depth: int = 16, **kw) -> "QuantizationSpec":
        lo = cloud.positions.astype(np.float64).min(axis=0)
        hi = cloud.positions.astype(np.float64).max(axis=0)
        # pad degenerate axes so every axis has nonzero width
        hi = np.where(hi > lo, hi, lo + 1.0)
        return cls(bit_depth, lo, hi, **kw)

    @property
    def bin_width(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / float(1 << self.position_bit_depth)


def default_geometry_steps() -> np.ndarray:
    return np.array([0.02] * 3 + [0.01] * 4 + [0.05], dtype=np.float32)


def default_color_steps() -> np.ndarray:
    return np.array([0.02] * 3 + [0.01] * 45, dtype=np.float32)


def quantize_positions(positions, spec: QuantizationSpec) -> tuple[np.ndarray, int]:
    """Map positions to integer grid cells; returns (cells, number of clamped points)."""
    width = spec.bbox_max - spec.bbox_min
    if np.any(width <= 0):
        raise ValueError("degenerate bbox axis (width 0)")
    p = np.asarray(positions, dtype=np.float64)
    top = (1 << spec.position_bit_depth) - 1
    outside = np.any((p < spec.bbox_min) | (p > spec.bbox_max), axis=1)
    n_clamped = int(outside.sum())
    if n_clamped:
        logger.warning("%d positions outside bbox were clamped", n_clamped)
    cells = np.floor((p - spec.bbox_min) / width * float(1 << spec.position_bit_depth))
    return np.clip(cells, 0, top).astype(np.int64), n_clamped


def dequantize_positions(cells, spec: QuantizationSpec) -> np.ndarray:
    return spec.bbox_min + (np.asarray(cells, dtype=np.float64) + 0.5) * spec.bin_width


def quantize_attributes(values, steps) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("nonfinite attribute value")
    steps = np.asarray(steps, dtype=np.float64)
    if np.any(steps <= 0):
        raise ValueError("quantization steps must be positive")
    # np.rint rounds half to even
    return np.rint(values / steps).astype(np.int64)


def dequantize_attributes(symbols, steps) -> np.ndarray:
    return (np.asarray(symbols, dtype=np.float32) * np.asarray(steps, dtype=np.float32)).astype(np.float32)
