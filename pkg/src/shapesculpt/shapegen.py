"""Procedural shape families as signed distance fields and clamped volumes.

Shapes are built from analytic primitives (spheres, boxes, axis-aligned
capped cylinders) combined by pointwise-min union, evaluated over the
normalized cube [-1, 1]³ (negative inside).  :func:`sample_tsdf` clamps a
field onto a regular grid whose centers span the cube; datasets of
parametric furniture-like families are drawn reproducibly by per-sample
seeding so generation order never affects content.

Volume files use magic ``TSDF`` with f32 values stored x-fastest; shape
provenance (the primitive tree and family parameters) travels in a JSON
sidecar next to the volume.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Sphere",
    "Box",
    "Cylinder",
    "Union",
    "SdfField",
    "TsdfVolume",
    "FamilySpec",
    "make_primitive_sdf",
    "sample_tsdf",
    "generate_dataset",
    "save_tsdf",
    "load_tsdf",
    "load_provenance",
    "primitive_to_dict",
    "primitive_from_dict",
    "FAMILY_NAMES",
]

TSDF_MAGIC = b"TSDF"
TSDF_VERSION = 1


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pts - np.asarray(self.center), axis=-1) - self.radius

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    def distance(self, pts: np.ndarray) -> np.ndarray:
        q = np.abs(pts - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        h = np.asarray(self.half_extents)
        return c - h, c + h


@dataclass(frozen=True)
class Cylinder:
    """Capped cylinder whose axis is one of the coordinate axes."""

    center: tuple[float, float, float]
    radius: float
    half_height: float
    axis: int = 2

    def distance(self, pts: np.ndarray) -> np.ndarray:
        delta = pts - np.asarray(self.center)
        perp = [i for i in range(3) if i != self.axis]
        radial = np.sqrt(delta[..., perp[0]] ** 2 + delta[..., perp[1]] ** 2) - self.radius
        axial = np.abs(delta[..., self.axis]) - self.half_height
        outside = np.sqrt(np.maximum(radial, 0.0) ** 2 + np.maximum(axial, 0.0) ** 2)
        inside = np.minimum(np.maximum(radial, axial), 0.0)
        return outside + inside

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        h = np.full(3, self.radius)
        h[self.axis] = self.half_height
        return c - h, c + h


@dataclass(frozen=True)
class Union:
    """Pointwise-min combination; a distance lower bound, exact on the surface sign."""

    children: tuple

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return np.min(np.stack([c.distance(pts) for c in self.children]), axis=0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        los, his = zip(*(c.bounds() for c in self.children))
        return np.min(np.stack(los), axis=0), np.max(np.stack(his), axis=0)


Primitive = Sphere | Box | Cylinder | Union


def _validate_tree(node: Primitive) -> None:
    if isinstance(node, Sphere):
        if node.radius <= 0:
            raise ValueError(f"sphere radius must be positive, got {node.radius}")
    elif isinstance(node, Box):
        if any(h <= 0 for h in node.half_extents):
            raise ValueError(f"box half extents must be positive, got {node.half_extents}")
    elif isinstance(node, Cylinder):
        if node.radius <= 0 or node.half_height <= 0:
            raise ValueError("cylinder radius and half height must be positive")
        if node.axis not in (0, 1, 2):
            raise ValueError(f"cylinder axis must be 0, 1 or 2, got {node.axis}")
    elif isinstance(node, Union):
        if not node.children:
            raise ValueError("union must have at least one child")
        for child in node.children:
            _validate_tree(child)
    else:
        raise ValueError(f"unknown primitive {type(node).__name__}")


@dataclass(frozen=True)
class SdfField:
    """Signed distance evaluator over [-1,1]³ with its primitive tree."""

    root: Primitive

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return self.root.distance(pts)


def make_primitive_sdf(root: Primitive) -> SdfField:
    """Validate a primitive tree and wrap it as an evaluator."""
    _validate_tree(root)
    return SdfField(root)


@dataclass
class TsdfVolume:
    """Clamped distance samples on a regular grid over [-1, 1]³.

    ``values[i, j, k]`` indexes (x, y, z); grid centers sit at
    ``linspace(-1, 1, resolution)`` per axis, so voxel (0,0,0) is the
    (-1,-1,-1) corner and the map between index and normalized coordinate
    is the invertible affine ``norm = 2·idx/(R-1) − 1``.
    """

    resolution: int
    truncation: float
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (self.resolution,) * 3:
            raise ValueError(f"values shape {self.values.shape} does not match resolution {self.resolution}")

    def grid_coords(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.resolution)

    def voxel_to_norm(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(idx, dtype=np.float64) * (2.0 / (self.resolution - 1)) - 1.0

    def norm_to_voxel(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) + 1.0) * ((self.resolution - 1) / 2.0)


def sample_tsdf(fld: SdfField, resolution: int = 32, truncation: float = 0.1) -> TsdfVolume:
    """Evaluate a field at every grid center and clamp to [-τ, +τ]."""
    if resolution < 8:
        raise ValueError(f"resolution must be at least 8, got {resolution}")
    if truncation <= 0:
        raise ValueError(f"truncation must be positive, got {truncation}")
    axis = np.linspace(-1.0, 1.0, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vals = fld(pts).reshape((resolution,) * 3)
    vals = np.clip(vals, -truncation, truncation)
    return TsdfVolume(resolution, float(truncation), vals.astype(np.float32))


# ---------------------------------------------------------------------------
# Parametric families


@dataclass
class FamilySpec:
    """A reproducible draw of one parametric shape family."""

    family: str
    count: int
    seed: int
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    resolution: int = 32
    truncation: float = 0.1
    mirror: bool = True

    def __post_init__(self) -> None:
        if self.family not in _FAMILY_BUILDERS:
            raise ValueError(f"unknown family {self.family!r}; choose from {sorted(_FAMILY_BUILDERS)}")
        if self.count < 1:
            raise ValueError("count must be at least 1")
        merged = dict(_FAMILY_DEFAULT_RANGES[self.family])
        for key, rng in self.ranges.items():
            if key not in merged:
                raise ValueError(f"unknown parameter {key!r} for family {self.family!r}")
            lo, hi = rng
            if not lo <= hi:
                raise ValueError(f"empty range for {key!r}: ({lo}, {hi})")
            merged[key] = (float(lo), float(hi))
        self.ranges = merged


def _draw_params(spec: FamilySpec, rng: np.random.Generator) -> dict[str, float]:
    params = {}
    for key in sorted(spec.ranges):
        lo, hi = spec.ranges[key]
        params[key] = float(rng.uniform(lo, hi))
    return params


def _legs_at(x_half: float, y_half: float, leg_w: float, leg_top: float, mirror: bool, rng: np.random.Generator):
    """Four legs inset from the slab corners; x-mirrored pairs when asked."""
    inset_x = x_half - leg_w
    inset_y = y_half - leg_w
    if not mirror:
        inset_x *= float(rng.uniform(0.85, 1.0))
    half_h = (leg_top + 1.0) / 2.0
    zc = leg_top - half_h
    legs = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            legs.append(Box((sx * inset_x, sy * inset_y, zc), (leg_w, leg_w, half_h)))
    return legs


def _build_box_table(params: dict[str, float], mirror: bool, rng: np.random.Generator) -> tuple[Primitive, dict]:
    top_x = params["top_half_x"]
    top_y = params["top_half_y"]
    top_t = params["top_thickness"]
    top_z = params["top_height"]
    leg_w = params["leg_half_width"]
    top = Box((0.0, 0.0, top_z), (top_x, top_y, top_t))
    legs = _legs_at(top_x, top_y, leg_w, top_z - top_t, mirror, rng)
    parts = {
        "top": _bounds_list(top),
        "legs": [_bounds_list(leg) for leg in legs],
    }
    return Union(tuple([top] + legs)), parts


def _build_pedestal_table(params: dict[str, float], mirror: bool, rng: np.random.Generator) -> tuple[Primitive, dict]:
    top_r = params["top_radius"]
    top_t = params["top_thickness"]
    top_z = params["top_height"]
    stem_r = params["stem_radius"]
    base_r = params["base_radius"]
    top = Cylinder((0.0, 0.0, top_z), top_r, top_t, axis=2)
    # Stem runs from the base plate (z = -0.9) up to the underside of the top.
    stem_half = (top_z - top_t + 0.9) / 2.0
    stem = Cylinder((0.0, 0.0, (top_z - top_t - 0.9) / 2.0), stem_r, stem_half, axis=2)
    base = Cylinder((0.0, 0.0, -0.9), base_r, 0.06, axis=2)
    parts = {
        "top": _bounds_list(top),
        "stem": _bounds_list(stem),
        "base": _bounds_list(base),
    }
    return Union((top, stem, base)), parts


def _build_slatted_chair(params: dict[str, float], mirror: bool, rng: np.random.Generator) -> tuple[Primitive, dict]:
    seat_x = params["seat_half_x"]
    seat_y = params["seat_half_y"]
    seat_t = params["seat_thickness"]
    seat_z = params["seat_height"]
    leg_w = params["leg_half_width"]
    back_h = params["back_height"]
    slat_n = int(round(params["slat_count"]))
    seat = Box((0.0, 0.0, seat_z), (seat_x, seat_y, seat_t))
    legs = _legs_at(seat_x, seat_y, leg_w, seat_z - seat_t, mirror, rng)
    back_y = seat_y - leg_w
    slat_w = 0.05
    slats = []
    # Slats sit at x-symmetric offsets across the backrest.
    positions = np.linspace(-(seat_x - slat_w), seat_x - slat_w, slat_n) if slat_n > 1 else np.array([0.0])
    zc = seat_z + back_h / 2.0
    for px in positions:
        slats.append(Box((float(px), back_y, zc), (slat_w, leg_w, back_h / 2.0)))
    rail = Box((0.0, back_y, seat_z + back_h), (seat_x, leg_w, 0.05))
    parts = {
        "seat": _bounds_list(seat),
        "legs": [_bounds_list(leg) for leg in legs],
        "slats": [_bounds_list(s) for s in slats],
        "rail": _bounds_list(rail),
    }
    return Union(tuple([seat] + legs + slats + [rail])), parts


def _bounds_list(prim: Primitive) -> list[list[float]]:
    lo, hi = prim.bounds()
    return [[float(v) for v in lo], [float(v) for v in hi]]


_FAMILY_BUILDERS = {
    "box_table": _build_box_table,
    "pedestal_table": _build_pedestal_table,
    "slatted_chair": _build_slatted_chair,
}

_FAMILY_DEFAULT_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "box_table": {
        "top_half_x": (0.45, 0.75),
        "top_half_y": (0.35, 0.65),
        "top_thickness": (0.06, 0.12),
        "top_height": (0.1, 0.45),
        "leg_half_width": (0.05, 0.1),
    },
    "pedestal_table": {
        "top_radius": (0.45, 0.75),
        "top_thickness": (0.05, 0.1),
        "top_height": (0.1, 0.45),
        "stem_radius": (0.07, 0.14),
        "base_radius": (0.25, 0.45),
    },
    "slatted_chair": {
        "seat_half_x": (0.35, 0.55),
        "seat_half_y": (0.35, 0.5),
        "seat_thickness": (0.05, 0.1),
        "seat_height": (-0.25, 0.05),
        "leg_half_width": (0.05, 0.09),
        "back_height": (0.5, 0.85),
        "slat_count": (2, 5),
    },
}

FAMILY_NAMES = tuple(sorted(_FAMILY_BUILDERS))


def generate_dataset(spec: FamilySpec) -> list[tuple[TsdfVolume, dict]]:
    """Sample ``spec.count`` shapes; content depends on seed, never on order."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    out = []
    for index, child in enumerate(children):
        rng = np.random.default_rng(child)
        params = _draw_params(spec, rng)
        root, parts = _FAMILY_BUILDERS[spec.family](params, spec.mirror, rng)
        fld = make_primitive_sdf(root)
        vol = sample_tsdf(fld, spec.resolution, spec.truncation)
        provenance = {
            "family": spec.family,
            "seed": int(spec.seed),
            "index": int(index),
            "mirror": bool(spec.mirror),
            "params": params,
            "parts": parts,
            "tree": primitive_to_dict(root),
        }
        out.append((vol, provenance))
    return out


# ---------------------------------------------------------------------------
# Serialization


def primitive_to_dict(node: Primitive) -> dict:
    if isinstance(node, Sphere):
        return {"kind": "sphere", "center": list(node.center), "radius": node.radius}
    if isinstance(node, Box):
        return {"kind": "box", "center": list(node.center), "half_extents": list(node.half_extents)}
    if isinstance(node, Cylinder):
        return {
            "kind": "cylinder",
            "center": list(node.center),
            "radius": node.radius,
            "half_height": node.half_height,
            "axis": node.axis,
        }
    if isinstance(node, Union):
        return {"kind": "union", "children": [primitive_to_dict(c) for c in node.children]}
    raise ValueError(f"unknown primitive {type(node).__name__}")


def primitive_from_dict(d: dict) -> Primitive:
    kind = d.get("kind")
    if kind == "sphere":
        return Sphere(tuple(d["center"]), float(d["radius"]))
    if kind == "box":
        return Box(tuple(d["center"]), tuple(d["half_extents"]))
    if kind == "cylinder":
        return Cylinder(tuple(d["center"]), float(d["radius"]), float(d["half_height"]), int(d.get("axis", 2)))
    if kind == "union":
        return Union(tuple(primitive_from_dict(c) for c in d["children"]))
    raise ValueError(f"unknown primitive kind {kind!r}")


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def save_tsdf(vol: TsdfVolume, path: str | Path, provenance: dict | None = None) -> None:
    """Write magic, version, dims, truncation, then f32 values x-fastest."""
    path = Path(path)
    r = vol.resolution
    header = TSDF_MAGIC + struct.pack("<HHHHf", TSDF_VERSION, r, r, r, np.float32(vol.truncation))
    payload = np.ascontiguousarray(vol.values, dtype="<f4").ravel(order="F").tobytes()
    path.write_bytes(header + payload)
    if provenance is not None:
        _sidecar_path(path).write_text(json.dumps(provenance, sort_keys=True, indent=1) + "\n")


def load_tsdf(path: str | Path) -> TsdfVolume:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != TSDF_MAGIC:
        raise ValueError(f"{path}: not a TSDF volume (bad magic)")
    version, rx, ry, rz, trunc = struct.unpack_from("<HHHHf", blob, 4)
    if version != TSDF_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if rx != ry or ry != rz:
        raise ValueError(f"{path}: only cubic volumes are supported, got {(rx, ry, rz)}")
    count = rx * ry * rz
    vals = np.frombuffer(blob, dtype="<f4", count=count, offset=16)
    if vals.size != count:
        raise ValueError(f"{path}: truncated value payload")
    values = vals.reshape((rx, ry, rz), order="F").copy()
    return TsdfVolume(int(rx), float(trunc), values)


def load_provenance(path: str | Path) -> dict | None:
    sidecar = _sidecar_path(Path(path))
    if not sidecar.exists():
        return None
    return json.loads(sidecar.read_text())
