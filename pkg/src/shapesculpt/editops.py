"""Compiling user edits into feature-space objectives.

Every edit — copy, resize, delete, drag, cut-paste — reduces to the same
structure: a list of coordinates Γ in the feature grid and a list of target
feature vectors V, one per coordinate.  The optimization loop then pushes the
feature volume toward V at Γ by descending on the latent code.  This module
derives (Γ, V) from user selections given the starting feature volume, finds
empty regions for deletions, tracks the moving handle during drags, and
implements the no-optimization spatial baseline that assigns coefficients
directly.

Selections are axis-aligned boxes and points in the normalized [-1, 1]³ shape
space; compilation maps them into feature-voxel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import autodiff as ad
from .coupling import FeatureVolume, map_coords
from .diffusion import parse_kv_file, wavelet_to_array
from .shapegen import TsdfVolume
from .wavelet import SUBBAND_ORDER, WaveletVolume, idwt3

__all__ = [
    "SelectionBox",
    "EditSpec",
    "Objective",
    "DragState",
    "derive_copy",
    "derive_resize",
    "derive_delete",
    "find_empty_region",
    "motion_supervision",
    "track_point",
    "compose_cut_paste",
    "spatial_baseline",
    "parse_edit_spec",
    "load_edit_spec",
    "dump_edit_spec",
]

EDIT_KINDS = ("copy", "resize", "delete", "drag", "cut-paste")

_REQUIRED_FIELDS = {
    "copy": ("region", "displacement"),
    "resize": ("region", "anchor", "scales"),
    "delete": ("region",),
    "drag": ("source", "target"),
    "cut-paste": ("region", "displacement"),
}

_EPS = 1e-9


# ---------------------------------------------------------------------------
# Selections and specs


@dataclass(frozen=True)
class SelectionBox:
    """Axis-aligned box selection in normalized shape coordinates."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self) -> None:
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("selection box corners must be 3-component points")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))
        if np.any(lo > hi):
            raise ValueError(f"selection box min {self.lo} exceeds max {self.hi}")
        if np.any(np.abs(lo) > 1.0 + _EPS) or np.any(np.abs(hi) > 1.0 + _EPS):
            raise ValueError("selection box leaves the normalized [-1, 1] cube")

    def corners(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.lo, dtype=np.float64), np.asarray(self.hi, dtype=np.float64)


def _point(value, name: str) -> np.ndarray:
    pt = np.asarray(value, dtype=np.float64)
    if pt.shape != (3,):
        raise ValueError(f"{name} must be a 3-component point, got shape {pt.shape}")
    return pt


@dataclass
class EditSpec:
    """One user edit: the operator kind plus exactly the fields it needs."""

    kind: str
    region: SelectionBox | None = None
    displacement: np.ndarray | None = None
    anchor: np.ndarray | None = None
    scales: np.ndarray | None = None
    source: np.ndarray | None = None
    target: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in EDIT_KINDS:
            raise ValueError(f"unknown edit kind {self.kind!r}; expected one of {EDIT_KINDS}")
        required = _REQUIRED_FIELDS[self.kind]
        optional = {"kind", "seed"}
        for f in fields(self):
            if f.name in optional:
                continue
            value = getattr(self, f.name)
            if f.name in required and value is None:
                raise ValueError(f"{self.kind} edit requires the {f.name} field")
            if f.name not in required and value is not None:
                raise ValueError(f"{self.kind} edit does not take a {f.name} field")
        for name in ("displacement", "anchor", "scales", "source", "target"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, _point(value, name))
        if self.scales is not None and np.any(self.scales <= 0.0):
            raise ValueError(f"scale factors must be positive, got {tuple(self.scales)}")
        for name in ("anchor", "source", "target"):
            value = getattr(self, name)
            if value is not None and np.any(np.abs(value) > 1.0 + _EPS):
                raise ValueError(f"{name} leaves the normalized [-1, 1] cube")
        self.seed = int(self.seed)


# ---------------------------------------------------------------------------
# Objectives


@dataclass
class Objective:
    """A compiled edit: coordinates Γ in feature-voxel space and targets V.

    ``dynamic`` marks objectives that must be rebuilt every iteration (drag
    motion supervision); static objectives are compiled once.  ``values`` is a
    plain array — targets never carry gradients.
    """

    kind: str
    gamma: np.ndarray
    values: np.ndarray
    dynamic: bool = False

    def __post_init__(self) -> None:
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.values = np.asarray(self.values)
        if self.gamma.ndim != 2 or self.gamma.shape[1] != 3:
            raise ValueError(f"coordinate list must be (M, 3), got {self.gamma.shape}")
        if self.values.ndim != 2 or self.values.shape[0] != self.gamma.shape[0]:
            raise ValueError(
                f"need one target vector per coordinate: {self.gamma.shape[0]} coordinates, "
                f"{self.values.shape} targets"
            )
        if self.gamma.shape[0] == 0:
            raise ValueError("edit selection contains no feature lattice points")
        if not (np.all(np.isfinite(self.gamma)) and np.all(np.isfinite(self.values))):
            raise ValueError("objective contains non-finite entries")

    def __len__(self) -> int:
        return self.gamma.shape[0]


@dataclass
class DragState:
    """The moving handle of a drag edit, in feature-voxel coordinates."""

    a: np.ndarray
    b: np.ndarray
    p: np.ndarray
    r1: float = 1.0
    r2: float = 2.0
    iteration: int = 0

    def __post_init__(self) -> None:
        self.a = _point(self.a, "drag source")
        self.b = _point(self.b, "drag target")
        self.p = _point(self.p, "drag handle")
        if self.r1 < 0.0:
            raise ValueError("supervision radius must be non-negative")
        if self.r2 < self.r1:
            raise ValueError("tracking radius must be at least the supervision radius")
        if self.iteration == 0 and not np.array_equal(self.p, self.a):
            raise ValueError("a fresh drag must start with its handle at the source point")

    @classmethod
    def from_spec(cls, spec: EditSpec, side: int, r1: float = 1.0, r2: float = 2.0) -> DragState:
        if spec.kind != "drag":
            raise ValueError(f"expected a drag edit, got {spec.kind!r}")
        a = map_coords(spec.source, side)
        b = map_coords(spec.target, side)
        return cls(a=a, b=b, p=a.copy(), r1=r1, r2=r2)


# ---------------------------------------------------------------------------
# Lattice helpers


def _lattice(vlo, vhi) -> np.ndarray:
    """Integer lattice points of the box [vlo, vhi], in lexicographic order."""
    lo = np.ceil(np.asarray(vlo, dtype=np.float64) - _EPS).astype(np.int64)
    hi = np.floor(np.asarray(vhi, dtype=np.float64) + _EPS).astype(np.int64)
    if np.any(hi < lo):
        return np.zeros((0, 3), dtype=np.int64)
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def _ball(center: np.ndarray, radius: float, side: int) -> np.ndarray:
    """Integer lattice points within Euclidean ``radius`` of ``center``,
    restricted to the volume."""
    lo = np.maximum(np.ceil(center - radius - _EPS), 0.0)
    hi = np.minimum(np.floor(center + radius + _EPS), side - 1.0)
    pts = _lattice(lo, hi)
    if pts.shape[0] == 0:
        return pts
    keep = np.linalg.norm(pts - center, axis=1) <= radius + _EPS
    return pts[keep]


def _sample(data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear reads from a plain (C, D, H, W) array; returns (M, C)."""
    return ad.trilinear_sample(ad.Tensor(np.ascontiguousarray(data)), pts).data


def _require_inside(pts: np.ndarray, side: int, what: str) -> np.ndarray:
    if pts.shape[0] and (pts.min() < -_EPS or pts.max() > side - 1 + _EPS):
        raise ValueError(f"{what} leaves the feature volume")
    return np.clip(pts, 0.0, side - 1.0)


def _voxel_displacement(displacement: np.ndarray, side: int) -> np.ndarray:
    """A normalized-space direction vector expressed in voxel units."""
    return np.asarray(displacement, dtype=np.float64) * ((side - 1) / 2.0)


# ---------------------------------------------------------------------------
# Static objectives


def derive_copy(f0: FeatureVolume, region: SelectionBox, displacement) -> Objective:
    """Targets that replicate the region's features at the displaced location.

    Γ is the displaced copy of the source lattice (possibly non-integer) and V
    holds the source features, so optimizing pulls the displaced location
    toward the source appearance while the source itself stays unconstrained.
    """
    side = f0.side
    lo, hi = region.corners()
    src = _lattice(map_coords(lo, side), map_coords(hi, side)).astype(np.float64)
    if src.shape[0] == 0:
        raise ValueError("copy region contains no feature lattice points")
    shift = _voxel_displacement(_point(displacement, "displacement"), side)
    gamma = _require_inside(src + shift, side, "displaced copy region")
    values = _sample(f0.data, src)
    return Objective(kind="copy", gamma=gamma, values=values)


def derive_resize(f0: FeatureVolume, region: SelectionBox, anchor, scales) -> Objective:
    """Targets that stretch or shrink the region about an anchor point.

    The resized box B' is filled with features sampled from the original box
    at the back-mapped points anchor + (q - anchor)/s.
    """
    side = f0.side
    s = _point(scales, "scales")
    if np.any(s <= 0.0):
        raise ValueError(f"scale factors must be positive, got {tuple(s)}")
    a = map_coords(_point(anchor, "anchor"), side)
    lo, hi = region.corners()
    blo, bhi = map_coords(lo, side), map_coords(hi, side)
    new_lo = a + s * (blo - a)
    new_hi = a + s * (bhi - a)
    if new_lo.min() < -_EPS or new_hi.max() > side - 1 + _EPS:
        raise ValueError("resized region leaves the feature volume")
    gamma = _lattice(new_lo, new_hi).astype(np.float64)
    if gamma.shape[0] == 0:
        raise ValueError("resized region contains no feature lattice points")
    back = _require_inside(a + (gamma - a) / s, side, "resize source points")
    values = _sample(f0.data, back)
    return Objective(kind="resize", gamma=gamma, values=values)


def find_empty_region(tsdf: TsdfVolume, region_dims) -> np.ndarray:
    """Best fully-exterior placement of a (nx, ny, nz)-voxel box in the TSDF.

    A placement qualifies only if every covered sample equals +truncation
    exactly (no surface band anywhere inside).  Among qualifying placements
    the one whose covered voxels stay farthest from the shape (greatest
    minimum Euclidean distance to any non-exterior voxel) wins; ties go to the
    lexicographically smallest corner.  Returns the integer corner index.
    """
    dims = np.asarray(region_dims, dtype=np.int64)
    if dims.shape != (3,) or np.any(dims < 1):
        raise ValueError(f"region dims must be three positive counts, got {region_dims}")
    res = tsdf.resolution
    if np.any(dims > res):
        raise ValueError(f"region dims {tuple(dims)} exceed the {res}³ volume")
    exterior = tsdf.values == np.float32(tsdf.truncation)
    windows = np.lib.stride_tricks.sliding_window_view(exterior, tuple(dims))
    valid = windows.all(axis=(3, 4, 5))
    if not valid.any():
        raise ValueError("no empty region")
    if exterior.all():
        # No shape anywhere: every placement is infinitely far from a surface,
        # so the tie-break alone decides.
        return np.zeros(3, dtype=np.int64)
    dist = distance_transform_edt(exterior)
    score = np.lib.stride_tricks.sliding_window_view(dist, tuple(dims)).min(axis=(3, 4, 5))
    score = np.where(valid, score, -np.inf)
    corner = np.unravel_index(np.argmax(score), score.shape)
    return np.asarray(corner, dtype=np.int64)


def _empty_region_offset(tsdf: TsdfVolume, lo: np.ndarray, hi: np.ndarray, side: int) -> np.ndarray:
    """Offset (in ``side``-grid voxels) from the region [lo, hi] to the best
    congruent empty region of the shape.

    The donor box is sized to cover the region's continuous extent from any
    integer corner (one covering voxel of slack per axis), so region points
    shifted by the returned offset always land on exterior samples.
    """
    tlo = tsdf.norm_to_voxel(lo)
    thi = tsdf.norm_to_voxel(hi)
    dims = np.ceil(thi - tlo - _EPS).astype(np.int64) + 1
    corner = find_empty_region(tsdf, dims)
    return (corner - tlo) * ((side - 1) / (tsdf.resolution - 1))


def derive_delete(f0: FeatureVolume, region: SelectionBox, tsdf: TsdfVolume) -> Objective:
    """Targets that overwrite the region's features with empty-space features.

    The empty donor region is located in the TSDF of the same shape; the
    offset between the two congruent boxes carries each delete-lattice point
    to its donor point.
    """
    side = f0.side
    lo, hi = region.corners()
    gamma = _lattice(map_coords(lo, side), map_coords(hi, side)).astype(np.float64)
    if gamma.shape[0] == 0:
        raise ValueError("delete region contains no feature lattice points")
    offset = _empty_region_offset(tsdf, lo, hi, side)
    donors = _require_inside(gamma + offset, side, "empty donor region")
    values = _sample(f0.data, donors)
    return Objective(kind="delete", gamma=gamma, values=values)


# ---------------------------------------------------------------------------
# Drag


def motion_supervision(f_k: FeatureVolume, drag: DragState) -> Objective:
    """One drag step's objective: move the handle neighborhood one voxel
    toward the target.

    The lattice ball around the current handle is shifted by the unit vector
    toward the target; the targets V are the *current* features at the
    unshifted points, captured as plain data so gradients cannot flow into
    them.  Rebuilt every iteration as the handle moves.
    """
    side = f_k.side
    to_target = drag.b - drag.p
    norm = float(np.linalg.norm(to_target))
    if norm == 0.0:
        raise ValueError("drag handle is already at the target point")
    u = to_target / norm
    ball = _ball(drag.p, drag.r1, side).astype(np.float64)
    if ball.shape[0] == 0:
        raise ValueError("drag handle neighborhood contains no lattice points")
    gamma = _require_inside(ball + u, side, "shifted drag neighborhood")
    values = _sample(f_k.data, ball)
    return Objective(kind="drag", gamma=gamma, values=values, dynamic=True)


def track_point(f_next: FeatureVolume, f0: FeatureVolume, drag: DragState) -> np.ndarray:
    """Re-locate the drag handle after an update step.

    Scans the lattice within the tracking radius of the current handle for
    the point whose features best match the original handle features
    (mean-L1).  Ties prefer the candidate closest to the target, then the
    lexicographically smallest.
    """
    side = f_next.side
    window = _ball(drag.p, drag.r2, side)
    if window.shape[0] == 0:
        raise ValueError("tracking window leaves the feature volume")
    ref = _sample(f0.data, drag.a[None, :])[0]
    best: tuple | None = None
    for q in window:
        feats = f_next.data[:, q[0], q[1], q[2]]
        score = float(np.mean(np.abs(feats - ref), dtype=np.float64))
        to_b = float(np.linalg.norm(q - drag.b))
        key = (score, to_b, int(q[0]), int(q[1]), int(q[2]))
        if best is None or key < best:
            best = key
    return np.asarray(best[2:], dtype=np.float64)


# ---------------------------------------------------------------------------
# Composition and the no-optimization baseline


def compose_cut_paste(spec: EditSpec) -> list[EditSpec]:
    """Split a cut-paste into its two sequential phases.

    Phase 1 copies the region to the displaced location; phase 2 deletes the
    original region.  The caller optimizes the phases in order, rebuilding
    the coupled state from the intermediate decode between them, so each
    phase is compiled against the state it actually edits.
    """
    if spec.kind != "cut-paste":
        raise ValueError(f"expected a cut-paste edit, got {spec.kind!r}")
    return [
        EditSpec(kind="copy", region=spec.region, displacement=spec.displacement, seed=spec.seed),
        EditSpec(kind="delete", region=spec.region, seed=spec.seed),
    ]


def spatial_baseline(wv: WaveletVolume, spec: EditSpec) -> WaveletVolume:
    """The ablation baseline: the same Γ/V assignment applied directly to
    wavelet coefficients, with no optimization and no model.

    Copy pastes interpolated source coefficients over the displaced lattice;
    delete overwrites the region with coefficients read from an empty region
    of the same shape.  Values are sampled from the input before any
    assignment, so overlapping source and target regions stay consistent.
    """
    if spec.kind not in ("copy", "delete"):
        raise ValueError(f"the spatial baseline supports copy and delete edits, got {spec.kind!r}")
    arr = wavelet_to_array(wv)
    side = arr.shape[1]
    lo, hi = spec.region.corners()
    vlo, vhi = map_coords(lo, side), map_coords(hi, side)

    if spec.kind == "copy":
        shift = _voxel_displacement(spec.displacement, side)
        targets = _lattice(vlo + shift, vhi + shift)
        if targets.shape[0] == 0:
            raise ValueError("displaced copy region contains no lattice points")
        _require_inside(targets.astype(np.float64), side, "displaced copy region")
        sources = _require_inside(targets - shift, side, "copy source points")
    else:
        targets = _lattice(vlo, vhi)
        if targets.shape[0] == 0:
            raise ValueError("delete region contains no lattice points")
        offset = _empty_region_offset(idwt3(wv), lo, hi, side)
        sources = _require_inside(targets + offset, side, "empty donor region")

    values = _sample(arr, sources)
    out = arr.copy()
    ti = targets.astype(np.int64)
    out[:, ti[:, 0], ti[:, 1], ti[:, 2]] = values.T
    details = {tag: out[i + 1] for i, tag in enumerate(SUBBAND_ORDER)}
    return WaveletVolume(wv.family, wv.levels, wv.resolution, wv.truncation, out[0], [details])


# ---------------------------------------------------------------------------
# Spec files


def parse_edit_spec(pairs: dict[str, str]) -> EditSpec:
    """Build an EditSpec from parsed key/value text fields."""
    known = {
        "kind", "region.min", "region.max", "displacement", "anchor", "scales",
        "source", "target", "seed",
    }
    unknown = sorted(set(pairs) - known)
    if unknown:
        raise ValueError(f"unknown edit spec fields: {', '.join(unknown)}")
    if "kind" not in pairs:
        raise ValueError("edit spec is missing the kind field")

    def vector(key: str) -> np.ndarray | None:
        if key not in pairs:
            return None
        parts = pairs[key].split()
        try:
            comps = [float(p) for p in parts]
        except ValueError:
            raise ValueError(f"field {key} must hold three reals, got {pairs[key]!r}") from None
        if len(comps) != 3:
            raise ValueError(f"field {key} must hold three reals, got {len(comps)}")
        return np.asarray(comps, dtype=np.float64)

    rlo, rhi = vector("region.min"), vector("region.max")
    if (rlo is None) != (rhi is None):
        raise ValueError("region.min and region.max must be given together")
    region = SelectionBox(tuple(rlo), tuple(rhi)) if rlo is not None else None
    try:
        seed = int(pairs.get("seed", "0"))
    except ValueError:
        raise ValueError(f"field seed must be an integer, got {pairs['seed']!r}") from None
    return EditSpec(
        kind=pairs["kind"],
        region=region,
        displacement=vector("displacement"),
        anchor=vector("anchor"),
        scales=vector("scales"),
        source=vector("source"),
        target=vector("target"),
        seed=seed,
    )


def load_edit_spec(path: str | Path) -> EditSpec:
    return parse_edit_spec(parse_kv_file(path))


def dump_edit_spec(spec: EditSpec) -> str:
    """Serialize a spec in the key/value file format (inverse of parsing)."""
    lines = [f"kind = {spec.kind}"]

    def fmt(v: np.ndarray) -> str:
        return " ".join(repr(float(c)) for c in v)

    if spec.region is not None:
        lines.append(f"region.min = {fmt(np.asarray(spec.region.lo))}")
        lines.append(f"region.max = {fmt(np.asarray(spec.region.hi))}")
    for name in ("displacement", "anchor", "scales", "source", "target"):
        value = getattr(spec, name)
        if value is not None:
            lines.append(f"{name} = {fmt(value)}")
    if spec.seed:
        lines.append(f"seed = {spec.seed}")
    return "\n".join(lines) + "\n"
