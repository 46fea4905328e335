"""Separable 3D discrete wavelet transform with exact local support maps.

The forward transform filters each axis with a low/high analysis pair and
keeps every second sample (periodic boundary); multiple levels recurse on
the all-lowpass grid.  Detail subbands are tagged by one letter per axis in
(x, y, z) order — ``LLH`` is lowpass along x and y, highpass along z — and
each level stores the seven detail subbands in the fixed order LLH, LHL,
LHH, HLL, HLH, HHL, HHH; the all-lowpass ``LLL`` grid of the deepest level
is the coarse volume.

Families: ``haar`` (orthonormal, default: non-overlapping pairs, exact
aligned-block support) and ``bior2.2`` (symmetric 5/3 biorthogonal pair).
:func:`support_mask` reports exactly which output voxels a single
coefficient can influence — analytically for Haar, by reconstructing a unit
coefficient for other families.

Coefficient files use magic ``WAV3``: coarse grid first, then levels from
coarsest to finest, subbands in the fixed order, f32 little-endian,
x-fastest within each grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .shapegen import TsdfVolume

__all__ = [
    "WaveletVolume",
    "dwt3",
    "idwt3",
    "support_mask",
    "save_wavelet",
    "load_wavelet",
    "SUBBAND_ORDER",
    "FAMILY_TAGS",
]

WAV3_MAGIC = b"WAV3"
WAV3_VERSION = 1

SUBBAND_ORDER = ("LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH")

_SQRT2 = np.sqrt(2.0)

# Analysis/synthesis filter quadruples with the index anchors that give
# perfect reconstruction under the periodic convention used below:
#   analysis   y[n]  = sum_k h[k] * x[(2n + k - anchor) mod N]
#   synthesis  x[m] += sum_k g[k] * u[(m + k - anchor) mod N]
# where u is the zero-upsampled subband.
_FILTERS = {
    "haar": {
        "dec_lo": (np.array([1.0, 1.0]) / _SQRT2, 0),
        "dec_hi": (np.array([1.0, -1.0]) / _SQRT2, 0),
        "rec_lo": (np.array([1.0, 1.0]) / _SQRT2, 1),
        "rec_hi": (np.array([-1.0, 1.0]) / _SQRT2, 1),
    },
    "bior2.2": {
        "dec_lo": (np.array([-1.0, 2.0, 6.0, 2.0, -1.0]) * (_SQRT2 / 8.0), 2),
        "dec_hi": (np.array([1.0, -2.0, 1.0]) * (_SQRT2 / 4.0), 2),
        "rec_lo": (np.array([1.0, 2.0, 1.0]) * (_SQRT2 / 4.0), 1),
        "rec_hi": (np.array([1.0, 2.0, -6.0, 2.0, 1.0]) * (_SQRT2 / 8.0), 1),
    },
}

FAMILY_TAGS = tuple(sorted(_FILTERS))
_FAMILY_CODES = {name: i for i, name in enumerate(FAMILY_TAGS)}


@dataclass
class WaveletVolume:
    """Multilevel coefficient pyramid of one clamped distance volume."""

    family: str
    levels: int
    resolution: int
    truncation: float
    coarse: np.ndarray
    details: list[dict[str, np.ndarray]]  # details[l-1] holds level l (finest first)

    def __post_init__(self) -> None:
        if self.family not in _FILTERS:
            raise ValueError(f"unknown wavelet family {self.family!r}")
        if self.levels < 1 or len(self.details) != self.levels:
            raise ValueError("level count does not match detail pyramid")
        if self.resolution % (1 << self.levels):
            raise ValueError(f"resolution {self.resolution} not divisible by 2^{self.levels}")
        side = self.resolution >> self.levels
        if self.coarse.shape != (side,) * 3:
            raise ValueError(f"coarse grid {self.coarse.shape} inconsistent with R={self.resolution}, L={self.levels}")
        for lvl, bands in enumerate(self.details, start=1):
            want = (self.resolution >> lvl,) * 3
            if sorted(bands) != sorted(SUBBAND_ORDER):
                raise ValueError(f"level {lvl} subband tags {sorted(bands)} are incomplete")
            for tag in SUBBAND_ORDER:
                if bands[tag].shape != want:
                    raise ValueError(f"level {lvl} subband {tag} has shape {bands[tag].shape}, want {want}")


def _analysis_axis(x: np.ndarray, filt: np.ndarray, anchor: int, axis: int) -> np.ndarray:
    """Periodic correlate-and-decimate along one axis."""
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(len(filt))[None, :] - anchor) % n
    gathered = x[..., idx]  # (..., n/2, len(filt))
    out = gathered @ filt.astype(x.dtype)
    return np.moveaxis(out, -1, axis)


def _synthesis_axis(lo: np.ndarray, hi: np.ndarray, family: str, axis: int) -> np.ndarray:
    """Zero-upsample both subbands, filter periodically, and sum."""
    spec = _FILTERS[family]
    lo = np.moveaxis(lo, axis, -1)
    hi = np.moveaxis(hi, axis, -1)
    n = 2 * lo.shape[-1]
    out = np.zeros(lo.shape[:-1] + (n,), dtype=lo.dtype)
    for band, (filt, anchor) in ((lo, spec["rec_lo"]), (hi, spec["rec_hi"])):
        up = np.zeros(band.shape[:-1] + (n,), dtype=band.dtype)
        up[..., 0::2] = band
        idx = (np.arange(n)[:, None] + np.arange(len(filt))[None, :] - anchor) % n
        out += up[..., idx] @ filt.astype(band.dtype)
    return np.moveaxis(out, -1, axis)


def _split_once(grid: np.ndarray, family: str) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    spec = _FILTERS[family]
    halves: dict[str, np.ndarray] = {"": grid}
    for axis in range(3):
        step: dict[str, np.ndarray] = {}
        for tag, arr in halves.items():
            step[tag + "L"] = _analysis_axis(arr, *spec["dec_lo"], axis=axis)
            step[tag + "H"] = _analysis_axis(arr, *spec["dec_hi"], axis=axis)
        halves = step
    coarse = halves.pop("LLL")
    return coarse, {tag: halves[tag] for tag in SUBBAND_ORDER}


def _merge_once(coarse: np.ndarray, bands: dict[str, np.ndarray], family: str) -> np.ndarray:
    grids = dict(bands)
    grids["LLL"] = coarse
    # Invert axis by axis, last axis first: merge pairs differing in letter 2,
    # then letter 1, then letter 0.
    for axis in (2, 1, 0):
        merged: dict[str, np.ndarray] = {}
        for tag in {t[:axis] for t in grids}:
            lo = grids[tag + "L"]
            hi = grids[tag + "H"]
            merged[tag] = _synthesis_axis(lo, hi, family, axis=axis)
        grids = merged
    return grids[""]


def dwt3(volume: TsdfVolume, levels: int = 1, family: str = "haar") -> WaveletVolume:
    """Forward multilevel transform of a clamped distance volume."""
    if levels < 1:
        raise ValueError("levels must be at least 1")
    if family not in _FILTERS:
        raise ValueError(f"unknown wavelet family {family!r}; choose from {FAMILY_TAGS}")
    r = volume.resolution
    if r % (1 << levels):
        raise ValueError(f"resolution {r} is not divisible by 2^{levels}")
    grid = volume.values.astype(np.float32)
    details: list[dict[str, np.ndarray]] = []
    for _ in range(levels):
        grid, bands = _split_once(grid, family)
        details.append(bands)
    return WaveletVolume(family, levels, r, volume.truncation, grid, details)


def idwt3(wv: WaveletVolume) -> TsdfVolume:
    """Inverse transform back to a distance volume (perfect reconstruction)."""
    grid = wv.coarse
    for bands in reversed(wv.details):
        grid = _merge_once(grid, bands, wv.family)
    return TsdfVolume(wv.resolution, wv.truncation, grid.astype(np.float32))


def _check_index(wv: WaveletVolume, coefficient_index) -> tuple[int, str, tuple[int, int, int]]:
    level, subband, i, j, k = coefficient_index
    level = int(level)
    if not 1 <= level <= wv.levels:
        raise ValueError(f"level {level} outside 1..{wv.levels}")
    if subband == "LLL" and level != wv.levels:
        raise ValueError("LLL (coarse) exists only at the deepest level")
    if subband != "LLL" and subband not in SUBBAND_ORDER:
        raise ValueError(f"unknown subband {subband!r}")
    side = wv.resolution >> level
    pos = (int(i), int(j), int(k))
    if not all(0 <= p < side for p in pos):
        raise ValueError(f"index {pos} outside the {side}³ level-{level} grid")
    return level, subband, pos


def support_mask(wv: WaveletVolume, coefficient_index) -> np.ndarray:
    """Boolean R³ mask of voxels a single coefficient can influence.

    ``coefficient_index`` is (level, subband, i, j, k) with subband one of
    the seven detail tags, or "LLL" at the deepest level for the coarse
    grid.  Haar masks are the aligned 2^level-blocks; other families
    reconstruct a unit coefficient and report its exact nonzero footprint.
    """
    level, subband, pos = _check_index(wv, coefficient_index)
    r = wv.resolution
    mask = np.zeros((r,) * 3, dtype=bool)
    if wv.family == "haar":
        b = 1 << level
        sl = tuple(slice(p * b, (p + 1) * b) for p in pos)
        mask[sl] = True
        return mask
    probe = WaveletVolume(
        wv.family,
        wv.levels,
        r,
        wv.truncation,
        np.zeros_like(wv.coarse, dtype=np.float64),
        [{tag: np.zeros_like(b, dtype=np.float64) for tag, b in bands.items()} for bands in wv.details],
    )
    if subband == "LLL":
        probe.coarse[pos] = 1.0
    else:
        probe.details[level - 1][subband][pos] = 1.0
    grid = probe.coarse
    for bands in reversed(probe.details):
        grid = _merge_once(grid, bands, probe.family)
    return grid != 0.0


def save_wavelet(wv: WaveletVolume, path: str | Path) -> None:
    """Write header then coarse and per-level subbands, coarsest level first."""
    path = Path(path)
    r = wv.resolution
    header = WAV3_MAGIC + struct.pack(
        "<HBBHHHf",
        WAV3_VERSION,
        _FAMILY_CODES[wv.family],
        wv.levels,
        r,
        r,
        r,
        np.float32(wv.truncation),
    )
    chunks = [header, np.ascontiguousarray(wv.coarse, dtype="<f4").ravel(order="F").tobytes()]
    for bands in reversed(wv.details):
        for tag in SUBBAND_ORDER:
            chunks.append(np.ascontiguousarray(bands[tag], dtype="<f4").ravel(order="F").tobytes())
    path.write_bytes(b"".join(chunks))


def load_wavelet(path: str | Path) -> WaveletVolume:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != WAV3_MAGIC:
        raise ValueError(f"{path}: not a wavelet volume (bad magic)")
    version, code, levels, rx, ry, rz, trunc = struct.unpack_from("<HBBHHHf", blob, 4)
    if version != WAV3_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if code >= len(FAMILY_TAGS):
        raise ValueError(f"{path}: unknown family code {code}")
    if rx != ry or ry != rz:
        raise ValueError(f"{path}: only cubic volumes are supported")
    family = FAMILY_TAGS[code]
    offset = 4 + struct.calcsize("<HBBHHHf")

    def take(side: int) -> np.ndarray:
        nonlocal offset
        count = side**3
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        if arr.size != count:
            raise ValueError(f"{path}: truncated payload")
        offset += 4 * count
        return arr.reshape((side,) * 3, order="F").copy()

    coarse = take(rx >> levels)
    details: list[dict[str, np.ndarray]] = []
    for lvl in range(levels, 0, -1):
        details.append({tag: take(rx >> lvl) for tag in SUBBAND_ORDER})
    details.reverse()
    return WaveletVolume(family, levels, int(rx), float(trunc), coarse, details)
