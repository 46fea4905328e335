"""The coupled editing state: a latent code paired with its feature volume.

Editing operates on two views of one shape at once: the global latent code z
that conditions the denoiser, and a C-channel spatial feature volume F read
from a chosen output layer of a single denoiser pass over a frozen, partially
denoised volume.  F is a pure, differentiable function of z given that frozen
volume, so objectives phrased as feature targets at spatial locations can be
pushed back into z by gradient descent.

This module builds the state (encode, refine, partially denoise, extract),
maps user selections from normalized shape coordinates into F's voxel grid,
and serializes the state so editing can resume without re-encoding.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network
from .diffusion import (
    Checkpoint,
    array_to_wavelet,
    checkpoint_digest,
    denoise_to,
    encode,
    normalize_channels,
    refine_latent,
    wavelet_to_array,
)
from .wavelet import WaveletVolume

__all__ = [
    "CouplingConfig",
    "FeatureVolume",
    "CoupledState",
    "extract_features",
    "extraction_context",
    "build_cns",
    "map_coords",
    "save_state",
    "load_state",
]

STATE_MAGIC = b"CPLD"
STATE_VERSION = 1


@dataclass(frozen=True)
class CouplingConfig:
    """Where the feature volume is read from: timestep, layer, and noise seed."""

    t: int = 200
    layer_j: int = 12
    seed: int = 0
    refine_steps: int = 100
    refine_lr: float = 1e-2

    def __post_init__(self) -> None:
        if not 1 <= self.layer_j <= network.OUTPUT_LAYER_COUNT:
            raise ValueError(f"layer index {self.layer_j} outside 1..{network.OUTPUT_LAYER_COUNT}")
        if self.t <= 0:
            raise ValueError(f"extraction timestep must be positive, got {self.t}")
        if self.refine_steps < 0:
            raise ValueError("refinement step count must be non-negative")


def _validate_against(config: CouplingConfig, ckpt: Checkpoint) -> None:
    if not 0 < config.t < ckpt.config.t_steps:
        raise ValueError(
            f"extraction timestep {config.t} outside (0, {ckpt.config.t_steps}) for this checkpoint"
        )


def map_coords(points, side: int) -> np.ndarray:
    """Affine map from normalized [-1, 1]³ selections to voxel coordinates.

    (-1,-1,-1) lands on voxel (0,0,0) and the normalized center on the grid
    center ((side-1)/2, ...).  Continuous outputs are allowed; selections
    outside the normalized cube are rejected because they would leave the
    feature grid.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ValueError(f"expected 3-component coordinates, got shape {pts.shape}")
    if np.any(np.abs(pts) > 1.0 + 1e-9):
        raise ValueError("selection leaves the normalized [-1, 1] cube")
    return (pts + 1.0) * ((side - 1) / 2.0)


@dataclass
class FeatureVolume:
    """C-channel feature grid plus the provenance that produced it.

    ``tensor`` keeps the autodiff node so objectives evaluated against the
    volume can reach back to the latent code that generated it.
    """

    tensor: ad.Tensor
    provenance: dict

    def __post_init__(self) -> None:
        if self.tensor.data.ndim != 4:
            raise ValueError(f"feature volume must be (C, D, H, W), got {self.tensor.data.shape}")
        if not np.all(np.isfinite(self.tensor.data)):
            raise ValueError("feature volume contains non-finite entries")

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def channels(self) -> int:
        return self.tensor.data.shape[0]

    @property
    def side(self) -> int:
        return self.tensor.data.shape[1]

    def norm_to_voxel(self, points) -> np.ndarray:
        return map_coords(points, self.side)

    def voxel_to_norm(self, coords) -> np.ndarray:
        pts = np.asarray(coords, dtype=np.float64)
        return pts / ((self.side - 1) / 2.0) - 1.0


def _z_digest(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z, dtype=np.float32).tobytes()).hexdigest()


def extract_features(x_t: WaveletVolume, z, config: CouplingConfig, ckpt: Checkpoint) -> FeatureVolume:
    """One denoiser pass over the frozen volume, stopped after output layer J.

    ``z`` may be a plain array or an autodiff tensor; passing a tensor with
    gradients enabled makes the returned volume differentiable with respect
    to it.  The frozen volume and the network weights never receive
    gradients.
    """
    feature, _skips = extraction_context(x_t, z, config, ckpt)
    return feature


def extraction_context(
    x_t: WaveletVolume, z, config: CouplingConfig, ckpt: Checkpoint
) -> tuple[FeatureVolume, dict[str, np.ndarray]]:
    """Like :func:`extract_features`, also returning the encoder-side skip
    activations of the same pass, which :func:`network.complete_from` needs to
    re-run the remaining layers over an edited copy of F."""
    cfg = ckpt.config
    _validate_against(config, ckpt)
    arr = normalize_channels(wavelet_to_array(x_t), cfg)
    z_t = z if isinstance(z, ad.Tensor) else ad.Tensor(np.asarray(z, dtype=np.float32))
    params = ckpt.param_tensors()
    _, acts, skips = network.unet_forward(
        params, cfg, ad.Tensor(arr[None]), config.t, z_t, collect=True, stop_at_layer=config.layer_j
    )
    feature5 = acts[config.layer_j - 1]
    feature = ad.reshape(feature5, feature5.data.shape[1:])
    provenance = {
        "z_sha256": _z_digest(z_t.data),
        "t": config.t,
        "layer_j": config.layer_j,
        "seed": config.seed,
    }
    return FeatureVolume(tensor=feature, provenance=provenance), {k: v.data[0] for k, v in skips.items()}


@dataclass
class CoupledState:
    """Everything editing needs: z, the frozen partially denoised volume, F."""

    z: np.ndarray
    x_t: WaveletVolume
    feature: FeatureVolume
    config: CouplingConfig


def build_cns(volume: WaveletVolume, ckpt: Checkpoint, config: CouplingConfig | None = None) -> CoupledState:
    """Encode, refine, partially denoise, and extract — the full state build.

    The partially denoised volume is produced once from the refined code and
    the configured noise seed, then frozen: every later re-extraction runs
    over the same volume so the feature grid is a pure function of z.
    """
    config = config if config is not None else CouplingConfig()
    _validate_against(config, ckpt)
    z_raw = encode(volume, ckpt)
    z = refine_latent(
        z_raw, volume, ckpt, steps=config.refine_steps, lr=config.refine_lr, seed=config.seed
    )
    x_t = denoise_to(z, config.seed, config.t, ckpt)
    feature = extract_features(x_t, z, config, ckpt)
    return CoupledState(z=z, x_t=x_t, feature=feature, config=config)


# ---------------------------------------------------------------------------
# Serialization


def save_state(state: CoupledState, path: str | Path, ckpt: Checkpoint) -> None:
    """Versioned binary dump of (z, x_t, config, checkpoint digest)."""
    buf = io.BytesIO()
    buf.write(STATE_MAGIC)
    buf.write(struct.pack("<H", STATE_VERSION))
    buf.write(bytes.fromhex(checkpoint_digest(ckpt)))
    cfg = state.config
    buf.write(struct.pack("<IBqId", cfg.t, cfg.layer_j, cfg.seed, cfg.refine_steps, cfg.refine_lr))
    z = np.ascontiguousarray(state.z, dtype="<f4")
    buf.write(struct.pack("<I", z.size))
    buf.write(z.tobytes())
    arr = np.ascontiguousarray(wavelet_to_array(state.x_t), dtype="<f4")
    buf.write(struct.pack("<HH", arr.shape[0], arr.shape[1]))
    buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_state(path: str | Path, ckpt: Checkpoint) -> CoupledState:
    """Rebuild a saved state, re-extracting F so the cached-F invariant holds.

    The stored checkpoint digest must match ``ckpt``: a state is only
    meaningful against the exact weights that produced it.
    """
    blob = Path(path).read_bytes()
    if blob[:4] != STATE_MAGIC:
        raise ValueError(f"{path}: not a coupled-state file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != STATE_VERSION:
        raise ValueError(f"{path}: unsupported state version {version}")
    digest = blob[6:38].hex()
    if digest != checkpoint_digest(ckpt):
        raise ValueError(f"{path}: state was built against a different checkpoint")
    t, layer_j, seed, refine_steps, refine_lr = struct.unpack_from("<IBqId", blob, 38)
    offset = 38 + struct.calcsize("<IBqId")
    (z_size,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    z = np.frombuffer(blob, dtype="<f4", count=z_size, offset=offset).copy()
    offset += 4 * z_size
    channels, side = struct.unpack_from("<HH", blob, offset)
    offset += 4
    count = channels * side**3
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(
        channels, side, side, side
    ).copy()
    config = CouplingConfig(
        t=t, layer_j=layer_j, seed=seed, refine_steps=refine_steps, refine_lr=refine_lr
    )
    x_t = array_to_wavelet(arr, ckpt.config)
    feature = extract_features(x_t, z, config, ckpt)
    return CoupledState(z=z, x_t=x_t, feature=feature, config=config)
