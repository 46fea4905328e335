"""Diffusion shape autoencoder: training, encoding, and deterministic sampling.

The model operates on 8-channel grids packing a one-level wavelet pyramid
(coarse plus seven detail subbands) of a clamped distance volume.  Channels
are brought to unit-ish scale by per-channel power-of-two factors chosen at
training time; powers of two make normalize/denormalize exactly invertible
in float32, which keeps trajectory splitting bit-exact.

Sampling is deterministic (variance-zero updates): from a seeded Gaussian
the reverse process walks t = T-1 down to any stop index, and
:func:`decode_from` continues a partially denoised volume to t=0 so that
stopping and resuming reproduces the uninterrupted trajectory bit for bit.

Checkpoints serialize a canonical-JSON config followed by a name-sorted
tensor directory; loading and re-saving is byte-stable.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network
from .wavelet import SUBBAND_ORDER, WaveletVolume

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "NoiseSchedule",
    "Checkpoint",
    "train",
    "encode",
    "refine_latent",
    "denoise_to",
    "decode_from",
    "wavelet_to_array",
    "array_to_wavelet",
    "normalize_channels",
    "denormalize_channels",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "checkpoint_digest",
    "parse_kv_file",
]

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture and data-domain settings captured in every checkpoint."""

    resolution: int = 32
    truncation: float = 0.1
    wavelet_family: str = "haar"
    levels: int = 1
    channels: int = 8
    width: int = 32
    latent_dim: int = 128
    temb_dim: int = 64
    gn_groups: int = 8
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    scale_exponents: tuple[int, ...] | None = None

    @property
    def grid_side(self) -> int:
        return self.resolution >> self.levels

    def __post_init__(self) -> None:
        if self.levels != 1:
            raise ValueError("the diffusion domain packs a one-level pyramid; levels must be 1")
        if self.channels != 8:
            raise ValueError("channel count is fixed by the one-level pyramid (coarse + 7 subbands)")
        if self.resolution % 2 or self.grid_side % 8:
            raise ValueError(f"resolution {self.resolution} incompatible with the three-level down path")
        if self.scale_exponents is not None:
            self.scale_exponents = tuple(int(e) for e in self.scale_exponents)
            if len(self.scale_exponents) != self.channels:
                raise ValueError("need one scale exponent per channel")


@dataclass
class TrainConfig:
    steps: int = 2500
    batch_size: int = 16
    lr: float = 2e-3
    lr_floor: float = 0.1  # cosine-decay endpoint, as a fraction of lr
    warmup: int = 50
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 100


@dataclass
class NoiseSchedule:
    """Linear-beta schedule with cached cumulative products."""

    t_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, t_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, t_steps, dtype=np.float64)
        alphas = 1.0 - betas
        alpha_bar = np.cumprod(alphas)
        return cls(t_steps, betas, alphas, alpha_bar)

    def __post_init__(self) -> None:
        if len(self.betas) != self.t_steps:
            raise ValueError("beta count does not match step count")
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.betas) < 0.0):
            raise ValueError("betas must be non-decreasing")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha-bar must be strictly decreasing")


def schedule_for(cfg: ModelConfig) -> NoiseSchedule:
    return NoiseSchedule.linear(cfg.t_steps, cfg.beta_start, cfg.beta_end)


@dataclass
class Checkpoint:
    """Trained parameters plus the config needed to use them."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    version: int = CKPT_VERSION
    train_losses: list[float] = field(default_factory=list, repr=False)

    def param_tensors(self, trainable: bool = False) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=trainable) for k, v in self.params.items()}


# ---------------------------------------------------------------------------
# Channel packing and scaling


def wavelet_to_array(wv: WaveletVolume) -> np.ndarray:
    """Pack a one-level pyramid as (8, n, n, n): coarse then detail subbands."""
    if wv.levels != 1:
        raise ValueError(f"expected a one-level pyramid, got {wv.levels} levels")
    return np.stack([wv.coarse] + [wv.details[0][tag] for tag in SUBBAND_ORDER]).astype(np.float32)


def array_to_wavelet(arr: np.ndarray, cfg: ModelConfig) -> WaveletVolume:
    side = cfg.grid_side
    if arr.shape != (8, side, side, side):
        raise ValueError(f"expected (8, {side}, {side}, {side}), got {arr.shape}")
    details = {tag: arr[i + 1].copy() for i, tag in enumerate(SUBBAND_ORDER)}
    return WaveletVolume(cfg.wavelet_family, 1, cfg.resolution, cfg.truncation, arr[0].copy(), [details])


def normalize_channels(arr: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Scale each channel by its power-of-two factor (exact in float32)."""
    exps = np.asarray(cfg.scale_exponents, dtype=np.int32).reshape(-1, 1, 1, 1)
    return np.ldexp(arr.astype(np.float32), exps)


def denormalize_channels(arr: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    exps = np.asarray(cfg.scale_exponents, dtype=np.int32).reshape(-1, 1, 1, 1)
    return np.ldexp(arr.astype(np.float32), -exps)


def _scale_exponents_from(data: np.ndarray) -> tuple[int, ...]:
    """Per-channel exponent k with std(channel · 2^k) nearest 1."""
    exps = []
    for c in range(data.shape[1]):
        std = float(data[:, c].std(dtype=np.float64))
        if std <= 0.0 or not np.isfinite(std):
            exps.append(0)
        else:
            exps.append(int(np.clip(round(-np.log2(std)), -20, 20)))
    return tuple(exps)


def _check_volume(wv: WaveletVolume, cfg: ModelConfig) -> None:
    if wv.resolution != cfg.resolution or wv.family != cfg.wavelet_family or wv.levels != cfg.levels:
        raise ValueError(
            f"volume (R={wv.resolution}, family={wv.family}, L={wv.levels}) does not match "
            f"checkpoint (R={cfg.resolution}, family={cfg.wavelet_family}, L={cfg.levels})"
        )


# ---------------------------------------------------------------------------
# Training


def train(dataset, config: TrainConfig, model_cfg: ModelConfig | None = None) -> Checkpoint:
    """DDPM noise-prediction training conditioned on encoded latent codes.

    ``dataset`` is a sequence of one-level WaveletVolumes with equal dims.
    Deterministic for a fixed ``config.seed``.
    """
    volumes = list(dataset)
    if not volumes:
        raise ValueError("training dataset is empty")
    cfg = replace(model_cfg) if model_cfg is not None else ModelConfig()
    cfg = replace(cfg, resolution=volumes[0].resolution, wavelet_family=volumes[0].family)
    for wv in volumes:
        _check_volume(wv, cfg)
    raw = np.stack([wavelet_to_array(wv) for wv in volumes])
    cfg = replace(cfg, scale_exponents=_scale_exponents_from(raw))
    data = np.stack([normalize_channels(x, cfg) for x in raw])
    n = data.shape[0]

    rng = np.random.default_rng(config.seed)
    params = network.init_params(cfg, rng)
    opt = ad.Adam([params[k] for k in sorted(params)], lr=config.lr)
    sched = schedule_for(cfg)
    sqrt_ab = np.sqrt(sched.alpha_bar).astype(np.float32)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bar).astype(np.float32)

    losses: list[float] = []
    for step in range(config.steps):
        warm = min(1.0, (step + 1) / config.warmup) if config.warmup else 1.0
        frac = step / max(1, config.steps - 1)
        decay = config.lr_floor + (1.0 - config.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
        opt.lr = config.lr * warm * decay
        idx = rng.integers(0, n, size=config.batch_size)
        t = rng.integers(0, cfg.t_steps, size=config.batch_size)
        eps = rng.standard_normal(size=(config.batch_size,) + data.shape[1:], dtype=np.float32)
        x0 = data[idx]
        mix = sqrt_ab[t].reshape(-1, 1, 1, 1, 1) * x0 + sqrt_1mab[t].reshape(-1, 1, 1, 1, 1) * eps
        z = network.encoder_forward(params, cfg, ad.Tensor(x0))
        eps_hat = network.unet_forward(params, cfg, ad.Tensor(mix), t, z)
        loss = ad.mse_loss(eps_hat, ad.Tensor(eps))
        opt.zero_grad()
        ad.backward(loss)
        gnorm = ad.clip_grad_norm(opt.params, config.clip_norm)
        if np.isfinite(loss.data) and np.isfinite(gnorm):
            opt.step()
        else:
            log.warning("train step %d/%d skipped (loss %g, grad norm %g)",
                        step, config.steps, float(loss.data), gnorm)
        losses.append(float(loss.data))
        if config.log_every and step % config.log_every == 0:
            log.info("train step %d/%d loss %.5f", step, config.steps, losses[-1])
    return Checkpoint(config=cfg, params={k: params[k].data.copy() for k in sorted(params)}, train_losses=losses)


# ---------------------------------------------------------------------------
# Inference


def encode(volume: WaveletVolume, ckpt: Checkpoint) -> np.ndarray:
    """Deterministic latent code of a clean wavelet volume."""
    cfg = ckpt.config
    _check_volume(volume, cfg)
    arr = normalize_channels(wavelet_to_array(volume), cfg)
    params = ckpt.param_tensors()
    z = network.encoder_forward(params, cfg, ad.Tensor(arr[None]))
    return z.data[0].copy()


def refine_latent(
    z_init: np.ndarray,
    volume: WaveletVolume,
    ckpt: Checkpoint,
    steps: int = 100,
    lr: float = 1e-2,
    seed: int = 0,
) -> np.ndarray:
    """Descend the noise-prediction loss of ``volume`` with respect to z only.

    The network stays frozen.  The loss averages over a fixed batch of
    stratified timesteps with noise drawn once from ``seed``, so refinement
    is reproducible and its objective does not drift between steps.
    """
    cfg = ckpt.config
    _check_volume(volume, cfg)
    if steps == 0:
        return np.asarray(z_init, dtype=np.float32).copy()
    x0 = normalize_channels(wavelet_to_array(volume), cfg)
    rng = np.random.default_rng(seed)
    strata = 8
    edges = np.linspace(0, cfg.t_steps, strata + 1).astype(np.int64)
    t_batch = np.array([rng.integers(edges[i], edges[i + 1]) for i in range(strata)])
    eps = rng.standard_normal(size=(strata,) + x0.shape, dtype=np.float32)
    sched = schedule_for(cfg)
    sab = np.sqrt(sched.alpha_bar[t_batch]).astype(np.float32).reshape(-1, 1, 1, 1, 1)
    s1m = np.sqrt(1.0 - sched.alpha_bar[t_batch]).astype(np.float32).reshape(-1, 1, 1, 1, 1)
    x_t = ad.Tensor(sab * x0[None] + s1m * eps)
    eps_target = ad.Tensor(eps)

    params = ckpt.param_tensors()
    z = ad.Tensor(np.asarray(z_init, dtype=np.float32).copy(), requires_grad=True)
    opt = ad.Adam([z], lr=lr)
    for _ in range(steps):
        eps_hat = network.unet_forward(params, cfg, x_t, t_batch, z)
        loss = ad.mse_loss(eps_hat, eps_target)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
    return z.data.copy()


def denoising_loss(z: np.ndarray, volume: WaveletVolume, ckpt: Checkpoint, seed: int = 0) -> float:
    """The refine_latent objective at a fixed z (for before/after comparisons)."""
    cfg = ckpt.config
    x0 = normalize_channels(wavelet_to_array(volume), cfg)
    rng = np.random.default_rng(seed)
    strata = 8
    edges = np.linspace(0, cfg.t_steps, strata + 1).astype(np.int64)
    t_batch = np.array([rng.integers(edges[i], edges[i + 1]) for i in range(strata)])
    eps = rng.standard_normal(size=(strata,) + x0.shape, dtype=np.float32)
    sched = schedule_for(cfg)
    sab = np.sqrt(sched.alpha_bar[t_batch]).astype(np.float32).reshape(-1, 1, 1, 1, 1)
    s1m = np.sqrt(1.0 - sched.alpha_bar[t_batch]).astype(np.float32).reshape(-1, 1, 1, 1, 1)
    params = ckpt.param_tensors()
    eps_hat = network.unet_forward(
        params, cfg, ad.Tensor(sab * x0[None] + s1m * eps), t_batch, ad.Tensor(np.asarray(z, dtype=np.float32))
    )
    return float(ad.mse_loss(eps_hat, ad.Tensor(eps)).data)


def _reverse_step(x: np.ndarray, eps_hat: np.ndarray, s: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (variance-zero) update from timestep s to s-1."""
    ab_s = np.float32(np.sqrt(sched.alpha_bar[s]))
    om_s = np.float32(np.sqrt(1.0 - sched.alpha_bar[s]))
    ab_p = np.float32(np.sqrt(sched.alpha_bar[s - 1]))
    om_p = np.float32(np.sqrt(1.0 - sched.alpha_bar[s - 1]))
    x0_pred = (x - om_s * eps_hat) / ab_s
    return ab_p * x0_pred + om_p * eps_hat


def _predict_eps(params, cfg: ModelConfig, x: np.ndarray, s: int, z_t: ad.Tensor) -> np.ndarray:
    out = network.unet_forward(params, cfg, ad.Tensor(x[None]), s, z_t)
    return out.data[0]


def denoise_to(z: np.ndarray, noise_seed: int, t_stop: int, ckpt: Checkpoint) -> WaveletVolume:
    """Walk the deterministic reverse process from seeded noise down to t_stop.

    The seeded Gaussian is the state at index T-1, so valid stop indices are
    0 ≤ t_stop ≤ T-1 and t_stop = T-1 returns the seed itself.
    """
    cfg = ckpt.config
    if not 0 <= t_stop < cfg.t_steps:
        raise ValueError(f"t_stop must lie in [0, {cfg.t_steps - 1}], got {t_stop}")
    side = cfg.grid_side
    rng = np.random.default_rng(noise_seed)
    x = rng.standard_normal(size=(cfg.channels, side, side, side), dtype=np.float32)
    sched = schedule_for(cfg)
    params = ckpt.param_tensors()
    z_t = ad.Tensor(np.asarray(z, dtype=np.float32))
    for s in range(cfg.t_steps - 1, t_stop, -1):
        x = _reverse_step(x, _predict_eps(params, cfg, x, s, z_t), s, sched)
    return array_to_wavelet(denormalize_channels(x, cfg), cfg)


def decode_from(x_t: WaveletVolume, z: np.ndarray, t: int, ckpt: Checkpoint) -> WaveletVolume:
    """Continue the deterministic reverse process from timestep t down to 0."""
    cfg = ckpt.config
    _check_volume(x_t, cfg)
    if not 0 <= t < cfg.t_steps:
        raise ValueError(f"t must lie in [0, {cfg.t_steps - 1}], got {t}")
    x = normalize_channels(wavelet_to_array(x_t), cfg)
    sched = schedule_for(cfg)
    params = ckpt.param_tensors()
    z_t = ad.Tensor(np.asarray(z, dtype=np.float32))
    for s in range(t, 0, -1):
        x = _reverse_step(x, _predict_eps(params, cfg, x, s, z_t), s, sched)
    return array_to_wavelet(denormalize_channels(x, cfg), cfg)


# ---------------------------------------------------------------------------
# Checkpoint files


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Canonical serialized form: config as sorted JSON, tensors name-sorted."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", ckpt.version))
    cfg_json = json.dumps(asdict(ckpt.config), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    names = sorted(ckpt.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def checkpoint_digest(ckpt: Checkpoint) -> str:
    """SHA-256 of the canonical serialized checkpoint."""
    return hashlib.sha256(checkpoint_bytes(ckpt)).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, 6)
    offset = 10
    cfg_dict = json.loads(blob[offset : offset + cfg_len].decode())
    offset += cfg_len
    cfg = ModelConfig(**cfg_dict)
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape).copy()
        offset += 4 * size
        params[name] = arr
    return Checkpoint(config=cfg, params=params, version=version)


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Plain-text key=value configuration (blank lines and # comments ignored)."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out
