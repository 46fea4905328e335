"""The denoising U-Net and shape encoder, built on the autodiff engine.

The denoiser takes an 8-channel wavelet grid, an integer timestep, and a
global latent code.  Conditioning enters every block: the timestep as a
per-channel bias, the latent code as a per-channel affine modulation.  The
decoder side is an ordered stack of exactly 16 retrievable layers:

    o1–o3    residual blocks at 4x downsampling (4·width channels)
    o4       upsample + 3³ conv to 2·width
    o5       skip-add of the mid-resolution encoder feature, then a block
    o6–o9    residual blocks at 2x downsampling
    o10      upsample + 3³ conv to width
    o11      skip-add of the full-resolution encoder feature, then a block
    o12–o16  residual blocks at full resolution

followed by a SiLU + 3³ conv head projecting back to the data channels.
Output-stage blocks use no normalization of any kind: group statistics
would couple every voxel to every other and destroy the bounded receptive
field that localized feature edits rely on (encoder and bottleneck blocks,
whose outputs are only consumed globally, do use GroupNorm).  Each output
block is a single modulated convolution around a residual add, so the
footprint of a one-voxel change grows by exactly one voxel per remaining
layer; :func:`receptive_radius_after` reports the composed radius.

The shape encoder is a small strided conv stack that maps a clean wavelet
grid to the latent vector.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = [
    "init_params",
    "unet_forward",
    "complete_from",
    "encoder_forward",
    "receptive_radius_after",
    "feature_channels",
    "feature_side",
    "params_to_dtype",
    "OUTPUT_LAYER_COUNT",
]

OUTPUT_LAYER_COUNT = 16

# Output-stage descriptor: (layer kind, downsampling factor of its grid,
# optional skip tag).  Kinds: "block" = modulated residual conv,
# "up" = nearest upsample + conv, "skip_block" = skip-add then block.
_OUTPUT_STAGE = (
    ("block", 4, None),  # o1
    ("block", 4, None),  # o2
    ("block", 4, None),  # o3
    ("up", 2, None),  # o4
    ("skip_block", 2, "e2"),  # o5
    ("block", 2, None),  # o6
    ("block", 2, None),  # o7
    ("block", 2, None),  # o8
    ("block", 2, None),  # o9
    ("up", 1, None),  # o10
    ("skip_block", 1, "e1"),  # o11
    ("block", 1, None),  # o12
    ("block", 1, None),  # o13
    ("block", 1, None),  # o14
    ("block", 1, None),  # o15
    ("block", 1, None),  # o16
)


def _width_at(factor: int, width: int) -> int:
    return width * {1: 1, 2: 2, 4: 4}[factor]


def feature_channels(j: int, width: int) -> int:
    """Channel count of the activation after output layer j."""
    if not 1 <= j <= OUTPUT_LAYER_COUNT:
        raise ValueError(f"layer index {j} outside 1..{OUTPUT_LAYER_COUNT}")
    return _width_at(_OUTPUT_STAGE[j - 1][1], width)


def feature_side(j: int, grid: int) -> int:
    """Spatial side length of the activation after output layer j."""
    if not 1 <= j <= OUTPUT_LAYER_COUNT:
        raise ValueError(f"layer index {j} outside 1..{OUTPUT_LAYER_COUNT}")
    return grid // _OUTPUT_STAGE[j - 1][1]


def receptive_radius_after(j: int) -> int:
    """L∞ radius (full-resolution voxels) reachable by layers after j.

    Walked off the descriptor: each 3³ conv adds one voxel at its own grid,
    nearest upsampling doubles the accumulated radius and adds the block
    extent, and the output head contributes its final conv.
    """
    if not 1 <= j <= OUTPUT_LAYER_COUNT:
        raise ValueError(f"layer index {j} outside 1..{OUTPUT_LAYER_COUNT}")
    radius = 0
    for kind, _factor, _skip in _OUTPUT_STAGE[j:]:
        if kind == "up":
            radius = 2 * radius + 1  # block extent of nearest upsampling
            radius += 1  # the up conv
        else:
            radius += 1  # block conv (skip adds are pointwise)
    return radius + 1  # head conv


# ---------------------------------------------------------------------------
# Parameter initialization


def _conv_shape(c_out: int, c_in: int) -> tuple[int, ...]:
    return (c_out, c_in, 3, 3, 3)


def init_params(cfg, rng: np.random.Generator) -> dict[str, ad.Tensor]:
    """Create all encoder and denoiser parameters, seeded and name-addressed."""
    w = cfg.width
    d = cfg.latent_dim
    temb = cfg.temb_dim
    ch = cfg.channels
    p: dict[str, np.ndarray] = {}

    def conv(name: str, c_out: int, c_in: int, gain: float = 1.0) -> None:
        fan_in = c_in * 27
        p[name + ".w"] = gain * np.sqrt(2.0 / fan_in) * rng.standard_normal(_conv_shape(c_out, c_in))
        p[name + ".b"] = np.zeros(c_out)

    def dense(name: str, n_out: int, n_in: int, std: float | None = None) -> None:
        scale = np.sqrt(1.0 / n_in) if std is None else std
        p[name + ".w"] = scale * rng.standard_normal((n_out, n_in))
        p[name + ".b"] = np.zeros(n_out)

    def norm(name: str, c: int) -> None:
        p[name + ".g"] = np.ones(c)
        p[name + ".b"] = np.zeros(c)

    def modulation(name: str, c: int) -> None:
        dense(name + ".t", c, temb, std=0.1)
        dense(name + ".zs", c, d, std=0.02)
        dense(name + ".zt", c, d, std=0.02)

    def enc_block(name: str, c: int) -> None:
        norm(name + ".gn1", c)
        conv(name + ".conv1", c, c)
        modulation(name, c)
        norm(name + ".gn2", c)
        conv(name + ".conv2", c, c, gain=0.1)

    def out_block(name: str, c: int) -> None:
        modulation(name, c)
        conv(name + ".conv", c, c, gain=0.1)

    # Timestep MLP shared by all blocks.
    dense("unet.tmlp.l1", temb, temb)
    dense("unet.tmlp.l2", temb, temb)
    # Denoiser encoder path.
    conv("unet.in", w, ch)
    enc_block("unet.e1", w)
    conv("unet.d1", 2 * w, w)
    enc_block("unet.e2", 2 * w)
    conv("unet.d2", 4 * w, 2 * w)
    enc_block("unet.mid", 4 * w)
    # Output stage.
    for i, (kind, factor, _skip) in enumerate(_OUTPUT_STAGE, start=1):
        c = _width_at(factor, w)
        if kind == "up":
            conv(f"unet.o{i}", c, 2 * c)
        else:
            out_block(f"unet.o{i}", c)
    # Near-zero head: the model starts by predicting ~0 noise, which keeps the
    # first optimizer steps at unit-scale loss instead of amplifying the heavy
    # tails of the normalized detail channels.
    conv("unet.head", ch, w, gain=0.01)
    # Shape encoder producing the latent code.
    conv("enc.c1", w, ch)
    norm("enc.gn1", w)
    conv("enc.c2", 2 * w, w)
    norm("enc.gn2", 2 * w)
    conv("enc.c3", 4 * w, 2 * w)
    norm("enc.gn3", 4 * w)
    # Small code scale at init keeps the per-block affine modulations gentle
    # until training grows them deliberately.
    dense("enc.fc", d, 4 * w * (cfg.grid_side // 8) ** 3, std=0.02)
    return {k: ad.Tensor(v.astype(np.float32), requires_grad=True) for k, v in p.items()}


def params_to_dtype(params: dict[str, ad.Tensor], dtype) -> dict[str, ad.Tensor]:
    """A copy of the parameter store in another float dtype (for validation)."""
    return {k: ad.Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in params.items()}


# ---------------------------------------------------------------------------
# Forward passes


def _dense(p, name: str, x: ad.Tensor) -> ad.Tensor:
    return ad.linear(x, p[name + ".w"], p[name + ".b"])


def _modulate(p, name: str, h: ad.Tensor, temb: ad.Tensor, z: ad.Tensor) -> ad.Tensor:
    h = ad.channel_bias(h, _dense(p, name + ".t", temb))
    return ad.channel_affine(h, _dense(p, name + ".zs", z), _dense(p, name + ".zt", z))


def _enc_block(p, name: str, x: ad.Tensor, temb: ad.Tensor, z: ad.Tensor, groups: int) -> ad.Tensor:
    h = ad.group_norm(x, p[name + ".gn1.g"], p[name + ".gn1.b"], groups=groups)
    h = ad.conv3(ad.silu(h), p[name + ".conv1.w"], p[name + ".conv1.b"], padding=1)
    h = _modulate(p, name, h, temb, z)
    h = ad.group_norm(h, p[name + ".gn2.g"], p[name + ".gn2.b"], groups=groups)
    h = ad.conv3(ad.silu(h), p[name + ".conv2.w"], p[name + ".conv2.b"], padding=1)
    return ad.add(x, h)


def _out_block(p, name: str, x: ad.Tensor, temb: ad.Tensor, z: ad.Tensor) -> ad.Tensor:
    h = _modulate(p, name, ad.silu(x), temb, z)
    h = ad.conv3(h, p[name + ".conv.w"], p[name + ".conv.b"], padding=1)
    return ad.add(x, h)


def _time_embedding(p, cfg, t) -> ad.Tensor:
    temb = ad.timestep_embed(t, cfg.temb_dim)
    h = ad.silu(_dense(p, "unet.tmlp.l1", temb))
    return _dense(p, "unet.tmlp.l2", h)


def unet_forward(
    p: dict[str, ad.Tensor],
    cfg,
    x: ad.Tensor,
    t,
    z: ad.Tensor,
    *,
    collect: bool = False,
    stop_at_layer: int | None = None,
):
    """Predict noise for (B, C, n, n, n) input at timestep(s) t, code z.

    With ``collect=True`` also returns the 16 output-stage activations (a
    list indexed 0..15 for layers 1..16) and the skip tensors, enabling
    feature extraction and partial re-execution.  ``stop_at_layer=j`` halts
    after output layer j (the noise prediction is then None), which is all a
    feature extraction needs.
    """
    temb = _time_embedding(p, cfg, t)
    g = cfg.gn_groups
    h = ad.conv3(x, p["unet.in.w"], p["unet.in.b"], padding=1)
    e1 = _enc_block(p, "unet.e1", h, temb, z, g)
    h = ad.conv3(e1, p["unet.d1.w"], p["unet.d1.b"], stride=2, padding=1)
    e2 = _enc_block(p, "unet.e2", h, temb, z, g)
    h = ad.conv3(e2, p["unet.d2.w"], p["unet.d2.b"], stride=2, padding=1)
    h = _enc_block(p, "unet.mid", h, temb, z, g)
    skips = {"e1": e1, "e2": e2}
    h, acts = _run_output_stage(p, h, temb, z, skips, start=1, stop=stop_at_layer)
    if stop_at_layer is not None and stop_at_layer < OUTPUT_LAYER_COUNT:
        eps = None
    else:
        eps = ad.conv3(ad.silu(h), p["unet.head.w"], p["unet.head.b"], padding=1)
    if collect:
        return eps, acts, skips
    return eps


def _run_output_stage(p, h: ad.Tensor, temb: ad.Tensor, z: ad.Tensor, skips, start: int, stop: int | None = None):
    acts: list[ad.Tensor] = []
    last = OUTPUT_LAYER_COUNT if stop is None else min(stop, OUTPUT_LAYER_COUNT)
    for i in range(start, last + 1):
        kind, _factor, skip_tag = _OUTPUT_STAGE[i - 1]
        name = f"unet.o{i}"
        if kind == "up":
            h = ad.conv3(ad.upsample2(h), p[name + ".w"], p[name + ".b"], padding=1)
        elif kind == "skip_block":
            h = ad.add(h, skips[skip_tag])
            h = _out_block(p, name, h, temb, z)
        else:
            h = _out_block(p, name, h, temb, z)
        acts.append(h)
    return h, acts


def complete_from(
    p: dict[str, ad.Tensor],
    cfg,
    feature: ad.Tensor,
    j: int,
    t,
    z: ad.Tensor,
    skips: dict[str, ad.Tensor],
) -> ad.Tensor:
    """Re-run layers j+1..16 and the head from a (possibly edited) activation.

    ``skips`` must hold the encoder features of the original pass when any
    remaining layer consumes them (e2 for j < 5, e1 for j < 11).
    """
    if not 1 <= j <= OUTPUT_LAYER_COUNT:
        raise ValueError(f"layer index {j} outside 1..{OUTPUT_LAYER_COUNT}")
    temb = _time_embedding(p, cfg, t)
    h, _acts = _run_output_stage(p, feature, temb, z, skips, start=j + 1)
    return ad.conv3(ad.silu(h), p["unet.head.w"], p["unet.head.b"], padding=1)


def encoder_forward(p: dict[str, ad.Tensor], cfg, x: ad.Tensor) -> ad.Tensor:
    """Map clean wavelet grids (B, C, n, n, n) to latent codes (B, D)."""
    g = cfg.gn_groups
    h = ad.conv3(x, p["enc.c1.w"], p["enc.c1.b"], stride=2, padding=1)
    h = ad.silu(ad.group_norm(h, p["enc.gn1.g"], p["enc.gn1.b"], groups=g))
    h = ad.conv3(h, p["enc.c2.w"], p["enc.c2.b"], stride=2, padding=1)
    h = ad.silu(ad.group_norm(h, p["enc.gn2.g"], p["enc.gn2.b"], groups=g))
    h = ad.conv3(h, p["enc.c3.w"], p["enc.c3.b"], stride=2, padding=1)
    h = ad.silu(ad.group_norm(h, p["enc.gn3.g"], p["enc.gn3.b"], groups=g))
    batch = h.data.shape[0]
    h = ad.reshape(h, (batch, int(np.prod(h.data.shape[1:]))))
    return _dense(p, "enc.fc", h)
