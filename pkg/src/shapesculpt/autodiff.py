"""Reverse-mode automatic differentiation over dense volumetric arrays.

A :class:`Tensor` wraps a numpy array (float32 by default; float64 inputs
stay float64 so numeric validation can run at high precision) together with
a gradient slot and, for derived tensors, a closure that propagates the
output gradient to the inputs.  :func:`backward` seeds a scalar loss with
gradient one and walks the recorded graph once in reverse topological
order.  Each call computes fresh gradients for every tensor reachable from
the loss, so repeated backward passes over the same graph are bit-identical.

Convolutions are evaluated as im2col gathers followed by BLAS matmuls; the
column buffers are recomputed during the backward pass instead of being
stored, which keeps peak memory flat for deep stacks of feature volumes.
Scalar reductions accumulate in float64 before rounding to the input dtype.

:class:`Adam` lives here as well since it operates directly on tensors.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "add",
    "mul",
    "scale",
    "silu",
    "linear",
    "reshape",
    "conv3",
    "group_norm",
    "upsample2",
    "downsample2",
    "channel_bias",
    "channel_affine",
    "timestep_embed",
    "trilinear_sample",
    "stop_gradient",
    "l1_loss",
    "mse_loss",
    "sum_all",
    "mean_all",
    "Adam",
]


class Tensor:
    """Dense array plus gradient slot; nodes of the reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = np.ascontiguousarray(arr, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        """A constant tensor sharing this tensor's values."""
        return Tensor(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build a derived tensor; constant subgraphs record no parents."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the grad-requiring subgraph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if idx < len(node._parents):
            stack.append((node, idx + 1))
            parent = node._parents[idx]
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable tensor.

    ``loss`` must be scalar.  Gradients of all tensors in the graph are reset
    to zero first, so each call yields the gradients of this loss alone.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires gradients")
    order = _toposort(loss)
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad[...] = 1.0
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _require_same_shape(a, b, "add")
    out_data = a.data + b.data

    def _bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _node(out_data, (a, b), _bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _require_same_shape(a, b, "mul")
    out_data = a.data * b.data

    def _bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * b.data
        if b.requires_grad:
            b.grad += g * a.data

    return _node(out_data, (a, b), _bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply a tensor by a python scalar."""
    s = float(s)
    out_data = a.data * np.asarray(s, dtype=a.data.dtype)

    def _bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * np.asarray(s, dtype=g.dtype)

    return _node(out_data, (a,), _bwd)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), applied elementwise."""
    x = a.data
    # tanh form of the sigmoid: saturates cleanly instead of overflowing exp.
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    out_data = x * sig

    def _bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * (sig * (1.0 + x * (1.0 - sig)))

    return _node(out_data, (a,), _bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """View a tensor under a new shape with the same element count."""
    out_data = a.data.reshape(shape)

    def _bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g.reshape(a.data.shape)

    return _node(out_data, (a,), _bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for 1-D or 2-D ``x``.

    ``weight`` has shape (out_features, in_features); ``bias`` (out_features,).
    """
    xd, wd = x.data, weight.data
    if xd.ndim not in (1, 2):
        raise ValueError(f"linear expects 1-D or 2-D input, got {xd.ndim}-D")
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"linear: weight {wd.shape} does not match input {xd.shape}")
    out_data = xd @ wd.T
    if bias is not None:
        out_data = out_data + bias.data

    def _bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g @ wd
        if weight.requires_grad:
            if xd.ndim == 1:
                weight.grad += np.outer(g, xd)
            else:
                weight.grad += g.T @ xd
        if bias is not None and bias.requires_grad:
            bias.grad += g if xd.ndim == 1 else g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out_data, parents, _bwd)


def _as5d(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    """Promote a (C, D, H, W) volume to batch form, remembering the squeeze."""
    if arr.ndim == 4:
        return arr[None], True
    if arr.ndim == 5:
        return arr, False
    raise ValueError(f"expected 4-D or 5-D volume, got {arr.ndim}-D")


def _im2col(x: np.ndarray, ksize: tuple[int, int, int], stride: int) -> np.ndarray:
    """Gather sliding k³ patches of a padded (B, C, D, H, W) volume.

    Returns (C*kd*kh*kw, B*P) with the batch folded into the columns, so a
    convolution is a single large GEMM instead of many skinny ones.
    """
    b, c, d, h, w = x.shape
    kd, kh, kw = ksize
    od = (d - kd) // stride + 1
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sb, sc, sd, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(c, kd, kh, kw, b, od, oh, ow),
        strides=(sc, sd, sh, sw, sb, sd * stride, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(c * kd * kh * kw, b * od * oh * ow)


def _col2im(
    cols: np.ndarray,
    shape: tuple[int, int, int, int, int],
    ksize: tuple[int, int, int],
    stride: int,
) -> np.ndarray:
    """Scatter-add column gradients back onto the padded input volume."""
    b, c, d, h, w = shape
    kd, kh, kw = ksize
    od = (d - kd) // stride + 1
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(c, kd, kh, kw, b, od, oh, ow)
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                out[
                    :,
                    :,
                    dz : dz + od * stride : stride,
                    dy : dy + oh * stride : stride,
                    dx : dx + ow * stride : stride,
                ] += cols[:, dz, dy, dx].transpose(1, 0, 2, 3, 4)
    return out


def conv3(x: Tensor, weight: Tensor, bias: Tensor | None = None, *, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation of (B, C, D, H, W) or (C, D, H, W) volumes.

    ``weight`` has shape (C_out, C_in, kd, kh, kw).  The forward column
    buffer is kept on the closure and reused by the backward pass; for
    stride-1 convolutions the input gradient is itself computed as a
    correlation with the flipped kernel, which avoids a scatter-add.
    """
    xd5, squeezed = _as5d(x.data)
    wd = weight.data
    if wd.ndim != 5 or wd.shape[1] != xd5.shape[1]:
        raise ValueError(f"conv3: weight {wd.shape} does not match input {xd5.shape}")
    c_out, c_in = wd.shape[:2]
    ksize = wd.shape[2:]
    if padding:
        pad = ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding))
        xp = np.pad(xd5, pad)
    else:
        xp = xd5
    b = xp.shape[0]
    od = (xp.shape[2] - ksize[0]) // stride + 1
    oh = (xp.shape[3] - ksize[1]) // stride + 1
    ow = (xp.shape[4] - ksize[2]) // stride + 1
    cols = _im2col(xp, ksize, stride)
    wmat = wd.reshape(c_out, -1)
    out = wmat @ cols  # (C_out, B*P)
    out = np.ascontiguousarray(out.reshape(c_out, b, od, oh, ow).transpose(1, 0, 2, 3, 4))
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1, 1)
    out_data = out[0] if squeezed else out
    pad_shape = xp.shape
    # Gradient-as-correlation needs non-negative re-padding on every axis.
    corr_pads = tuple(k - 1 - padding for k in ksize)
    use_corr = stride == 1 and all(p >= 0 for p in corr_pads)

    def _bwd(g: np.ndarray) -> None:
        g5 = g[None] if squeezed else g
        gflat = np.ascontiguousarray(g5.transpose(1, 0, 2, 3, 4)).reshape(c_out, -1)
        if weight.requires_grad:
            weight.grad += (gflat @ cols.T).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            bias.grad += gflat.sum(axis=1)
        if x.requires_grad:
            if use_corr:
                pz, py, px = corr_pads
                gp = np.pad(g5, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px))) if any(corr_pads) else g5
                gcols = _im2col(gp, ksize, 1)
                wrot = np.ascontiguousarray(
                    wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
                ).reshape(c_in, -1)
                gx = (wrot @ gcols).reshape((c_in, b) + xd5.shape[2:]).transpose(1, 0, 2, 3, 4)
            else:
                gc = wmat.T @ gflat
                gx = _col2im(gc, pad_shape, ksize, stride)
                if padding:
                    gx = gx[:, :, padding:-padding, padding:-padding, padding:-padding]
            x.grad += gx[0] if squeezed else gx

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out_data, parents, _bwd)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize channel groups over (group channels × all voxels).

    Statistics pool over the full spatial extent, so this op is global:
    it must not appear on any path whose outputs feed localized feature
    lookups (the decoder output stack stays normalization-free).
    """
    xd5, squeezed = _as5d(x.data)
    b, c = xd5.shape[:2]
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    grouped = xd5.reshape(b, groups, -1)
    mu = grouped.mean(axis=2, keepdims=True, dtype=np.float64)
    var = np.mean((grouped - mu) ** 2, axis=2, keepdims=True, dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd5.dtype)
    mu = mu.astype(xd5.dtype)
    xhat = ((grouped - mu) * inv_std).reshape(xd5.shape)
    gshape = (1, c, 1, 1, 1)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)
    out_data = out[0] if squeezed else out

    def _bwd(g: np.ndarray) -> None:
        g5 = g[None] if squeezed else g
        if gamma.requires_grad:
            gamma.grad += (g5 * xhat).sum(axis=(0, 2, 3, 4))
        if beta.requires_grad:
            beta.grad += g5.sum(axis=(0, 2, 3, 4))
        if x.requires_grad:
            gxhat = (g5 * gamma.data.reshape(gshape)).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            m1 = gxhat.mean(axis=2, keepdims=True, dtype=np.float64).astype(xd5.dtype)
            m2 = (gxhat * xh).mean(axis=2, keepdims=True, dtype=np.float64).astype(xd5.dtype)
            gx = inv_std * (gxhat - m1 - xh * m2)
            gx = gx.reshape(xd5.shape)
            x.grad += gx[0] if squeezed else gx

    return _node(out_data, (x, gamma, beta), _bwd)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour doubling of the three spatial axes."""
    xd5, squeezed = _as5d(x.data)
    out = xd5.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    out_data = out[0] if squeezed else out

    def _bwd(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        g5 = g[None] if squeezed else g
        b, c, d, h, w = xd5.shape
        gx = g5.reshape(b, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7))
        x.grad += gx[0] if squeezed else gx

    return _node(out_data, (x,), _bwd)


def downsample2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Learned halving of the spatial axes: stride-2 3³ convolution."""
    return conv3(x, weight, bias, stride=2, padding=1)


def channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel offset, broadcast over the spatial axes.

    ``bias`` is (C,) shared across the batch or (B, C) per sample.
    """
    xd5, squeezed = _as5d(x.data)
    bd = bias.data
    if bd.ndim == 1:
        bview = bd.reshape(1, -1, 1, 1, 1)
    elif bd.ndim == 2:
        bview = bd.reshape(bd.shape[0], bd.shape[1], 1, 1, 1)
    else:
        raise ValueError(f"channel_bias: expected (C,) or (B, C), got {bd.shape}")
    out = xd5 + bview
    out_data = out[0] if squeezed else out

    def _bwd(g: np.ndarray) -> None:
        g5 = g[None] if squeezed else g
        if x.requires_grad:
            x.grad += g5[0] if squeezed else g5
        if bias.requires_grad:
            if bd.ndim == 1:
                bias.grad += g5.sum(axis=(0, 2, 3, 4))
            else:
                bias.grad += g5.sum(axis=(2, 3, 4))

    return _node(out_data, (x, bias), _bwd)


def channel_affine(x: Tensor, scale_delta: Tensor, shift: Tensor) -> Tensor:
    """Per-channel modulation ``x * (1 + s) + t`` broadcast over voxels.

    ``scale_delta`` and ``shift`` are (C,) shared or (B, C) per sample; the
    +1 keeps zero-initialized modulation at identity.
    """
    xd5, squeezed = _as5d(x.data)
    sd, td = scale_delta.data, shift.data
    if sd.shape != td.shape:
        raise ValueError(f"channel_affine: scale {sd.shape} vs shift {td.shape}")
    if sd.ndim == 1:
        sview = sd.reshape(1, -1, 1, 1, 1)
        tview = td.reshape(1, -1, 1, 1, 1)
    elif sd.ndim == 2:
        sview = sd.reshape(sd.shape[0], sd.shape[1], 1, 1, 1)
        tview = td.reshape(td.shape[0], td.shape[1], 1, 1, 1)
    else:
        raise ValueError(f"channel_affine: expected (C,) or (B, C), got {sd.shape}")
    out = xd5 * (1.0 + sview) + tview
    out_data = out[0] if squeezed else out

    def _bwd(g: np.ndarray) -> None:
        g5 = g[None] if squeezed else g
        if x.requires_grad:
            gx = g5 * (1.0 + sview)
            x.grad += gx[0] if squeezed else gx
        spatial = (0, 2, 3, 4) if sd.ndim == 1 else (2, 3, 4)
        if scale_delta.requires_grad:
            scale_delta.grad += (g5 * xd5).sum(axis=spatial)
        if shift.requires_grad:
            shift.grad += g5.sum(axis=spatial)

    return _node(out_data, (x, scale_delta, shift), _bwd)


def timestep_embed(t, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of integer timesteps; constant w.r.t. the graph.

    Scalar ``t`` gives (dim,), a sequence gives (len(t), dim).  Layout is
    [sin(t·f_0..f_{h-1}), cos(t·f_0..f_{h-1})] with geometric frequencies.
    """
    if dim % 2:
        raise ValueError("timestep_embed: dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    tv = np.asarray(t, dtype=np.float64)
    args = tv[..., None] * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    return Tensor(emb.astype(np.float32))


def trilinear_sample(volume: Tensor, coords: np.ndarray) -> Tensor:
    """Sample a (C, D, H, W) volume at fractional voxel coordinates.

    ``coords`` is (M, 3) ordered (x, y, z) where x indexes the D axis; each
    component must lie inside [0, size-1].  Returns (M, C).  Gradients flow
    into the volume only; the coordinates are data, not graph nodes.
    """
    vd = volume.data
    if vd.ndim != 4:
        raise ValueError(f"trilinear_sample expects (C, D, H, W), got {vd.shape}")
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"coords must be (M, 3), got {pts.shape}")
    dims = np.array(vd.shape[1:], dtype=np.float64)
    if np.any(pts < 0.0) or np.any(pts > dims - 1.0):
        raise ValueError("trilinear_sample: coordinates fall outside the volume")
    lo = np.minimum(np.floor(pts), dims - 2.0).astype(np.int64)
    frac = (pts - lo).astype(vd.dtype)
    x0, y0, z0 = lo[:, 0], lo[:, 1], lo[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    corner_w: list[np.ndarray] = []
    corner_ix: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    for cx in (0, 1):
        wx = fx if cx else 1.0 - fx
        for cy in (0, 1):
            wy = fy if cy else 1.0 - fy
            for cz in (0, 1):
                wz = fz if cz else 1.0 - fz
                corner_w.append(wx * wy * wz)
                corner_ix.append((x0 + cx, y0 + cy, z0 + cz))
    out = np.zeros((pts.shape[0], vd.shape[0]), dtype=vd.dtype)
    for w, (ix, iy, iz) in zip(corner_w, corner_ix):
        out += vd[:, ix, iy, iz].T * w[:, None]

    def _bwd(g: np.ndarray) -> None:
        if not volume.requires_grad:
            return
        for w, (ix, iy, iz) in zip(corner_w, corner_ix):
            np.add.at(volume.grad, (slice(None), ix, iy, iz), (g * w[:, None]).T)

    return _node(out, (volume,), _bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """A constant tensor with x's values; gradients end here."""
    return Tensor(x.data)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; subgradient 0 where the inputs tie."""
    _require_same_shape(a, b, "l1_loss")
    diff = a.data - b.data
    out_data = np.asarray(np.mean(np.abs(diff), dtype=np.float64), dtype=a.data.dtype)
    n = diff.size

    def _bwd(g: np.ndarray) -> None:
        s = np.sign(diff) * (g / n)
        if a.requires_grad:
            a.grad += s.astype(a.data.dtype)
        if b.requires_grad:
            b.grad -= s.astype(b.data.dtype)

    return _node(out_data, (a, b), _bwd)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference."""
    _require_same_shape(a, b, "mse_loss")
    diff = a.data - b.data
    out_data = np.asarray(np.mean(diff * diff, dtype=np.float64), dtype=a.data.dtype)
    n = diff.size

    def _bwd(g: np.ndarray) -> None:
        s = diff * (2.0 * g / n)
        if a.requires_grad:
            a.grad += s.astype(a.data.dtype)
        if b.requires_grad:
            b.grad -= s.astype(b.data.dtype)

    return _node(out_data, (a, b), _bwd)


def sum_all(x: Tensor) -> Tensor:
    """Scalar sum over every element, accumulated in float64."""
    out_data = np.asarray(np.sum(x.data, dtype=np.float64), dtype=x.data.dtype)

    def _bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += np.asarray(g, dtype=x.data.dtype)

    return _node(out_data, (x,), _bwd)


def mean_all(x: Tensor) -> Tensor:
    """Scalar mean over every element, accumulated in float64."""
    out_data = np.asarray(np.mean(x.data, dtype=np.float64), dtype=x.data.dtype)
    n = x.data.size

    def _bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += np.asarray(g / n, dtype=x.data.dtype)

    return _node(out_data, (x,), _bwd)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. A non-finite norm leaves gradients untouched
    (the caller decides whether to skip the step).
    """
    total = 0.0
    for p in params:
        g = p.grad
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(total)
    if max_norm > 0.0 and np.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


class Adam:
    """Adam with bias-corrected moments, kept in float64 for stability.

    Update per step t:  m = b1·m + (1-b1)·g;  v = b2·v + (1-b2)·g²;
    m̂ = m/(1-b1^t);  v̂ = v/(1-b2^t);  p -= lr·m̂/(√v̂ + eps).
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("Adam received a tensor that does not require gradients")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]
        self._v = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad.astype(np.float64, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
