"""Gradient-based co-optimization of the latent code against edit objectives.

The loop alternates: re-extract the feature volume from the current latent
code over the frozen partially denoised volume, measure the mean-L1 gap to
the objective targets, and take one Adam step on the code.  Static edits
(copy, resize, delete) keep one compiled objective and stop when the loss
falls below a third of its starting value; drags rebuild their supervision
every iteration, re-locate the handle after every step, and stop when the
handle reaches the target.  Everything is capped at a fixed iteration budget.

The full per-iteration history is kept as a trace for inspection, CSV export,
and regression baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .coupling import CoupledState, FeatureVolume, extract_features
from .diffusion import Checkpoint, decode_from
from .editops import DragState, Objective, motion_supervision, track_point
from .wavelet import WaveletVolume

__all__ = [
    "OptimizerConfig",
    "TraceRecord",
    "Trace",
    "OptimizationDiverged",
    "evaluate_objective",
    "co_optimize",
    "finalize",
    "trace_to_csv",
]


@dataclass(frozen=True)
class OptimizerConfig:
    """Step size, budget, and Adam moments for the latent-code updates."""

    lr: float = 3e-2
    max_iters: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0.0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.max_iters < 1:
            raise ValueError(f"iteration budget must be at least 1, got {self.max_iters}")


@dataclass
class TraceRecord:
    """One optimization iteration: loss, handle position, update sizes."""

    iteration: int
    loss: float
    point: np.ndarray | None
    grad_norm: float
    z_update_norm: float


@dataclass
class Trace:
    """Per-iteration history plus why the loop stopped."""

    records: list[TraceRecord] = field(default_factory=list)
    reason: str = ""

    def losses(self) -> np.ndarray:
        return np.asarray([r.loss for r in self.records], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.records)


class OptimizationDiverged(RuntimeError):
    """Loss or gradient became non-finite; the partial trace is attached."""

    def __init__(self, message: str, trace: Trace):
        super().__init__(message)
        self.trace = trace


def evaluate_objective(feature: FeatureVolume, objective: Objective) -> ad.Tensor:
    """Mean-L1 between the feature volume at Γ and the fixed targets V.

    Returns the loss as a graph node: backpropagating reaches whatever the
    feature volume was extracted from.  The targets are plain data and never
    receive gradients.
    """
    sampled = ad.trilinear_sample(feature.tensor, objective.gamma)
    targets = ad.Tensor(np.asarray(objective.values, dtype=sampled.data.dtype))
    return ad.l1_loss(sampled, targets)


def trace_to_csv(trace: Trace) -> str:
    """The trace as comma-separated text: iteration, loss, handle, gradient."""
    lines = ["iteration,loss,Px,Py,Pz,grad-norm"]
    for r in trace.records:
        if r.point is None:
            px = py = pz = "nan"
        else:
            px, py, pz = (f"{float(c):.9g}" for c in r.point)
        lines.append(f"{r.iteration},{r.loss:.9g},{px},{py},{pz},{r.grad_norm:.9g}")
    return "\n".join(lines) + "\n"


def _check_finite(value: float, what: str, trace: Trace) -> None:
    if not math.isfinite(value):
        raise OptimizationDiverged(f"{what} became non-finite at iteration {len(trace)}", trace)


def co_optimize(
    cns: CoupledState,
    task: Objective | DragState,
    ckpt: Checkpoint,
    config: OptimizerConfig | None = None,
    extract=None,
):
    """Descend the edit objective by updating the latent code.

    ``task`` is either a compiled static objective or, for drags, the drag
    state whose supervision is rebuilt every iteration.  Returns the final
    code and the full trace.  ``extract`` swaps the feature extractor for a
    synthetic one in tests; by default features come from the frozen
    partially denoised volume of ``cns``.
    """
    config = config if config is not None else OptimizerConfig()
    if extract is None:
        def extract(z_tensor: ad.Tensor) -> FeatureVolume:
            return extract_features(cns.x_t, z_tensor, cns.config, ckpt)

    z = ad.Tensor(np.array(cns.z, dtype=np.float32), requires_grad=True)
    opt = ad.Adam([z], lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    if isinstance(task, DragState):
        return _optimize_drag(z, opt, task, cns, config, extract)
    return _optimize_static(z, opt, task, config, extract)


def _step_z(z: ad.Tensor, opt: ad.Adam, loss: ad.Tensor, trace: Trace) -> tuple[float, float]:
    """Backpropagate and apply one Adam step; returns (grad norm, step norm)."""
    opt.zero_grad()
    ad.backward(loss)
    grad_norm = float(np.linalg.norm(z.grad.astype(np.float64)))
    _check_finite(grad_norm, "gradient", trace)
    before = z.data.copy()
    opt.step()
    update_norm = float(np.linalg.norm((z.data - before).astype(np.float64)))
    return grad_norm, update_norm


def _optimize_static(z, opt, objective: Objective, config, extract):
    trace = Trace()
    initial_loss: float | None = None
    for k in range(config.max_iters + 1):
        feature = extract(z)
        loss = evaluate_objective(feature, objective)
        loss_val = float(loss.data)
        _check_finite(loss_val, "loss", trace)
        if initial_loss is None:
            initial_loss = loss_val
        if loss_val == 0.0 or loss_val < initial_loss / 3.0:
            trace.records.append(TraceRecord(k, loss_val, None, 0.0, 0.0))
            trace.reason = "converged"
            return z.data.copy(), trace
        if k == config.max_iters:
            trace.records.append(TraceRecord(k, loss_val, None, 0.0, 0.0))
            trace.reason = "max-iters"
            return z.data.copy(), trace
        grad_norm, update_norm = _step_z(z, opt, loss, trace)
        trace.records.append(TraceRecord(k, loss_val, None, grad_norm, update_norm))
    raise AssertionError("unreachable")


def _optimize_drag(z, opt, drag: DragState, cns: CoupledState, config, extract):
    trace = Trace()
    f_reference = cns.feature  # handle appearance is matched against the start
    if np.linalg.norm(drag.p - drag.b) <= 1.0:
        trace.records.append(TraceRecord(0, 0.0, drag.p.copy(), 0.0, 0.0))
        trace.reason = "target-reached"
        return z.data.copy(), trace

    feature = extract(z)
    for k in range(config.max_iters):
        objective = motion_supervision(feature, drag)
        loss = evaluate_objective(feature, objective)
        loss_val = float(loss.data)
        _check_finite(loss_val, "loss", trace)
        grad_norm, update_norm = _step_z(z, opt, loss, trace)
        trace.records.append(TraceRecord(k, loss_val, drag.p.copy(), grad_norm, update_norm))

        feature = extract(z)
        drag.p = track_point(feature, f_reference, drag)
        drag.iteration = k + 1
        if np.linalg.norm(drag.p - drag.b) <= 1.0:
            post_loss = float(evaluate_objective(feature, objective).data)
            trace.records.append(TraceRecord(k + 1, post_loss, drag.p.copy(), 0.0, 0.0))
            trace.reason = "target-reached"
            return z.data.copy(), trace
    trace.reason = "max-iters"
    return z.data.copy(), trace


def finalize(z_n: np.ndarray, cns: CoupledState, ckpt: Checkpoint) -> WaveletVolume:
    """Decode the edited code through the remaining denoising steps."""
    return decode_from(cns.x_t, z_n, cns.config.t, ckpt)
