"""The shared end-to-end toy model: 200 procedural shapes at 32³, one hour of CPU.

The acceptance suite and the long-running end-to-end tests all use the same
checkpoint.  Training takes most of an hour, so the trained model is cached
under ``.cache/`` at the repository root and reused; delete the cache to force
a retrain.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from shapesculpt.diffusion import (
    Checkpoint,
    ModelConfig,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)
from shapesculpt.shapegen import FamilySpec, TsdfVolume, generate_dataset
from shapesculpt.wavelet import dwt3

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache"
TOY_CKPT_PATH = CACHE_DIR / "toy.ckpt"

TOY_MODEL = ModelConfig(resolution=32, width=16)
TOY_TRAIN = TrainConfig(steps=1600, batch_size=8, lr=2e-3, warmup=50, seed=0, log_every=50)

_FAMILY_SPECS = (
    FamilySpec(family="box_table", count=70, seed=101),
    FamilySpec(family="pedestal_table", count=65, seed=202),
    FamilySpec(family="slatted_chair", count=65, seed=303),
)


def toy_shapes() -> list[tuple[TsdfVolume, dict]]:
    """The 200 training shapes with their provenance records."""
    out: list[tuple[TsdfVolume, dict]] = []
    for spec in _FAMILY_SPECS:
        out.extend(generate_dataset(spec))
    return out


def ensure_toy_checkpoint(path: Path = TOY_CKPT_PATH) -> Checkpoint:
    """Load the cached toy checkpoint, training it first if absent."""
    if path.exists():
        return load_checkpoint(path)
    logging.getLogger(__name__).info("toy checkpoint missing; training (~1 h on one CPU)")
    started = time.monotonic()
    shapes = toy_shapes()
    dataset = [dwt3(vol) for vol, _ in shapes]
    ckpt = train(dataset, TOY_TRAIN, TOY_MODEL)
    elapsed = time.monotonic() - started
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, path)
    losses = np.asarray(ckpt.train_losses, dtype=np.float32)
    np.save(path.with_suffix(".losses.npy"), losses)
    path.with_suffix(".meta.json").write_text(
        json.dumps({"train_seconds": elapsed, "steps": TOY_TRAIN.steps}) + "\n"
    )
    return ckpt


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    ckpt = ensure_toy_checkpoint()
    tail = ckpt.train_losses[-50:]
    if tail:
        print(f"final-50 mean loss {np.mean(tail):.4f}")
    meta = TOY_CKPT_PATH.with_suffix(".meta.json")
    if meta.exists():
        print(f"train wall time {json.loads(meta.read_text())['train_seconds']:.0f} s")
    print(f"checkpoint at {TOY_CKPT_PATH}")
