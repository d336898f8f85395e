"""Self-supervised pretraining loop: Adam, LR halving, early stopping, checkpoints.

A scheduling "step" is a block of `batches_per_step` Adam updates (one update
per mined batch). Validation loss is evaluated after every step on a batch
set frozen at startup, the learning rate halves once after `halve_at` steps,
and training stops early the first time the running average of the
validation loss over `early_stop_window` steps fails to improve on its best.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import model as model_mod
from .config import ExperimentConfig, TrainConfig, substream
from .dataset import Dataset
from .loss import LossSpec
from .model import ModelParams
from .pairing import PairVariant, mine_batch, resample_if_degenerate


class NumericalBlowup(RuntimeError):
    pass


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    update_count: int = 0
    step_count: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        return cls(params=params,
                   m={k: np.zeros_like(v) for k, v in params.tensors.items()},
                   v={k: np.zeros_like(v) for k, v in params.tensors.items()})


def adam_update(state: TrainState, grads: dict[str, np.ndarray], lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> TrainState:
    """One bias-corrected Adam step, in place."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise ValueError("numerical_blowup")
    state.update_count += 1
    t = state.update_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in state.params.tensors.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def lr_at_update(cfg: TrainConfig, update_index: int) -> float:
    """LR for the given 0-based update; halves after halve_at full steps."""
    if update_index >= cfg.resolved_halve_at * cfg.batches_per_step:
        return cfg.lr0 / 2.0
    return cfg.lr0


class EarlyStopper:
    """Stops when the window running average first fails to beat its best."""

    def __init__(self, window: int):
        self.window = window
        self.losses: list[float] = []
        self.best = np.inf

    def update(self, val_loss: float) -> bool:
        self.losses.append(val_loss)
        if len(self.losses) < self.window:
            return False
        avg = float(np.mean(self.losses[-self.window:]))
        if avg < self.best:
            self.best = avg
            return False
        return True


@dataclass
class PretrainResult:
    run_dir: Path
    final_params: ModelParams
    best_params: ModelParams
    best_step: int
    last_step: int
    stopped_early: bool
    curve: list[dict] = field(default_factory=list)


def _write_curve(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "update", "lr", "train_loss", "val_loss"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v)
                             for k, v in row.items()})


def pretrain(cfg: ExperimentConfig, dataset: Dataset, run_dir,
             step_fn: Optional[Callable] = None) -> PretrainResult:
    """Run the pretext optimization and leave checkpoints plus a loss curve behind."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    variant = PairVariant(cfg.pairing.variant, cfg.pairing.source)
    spec = LossSpec(temperature=tc.temperature, aggregate_silent=variant.aggregate_silent)
    forward_backward = step_fn or model_mod.forward_backward

    params = model_mod.init_params(cfg.model, seed=cfg.seed)
    state = TrainState.fresh(params)
    # the validation split may be smaller than a training batch
    val_bs = min(tc.batch_size, len(dataset.clips("valid")))
    if val_bs < 2:
        raise ValueError("dataset_exhausted: validation split needs at least 2 clips")
    val_batches = [mine_batch(dataset, variant, val_bs,
                              substream(cfg.seed, "val", i), split="valid")
                   for i in range(tc.n_val_batches)]

    stopper = EarlyStopper(tc.early_stop_window)
    rows: list[dict] = []
    best_val = np.inf
    best_params = params.copy()
    best_step = 0
    stopped_early = False
    update_index = 0
    last_step = 0

    def _save(name: str, p: ModelParams) -> None:
        model_mod.save_params(p, run_dir / name)

    try:
        for step in range(1, tc.total_steps + 1):
            step_losses = []
            lr = tc.lr0
            for _ in range(tc.batches_per_step):
                rng = substream(cfg.seed, "pairing", update_index)
                batch = mine_batch(dataset, variant, tc.batch_size, rng)
                batch = resample_if_degenerate(
                    batch, lambda: mine_batch(dataset, variant, tc.batch_size, rng))
                lr = lr_at_update(tc, update_index)
                loss_value, grads = forward_backward(params, batch, spec)
                adam_update(state, grads, lr, tc.beta1, tc.beta2, tc.adam_eps)
                update_index += 1
                step_losses.append(loss_value)

            val_losses = [forward_backward(params, vb, spec, compute_grads=False)[0]
                          for vb in val_batches]
            val_loss = float(np.mean(val_losses))
            rows.append({"step": step, "update": update_index, "lr": lr,
                         "train_loss": float(np.mean(step_losses)), "val_loss": val_loss})
            last_step = step
            if val_loss < best_val:
                best_val = val_loss
                best_params = params.copy()
                best_step = step
            if step % tc.checkpoint_every == 0:
                _save(f"ckpt_step{step:05d}.msat", params)
            if stopper.update(val_loss):
                stopped_early = True
                break
    except ValueError as e:
        if "numerical_blowup" in str(e):
            _write_curve(run_dir / "curve.csv", rows)
            _save("ckpt_last_good.msat", params)
            raise NumericalBlowup(
                f"numerical_blowup at step {last_step + 1} update {update_index}") from e
        raise

    _write_curve(run_dir / "curve.csv", rows)
    _save("ckpt_final.msat", params)
    _save("ckpt_best.msat", best_params)
    return PretrainResult(run_dir=run_dir, final_params=params, best_params=best_params,
                          best_step=best_step, last_step=last_step,
                          stopped_early=stopped_early, curve=rows)
