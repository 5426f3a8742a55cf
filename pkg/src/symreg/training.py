"""Shared training loop: AdamW, plateau LR halving, early stopping, CSV curve.

Both generation modes train through the same engine; only the objective
differs. Batch order is a deterministic function of (seed, epoch); the
per-batch noise stream is derived from (seed, epoch, batch index).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import torch

from . import d3pm as D
from .argen import ar_loss
from .backbone import MODE_AR, MODE_DIFFUSION, BackboneConfig, SequenceModel
from .checkpoint import save_checkpoint
from .dataset import SplitData, iter_batches
from .vocab import Vocabulary

# Stream tag separating validation batches from training batches.
_VAL_STREAM = 0xFFFFFFFF


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    max_epochs: int = 1000
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    early_stop_patience: int = 15
    lambda_ce: float = 0.01
    seed: int = 0


class PlateauController:
    """Strict-improvement tracker driving LR reduction and early stopping.

    The LR halves every `plateau_patience` consecutive epochs without
    improvement; training stops after `early_stop_patience` of them (stop
    takes precedence over a coinciding reduction).
    """

    def __init__(self, plateau_patience: int = 5, early_stop_patience: int = 15):
        self.plateau_patience = plateau_patience
        self.early_stop_patience = early_stop_patience
        self.best = float("inf")
        self.stale = 0

    def update(self, val_loss: float):
        """Returns (improved, reduce_lr, stop)."""
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return True, False, False
        self.stale += 1
        if self.stale >= self.early_stop_patience:
            return False, False, True
        return False, self.stale % self.plateau_patience == 0, False


@dataclass
class TrainResult:
    checkpoint_path: str
    curve_path: str
    best_val_loss: float
    epochs_run: int
    history: List[dict] = field(default_factory=list)


def _batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, batch])))


def _to_tensors(points: np.ndarray, tokens: np.ndarray):
    return torch.from_numpy(points).to(torch.float32), torch.from_numpy(tokens)


def _epoch_loss(model, objective, split, cfg, epoch, train: bool,
                optimizer: Optional[torch.optim.Optimizer]) -> float:
    model.train(train)
    stream = epoch if train else _VAL_STREAM
    total, count = 0.0, 0
    for bi, (pts, toks) in enumerate(iter_batches(split, cfg.batch_size, cfg.seed, stream)):
        rng = _batch_rng(cfg.seed, stream, bi)
        points_t, tokens_t = _to_tensors(pts, toks)
        if train:
            loss, _ = objective(model, points_t, tokens_t, rng)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        else:
            with torch.no_grad():
                loss, _ = objective(model, points_t, tokens_t, rng)
        total += float(loss.detach()) * len(toks)
        count += len(toks)
    return total / max(count, 1)


def train_model(
    model: SequenceModel,
    objective: Callable,
    train_split: SplitData,
    val_split: SplitData,
    cfg: TrainConfig,
    vocab: Vocabulary,
    out_dir,
    tag: str,
    log: Optional[Callable[[str], None]] = None,
    extra_meta: Optional[dict] = None,
) -> TrainResult:
    """Run the full protocol and persist the best-validation checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, f"{tag}.ckpt")
    curve_path = os.path.join(out_dir, f"{tag}_curve.csv")
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    ctrl = PlateauController(cfg.plateau_patience, cfg.early_stop_patience)
    lr = cfg.learning_rate
    history: List[dict] = []
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        epochs_run = 0
        for epoch in range(cfg.max_epochs):
            train_loss = _epoch_loss(model, objective, train_split, cfg, epoch, True, optimizer)
            val_loss = _epoch_loss(model, objective, val_split, cfg, epoch, False, None)
            improved, reduce_lr, stop = ctrl.update(val_loss)
            row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
            history.append(row)
            writer.writerow([epoch, f"{train_loss:.8g}", f"{val_loss:.8g}", f"{lr:.8g}"])
            fh.flush()
            if log:
                log(f"epoch {epoch}: train {train_loss:.5f} val {val_loss:.5f} lr {lr:g}"
                    + (" *" if improved else ""))
            if improved:
                meta = {
                    "mode": model.config.mode,
                    "epoch": epoch,
                    "best_val_loss": val_loss,
                    "seed": cfg.seed,
                    "lr": lr,
                    # streams are stateless functions of (seed, epoch, batch),
                    # so this is the complete RNG state at this point
                    "rng": {"kind": "pcg64(seed,epoch,batch)", "seed": cfg.seed,
                            "epoch": epoch},
                }
                meta.update(extra_meta or {})
                save_checkpoint(model, ckpt_path, vocab, meta=meta)
            if reduce_lr:
                lr *= cfg.plateau_factor
                for group in optimizer.param_groups:
                    group["lr"] = lr
            epochs_run = epoch + 1
            if stop:
                break
    return TrainResult(ckpt_path, curve_path, ctrl.best, epochs_run, history)


class DiffusionObjective:
    """Samples a uniform timestep per example and applies the hybrid loss."""

    def __init__(self, tm: D.TransitionModel, lambda_ce: float):
        self.tm = tm
        self.lambda_ce = lambda_ce

    def __call__(self, model, points, tokens, rng: np.random.Generator):
        t = torch.from_numpy(
            rng.integers(1, self.tm.num_steps + 1, size=tokens.shape[0]).astype(np.int64))
        return D.d3pm_loss(tokens, points, t, model, self.tm, self.lambda_ce, rng)


class ARObjective:
    def __call__(self, model, points, tokens, rng):
        return ar_loss(tokens, points, model)


def train_diffusion(
    train_split: SplitData,
    val_split: SplitData,
    model_config: BackboneConfig,
    schedule: D.NoiseSchedule,
    cfg: TrainConfig,
    vocab: Vocabulary,
    out_dir,
    tag: str = "diffusion",
    log=None,
) -> TrainResult:
    if model_config.mode != MODE_DIFFUSION:
        raise ValueError("model_config.mode must be diffusion")
    if schedule.num_steps != model_config.num_steps:
        raise ValueError("schedule and model step counts differ")
    torch.manual_seed(cfg.seed)
    model = SequenceModel(model_config)
    objective = DiffusionObjective(D.TransitionModel(schedule), cfg.lambda_ce)
    extra = {"schedule": {
        "num_steps": schedule.num_steps,
        "beta_min": float(schedule.betas[0]),
        "beta_max": float(schedule.betas[-1]),
        "lambda_ce": cfg.lambda_ce,
    }}
    return train_model(model, objective, train_split, val_split, cfg, vocab,
                       out_dir, tag, log, extra_meta=extra)


def train_ar(
    train_split: SplitData,
    val_split: SplitData,
    model_config: BackboneConfig,
    cfg: TrainConfig,
    vocab: Vocabulary,
    out_dir,
    tag: str = "ar",
    log=None,
) -> TrainResult:
    if model_config.mode != MODE_AR:
        raise ValueError("model_config.mode must be autoregressive")
    torch.manual_seed(cfg.seed)
    model = SequenceModel(model_config)
    return train_model(model, ARObjective(), train_split, val_split, cfg, vocab, out_dir, tag, log)
