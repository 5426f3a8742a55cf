"""Checkpoint-backed skeleton generation, one interface for both modes."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch

from . import d3pm as D
from .argen import ar_sample
from .backbone import MODE_AR, SequenceModel
from .vocab import Vocabulary


def schedule_from_meta(meta: dict, vocab_size: int, num_steps: int) -> D.NoiseSchedule:
    """Rebuild the training noise schedule from checkpoint metadata."""
    params = meta.get("schedule", {}) if meta else {}
    return D.NoiseSchedule.cosine(
        vocab_size,
        num_steps=int(params.get("num_steps", num_steps)),
        beta_min=float(params.get("beta_min", D.DEFAULT_BETA_MIN)),
        beta_max=float(params.get("beta_max", D.DEFAULT_BETA_MAX)),
    )


def make_generator(
    model: SequenceModel,
    vocab: Vocabulary,
    seed: int = 0,
    num_steps: Optional[int] = None,
    strategy: str = "greedy",
    temperature: float = 1.0,
    schedule: Optional[D.NoiseSchedule] = None,
) -> Callable[[np.ndarray], np.ndarray]:
    """Return a callable mapping (B, N, 3) points to (B, S) token ids.

    Each call advances a deterministic per-batch stream derived from `seed`,
    so the same sequence of calls reproduces the same generations.
    """
    model.eval()
    if model.config.mode == MODE_AR:
        def generate(points: np.ndarray, _count=[0]) -> np.ndarray:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _count[0]])))
            _count[0] += 1
            pts = torch.from_numpy(np.asarray(points)).to(torch.float32)
            out = ar_sample(model, pts, rng, strategy=strategy,
                            temperature=temperature, pad_id=vocab.pad_id)
            return out.numpy()
    else:
        if schedule is None:
            schedule = D.NoiseSchedule.cosine(vocab.size, num_steps=model.config.num_steps)
        tm = D.TransitionModel(schedule)

        def generate(points: np.ndarray, _count=[0]) -> np.ndarray:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _count[0]])))
            _count[0] += 1
            pts = torch.from_numpy(np.asarray(points)).to(torch.float32)
            out = D.sample(model, pts, tm, rng, model.config.max_len, num_steps=num_steps)
            return out.numpy()

    return generate
