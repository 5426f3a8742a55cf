"""Autoregressive baseline: causal next-token objective and left-to-right decoding.

Targets are the clean sequences themselves (trailing pads included, so the
model learns termination); inputs are the same sequences shifted right behind
a BOS token. PAD doubles as end-of-sequence during decoding.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import MODE_AR, SequenceModel
from .errors import ShapeMismatch


def ar_inputs(x0: torch.Tensor, bos_id: int) -> torch.Tensor:
    """Shift right and prepend BOS: input position i sees tokens < i."""
    bos = torch.full((x0.shape[0], 1), bos_id, dtype=x0.dtype)
    return torch.cat([bos, x0[:, :-1]], dim=1)


def ar_loss(x0: torch.Tensor, points: torch.Tensor, model: SequenceModel):
    """Mean next-token cross-entropy over all positions and the batch."""
    if model.config.mode != MODE_AR:
        raise ShapeMismatch("ar_loss needs a model in autoregressive mode")
    logits = model(points, ar_inputs(x0, model.config.bos_id))
    n = logits.shape[-1]
    ce = F.cross_entropy(logits.reshape(-1, n), x0.reshape(-1))
    return ce, {"ce": float(ce.detach())}


def ar_sample(
    model: SequenceModel,
    points: torch.Tensor,
    rng: Optional[np.random.Generator] = None,
    strategy: str = "greedy",
    temperature: float = 1.0,
    pad_id: int = 0,
) -> torch.Tensor:
    """Decode token sequences left to right, one position at a time.

    Greedy takes the argmax; "temperature" draws from the softened
    distribution using the supplied generator. BOS is never emitted.
    Decoding stops at the first PAD (or after max_len tokens); the output is
    padded to max_len.
    """
    cfg = model.config
    if cfg.mode != MODE_AR:
        raise ShapeMismatch("ar_sample needs a model in autoregressive mode")
    if strategy not in ("greedy", "temperature"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "temperature" and rng is None:
        raise ValueError("temperature sampling needs a generator")
    b, s = points.shape[0], cfg.max_len
    model.eval()
    with torch.no_grad():
        cond = model.encode(points)
        seq = torch.full((b, s), pad_id, dtype=torch.int64)
        inputs = torch.full((b, s), pad_id, dtype=torch.int64)
        inputs[:, 0] = cfg.bos_id
        done = torch.zeros(b, dtype=torch.bool)
        for i in range(s):
            logits = model.backbone(inputs, cond)[:, i, :]
            logits = logits[:, : cfg.vocab_size]  # BOS is input-only
            if strategy == "greedy":
                nxt = logits.argmax(dim=-1)
            else:
                probs = torch.softmax(logits / temperature, dim=-1).cpu().numpy()
                u = rng.random((b, 1))
                nxt = torch.from_numpy(
                    np.minimum((np.cumsum(probs, axis=-1) <= u).sum(axis=-1),
                               cfg.vocab_size - 1).astype(np.int64))
            nxt = torch.where(done, torch.full_like(nxt, pad_id), nxt)
            seq[:, i] = nxt
            done |= nxt == pad_id
            if i + 1 < s:
                inputs[:, i + 1] = nxt
            if bool(done.all()):
                break
        return seq
