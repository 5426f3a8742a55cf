"""Discrete state-space diffusion over token sequences.

Forward process: at step t each token keeps its value with probability
1 - beta_t and otherwise switches uniformly to one of the other K - 1
categories. Writing gamma_t = 1 - beta_t * K / (K - 1), the one-step matrix
is Q_t = gamma_t * I + (1 - gamma_t) * J / K and, because I and J/K commute,
the cumulative product has the closed form

    Qbar_t = gbar_t * I + (1 - gbar_t) * J / K,   gbar_t = prod_{s<=t} gamma_s.

The reverse step marginalizes the exact one-step posterior over the model's
predicted clean-sequence distribution; training minimizes the per-position
KL to the exact posterior plus a weighted cross-entropy on the clean-token
prediction.

Timesteps are 1-based: t runs over 1..T, and gbar_0 = 1 (no corruption).
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import TimestepOutOfRange, UnnormalizedInput

#: Floor applied to probabilities before logs (posterior products underflow
#: at large t otherwise).
PROB_FLOOR = 1e-30

DEFAULT_NUM_STEPS = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02


class NoiseSchedule:
    """Per-step corruption rates and cumulative retention products.

    betas[t-1] is the corruption probability at step t; gamma/gamma_bar are
    the retention factors defined above, which depend on the category count.
    """

    def __init__(self, betas: np.ndarray, num_classes: int):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if num_classes < 2:
            raise ValueError("need at least two categories")
        gammas = 1.0 - betas * num_classes / (num_classes - 1)
        if np.any(gammas <= 0.0):
            raise ValueError("beta too large: gamma must stay positive")
        self.betas = betas
        self.num_classes = int(num_classes)
        self.gammas = gammas
        self.gamma_bar = np.cumprod(gammas)

    @property
    def num_steps(self) -> int:
        return int(self.betas.size)

    @classmethod
    def cosine(
        cls,
        num_classes: int,
        num_steps: int = DEFAULT_NUM_STEPS,
        beta_min: float = DEFAULT_BETA_MIN,
        beta_max: float = DEFAULT_BETA_MAX,
    ) -> "NoiseSchedule":
        """Cosine interpolation of beta between the endpoints.

        The grid is (t-1)/(T-1) so beta_1 = beta_min and beta_T = beta_max
        hold exactly; betas are monotone nondecreasing.
        """
        if num_steps < 2:
            raise ValueError("need num_steps >= 2")
        t = np.arange(num_steps, dtype=np.float64) / (num_steps - 1)
        betas = beta_min + (beta_max - beta_min) * (1.0 - np.cos(math.pi * t)) / 2.0
        return cls(betas, num_classes)


class TransitionModel:
    """Uniform-over-others transition family for a fixed schedule."""

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule
        self.num_classes = schedule.num_classes
        self.num_steps = schedule.num_steps
        self._gammas = torch.from_numpy(schedule.gammas)
        # gbar_full[t] = gbar_t with gbar_0 = 1, so t indexes directly.
        gbar_full = np.concatenate([[1.0], schedule.gamma_bar])
        self._gamma_bar_full = torch.from_numpy(gbar_full)

    def _check_t(self, t: torch.Tensor, lo: int = 1) -> None:
        if t.numel() == 0:
            return
        if int(t.min()) < lo or int(t.max()) > self.num_steps:
            raise TimestepOutOfRange(
                f"t must lie in {lo}..{self.num_steps}, got [{int(t.min())}, {int(t.max())}]")

    def gamma(self, t: torch.Tensor) -> torch.Tensor:
        return self._gammas[t - 1]

    def gamma_bar(self, t: torch.Tensor) -> torch.Tensor:
        """gbar_t for t in 0..T (gbar_0 = 1)."""
        return self._gamma_bar_full[t]

    def one_step_matrix(self, t: int) -> np.ndarray:
        """Explicit K x K matrix Q_t (diagnostics and tests)."""
        self._check_t(torch.tensor([t]))
        k = self.num_classes
        beta = self.schedule.betas[t - 1]
        mat = np.full((k, k), beta / (k - 1), dtype=np.float64)
        np.fill_diagonal(mat, 1.0 - beta)
        return mat

    def cumulative_matrix(self, t: int) -> np.ndarray:
        """Closed-form K x K matrix Qbar_t."""
        self._check_t(torch.tensor([t]))
        k = self.num_classes
        gbar = self.schedule.gamma_bar[t - 1]
        mat = np.full((k, k), (1.0 - gbar) / k, dtype=np.float64)
        np.fill_diagonal(mat, gbar + (1.0 - gbar) / k)
        return mat


def q_xt_probs(
    x0: torch.Tensor,
    t: torch.Tensor,
    tm: TransitionModel,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """Marginal q(x_t | x_0) per position: (B, S) ids, (B,) steps -> (B, S, K)."""
    tm._check_t(t)
    k = tm.num_classes
    gbar = tm.gamma_bar(t).to(dtype)[:, None, None]  # (B,1,1)
    onehot = F.one_hot(x0, k).to(dtype)
    return gbar * onehot + (1.0 - gbar) / k


def _categorical(probs: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Inverse-CDF categorical draw per row; deterministic given the generator."""
    p = probs.detach().cpu().to(torch.float64).numpy()
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(size=p.shape[:-1] + (1,))
    idx = (cdf <= u).sum(axis=-1)
    return torch.from_numpy(np.minimum(idx, p.shape[-1] - 1).astype(np.int64))


def sample_xt(
    x0: torch.Tensor,
    t: torch.Tensor,
    tm: TransitionModel,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Draw x_t ~ q(x_t | x_0) per position."""
    return _categorical(q_xt_probs(x0, t, tm), rng)


def posterior(
    x_t: torch.Tensor,
    x0_dist: torch.Tensor,
    t: torch.Tensor,
    tm: TransitionModel,
) -> torch.Tensor:
    """Reverse-step distribution over x_{t-1}, marginalized over x0_dist.

    For each position the unnormalized mass at candidate j is

        Q_t[j, x_t] * sum_i x0_dist[i] * Qbar_{t-1}[i, j]

    normalized over j (products taken in log space with a 1e-30 floor).
    With a one-hot x0_dist this is the exact Bayes posterior
    q(x_{t-1} | x_t, x_0). For t = 1 the result is x0_dist itself: the final
    step outputs the model's clean-sequence distribution.
    """
    tm._check_t(t)
    b, s, k = x0_dist.shape
    if x_t.shape != (b, s):
        raise UnnormalizedInput(f"x_t shape {tuple(x_t.shape)} does not match x0_dist")
    rowsum = x0_dist.sum(dim=-1)
    if (rowsum - 1.0).abs().max().item() > 1e-6:
        raise UnnormalizedInput("x0_dist rows must sum to 1 within 1e-6")
    dtype = x0_dist.dtype

    gamma_t = tm.gamma(t).to(dtype)[:, None, None]
    gbar_prev = tm.gamma_bar(t - 1).to(dtype)[:, None, None]
    xt_onehot = F.one_hot(x_t, k).to(dtype)
    fact1 = gamma_t * xt_onehot + (1.0 - gamma_t) / k
    fact2 = gbar_prev * x0_dist + (1.0 - gbar_prev) / k
    log_un = torch.log(fact1.clamp_min(PROB_FLOOR)) + torch.log(fact2.clamp_min(PROB_FLOOR))
    out = torch.softmax(log_un, dim=-1)

    is_first = (t == 1)[:, None, None]
    if bool(is_first.any()):
        out = torch.where(is_first, x0_dist, out)
    return out


def d3pm_loss(
    x0: torch.Tensor,
    points: torch.Tensor,
    t: torch.Tensor,
    model: Callable[..., torch.Tensor],
    tm: TransitionModel,
    lam: float,
    rng: np.random.Generator,
):
    """Hybrid training loss at sampled timesteps.

    Draws x_t from the forward process, asks the model for clean-token
    logits, and averages over batch and positions the KL between the exact
    posterior (one-hot x_0) and the model-induced posterior, plus lam times
    the cross-entropy of the logits against x_0. At t = 1 the KL term
    reduces to the decoder negative log-likelihood -log p(x_0 | x_1).

    Returns (loss, diagnostics); diagnostics carries the sampled x_t and the
    detached term values.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    x_t = sample_xt(x0, t, tm, rng)
    logits = model(points, x_t, t)
    k = tm.num_classes
    dtype = logits.dtype

    x0_onehot = F.one_hot(x0, k).to(dtype)
    q_true = posterior(x_t, x0_onehot, t, tm)
    p_model = posterior(x_t, torch.softmax(logits, dim=-1), t, tm)
    kl = (q_true * (torch.log(q_true.clamp_min(PROB_FLOOR))
                    - torch.log(p_model.clamp_min(PROB_FLOOR)))).sum(dim=-1)
    ce = F.cross_entropy(logits.reshape(-1, k), x0.reshape(-1), reduction="none")
    kl_term = kl.mean()
    ce_term = ce.mean()
    loss = kl_term + lam * ce_term
    diag = {
        "x_t": x_t,
        "kl": float(kl_term.detach()),
        "ce": float(ce_term.detach()),
    }
    return loss, diag


def sample(
    model: Callable[..., torch.Tensor],
    points: torch.Tensor,
    tm: TransitionModel,
    rng: np.random.Generator,
    max_len: int,
    num_steps: Optional[int] = None,
) -> torch.Tensor:
    """Ancestral sampling conditioned on a batch of point sets.

    Starts from uniform noise at t = num_steps (default T); for t down to 2,
    predicts clean-token logits, forms the marginalized posterior and draws
    x_{t-1} per position; at t = 1 returns the argmax of the clean-token
    logits. Deterministic given the generator.
    """
    steps = tm.num_steps if num_steps is None else int(num_steps)
    if not 1 <= steps <= tm.num_steps:
        raise TimestepOutOfRange(f"num_steps must lie in 1..{tm.num_steps}")
    b = points.shape[0]
    k = tm.num_classes
    if isinstance(model, torch.nn.Module):
        model.eval()
    x = torch.from_numpy(rng.integers(0, k, size=(b, max_len)).astype(np.int64))
    with torch.no_grad():
        # The condition depends only on the points; encode once when possible.
        if hasattr(model, "encode") and hasattr(model, "backbone"):
            cond = model.encode(points)
            denoise = lambda xs, ts: model.backbone(xs, cond, ts)
        else:
            denoise = lambda xs, ts: model(points, xs, ts)
        for step in range(steps, 1, -1):
            t = torch.full((b,), step, dtype=torch.int64)
            logits = denoise(x, t)
            probs = posterior(x, torch.softmax(logits, dim=-1), t, tm)
            x = _categorical(probs, rng)
        t = torch.ones(b, dtype=torch.int64)
        logits = denoise(x, t)
        return logits.argmax(dim=-1)
