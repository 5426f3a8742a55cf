"""Scoring and statistical comparison of generated expressions.

Per sample: validity check, constant fitting on the sample's own points,
clamped coefficient of determination and max-relative-error accuracies.
Invalid generations score zero rather than being excluded, keeping both
models' means over identical denominators. Reports aggregate into a
comparison table with a paired t-test on per-sample scores.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import betainc

from . import constfit as C
from . import vocab as V
from .dataset import SplitData
from .errors import SampleSetMismatch
from .vocab import Vocabulary

ACC_TAUS = (0.1, 0.01, 0.001)


def r2_score(y: Sequence[float], yhat: Sequence[float]) -> float:
    """Coefficient of determination, clamped to [0, 1].

    Degenerate target variance scores 1 for an exact match and 0 otherwise;
    non-finite predictions score 0.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.size < 2:
        raise ValueError("need two equal-length vectors of at least 2 points")
    if not np.all(np.isfinite(yhat)):
        return 0.0
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if np.array_equal(y, yhat) else 0.0
    r2 = 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot
    return max(0.0, r2)


def acc_tau(y: Sequence[float], yhat: Sequence[float], tau: float) -> bool:
    """True iff the worst pointwise relative error is within tau.

    Points with y == 0 fall back to absolute error.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError("length mismatch")
    if not np.all(np.isfinite(yhat)):
        return False
    err = np.abs(yhat - y)
    denom = np.abs(y)
    rel = np.where(denom > 0, err / np.where(denom > 0, denom, 1.0), err)
    return bool(rel.max() <= tau)


def paired_t_test(a: Sequence[float], b: Sequence[float]):
    """Two-sided paired t-test on differences a - b.

    Returns (t, p) with p from Student's t distribution (n-1 dof) via the
    regularized incomplete beta function. Degenerate convention for zero
    variance of the differences: p = 1 if the mean difference is 0, else 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two equal-length vectors of at least 2 values")
    d = a - b
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    nu = n - 1
    p = float(betainc(nu / 2.0, 0.5, nu / (nu + t * t)))
    return t, p


@dataclass
class SampleScore:
    sample_id: int
    rpn_valid: bool
    r2: float
    acc: Dict[float, bool]
    fit_sse: float
    generated: str
    error: str = ""


@dataclass
class EvalReport:
    tag: str
    scores: List[SampleScore] = field(default_factory=list)

    def aggregates(self) -> dict:
        n = len(self.scores)
        agg = {
            "n_samples": n,
            "mean_r2": float(np.mean([s.r2 for s in self.scores])) if n else 0.0,
            "valid_rpn_rate": float(np.mean([s.rpn_valid for s in self.scores])) if n else 0.0,
        }
        for tau in ACC_TAUS:
            key = f"acc_{tau:g}"
            agg[key] = float(np.mean([s.acc[tau] for s in self.scores])) if n else 0.0
        return agg

    def to_json_obj(self) -> dict:
        return {
            "tag": self.tag,
            "aggregates": self.aggregates(),
            "samples": [
                {
                    "sample_id": s.sample_id,
                    "valid": s.rpn_valid,
                    "r2": s.r2,
                    **{f"acc_{tau:g}": bool(s.acc[tau]) for tau in ACC_TAUS},
                    "sse": s.fit_sse,
                    "generated_expr": s.generated,
                    "error": s.error,
                }
                for s in self.scores
            ],
        }

    def save(self, json_path, csv_path=None) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if csv_path:
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["sample_id", "valid", "r2", "acc_0.1", "acc_0.01",
                            "acc_0.001", "sse", "generated_expr"])
                for s in self.scores:
                    w.writerow([s.sample_id, int(s.rpn_valid), f"{s.r2:.10g}",
                                int(s.acc[0.1]), int(s.acc[0.01]), int(s.acc[0.001]),
                                "" if math.isnan(s.fit_sse) else f"{s.fit_sse:.10g}",
                                s.generated])

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EvalReport":
        rep = cls(tag=obj.get("tag", ""))
        for row in obj["samples"]:
            rep.scores.append(SampleScore(
                sample_id=int(row["sample_id"]),
                rpn_valid=bool(row["valid"]),
                r2=float(row["r2"]),
                acc={tau: bool(row[f"acc_{tau:g}"]) for tau in ACC_TAUS},
                fit_sse=float(row["sse"]),
                generated=str(row.get("generated_expr", "")),
                error=str(row.get("error", "")),
            ))
        return rep

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_obj(json.load(fh))


def _zero_score(sample_id: int, generated: str, error: str = "") -> SampleScore:
    return SampleScore(sample_id, False, 0.0, {tau: False for tau in ACC_TAUS},
                       float("nan"), generated, error)


def score_sample(
    sample_id: int,
    generated_tokens: np.ndarray,
    points: np.ndarray,
    vocab: Vocabulary,
    rng: np.random.Generator,
    bounds=C.DEFAULT_BOUNDS,
    de_iterations: int = C.DE_ITERATIONS,
) -> SampleScore:
    """Fit constants and score one generated skeleton on its sample's points."""
    text = V.detokenize(generated_tokens, vocab)
    if not V.validate_rpn(generated_tokens, vocab).valid:
        return _zero_score(sample_id, text)
    problem = C.FitProblem(generated_tokens, points, vocab, bounds=bounds)
    fit = C.fit_constants(problem, rng, de_iterations=de_iterations)
    yhat = V.eval_rpn_points(generated_tokens, vocab, points[:, 0:2], fit.constants)
    y = points[:, 2]
    return SampleScore(
        sample_id=sample_id,
        rpn_valid=True,
        r2=r2_score(y, yhat),
        acc={tau: acc_tau(y, yhat, tau) for tau in ACC_TAUS},
        fit_sse=fit.sse,
        generated=text,
    )


def evaluate_records(
    split: SplitData,
    generate: Callable[[np.ndarray], np.ndarray],
    vocab: Vocabulary,
    seed: int = 0,
    tag: str = "",
    bounds=C.DEFAULT_BOUNDS,
    de_iterations: int = C.DE_ITERATIONS,
    generation_batch: int = 64,
    limit: Optional[int] = None,
    log: Optional[Callable[[str], None]] = None,
) -> EvalReport:
    """Generate a skeleton per record, then fit and score each sample.

    `generate` maps a (B, N, 3) point array to (B, S) token ids. Individual
    sample failures are recorded in the report, never raised.
    """
    m = len(split) if limit is None else min(limit, len(split))
    tokens = []
    for start in range(0, m, generation_batch):
        tokens.append(np.asarray(generate(split.points[start:start + generation_batch])))
        if log:
            log(f"generated {min(start + generation_batch, m)}/{m}")
    all_tokens = np.concatenate(tokens, axis=0) if tokens else np.zeros((0, 0), dtype=np.int64)
    report = EvalReport(tag=tag)
    for i in range(m):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i])))
        try:
            report.scores.append(score_sample(
                i, all_tokens[i], split.points[i], vocab, rng,
                bounds=bounds, de_iterations=de_iterations))
        except Exception as exc:  # per-sample totality
            report.scores.append(_zero_score(
                i, V.detokenize(all_tokens[i], vocab), error=str(exc)))
        if log and (i + 1) % 50 == 0:
            log(f"scored {i + 1}/{m}")
    return report


def compare_reports(a: EvalReport, b: EvalReport) -> dict:
    """Side-by-side aggregate table plus a paired t-test on per-sample R2."""
    ids_a = [s.sample_id for s in a.scores]
    ids_b = [s.sample_id for s in b.scores]
    if ids_a != ids_b:
        raise SampleSetMismatch("reports cover different sample ids")
    agg_a, agg_b = a.aggregates(), b.aggregates()
    r2_a = [s.r2 for s in a.scores]
    r2_b = [s.r2 for s in b.scores]
    t, p = paired_t_test(r2_a, r2_b)
    metrics = {}
    for key in ("mean_r2", "acc_0.1", "acc_0.01", "acc_0.001", "valid_rpn_rate"):
        metrics[key] = {
            a.tag or "a": agg_a[key],
            b.tag or "b": agg_b[key],
            "delta": agg_a[key] - agg_b[key],
        }
    return {
        "models": [a.tag or "a", b.tag or "b"],
        "n_samples": agg_a["n_samples"],
        "metrics": metrics,
        "paired_t_test_r2": {"t": t, "p": p},
    }


def format_comparison(cmp: dict) -> str:
    """Render the comparison dict as an aligned text table."""
    name_a, name_b = cmp["models"]
    lines = [f"{'Metric':<18} {name_a:>14} {name_b:>14} {'delta':>12}"]
    for key, row in cmp["metrics"].items():
        lines.append(f"{key:<18} {row[name_a]:>14.4f} {row[name_b]:>14.4f} "
                     f"{row['delta']:>12.4f}")
    tt = cmp["paired_t_test_r2"]
    lines.append(f"paired t-test on R2: t = {tt['t']:.4f}, p = {tt['p']:.6g} "
                 f"(n = {cmp['n_samples']})")
    return "\n".join(lines)
