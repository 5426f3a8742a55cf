"""Synthetic bivariate corpus: random expression trees, sampled points, splits.

Records are JSON lines with floats written at 17 significant digits so the
files round-trip exactly and regeneration with a fixed seed is byte
identical. Each record's RNG stream is derived from ``seed XOR record_index``
(PCG64), so generation order or parallelism cannot change the corpus.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import vocab as V
from .errors import DataError, MalformedRecord, SampleDiscarded
from .vocab import Vocabulary

RNG_NAME = "numpy-pcg64(seed xor record_index)"

# Node-type probabilities for tree growth; leaves are forced at max depth.
P_BINARY = 0.40
P_UNARY = 0.20
_LEAVES = ("x1", "x2", "C")

# Consecutive non-finite redraws tolerated before the sample is discarded.
POINT_REJECTION_BUDGET = 50


@dataclass
class DatasetConfig:
    n_samples: int = 1000
    n_points: int = 200
    split: Tuple[float, float, float] = (0.90, 0.05, 0.05)
    max_depth: int = 4
    x_range: Tuple[float, float] = (-3.0, 3.0)
    const_range: Tuple[float, float] = (-2.0, 2.0)
    max_len: int = V.DEFAULT_MAX_LEN
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-12:
            raise ValueError("split fractions must sum to 1")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")

    def split_counts(self) -> Tuple[int, int, int]:
        n = self.n_samples
        n_train = int(round(n * self.split[0]))
        n_test = int(round(n * self.split[1]))
        n_train = min(n_train, n)
        n_test = min(n_test, n - n_train)
        return n_train, n_test, n - n_train - n_test


def _grow_postfix(rng: np.random.Generator, cfg: DatasetConfig, vocab: Vocabulary,
                  depth: int, out_texts: List[str], out_consts: List[float]) -> None:
    u = rng.random()
    if depth >= cfg.max_depth or u >= P_BINARY + P_UNARY:
        leaf = _LEAVES[rng.integers(0, len(_LEAVES))]
        if leaf == "C":
            out_consts.append(float(rng.uniform(*cfg.const_range)))
        out_texts.append(leaf)
    elif u < P_BINARY:
        op = ("+", "-", "*", "/")[rng.integers(0, 4)]
        _grow_postfix(rng, cfg, vocab, depth + 1, out_texts, out_consts)
        _grow_postfix(rng, cfg, vocab, depth + 1, out_texts, out_consts)
        out_texts.append(op)
    else:
        op = ("sin", "cos", "exp", "log", "sqrt")[rng.integers(0, 5)]
        _grow_postfix(rng, cfg, vocab, depth + 1, out_texts, out_consts)
        out_texts.append(op)


def sample_expression(rng: np.random.Generator, cfg: DatasetConfig,
                      vocab: Vocabulary) -> Tuple[np.ndarray, List[float]]:
    """Draw a random expression; rejects draws with no variable or over-length.

    Returns the postfix skeleton (ids padded to max_len, constants replaced
    by the placeholder) and the drawn constants in placeholder order. The
    postfix serialization of a tree is valid RPN by construction.
    """
    while True:
        texts: List[str] = []
        consts: List[float] = []
        _grow_postfix(rng, cfg, vocab, 1, texts, consts)
        if len(texts) > cfg.max_len:
            continue
        if not any(t in ("x1", "x2") for t in texts):
            continue
        return V.tokenize(" ".join(texts), vocab, cfg.max_len), consts


def sample_points(tokens: np.ndarray, constants: Sequence[float],
                  rng: np.random.Generator, cfg: DatasetConfig,
                  vocab: Vocabulary) -> np.ndarray:
    """Draw n_points finite (x1, x2, y) triples for one expression.

    Non-finite evaluations are rejected and redrawn; POINT_REJECTION_BUDGET
    consecutive rejections raise SampleDiscarded so the caller can redraw
    the expression.
    """
    lo, hi = cfg.x_range
    pts = np.empty((cfg.n_points, 3), dtype=np.float64)
    consecutive = 0
    filled = 0
    while filled < cfg.n_points:
        xy = rng.uniform(lo, hi, size=(1, 2))
        y = float(V.eval_rpn_points(tokens, vocab, xy, constants)[0])
        if np.isfinite(y):
            pts[filled, 0:2] = xy[0]
            pts[filled, 2] = y
            filled += 1
            consecutive = 0
        else:
            consecutive += 1
            if consecutive >= POINT_REJECTION_BUDGET:
                raise SampleDiscarded(f"{POINT_REJECTION_BUDGET} consecutive non-finite draws")
    return pts


def generate_record(index: int, cfg: DatasetConfig, vocab: Vocabulary) -> dict:
    """Generate one sample on its own RNG stream (deterministic per index)."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed ^ index))
    while True:
        tokens, consts = sample_expression(rng, cfg, vocab)
        try:
            pts = sample_points(tokens, consts, rng, cfg, vocab)
        except SampleDiscarded:
            continue
        return {
            "expr": V.detokenize(tokens, vocab),
            "tokens": tokens,
            "constants": consts,
            "points": pts,
        }


def _g17(x: float) -> str:
    s = format(float(x), ".17g")
    # JSON has no inf/nan literals; generated values are always finite.
    return s


def record_to_line(rec: dict) -> str:
    tokens = ",".join(str(int(t)) for t in rec["tokens"])
    consts = ",".join(_g17(c) for c in rec["constants"])
    pts = ",".join("[%s,%s,%s]" % tuple(_g17(v) for v in p) for p in rec["points"])
    return '{"expr":%s,"tokens":[%s],"constants":[%s],"points":[%s]}' % (
        json.dumps(rec["expr"]), tokens, consts, pts)


def build_dataset(cfg: DatasetConfig, out_dir, vocab: Optional[Vocabulary] = None) -> dict:
    """Generate the corpus and write train/test/validate JSONL files.

    Also writes vocab.json and manifest.json (config echo, counts, seed,
    RNG name). Returns the manifest dict. Byte-identical for a fixed seed.
    """
    vocab = vocab or Vocabulary.default()
    os.makedirs(out_dir, exist_ok=True)
    n_train, n_test, n_val = cfg.split_counts()
    bounds = {"train": (0, n_train),
              "test": (n_train, n_train + n_test),
              "validate": (n_train + n_test, cfg.n_samples)}
    for name, (lo, hi) in bounds.items():
        path = os.path.join(out_dir, f"{name}.jsonl")
        try:
            with open(path, "w", encoding="utf-8") as fh:
                for idx in range(lo, hi):
                    fh.write(record_to_line(generate_record(idx, cfg, vocab)))
                    fh.write("\n")
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
    vocab.save(os.path.join(out_dir, "vocab.json"))
    manifest = {
        "config": asdict(cfg),
        "counts": {"train": n_train, "test": n_test, "validate": n_val},
        "seed": cfg.seed,
        "rng": RNG_NAME,
        "vocab_sha256": hashlib.sha256(vocab.canonical_json().encode()).hexdigest(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


@dataclass
class SplitData:
    """One split loaded into memory as dense arrays."""

    points: np.ndarray   # (M, N, 3) float64
    tokens: np.ndarray   # (M, S) int64
    exprs: List[str] = field(default_factory=list)
    constants: List[List[float]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def load_manifest(dataset_dir) -> dict:
    path = os.path.join(dataset_dir, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def load_split(dataset_dir, name: str, vocab: Optional[Vocabulary] = None) -> SplitData:
    """Load one JSONL split, verifying the stored vocabulary if one is given.

    Raises MalformedRecord (with line number) on any record with the wrong
    point count, token length, or out-of-range token ids.
    """
    dir_vocab = Vocabulary.load(os.path.join(dataset_dir, "vocab.json"))
    if vocab is not None:
        vocab.require_identical(dir_vocab, context=f"dataset {dataset_dir}")
    manifest = load_manifest(dataset_dir)
    n_points = int(manifest["config"]["n_points"])
    max_len = int(manifest["config"]["max_len"])
    path = os.path.join(dataset_dir, f"{name}.jsonl")
    points, tokens, exprs, consts = [], [], [], []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(path, ln, f"invalid JSON: {exc}") from exc
            pts = np.asarray(rec.get("points", []), dtype=np.float64)
            if pts.ndim != 2 or pts.shape != (n_points, 3):
                raise MalformedRecord(path, ln, f"expected {n_points}x3 points, got {pts.shape}")
            toks = np.asarray(rec.get("tokens", []), dtype=np.int64)
            if toks.shape != (max_len,):
                raise MalformedRecord(path, ln, f"expected {max_len} token ids, got {toks.shape}")
            if toks.min() < 0 or toks.max() >= dir_vocab.size:
                raise MalformedRecord(path, ln, "token id out of range")
            points.append(pts)
            tokens.append(toks)
            exprs.append(rec.get("expr", ""))
            consts.append([float(c) for c in rec.get("constants", [])])
    if not tokens:
        return SplitData(np.zeros((0, n_points, 3)), np.zeros((0, max_len), dtype=np.int64))
    return SplitData(np.stack(points), np.stack(tokens), exprs, consts)


def iter_batches(split: SplitData, batch_size: int, shuffle_seed: int,
                 epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield every record exactly once, in an order determined by
    (shuffle_seed, epoch) only."""
    m = len(split)
    order = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([shuffle_seed, epoch]))).permutation(m)
    for start in range(0, m, batch_size):
        idx = order[start:start + batch_size]
        yield split.points[idx], split.tokens[idx]


def verify_records(split: SplitData, vocab: Vocabulary, rel_tol: float = 1e-9) -> None:
    """Re-check stored-record invariants: valid RPN, finite points, and that
    the skeleton with its true constants reproduces every stored y."""
    for i in range(len(split)):
        validity = V.validate_rpn(split.tokens[i], vocab)
        if not validity.valid:
            raise DataError(f"record {i}: invalid RPN ({validity.failure})")
        pts = split.points[i]
        if not np.all(np.isfinite(pts)):
            raise DataError(f"record {i}: non-finite point")
        y = V.eval_rpn_points(split.tokens[i], vocab, pts[:, 0:2], split.constants[i])
        err = np.abs(y - pts[:, 2]) / np.maximum(1.0, np.abs(pts[:, 2]))
        if not np.all(np.isfinite(y)) or err.max() > rel_tol:
            raise DataError(f"record {i}: stored y not reproduced (max rel err {err.max():g})")
