"""Token vocabulary and the postfix (RPN) expression engine.

Expressions are stored as fixed-length id sequences over a small categorical
vocabulary: two variables, a constant placeholder ``C``, arithmetic and
transcendental operators, and a ``PAD`` token that doubles as in-band length
encoding (canonical sequences carry all pads as a trailing suffix).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConstantCountMismatch,
    NonFiniteResult,
    SequenceTooLong,
    UnknownToken,
    VocabularyMismatch,
)

# Token kinds, as serialized in vocab.json.
KIND_PAD = "pad"
KIND_CONST = "const-placeholder"
KIND_VARIABLE = "variable"
KIND_BINARY = "binary-op"
KIND_UNARY = "unary-op"

# Validity failure reasons.
UNDERFLOW = "underflow-at-position"
NONUNIT_FINAL_STACK = "nonunit-final-stack"
PAD_INTERLEAVED = "pad-interleaved"

#: Default maximum sequence length; generated trees at the default depth
#: limit always fit.
DEFAULT_MAX_LEN = 32

_KIND_ARITY = {
    KIND_PAD: 0,
    KIND_CONST: 0,
    KIND_VARIABLE: 0,
    KIND_UNARY: 1,
    KIND_BINARY: 2,
}


@dataclass(frozen=True)
class Token:
    id: int
    text: str
    kind: str

    @property
    def arity(self) -> int:
        return _KIND_ARITY[self.kind]


@dataclass(frozen=True)
class RpnValidity:
    """Outcome of stack-simulation validity checking.

    ``failure`` is one of UNDERFLOW, NONUNIT_FINAL_STACK, PAD_INTERLEAVED
    (None when valid); ``position`` is the offending index for positional
    failures.
    """

    valid: bool
    failure: Optional[str] = None
    position: Optional[int] = None


class Vocabulary:
    """Ordered token set with contiguous ids 0..K-1.

    Exactly one pad token and one constant placeholder. The default
    vocabulary has K = 13 categories: PAD, C, x1, x2, four binary operators
    and five unary operators.
    """

    def __init__(self, tokens: Sequence[Token]):
        ids = [t.id for t in tokens]
        if ids != list(range(len(tokens))):
            raise ValueError("token ids must be contiguous 0..K-1 in order")
        if sum(t.kind == KIND_PAD for t in tokens) != 1:
            raise ValueError("vocabulary must contain exactly one pad token")
        if sum(t.kind == KIND_CONST for t in tokens) != 1:
            raise ValueError("vocabulary must contain exactly one constant placeholder")
        self.tokens = tuple(tokens)
        self._by_text = {t.text: t for t in tokens}
        if len(self._by_text) != len(tokens):
            raise ValueError("token texts must be unique")
        self.pad_id = next(t.id for t in tokens if t.kind == KIND_PAD)
        self.const_id = next(t.id for t in tokens if t.kind == KIND_CONST)
        self.arity = np.array([t.arity for t in tokens], dtype=np.int64)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def token(self, token_id: int) -> Token:
        return self.tokens[token_id]

    def id_of(self, text: str) -> int:
        try:
            return self._by_text[text].id
        except KeyError:
            raise UnknownToken(text) from None

    @classmethod
    def default(cls) -> "Vocabulary":
        spec = [
            ("PAD", KIND_PAD),
            ("C", KIND_CONST),
            ("x1", KIND_VARIABLE),
            ("x2", KIND_VARIABLE),
            ("+", KIND_BINARY),
            ("-", KIND_BINARY),
            ("*", KIND_BINARY),
            ("/", KIND_BINARY),
            ("sin", KIND_UNARY),
            ("cos", KIND_UNARY),
            ("exp", KIND_UNARY),
            ("log", KIND_UNARY),
            ("sqrt", KIND_UNARY),
        ]
        return cls([Token(i, text, kind) for i, (text, kind) in enumerate(spec)])

    # --- serialization ---

    def to_json_obj(self) -> dict:
        return {"tokens": [{"id": t.id, "text": t.text, "kind": t.kind} for t in self.tokens]}

    def canonical_json(self) -> str:
        """Canonical byte representation used for vocabulary identity checks."""
        return json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Vocabulary":
        toks = [Token(int(e["id"]), str(e["text"]), str(e["kind"])) for e in obj["tokens"]]
        return cls(toks)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_obj(json.load(fh))

    def require_identical(self, other: "Vocabulary", context: str = "") -> None:
        if self.canonical_json() != other.canonical_json():
            where = f" ({context})" if context else ""
            raise VocabularyMismatch(f"vocabularies differ{where}")


def active_len(ids: np.ndarray, pad_id: int) -> int:
    """Number of tokens before the first pad (the whole length if no pad)."""
    ids = np.asarray(ids)
    pads = np.flatnonzero(ids == pad_id)
    return int(pads[0]) if pads.size else int(ids.size)


def validate_rpn(ids: Sequence[int], vocab: Vocabulary) -> RpnValidity:
    """Stack-simulate a token sequence and decide RPN validity.

    Valid iff operands never underflow the stack, the final stack depth is
    exactly one, and no non-pad token follows a pad token.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = active_len(ids, vocab.pad_id)
    for i in range(n, ids.size):
        if ids[i] != vocab.pad_id:
            return RpnValidity(False, PAD_INTERLEAVED, position=i)
    depth = 0
    for i in range(n):
        a = int(vocab.arity[ids[i]])
        if a == 0:
            depth += 1
        else:
            if depth < a:
                return RpnValidity(False, UNDERFLOW, position=i)
            depth -= a - 1
    if depth != 1:
        return RpnValidity(False, NONUNIT_FINAL_STACK)
    return RpnValidity(True)


_UNARY_FN = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "log": np.log, "sqrt": np.sqrt}
_BINARY_FN = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.true_divide}


def count_constants(ids: Sequence[int], vocab: Vocabulary) -> int:
    ids = np.asarray(ids, dtype=np.int64)
    n = active_len(ids, vocab.pad_id)
    return int(np.count_nonzero(ids[:n] == vocab.const_id))


def eval_rpn_points(
    ids: Sequence[int],
    vocab: Vocabulary,
    xy: np.ndarray,
    constants: Sequence[float],
) -> np.ndarray:
    """Evaluate a valid skeleton on an (N, 2) array of inputs.

    Total function: domain errors and overflow come back as NaN/inf markers
    in the result instead of raising, so batch scoring never aborts.
    Constants are substituted in left-to-right placeholder order.
    """
    ids = np.asarray(ids, dtype=np.int64)
    xy = np.asarray(xy, dtype=np.float64)
    n = active_len(ids, vocab.pad_id)
    n_const = count_constants(ids, vocab)
    if len(constants) != n_const:
        raise ConstantCountMismatch(n_const, len(constants))
    npts = xy.shape[0]
    stack: list[np.ndarray] = []
    ci = 0
    with np.errstate(all="ignore"):
        for i in range(n):
            tok = vocab.token(int(ids[i]))
            if tok.kind == KIND_VARIABLE:
                stack.append(xy[:, 0] if tok.text == "x1" else xy[:, 1])
            elif tok.kind == KIND_CONST:
                stack.append(np.full(npts, float(constants[ci])))
                ci += 1
            elif tok.kind == KIND_UNARY:
                stack.append(_UNARY_FN[tok.text](stack.pop()))
            elif tok.kind == KIND_BINARY:
                b = stack.pop()
                a = stack.pop()
                stack.append(_BINARY_FN[tok.text](a, b))
            else:
                raise ValueError(f"pad token inside active prefix at {i}")
        if len(stack) != 1:
            raise ValueError("sequence is not a valid RPN expression")
        return np.asarray(stack[0], dtype=np.float64)


def eval_rpn(
    ids: Sequence[int],
    vocab: Vocabulary,
    x: Sequence[float],
    constants: Sequence[float] = (),
) -> float:
    """Evaluate at a single (x1, x2) point; raises NonFiniteResult on NaN/inf."""
    out = eval_rpn_points(ids, vocab, np.asarray(x, dtype=np.float64).reshape(1, 2), constants)
    val = float(out[0])
    if not np.isfinite(val):
        raise NonFiniteResult(f"evaluation produced {val}")
    return val


def tokenize(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
    """Whitespace-split token text into an id array padded to max_len."""
    words = text.split()
    if len(words) > max_len:
        raise SequenceTooLong(len(words), max_len)
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    for i, w in enumerate(words):
        ids[i] = vocab.id_of(w)
    return ids


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Space-join token texts over the non-pad prefix (inverse of tokenize)."""
    ids = np.asarray(ids, dtype=np.int64)
    n = active_len(ids, vocab.pad_id)
    return " ".join(vocab.token(int(t)).text for t in ids[:n])
