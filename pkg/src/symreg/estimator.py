"""Scikit-learn style front end.

``SymbolicRegressor.fit(X, y)`` treats the rows of X (two features) plus the
targets as one point cloud, asks a trained checkpoint to generate a skeleton
for it, and fits the skeleton's constants to the data; ``predict`` evaluates
the fitted expression. This composes with the usual sklearn tooling
(``get_params`` / ``set_params``, cloning, pipelines operating per dataset).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import constfit as C
from . import metrics as M
from . import vocab as V
from .backbone import MODE_AR
from .checkpoint import load_checkpoint
from .errors import SymregError
from .generate import make_generator, schedule_from_meta
from .vocab import Vocabulary


class SymbolicRegressor(BaseEstimator, RegressorMixin):
    """Generate-and-fit symbolic regressor over bivariate data.

    Parameters
    ----------
    checkpoint : str
        Path to a trained checkpoint (either generation mode).
    num_steps : int or None
        Reverse-process steps for diffusion checkpoints (None = all).
    de_iterations : int
        Differential-evolution generations for constant fitting.
    constant_bounds : (float, float)
        Search bounds for each fitted constant.
    random_state : int
        Seed for generation and fitting.
    """

    def __init__(self, checkpoint=None, num_steps=None, de_iterations=100,
                 constant_bounds=(-10.0, 10.0), random_state=0):
        self.checkpoint = checkpoint
        self.num_steps = num_steps
        self.de_iterations = de_iterations
        self.constant_bounds = constant_bounds
        self.random_state = random_state

    def _generate(self, points: np.ndarray):
        if self.checkpoint is None:
            raise SymregError("no checkpoint configured")
        model, header = load_checkpoint(self.checkpoint)
        vocab = Vocabulary.from_json_obj(header["vocab"])
        schedule = None
        if model.config.mode != MODE_AR:
            schedule = schedule_from_meta(header.get("meta", {}), vocab.size,
                                          model.config.num_steps)
        generate = make_generator(model, vocab, seed=self.random_state,
                                  num_steps=self.num_steps, schedule=schedule)
        return generate(points)[0], vocab

    def fit(self, X, y):
        """Generate an expression for (X, y) and fit its constants."""
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        if X.shape[1] != 2:
            raise ValueError(f"expected 2 features, got {X.shape[1]}")
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y lengths differ")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("inputs must be finite")
        points = np.column_stack([X, y])
        tokens, vocab = self._generate(points[None, :, :])
        validity = V.validate_rpn(tokens, vocab)
        if not validity.valid:
            raise SymregError(
                f"generated sequence is not a valid expression ({validity.failure})")
        rng = np.random.Generator(np.random.PCG64(self.random_state))
        problem = C.FitProblem(tokens, points, vocab, bounds=tuple(self.constant_bounds))
        result = C.fit_constants(problem, rng, de_iterations=self.de_iterations)
        self.vocab_ = vocab
        self.tokens_ = tokens
        self.expression_ = V.detokenize(tokens, vocab)
        self.constants_ = result.constants
        self.sse_ = result.sse
        self.n_constants_ = problem.n_constants
        return self

    def predict(self, X):
        """Evaluate the fitted expression; non-finite evaluations come back NaN."""
        check_is_fitted(self, "expression_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2:
            raise ValueError(f"expected 2 features, got {X.shape[1]}")
        return V.eval_rpn_points(self.tokens_, self.vocab_, X, self.constants_)

    def score(self, X, y, sample_weight=None):
        """Clamped coefficient of determination (0 floor) on (X, y)."""
        yhat = self.predict(X)
        return M.r2_score(np.asarray(y, dtype=np.float64).ravel(), yhat)
