"""Estimator-style wrapper around the equilibrium solvers."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .engine import solve_mc_mfe, solve_rp_mfe
from .errors import IndexOutOfRange, InvalidParams
from .model import MarketSpec, load_spec, parse_config


def _as_spec(X) -> MarketSpec:
    if isinstance(X, MarketSpec):
        return X
    if isinstance(X, dict):
        return parse_config(X)
    if isinstance(X, str):
        return parse_config(X) if "\n" in X else load_spec(X)
    raise InvalidParams(f"cannot build a market spec from {type(X).__name__}")


class EquilibriumSolver(BaseEstimator):
    """Fit solves the equilibrium of a market spec; predictions query it.

    ``fit`` accepts a MarketSpec, a config mapping, config text, or a config
    path / bundled name. Query rows are integer index tuples:

    - ``predict``: (n, s, y, z, population, type) -> position
    - ``predict_proba``: (n, s, y) -> [down, up] transition probabilities
    - ``transform``: (n, s, y) -> mean position of every population
    """

    def __init__(self, equilibrium: str = "market_clearing", exogenous_p=None, tol: float = 1e-10):
        self.equilibrium = equilibrium
        self.exogenous_p = exogenous_p
        self.tol = tol

    def fit(self, X, y=None):
        if self.equilibrium not in ("market_clearing", "relative_performance"):
            raise InvalidParams(f"unknown equilibrium {self.equilibrium!r}")
        if not self.tol > 0:
            raise InvalidParams("tol must be positive")
        spec = _as_spec(X)
        if self.equilibrium == "relative_performance":
            if self.exogenous_p is None:
                raise InvalidParams("relative_performance needs exogenous_p")
            sol = solve_rp_mfe(spec, self.exogenous_p, tol=self.tol)
        else:
            sol = solve_mc_mfe(spec, tol=self.tol)
        self.solution_ = sol
        self.regime_ = sol.regime.kind
        self.n_populations_ = spec.m
        self.p_table_ = sol.p_table
        return self

    def _rows(self, X, width: int) -> np.ndarray:
        check_is_fitted(self, "solution_")
        X = check_array(X, dtype=None, ensure_2d=True)
        if X.shape[1] != width:
            raise ValueError(f"expected {width} columns, got {X.shape[1]}")
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError("query rows must hold integer indices")
        X = X.astype(np.int64)
        for n in X[:, 0]:
            if not 0 <= n < len(self.solution_.steps):
                raise IndexOutOfRange(f"time {n} outside 0..{len(self.solution_.steps) - 1}")
        return X

    def _node(self, n, s, y):
        rec = self.solution_.steps[n]
        if not (0 <= s < rec.p.shape[0] and 0 <= y < rec.p.shape[1]):
            raise IndexOutOfRange(f"node ({s}, {y}) outside the time-{n} grid {rec.p.shape}")
        return rec

    def predict(self, X) -> np.ndarray:
        X = self._rows(X, 6)
        return np.array([self.solution_.strategy(*row) for row in X])

    def predict_proba(self, X) -> np.ndarray:
        X = self._rows(X, 3)
        p = np.array([self._node(n, s, y).p[s, y] for n, s, y in X])
        return np.column_stack([1.0 - p, p])

    def transform(self, X) -> np.ndarray:
        X = self._rows(X, 3)
        return np.array([self._node(n, s, y).mean_strategy[:, s, y] for n, s, y in X])

    def score(self, X=None, y=None) -> float:
        """Negative worst market-clearing residual (0 is perfect)."""
        check_is_fitted(self, "solution_")
        return -float(self.solution_.clearing_residual)
