"""OLS with classical and HC0 sandwich covariances, plus best-subset selection."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla
from scipy import stats

__all__ = [
    "DesignMatrix",
    "FitResult",
    "ModelSelection",
    "RankDeficientError",
    "critical_value",
    "fit_ols",
    "select_model",
]

RANK_TOL = 1e-10
INTERCEPT = "intercept"


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, columns: Sequence[str]) -> None:
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; dependent columns: {', '.join(self.columns)}")


def critical_value(alpha: float = 0.05) -> float:
    """Two-sided normal critical value (1.959964 at alpha = 0.05)."""
    return float(stats.norm.ppf(1.0 - alpha / 2.0))


@dataclass(frozen=True)
class DesignMatrix:
    """Regressors with a leading intercept column, response and column names."""

    X: np.ndarray
    y: np.ndarray
    names: tuple[str, ...]
    standardized: bool = False
    row_ids: tuple = ()

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be n x (p+1) with len(y) == n")
        if X.shape[1] != len(self.names):
            raise ValueError("one name per column is required")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValueError("design matrix and response must be finite")
        if X.shape[0] <= X.shape[1]:
            raise ValueError(f"need n > p + 1 rows, got n={X.shape[0]} for {X.shape[1]} columns")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "row_ids", tuple(self.row_ids) if self.row_ids else tuple(range(X.shape[0])))

    @classmethod
    def from_frame(
        cls, frame: pd.DataFrame, columns: Sequence[str], y: Sequence[float] | np.ndarray, *, intercept: bool = True
    ) -> "DesignMatrix":
        cols = [frame[c].to_numpy(dtype=float) for c in columns]
        if intercept:
            cols.insert(0, np.ones(len(frame)))
        names = ((INTERCEPT,) if intercept else ()) + tuple(columns)
        return cls(np.column_stack(cols), np.asarray(y, dtype=float), names, row_ids=tuple(frame.index))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        """Number of non-intercept regressors."""
        return self.X.shape[1] - (1 if self.names and self.names[0] == INTERCEPT else 0)

    def drop_rows(self, rows: Sequence[int]) -> "DesignMatrix":
        keep = np.ones(self.n, dtype=bool)
        keep[list(rows)] = False
        ids = tuple(r for r, k in zip(self.row_ids, keep) if k)
        return DesignMatrix(self.X[keep], self.y[keep], self.names, self.standardized, ids)


@dataclass(frozen=True)
class FitResult:
    names: tuple[str, ...]
    coef: np.ndarray
    resid: np.ndarray
    cov_classical: np.ndarray
    cov_sandwich: np.ndarray
    xtx_inv: np.ndarray
    r2: float
    adj_r2: float
    aic: float
    n: int
    p: int
    alpha: float = 0.05
    weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def se_classical(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_classical), 0.0, None))

    @property
    def se_sandwich(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_sandwich), 0.0, None))

    se = se_sandwich

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se_sandwich

    @property
    def z_classical(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se_classical

    @property
    def rss(self) -> float:
        return float(self.resid @ self.resid)

    def significant(self, z_crit: float | None = None) -> np.ndarray:
        z_crit = critical_value(self.alpha) if z_crit is None else z_crit
        return np.abs(self.coef) > z_crit * self.se_sandwich

    def to_dict(self) -> dict:
        def clean(v: float) -> float | None:
            return float(v) if math.isfinite(v) else None

        return {
            "names": list(self.names),
            "coefficients": [float(v) for v in self.coef],
            "se_sandwich": [float(v) for v in self.se_sandwich],
            "se_classical": [float(v) for v in self.se_classical],
            "z": [clean(v) for v in self.z],
            "z_classical": [clean(v) for v in self.z_classical],
            "r2": float(self.r2),
            "adj_r2": float(self.adj_r2),
            "aic": clean(self.aic),
            "n": self.n,
            "p": self.p,
            "alpha": self.alpha,
        }


def _pivoted_solve(X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Least squares through a column-pivoted QR; returns (coef, inverse Gram)."""
    Q, R, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int((diag > RANK_TOL * diag[0]).sum()) if diag.size and diag[0] > 0 else 0
    if rank < X.shape[1]:
        raise RankDeficientError([names[j] for j in piv[rank:]])
    coef_p = sla.solve_triangular(R, Q.T @ y)
    Rinv = sla.solve_triangular(R, np.eye(R.shape[0]))
    inv_p = Rinv @ Rinv.T
    coef = np.empty_like(coef_p)
    coef[piv] = coef_p
    inv = np.empty_like(inv_p)
    inv[np.ix_(piv, piv)] = inv_p
    return coef, inv


def fit_ols(dm: DesignMatrix, weights: np.ndarray | None = None, *, alpha: float = 0.05) -> FitResult:
    """Least-squares fit with classical and HC0 sandwich covariances.

    With ``weights`` the fit minimises sum w_i e_i^2 and the sandwich meat is
    sum w_i^2 e_i^2 x_i x_i^T (weighted scores), so a zero weight removes a
    row entirely.  Unit weights give ordinary OLS.
    """
    X, y = dm.X, dm.y
    n, k = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    coef, inv = _pivoted_solve(X * sw[:, None], y * sw, dm.names)
    resid = y - X @ coef
    inv = (inv + inv.T) / 2.0
    scores = X * (w * resid)[:, None]
    meat = scores.T @ scores
    cov_sw = inv @ meat @ inv
    cov_sw = (cov_sw + cov_sw.T) / 2.0
    n_eff = float(w.sum())
    wrss = float(w @ resid**2)
    dof = n_eff - k
    cov_cl = inv * (wrss / dof) if dof > 0 else np.full_like(inv, np.nan)
    has_icept = bool(dm.names) and dm.names[0] == INTERCEPT
    ybar = float(w @ y / n_eff) if has_icept else 0.0
    tss = float(w @ (y - ybar) ** 2)
    r2 = 1.0 - wrss / tss if tss > 0 else 0.0
    p = k - (1 if has_icept else 0)
    adj = 1.0 - (1.0 - r2) * (n_eff - (1 if has_icept else 0)) / dof if dof > 0 else float("nan")
    aic = n_eff * math.log(wrss / n_eff) + 2 * k if wrss > 0 else float("-inf")
    return FitResult(dm.names, coef, resid, cov_cl, cov_sw, inv, r2, adj, aic, n, p, alpha, None if weights is None else w)


# -- model selection -------------------------------------------------------------


@dataclass(frozen=True)
class ModelSelection:
    chosen: tuple[str, ...]
    scores: Mapping[tuple[str, ...], float]
    criterion: str
    method: str
    n_rank_deficient: int = 0

    def to_dict(self) -> dict:
        return {
            "chosen": list(self.chosen),
            "criterion": self.criterion,
            "method": self.method,
            "n_evaluated": len(self.scores),
            "n_rank_deficient": self.n_rank_deficient,
            "score": self.scores[self.chosen],
        }


CRITERIA = ("adjusted_r2", "aic")


def _score(X: np.ndarray, y: np.ndarray, criterion: str) -> float:
    """Higher is better for both criteria (AIC is negated)."""
    n, k = X.shape
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    rss = float(np.sum((y - X @ coef) ** 2))
    if criterion == "aic":
        return -(n * math.log(rss / n) + 2 * k) if rss > 0 else math.inf
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    return 1.0 - (1.0 - r2) * (n - 1) / (n - k)


def _full_rank(X: np.ndarray) -> bool:
    R = sla.qr(X, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(R))
    return bool(d.size and d[0] > 0 and (d > RANK_TOL * d[0]).all())


def _better(a: tuple[float, tuple[str, ...]], b: tuple[float, tuple[str, ...]] | None) -> bool:
    if b is None:
        return True
    sa, sb = a[0], b[0]
    if math.isfinite(sa) and math.isfinite(sb):
        if abs(sa - sb) > 1e-12 * max(1.0, abs(sa), abs(sb)):
            return sa > sb
    elif sa != sb:
        return sa > sb
    return a[1] < b[1]


def select_model(
    features: pd.DataFrame,
    y: Sequence[float] | np.ndarray,
    max_terms: int = 5,
    criterion: str = "adjusted_r2",
    *,
    alpha: float = 0.05,
    exhaustive_limit: int = 20,
) -> tuple[ModelSelection, FitResult, DesignMatrix]:
    """Pick the subset of at most ``max_terms`` features that scores best.

    All subsets are tried when there are at most ``exhaustive_limit``
    candidates, otherwise greedy forward selection is used.  Equal scores are
    resolved in favour of the lexicographically smaller sorted name tuple.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    names = sorted(str(c) for c in features.columns)
    if not names:
        raise ValueError("at least one candidate feature is required")
    yv = np.asarray(y, dtype=float)
    n = len(yv)
    max_terms = min(max_terms, len(names))
    if n <= max_terms + 1:
        raise ValueError(f"n={n} rows cannot support models with {max_terms} terms")
    cols = {c: features[c].to_numpy(dtype=float) for c in names}
    ones = np.ones(n)
    scores: dict[tuple[str, ...], float] = {}
    deficient = 0

    def evaluate(subset: tuple[str, ...]) -> float | None:
        nonlocal deficient
        X = np.column_stack([ones] + [cols[c] for c in subset])
        if not _full_rank(X):
            deficient += 1
            return None
        s = _score(X, yv, criterion)
        scores[subset] = s
        return s

    best: tuple[float, tuple[str, ...]] | None = None
    if len(names) <= exhaustive_limit:
        method = "exhaustive"
        for size in range(1, max_terms + 1):
            for subset in itertools.combinations(names, size):
                s = evaluate(subset)
                if s is not None and _better((s, subset), best):
                    best = (s, subset)
    else:
        method = "greedy_forward"
        current: tuple[str, ...] = ()
        for _ in range(max_terms):
            step: tuple[float, tuple[str, ...]] | None = None
            for c in names:
                if c in current:
                    continue
                subset = tuple(sorted(current + (c,)))
                s = evaluate(subset)
                if s is not None and _better((s, subset), step):
                    step = (s, subset)
            if step is None:
                break
            current = step[1]
            if _better(step, best):
                best = step
    if best is None:
        raise RankDeficientError(names)
    chosen = best[1]
    dm = DesignMatrix.from_frame(features, chosen, yv)
    fit = fit_ols(dm, alpha=alpha)
    return ModelSelection(chosen, scores, criterion, method, deficient), fit, dm
