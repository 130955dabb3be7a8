"""Approximate maximum influence perturbation for OLS coefficients.

For each coefficient and each target conclusion (sign, significance, or a
significant result of the opposite sign) this finds the smallest set of
rows whose removal is predicted, to first order in the row weights, to
overturn the conclusion, then refits without those rows to confirm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .regress import DesignMatrix, FitResult, RankDeficientError, critical_value, fit_ols

__all__ = [
    "ALPHA_BINS",
    "TARGETS",
    "AmipAnalysis",
    "AmipResult",
    "InfluenceScores",
    "amip_search",
    "analyze_all",
    "influence_scores",
    "qoi",
    "refit_confirm",
]

TARGETS = ("sign", "significance", "both")
ALPHA_BINS = (0.0, 0.01, 0.02, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50)


@dataclass(frozen=True)
class InfluenceScores:
    """First-order effects of dropping each row (rows x coefficients).

    ``beta[i, k]`` and ``se[i, k]`` predict the change in coefficient k and
    in its sandwich standard error when row i's weight goes from 1 to 0.
    They are the negated weight derivatives ``beta_grad`` / ``se_grad``.
    """

    beta_grad: np.ndarray
    se_grad: np.ndarray
    leverage: np.ndarray

    @property
    def beta(self) -> np.ndarray:
        return -self.beta_grad

    @property
    def se(self) -> np.ndarray:
        return -self.se_grad


def influence_scores(fit: FitResult, dm: DesignMatrix) -> InfluenceScores:
    X, e = dm.X, fit.resid
    M = fit.xtx_inv
    if not np.all(np.isfinite(M)):
        raise np.linalg.LinAlgError("singular X'X")
    U = X @ M
    beta_grad = U * e[:, None]
    V = fit.cov_sandwich
    C = X.T @ (e[:, None] * U**2)
    dvar = -2.0 * U * (X @ V) + 2.0 * (e**2)[:, None] * U**2 - 2.0 * e[:, None] * (U @ C)
    se = fit.se_sandwich
    with np.errstate(divide="ignore", invalid="ignore"):
        se_grad = np.where(se > 0, dvar / (2.0 * se), 0.0)
    leverage = np.einsum("ij,ij->i", X, U)
    return InfluenceScores(beta_grad, se_grad, leverage)


def _base_sign(coef: float) -> float:
    return 1.0 if coef >= 0 else -1.0


def qoi(coef: float, se: float, target: str, s: float, z_crit: float) -> float:
    """Scalar whose crossing of zero realises ``target``; ``s`` is the base coefficient sign."""
    if target == "sign":
        return coef
    if target == "significance":
        return coef - s * z_crit * se
    if target == "both":
        return coef + s * z_crit * se
    raise ValueError(f"unknown target {target!r}; expected one of {TARGETS}")


def _plan(fit: FitResult, k: int, target: str, z_crit: float) -> tuple[float, float, float, str]:
    """Base sign, base QOI, desired side of zero, and a readable direction."""
    b, se = float(fit.coef[k]), float(fit.se_sandwich[k])
    s = _base_sign(b)
    q0 = qoi(b, se, target, s, z_crit)
    if target == "sign":
        return s, q0, -s, "flip_sign"
    if target == "both":
        return s, q0, -s, "significant_opposite_sign"
    if s * q0 > 0:
        return s, q0, -s, "make_insignificant"
    return s, q0, s, "make_significant"


@dataclass(frozen=True)
class AmipResult:
    coefficient: int
    name: str
    target: str
    direction: str
    success: bool
    base_qoi: float
    n: int
    n_drop: int | None = None
    alpha: float | None = None
    removal: tuple | None = None
    removal_positions: tuple[int, ...] | None = field(default=None, repr=False)
    predicted_qoi: float | None = None
    refit_qoi: float | None = None
    confirmed: bool = False
    note: str = ""

    def to_dict(self, include_ids: bool = True) -> dict:
        def f(v: float | None) -> float | None:
            return None if v is None or not math.isfinite(v) else float(v)

        out = {
            "coefficient": self.coefficient,
            "name": self.name,
            "target": self.target,
            "direction": self.direction,
            "success": self.success,
            "confirmed": self.confirmed,
            "n": self.n,
            "n_drop": self.n_drop,
            "alpha": f(self.alpha),
            "base_qoi": f(self.base_qoi),
            "predicted_qoi": f(self.predicted_qoi),
            "refit_qoi": f(self.refit_qoi),
            "note": self.note,
        }
        if include_ids:
            out["removal_ids"] = None if self.removal is None else [_jsonable(r) for r in self.removal]
        return out


def _jsonable(v):
    return v.item() if isinstance(v, np.generic) else v


def refit_confirm(
    dm: DesignMatrix,
    removal: Sequence[int],
    k: int,
    target: str,
    base: FitResult | None = None,
    *,
    z_crit: float | None = None,
) -> tuple[float | None, bool, str]:
    """Refit without the rows at ``removal`` (positions) and test the target.

    Returns ``(refit_qoi, confirmed, diagnostic)``.  The target's sign
    convention is taken from the base fit on all rows.
    """
    base = base or fit_ols(dm)
    z_crit = critical_value(base.alpha) if z_crit is None else z_crit
    s, q0, d, _ = _plan(base, k, target, z_crit)
    removal = list(removal)
    if not removal:
        return q0, d * q0 > 0, ""
    if dm.n - len(removal) <= dm.X.shape[1]:
        return None, False, "too few rows remain to refit"
    try:
        refit = fit_ols(dm.drop_rows(removal), alpha=base.alpha)
    except RankDeficientError as exc:
        return None, False, f"rank deficient after removal ({', '.join(exc.columns)})"
    q = qoi(float(refit.coef[k]), float(refit.se_sandwich[k]), target, s, z_crit)
    return q, d * q > 0, ""


def amip_search(
    fit: FitResult,
    scores: InfluenceScores,
    k: int,
    target: str,
    alpha_cap: float = 0.5,
    *,
    dm: DesignMatrix | None = None,
    z_crit: float | None = None,
) -> AmipResult:
    """Greedy first-order search for the smallest overturning removal set.

    Rows are ranked by their predicted push of the target QOI towards the
    desired side of zero; the count returned is the shortest prefix whose
    summed effect crosses zero.  The standard error inside the QOI moves by
    its linearisation only.  When ``dm`` is given a successful search is
    confirmed by refitting.
    """
    if not 0 <= k < len(fit.coef):
        raise IndexError(f"coefficient index {k} out of range")
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; expected one of {TARGETS}")
    z_crit = critical_value(fit.alpha) if z_crit is None else z_crit
    s, q0, d, direction = _plan(fit, k, target, z_crit)
    n = fit.n
    common = dict(coefficient=k, name=fit.names[k], target=target, direction=direction, base_qoi=q0, n=n)
    se_coef = {"sign": 0.0, "significance": -s * z_crit, "both": s * z_crit}[target]
    delta = scores.beta[:, k] + se_coef * scores.se[:, k]
    push = d * delta
    order = np.argsort(-push, kind="stable")
    helpful = order[push[order] > 0]
    cap = min(int(math.floor(alpha_cap * n)), n - len(fit.coef) - 1)
    if helpful.size == 0:
        return AmipResult(success=False, note="no row moves the conclusion in the required direction", **common)
    progress = d * q0 + np.cumsum(push[helpful])
    crossed = np.flatnonzero(progress > 0)
    if crossed.size == 0:
        return AmipResult(success=False, note="insufficient influence mass to cross the threshold", **common)
    n_drop = int(crossed[0]) + 1
    if n_drop > cap:
        return AmipResult(success=False, note=f"predicted removal of {n_drop} rows exceeds alpha_cap={alpha_cap}", **common)
    positions = tuple(int(i) for i in helpful[:n_drop])
    predicted = q0 + float(delta[list(positions)].sum())
    ids = tuple(dm.row_ids[i] for i in positions) if dm is not None else positions
    refit_q, confirmed, note = None, False, ""
    if dm is not None:
        refit_q, confirmed, note = refit_confirm(dm, positions, k, target, fit, z_crit=z_crit)
        if not confirmed and not note:
            note = "linear prediction crosses the threshold but the refit does not"
    return AmipResult(
        success=True,
        n_drop=n_drop,
        alpha=n_drop / n,
        removal=ids,
        removal_positions=positions,
        predicted_qoi=predicted,
        refit_qoi=refit_q,
        confirmed=confirmed,
        note=note,
        **common,
    )


@dataclass
class AmipAnalysis:
    results: list[AmipResult]
    alpha_cap: float
    z_crit: float

    def summary(self) -> dict:
        out: dict = {"alpha_cap": self.alpha_cap, "z_crit": self.z_crit, "success_rate": {}, "confirmed_rate": {}, "alphas": {}}
        for t in TARGETS:
            rs = [r for r in self.results if r.target == t]
            if not rs:
                continue
            out["success_rate"][t] = sum(r.success for r in rs) / len(rs)
            out["confirmed_rate"][t] = sum(r.confirmed for r in rs) / len(rs)
            out["alphas"][t] = sorted(float(r.alpha) for r in rs if r.success)
        return out

    def histogram(self) -> list[dict]:
        """Counts of successful alphas per target in bins (lo, hi]; the first bin includes 0."""
        edges = list(ALPHA_BINS)
        if self.alpha_cap > edges[-1]:
            edges.append(self.alpha_cap)
        inner = np.asarray(edges[1:-1])
        rows = []
        for t in TARGETS:
            counts = np.zeros(len(edges) - 1, dtype=int)
            confirmed = np.zeros(len(edges) - 1, dtype=int)
            for r in self.results:
                if r.target == t and r.success:
                    j = int(np.searchsorted(inner, r.alpha, side="left"))
                    counts[j] += 1
                    confirmed[j] += r.confirmed
            for j, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
                rows.append({"target": t, "bin_low": lo, "bin_high": hi, "count": int(counts[j]), "confirmed": int(confirmed[j])})
        return rows


def analyze_all(
    fit: FitResult,
    dm: DesignMatrix,
    *,
    alpha_cap: float = 0.5,
    targets: Sequence[str] = TARGETS,
    z_crit: float | None = None,
) -> AmipAnalysis:
    """Run the search for every coefficient (intercept included) and target."""
    z_crit = critical_value(fit.alpha) if z_crit is None else z_crit
    scores = influence_scores(fit, dm)
    results = [
        amip_search(fit, scores, k, t, alpha_cap, dm=dm, z_crit=z_crit) for k in range(len(fit.coef)) for t in targets
    ]
    return AmipAnalysis(results, alpha_cap, z_crit)
