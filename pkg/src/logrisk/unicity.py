"""Unicity of projected event logs: inverted index, Monte Carlo and exact estimators.

Unicity at ``eps`` is the probability that ``eps`` quasi-identifier tuples
drawn from a target actor's own set single that actor out, averaged over
targets.  The attacker is assumed to know the target is in the dataset.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Sequence, Union

import numpy as np
import pandas as pd

from . import _kernels
from ._kernels import derive_key, mix64_array
from .logmodel import Dataset, GeneralizationLevel, ProjectedDataset, QISpec, project_dataset

logger = logging.getLogger(__name__)

__all__ = [
    "BudgetExceeded",
    "ExactResult",
    "InvertedIndex",
    "MonteCarloRun",
    "NoEligibleTargets",
    "UnicityConfig",
    "UnicityEstimate",
    "UnicityRow",
    "bootstrap_ci",
    "build_index",
    "candidate_set",
    "estimate_unicity",
    "unicity_exact",
    "unicity_monte_carlo",
]

SampleSize = Union[int, str]

_SAMPLE_TAG = 0x5A4D
_DRAW_TAG = 0xD8A3
_BOOT_TAG = 0xB007

TABLE_COLUMNS = ["level", "epsilon", "unicity_mean", "ci_low", "ci_high", "n_eligible", "n_excluded", "m", "seeds"]


class NoEligibleTargets(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    pass


# -- index -----------------------------------------------------------------------


class InvertedIndex:
    """Posting lists mapping each tuple id to the ascending actor indices holding it."""

    def __init__(self, projected: ProjectedDataset, post_ptr: np.ndarray, post_actors: np.ndarray) -> None:
        self.projected = projected
        self.post_ptr = post_ptr
        self.post_actors = post_actors
        post_ptr.setflags(write=False)
        post_actors.setflags(write=False)

    def __len__(self) -> int:
        return len(self.post_ptr) - 1

    def posting(self, tid: int) -> np.ndarray:
        return self.post_actors[self.post_ptr[tid] : self.post_ptr[tid + 1]]

    def postings(self, key: Hashable) -> list[str]:
        tid = self.projected.tid_of(key)
        if tid is None:
            return []
        return [str(self.projected.actors[a]) for a in self.posting(tid)]

    def as_dict(self) -> dict[Hashable, list[str]]:
        return {self.projected.tuple_key(t): [str(self.projected.actors[a]) for a in self.posting(t)] for t in range(len(self))}


def build_index(p: ProjectedDataset) -> InvertedIndex:
    if p.n_actors == 0:
        raise ValueError("cannot index an empty projected dataset")
    owner = np.repeat(np.arange(p.n_actors, dtype=np.int32), p.set_sizes())
    # pairs are actor-major, so a stable sort on tuple id keeps actors ascending
    order = np.argsort(p.act_tuples, kind="stable")
    post_actors = owner[order]
    post_ptr = np.zeros(p.n_tuples + 1, dtype=np.int64)
    np.cumsum(np.bincount(p.act_tuples, minlength=p.n_tuples), out=post_ptr[1:])
    return InvertedIndex(p, post_ptr, post_actors)


def candidate_set(idx: InvertedIndex, observations: Iterable[Hashable]) -> set[str]:
    """Actors whose tuple set contains every observation.

    An observation absent from the index yields the empty set.
    """
    obs = list(observations)
    if not obs:
        raise ValueError("observations must be non-empty")
    tids = [idx.projected.tid_of(o) for o in obs]
    if any(t is None for t in tids):
        return set()
    lists = sorted((idx.posting(t) for t in tids), key=len)
    cur = lists[0]
    for other in lists[1:]:
        if len(cur) == 0:
            break
        cur = np.intersect1d(cur, other, assume_unique=True)
    return {str(idx.projected.actors[a]) for a in cur}


# -- estimators ------------------------------------------------------------------


@dataclass(frozen=True)
class MonteCarloRun:
    unicity: float
    n_unique: int
    n_eligible: int
    n_excluded: int
    targets: np.ndarray = field(repr=False)
    indicators: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class ExactResult:
    unicity: float
    n_eligible: int
    n_excluded: int
    n_subsets: int


def _chunked(n: int, threads: int) -> list[tuple[int, int]]:
    if n == 0:
        return []
    k = max(1, min(threads, n))
    bounds = np.linspace(0, n, k + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run(fn, n: int, threads: int, make_args) -> None:
    spans = _chunked(n, threads)
    if threads <= 1 or len(spans) <= 1:
        for a, b in spans:
            fn(*make_args(a, b))
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for f in [pool.submit(fn, *make_args(a, b)) for a, b in spans]:
            f.result()


def sample_actors(n: int, m: SampleSize, seed: int) -> np.ndarray:
    """Uniform sample of ``m`` actor indices without replacement, ascending."""
    if m == "all" or m == n:
        return np.arange(n, dtype=np.int64)
    m = int(m)
    if not 1 <= m <= n:
        raise ValueError(f"sample size m={m} must lie in [1, {n}]")
    key = np.uint64(derive_key(seed, _SAMPLE_TAG))
    keys = mix64_array(mix64_array(np.arange(n, dtype=np.uint64)) ^ key)
    chosen = np.argsort(keys, kind="stable")[:m]
    return np.sort(chosen).astype(np.int64)


def _policy_flag(policy: str) -> bool:
    if policy not in ("exclude", "clamp"):
        raise ValueError(f"short_trajectory_policy must be 'exclude' or 'clamp', got {policy!r}")
    return policy == "clamp"


def unicity_monte_carlo(
    p: ProjectedDataset,
    idx: InvertedIndex,
    eps: int,
    m: SampleSize = "all",
    seed: int = 0,
    *,
    policy: str = "exclude",
    threads: int = 1,
) -> MonteCarloRun:
    """One run of the sampling estimator: m targets, eps draws each.

    Actors with fewer than ``eps`` distinct tuples are dropped from the
    sample and the denominator (``policy="exclude"``) or attacked with all
    their tuples (``policy="clamp"``).
    """
    if eps < 1:
        raise ValueError("eps must be >= 1")
    clamp = _policy_flag(policy)
    targets = sample_actors(p.n_actors, m, seed)
    out = np.empty(len(targets), dtype=np.int8)
    key = np.uint64(derive_key(seed, _DRAW_TAG, eps))
    _run(
        _kernels.mc_chunk,
        len(targets),
        threads,
        lambda a, b: (targets[a:b], eps, key, clamp, idx.post_ptr, idx.post_actors, p.act_ptr, p.act_tuples, out[a:b]),
    )
    keep = out >= 0
    n_elig = int(keep.sum())
    if n_elig == 0:
        raise NoEligibleTargets(f"no eligible targets: every sampled actor has fewer than {eps} distinct tuples")
    ind = out[keep]
    n_unique = int(ind.sum())
    return MonteCarloRun(n_unique / n_elig, n_unique, n_elig, len(targets) - n_elig, targets[keep], ind)


def unicity_exact(
    p: ProjectedDataset,
    idx: InvertedIndex,
    eps: int,
    *,
    budget: int = 10**6,
    policy: str = "exclude",
    threads: int = 1,
) -> ExactResult:
    """Expected unicity over all eps-subsets of every eligible actor's set.

    Refuses with :class:`BudgetExceeded` when the number of subsets to
    enumerate exceeds ``budget``.
    """
    if eps < 1:
        raise ValueError("eps must be >= 1")
    clamp = _policy_flag(policy)
    sizes = p.set_sizes()
    long_ = np.flatnonzero(sizes >= eps).astype(np.int64)
    short = np.flatnonzero(sizes < eps).astype(np.int64)
    n_subsets = sum(math.comb(int(k), eps) for k in sizes[long_]) + (len(short) if clamp else 0)
    if n_subsets > budget:
        raise BudgetExceeded(f"{n_subsets} subsets exceed the budget of {budget}; use the Monte Carlo estimator")
    uniq = np.zeros(len(long_), dtype=np.int64)
    total = np.zeros(len(long_), dtype=np.int64)
    _run(
        _kernels.exact_chunk,
        len(long_),
        threads,
        lambda a, b: (long_[a:b], eps, idx.post_ptr, idx.post_actors, p.act_ptr, p.act_tuples, uniq[a:b], total[a:b]),
    )
    fractions = list(uniq / np.maximum(total, 1))
    if clamp and len(short):
        out = np.empty(len(short), dtype=np.int8)
        _kernels.mc_chunk(short, eps, np.uint64(0), True, idx.post_ptr, idx.post_actors, p.act_ptr, p.act_tuples, out)
        fractions.extend(out.astype(float))
    n_elig = len(fractions)
    if n_elig == 0:
        raise NoEligibleTargets(f"no eligible targets: every actor has fewer than {eps} distinct tuples")
    value = math.fsum(fractions) / n_elig
    return ExactResult(value, n_elig, 0 if clamp else len(short), int(n_subsets))


def bootstrap_ci(indicators: Sequence[int] | np.ndarray, reps: int = 1000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of 0/1 indicators.

    Resampling n Bernoulli indicators with replacement yields a resampled
    mean distributed exactly as Binomial(n, k/n)/n, so the replicates are
    drawn from that law directly instead of materialising n x reps draws.
    """
    x = np.asarray(indicators)
    if x.size == 0:
        raise ValueError("bootstrap_ci needs at least one indicator")
    if reps < 100:
        raise ValueError("reps must be >= 100")
    if not np.isin(x, (0, 1)).all():
        raise ValueError("indicators must be 0/1")
    n = x.size
    k = int(x.sum())
    rng = np.random.default_rng(seed)
    means = rng.binomial(n, k / n, size=reps) / n
    tail = (1.0 - level) / 2.0 * 100.0
    low, high = np.percentile(means, [tail, 100.0 - tail])
    return float(low), float(high)


# -- sweep -----------------------------------------------------------------------


@dataclass(frozen=True)
class UnicityConfig:
    """Estimation protocol; defaults follow the reference setup (10 seeds, m = 2500)."""

    epsilons: tuple[int, ...] = tuple(range(1, 9))
    sample_size: SampleSize = 2500
    seeds: tuple[int, ...] = tuple(range(10))
    bootstrap_reps: int = 1000
    short_trajectory_policy: str = "exclude"
    ci_level: float = 0.95
    threads: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "epsilons", tuple(int(e) for e in self.epsilons))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.epsilons or min(self.epsilons) < 1:
            raise ValueError("epsilons must be positive integers")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.sample_size != "all" and (not isinstance(self.sample_size, int) or self.sample_size < 1):
            raise ValueError("sample_size must be a positive integer or 'all'")
        if self.bootstrap_reps < 100:
            raise ValueError("bootstrap_reps must be >= 100")
        _policy_flag(self.short_trajectory_policy)

    @staticmethod
    def seeds_from_root(root: int, count: int = 10) -> tuple[int, ...]:
        return tuple(derive_key(root, i) >> 1 for i in range(count))


@dataclass(frozen=True)
class UnicityRow:
    level: str
    epsilon: int
    unicity_mean: float
    ci_low: float
    ci_high: float
    n_eligible: int
    n_excluded: int
    m: int
    seeds: int
    per_seed: tuple[float, ...] = ()


@dataclass
class UnicityEstimate:
    rows: list[UnicityRow]
    warnings: list[str] = field(default_factory=list)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame([{c: getattr(r, c) for c in TABLE_COLUMNS} for r in self.rows], columns=TABLE_COLUMNS)

    def to_dict(self) -> dict:
        return {"rows": [dict(asdict(r), per_seed=list(r.per_seed)) for r in self.rows], "warnings": list(self.warnings)}

    def get(self, level: str, epsilon: int) -> UnicityRow:
        for r in self.rows:
            if r.level == level and r.epsilon == epsilon:
                return r
        raise KeyError((level, epsilon))


def estimate_unicity(
    d: Dataset,
    q: QISpec,
    levels: Sequence[GeneralizationLevel],
    cfg: UnicityConfig | None = None,
) -> UnicityEstimate:
    """Mean unicity and bootstrap interval for every (level, eps) pair.

    Each level projects and indexes the log once; each eps runs the Monte
    Carlo estimator once per seed.  The interval resamples the pooled
    per-target indicators of all seeds.
    """
    cfg = cfg or UnicityConfig()
    warnings: list[str] = []
    m: SampleSize = cfg.sample_size
    if m != "all" and m > d.n_actors:
        warnings.append(f"sample size {m} exceeds the {d.n_actors} actors; every actor is sampled")
        m = "all"
    m_eff = d.n_actors if m == "all" else int(m)
    rows: list[UnicityRow] = []
    for level in levels:
        p = project_dataset(d, q.with_level(level))
        idx = build_index(p)
        sizes = p.set_sizes()
        logger.info("level %s: %d actors, %d tuples, %d pairs", level, p.n_actors, p.n_tuples, p.n_pairs)
        for eps in cfg.epsilons:
            try:
                runs = [
                    unicity_monte_carlo(p, idx, eps, m, s, policy=cfg.short_trajectory_policy, threads=cfg.threads)
                    for s in cfg.seeds
                ]
            except NoEligibleTargets as exc:
                raise NoEligibleTargets(f"level {level}, eps {eps}: {exc}") from exc
            per_seed = tuple(r.unicity for r in runs)
            mean = math.fsum(per_seed) / len(per_seed)
            pooled = np.concatenate([r.indicators for r in runs])
            low, high = bootstrap_ci(pooled, cfg.bootstrap_reps, derive_key(cfg.seeds[0], _BOOT_TAG, eps, len(rows)) >> 1, cfg.ci_level)
            low, high = min(low, mean), max(high, mean)
            n_short = int((sizes < eps).sum())
            clamp = cfg.short_trajectory_policy == "clamp"
            rows.append(
                UnicityRow(
                    level=str(level),
                    epsilon=eps,
                    unicity_mean=mean,
                    ci_low=low,
                    ci_high=high,
                    n_eligible=p.n_actors if clamp else p.n_actors - n_short,
                    n_excluded=0 if clamp else n_short,
                    m=m_eff,
                    seeds=len(cfg.seeds),
                    per_seed=per_seed,
                )
            )
    return UnicityEstimate(rows, warnings)
