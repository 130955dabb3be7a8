"""Acceptance criteria 1-11, one test (or an a/b pair) per criterion.

Each test records a PASS/FAIL line that the terminal summary prints.  Parts
that cannot be met by the specified estimator are strict xfails: they still
run at the stated tolerance, report FAIL with the measured numbers, and
turn into an error if they ever start passing.
"""

import inspect
import itertools
import json
import math
import resource
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from logrisk.amip import amip_search, analyze_all, influence_scores
from logrisk.habitfeat import build_sessions, habit_entropy, window_proportions
from logrisk.logmodel import DATE, HOUR, MINUTE, QUARTER_HOUR, ProjectedDataset, QISpec, project_dataset
from logrisk.regress import DesignMatrix, fit_ols
from logrisk.synthgen import LogGenConfig, fragile_robust_pair, gen_event_log, gen_regression_data, twin_ceiling
from logrisk.unicity import (
    UnicityConfig,
    NoEligibleTargets,
    build_index,
    candidate_set,
    estimate_unicity,
    unicity_exact,
    unicity_monte_carlo,
)
from oracles import candidates, fd_weight_derivatives_extrapolated, loo_change, min_sign_flip

LEVELS = (MINUTE, QUARTER_HOUR, HOUR, DATE)


def record(label: str, ok: bool, detail: str) -> bool:
    line = f"criterion {label:<3} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module", autouse=True)
def _warm_kernels():
    p = ProjectedDataset.from_sets({"A": {1, 2}, "B": {2}})
    idx = build_index(p)
    unicity_monte_carlo(p, idx, 1, "all", 0)
    unicity_exact(p, idx, 1)


# -- 1 -----------------------------------------------------------------------


def _small_logs():
    for s in range(20):
        rng = np.random.default_rng(s)
        yield gen_event_log(LogGenConfig(n_actors=int(rng.integers(3, 9)), events_per_actor=(1, 6), period_days=2, seed=s))[0]


def test_criterion_01a_hand_case_and_runtime():
    p = ProjectedDataset.from_sets({"A": {1, 2}, "B": {2, 3}, "C": {2}})
    hand = unicity_exact(p, build_index(p), 1).unicity
    seeds = UnicityConfig.seeds_from_root(0, 10)
    slowest = 0.0
    sizes_ok = True
    for d in _small_logs():
        t0 = time.perf_counter()
        for level in LEVELS:
            p = project_dataset(d, QISpec(level))
            sizes_ok &= p.n_actors <= 8 and int(p.set_sizes().max()) <= 6
            idx = build_index(p)
            for eps in (1, 2, 3):
                try:
                    unicity_exact(p, idx, eps)
                except NoEligibleTargets:
                    continue
                [unicity_monte_carlo(p, idx, eps, "all", s) for s in seeds]
        slowest = max(slowest, time.perf_counter() - t0)
    ok = hand == 1 / 3 and slowest < 1.0 and sizes_ok
    record("1a", ok, f"hand case exact = {hand!r} (1/3); slowest dataset {slowest:.3f}s over 4 levels x eps 1..3 (< 1 s)")
    assert ok


@pytest.mark.xfail(strict=True, reason="a 10-seed mean of per-actor Bernoulli draws has SD ~0.05 on 3-8 actors; see ledger")
def test_criterion_01b_monte_carlo_within_002_of_exact():
    seeds = UnicityConfig.seeds_from_root(0, 10)
    cases = within = within_3se = 0
    worst = 0.0
    for d in _small_logs():
        for level in LEVELS:
            p = project_dataset(d, QISpec(level))
            idx = build_index(p)
            for eps in (1, 2, 3):
                try:
                    ex = unicity_exact(p, idx, eps)
                except NoEligibleTargets:
                    continue
                mc = float(np.mean([unicity_monte_carlo(p, idx, eps, "all", s).unicity for s in seeds]))
                dev = abs(mc - ex.unicity)
                se = math.sqrt(ex.unicity * (1 - ex.unicity) / (ex.n_eligible * len(seeds)))
                cases += 1
                within += dev <= 0.02
                within_3se += dev <= 3 * se + 1e-12
                worst = max(worst, dev)
    ok = within == cases
    record(
        "1b",
        ok,
        f"|MC mean - exact| <= 0.02 in {within}/{cases} (worst {worst:.4f}); within 3 binomial SE in {within_3se}/{cases}",
    )
    assert ok


# -- 2 -----------------------------------------------------------------------


def test_criterion_02_candidate_monotonicity():
    d, _ = gen_event_log(LogGenConfig(n_actors=300, events_per_actor=(5, 40), period_days=14, seed=21))
    rng = np.random.default_rng(22)
    projected = {lv.name: project_dataset(d, QISpec(lv)) for lv in LEVELS}
    index = {k: build_index(p) for k, p in projected.items()}
    sub_ok = 0
    for _ in range(1000):
        name = LEVELS[int(rng.integers(0, 4))].name
        p = projected[name]
        keys = sorted(p.tuples_of(str(p.actors[int(rng.integers(0, p.n_actors))])))
        k2 = int(rng.integers(1, len(keys) + 1))
        big = [keys[i] for i in rng.choice(len(keys), size=k2, replace=False)]
        small = big[: int(rng.integers(1, k2 + 1))]
        sub_ok += candidate_set(index[name], big) <= candidate_set(index[name], small)
    coarse_ok = 0
    for _ in range(1000):
        i, j = sorted(rng.choice(4, size=2, replace=False))
        fine, coarse = LEVELS[i], LEVELS[j]
        pf = projected[fine.name]
        keys = sorted(pf.tuples_of(str(pf.actors[int(rng.integers(0, pf.n_actors))])))
        obs = [keys[t] for t in rng.choice(len(keys), size=int(rng.integers(1, min(len(keys), 6) + 1)), replace=False)]
        image = {(int(coarse.floor(w)),) for (w,) in obs}
        coarse_ok += candidate_set(index[fine.name], obs) <= candidate_set(index[coarse.name], image)
    ok = sub_ok == 1000 and coarse_ok == 1000
    record("2", ok, f"subset pairs {sub_ok}/1000, coarsening pairs {coarse_ok}/1000")
    assert ok


# -- 3 -----------------------------------------------------------------------


def _non_twins_all_unique(sets, twins, eps):
    twin_ids = {a for pair in twins for a in pair}
    for a, s in sets.items():
        if a in twin_ids:
            continue
        for sub in itertools.combinations(sorted(s), min(eps, len(s))):
            if candidates(sets, sub) != {a}:
                return False
    return True


def test_criterion_03_twin_ceiling():
    checks = equalities = 0
    ok = True
    for c in range(10):
        rng = np.random.default_rng(300 + c)
        n = int(rng.integers(10, 41))
        t = int(rng.integers(1, n // 4 + 1))
        d, m = gen_event_log(LogGenConfig(n_actors=n, events_per_actor=(3, 12), period_days=14, twin_pairs=t, seed=300 + c))
        ceiling = twin_ceiling(n, t)
        for level in LEVELS:
            p = project_dataset(d, QISpec(level))
            idx = build_index(p)
            sets = p.as_sets()
            for eps in (1, 2, 3):
                # clamp keeps every actor in the denominator, so the bound uses the population n
                r = unicity_exact(p, idx, eps, policy="clamp")
                checks += 1
                ok &= r.unicity <= ceiling + 1e-12
                if _non_twins_all_unique(sets, m["twins"], eps):
                    equalities += 1
                    ok &= abs(r.unicity - ceiling) <= 1e-12
    ok &= equalities > 0
    record("3", ok, f"10 configurations, {checks} (eps, level) checks below 1 - 2t/n; {equalities} equality cases hit exactly")
    assert ok


# -- 4 -----------------------------------------------------------------------


def test_criterion_04_protocol_defaults():
    default_cfg = inspect.signature(estimate_unicity).parameters["cfg"].default
    cfg = UnicityConfig() if default_cfg is inspect.Parameter.empty or default_cfg is None else default_cfg
    d, _ = gen_event_log(LogGenConfig(n_actors=60, seed=4))
    est = estimate_unicity(d, QISpec(), [HOUR])
    rows = est.rows
    ok = (
        len(cfg.seeds) == 10
        and cfg.sample_size == 2500
        and cfg.ci_level == 0.95
        and all(len(r.per_seed) == 10 and r.ci_low <= r.unicity_mean <= r.ci_high for r in rows)
    )
    record("4", ok, f"seeds={len(cfg.seeds)}, m={cfg.sample_size}, CI level={cfg.ci_level}, {len(rows)} rows carry CIs")
    assert ok


# -- 5 -----------------------------------------------------------------------


def test_criterion_05_habit_entropy():
    exact = [habit_entropy([1, 0, 0, 0]), habit_entropy([0.25] * 4), habit_entropy([0.5, 0.25, 0.25, 0])]
    exact_ok = abs(exact[0]) <= 1e-12 and abs(exact[1] - 2) <= 1e-12 and abs(exact[2] - 1.5) <= 1e-12
    rng = np.random.default_rng(5)
    P = rng.dirichlet(np.ones(4) * 0.5, size=100_000)
    P[: 10_000, 0] = 0
    P[: 10_000] /= P[: 10_000].sum(axis=1, keepdims=True)
    H = np.array([habit_entropy(p) for p in P])
    range_ok = bool(np.all((H >= 0) & (H <= 2)))
    worst = 0.0
    for k in range(200):
        ts = np.sort(rng.integers(0, 30 * 86400, size=int(rng.integers(2, 40))))
        props = window_proportions(build_sessions(ts.tolist(), 1800, 300))
        if props is not None:
            worst = max(worst, abs(float(np.sum(props)) - 1.0))
    ok = exact_ok and range_ok and worst <= 1e-12
    record("5", ok, f"exact values {exact}; 1e5 simplex points in [0,2]: {range_ok}; max |sum p - 1| = {worst:.1e}")
    assert ok


# -- 6 -----------------------------------------------------------------------


def test_criterion_06_ols():
    rng = np.random.default_rng(6)
    worst_rec = worst_orth = 0.0
    for _ in range(100):
        n, p = int(rng.integers(10, 200)), int(rng.integers(1, 6))
        X = np.column_stack([np.ones(n), rng.standard_normal((n, p)) * rng.uniform(0.01, 100, p)])
        beta = rng.standard_normal(p + 1) * 10
        names = tuple(f"c{j}" for j in range(p + 1))
        rec = fit_ols(DesignMatrix(X, X @ beta, names))
        worst_rec = max(worst_rec, float(np.max(np.abs(rec.coef - beta)) / np.max(np.abs(beta))))
        y = X @ beta + rng.standard_normal(n) * 5
        fit = fit_ols(DesignMatrix(X, y, names))
        worst_orth = max(worst_orth, float(np.max(np.abs(X.T @ fit.resid)) / (np.linalg.norm(X) * np.linalg.norm(y))))
    hand = fit_ols(DesignMatrix(np.array([[1.0, 0], [1, 1], [1, 2]]), np.array([0.0, 1, 0]), ("intercept", "x")))
    hand_ok = abs(hand.coef[1]) <= 1e-12 and abs(hand.coef[0] - 1 / 3) <= 1e-12
    ok = worst_rec <= 1e-8 and worst_orth <= 1e-8 and hand_ok
    record("6", ok, f"recovery rel err {worst_rec:.1e}; ||X'e||/scale {worst_orth:.1e}; hand case {hand.coef.tolist()}")
    assert ok


# -- 7 -----------------------------------------------------------------------


def test_criterion_07_influence_contract():
    rng = np.random.default_rng(7)
    worst_b = worst_s = worst_lev = 0.0
    for _ in range(100):
        n, p = int(rng.integers(30, 101)), int(rng.integers(1, 6))
        X = np.column_stack([np.ones(n), rng.standard_normal((n, p))])
        y = X @ rng.standard_normal(p + 1) + rng.standard_normal(n) * rng.uniform(0.5, 2.0, n)
        dm = DesignMatrix(X, y, tuple(f"c{j}" for j in range(p + 1)))
        fit = fit_ols(dm)
        sc = influence_scores(fit, dm)
        db, dse = fd_weight_derivatives_extrapolated(X, y)
        worst_b = max(worst_b, float(np.max(np.abs(sc.beta_grad - db) / np.abs(db))))
        worst_s = max(worst_s, float(np.max(np.abs(sc.se_grad - dse) / np.abs(dse))))
        for i in range(n):
            exact = loo_change(X, y, i)
            worst_lev = max(worst_lev, float(np.max(np.abs(exact / sc.beta[i] - 1 / (1 - sc.leverage[i])))))
    ok = worst_b <= 1e-6 and worst_s <= 1e-6 and worst_lev <= 1e-8
    record("7", ok, f"100 instances: coef rel err {worst_b:.1e}, SE rel err {worst_s:.1e}, leverage identity {worst_lev:.1e}")
    assert ok


# -- 8 -----------------------------------------------------------------------


def _flip_instances(count=100):
    rng = np.random.default_rng(12345)
    out = []
    while len(out) < count:
        n, p = int(rng.integers(8, 13)), int(rng.integers(1, 3))
        X = np.column_stack([np.ones(n), rng.standard_normal((n, p))])
        y = X @ np.r_[0.5, rng.normal(0, 0.3, p)] + rng.standard_normal(n)
        k_star = min_sign_flip(X, y, 1)
        if k_star is not None:
            out.append((DesignMatrix(X, y, tuple(f"c{j}" for j in range(p + 1))), k_star))
    return out


@pytest.fixture(scope="module")
def flip_outcomes():
    rows = []
    for dm, k_star in _flip_instances():
        fit = fit_ols(dm)
        rows.append((amip_search(fit, influence_scores(fit, dm), 1, "sign", dm=dm), k_star))
    return rows


def test_criterion_08a_minimality_and_perfect_fit(flip_outcomes):
    confirmed = [(r, k) for r, k in flip_outcomes if r.confirmed]
    minimal = sum(r.n_drop >= k for r, k in confirmed)
    rng = np.random.default_rng(8)
    perfect = failed = 0
    for _ in range(100):
        n, p = int(rng.integers(8, 40)), int(rng.integers(1, 4))
        X = np.column_stack([np.ones(n), rng.standard_normal((n, p))])
        dm = DesignMatrix(X, X @ rng.standard_normal(p + 1), tuple(f"c{j}" for j in range(p + 1)))
        a = analyze_all(fit_ols(dm), dm)
        perfect += len(a.results)
        failed += sum(not r.success for r in a.results)
    ok = minimal == len(confirmed) and failed == perfect
    record("8a", ok, f"confirmed size >= exhaustive minimum in {minimal}/{len(confirmed)}; perfect fit failure {failed}/{perfect}")
    assert ok


@pytest.mark.xfail(strict=True, reason="first-order greedy search misses flips that need masked high-leverage rows; see ledger")
def test_criterion_08b_confirmed_success_rate(flip_outcomes):
    hits = sum(r.confirmed for r, _ in flip_outcomes)
    ok = hits >= 90
    record("8b", ok, f"AMIP confirmed a sign flip on {hits}/{len(flip_outcomes)} oracle-flippable instances (need >= 90)")
    assert ok


# -- 9 -----------------------------------------------------------------------


def _sign_alphas(cfg):
    dm, _ = gen_regression_data(cfg)
    a = analyze_all(fit_ols(dm), dm)
    return [(r.name, r.alpha) for r in a.results if r.target == "sign" and r.confirmed]


def test_criterion_09_fragile_vs_robust():
    fragile, robust = fragile_robust_pair()
    f1, r1 = _sign_alphas(fragile), _sign_alphas(robust)
    f2, r2 = _sign_alphas(fragile), _sign_alphas(robust)
    small_fragile = [(n, a) for n, a in f1 if a < 0.10]
    small_robust = [(n, a) for n, a in r1 if a < 0.10]
    ok = bool(small_fragile) and not small_robust and f1 == f2 and r1 == r2
    record("9", ok, f"fragile confirmed sign flips with alpha < 0.10: {small_fragile}; robust: {small_robust}")
    assert ok


# -- 10 ----------------------------------------------------------------------

SWEEP = textwrap.dedent(
    """
    import json, resource, time
    from logrisk.logmodel import DATE, HOUR, MINUTE, QUARTER_HOUR, QISpec
    from logrisk.synthgen import LogGenConfig, gen_event_log
    from logrisk.unicity import UnicityConfig, estimate_unicity
    d, _ = gen_event_log(LogGenConfig(n_actors=100_000, events_per_actor=100, period_days=120, seed=1))
    t0 = time.perf_counter()
    est = estimate_unicity(d, QISpec(), [MINUTE, QUARTER_HOUR, HOUR, DATE], UnicityConfig(epsilons=tuple(range(1, 9))))
    print(json.dumps({"events": d.n_events, "actors": d.n_actors, "rows": len(est.rows), "seconds": time.perf_counter() - t0}))
    """
)

PIPELINE_LOG = textwrap.dedent(
    """
    import sys
    from logrisk.synthgen import LogGenConfig, gen_event_log, write_event_log
    d, _ = gen_event_log(LogGenConfig(n_actors=20_000, events_per_actor=50, period_days=60, seed=2))
    write_event_log(d, sys.argv[1], "csv", "iso8601")
    print(d.n_events)
    """
)


def _child(args, **kw):
    before = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss
    t0 = time.perf_counter()
    proc = subprocess.run(args, capture_output=True, text=True, check=True, **kw)
    return proc.stdout, time.perf_counter() - t0, max(before, resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss)


@pytest.mark.slow
def test_criterion_10_desk_scale(tmp_path):
    out, _, rss_kb = _child([sys.executable, "-c", SWEEP])
    sweep = json.loads(out.strip().splitlines()[-1])
    log = tmp_path / "one_million.csv"
    n_events = int(_child([sys.executable, "-c", PIPELINE_LOG, str(log)])[0].strip())
    _, seconds, _ = _child([sys.executable, "-m", "logrisk.cli", "pipeline", str(log), "--out", str(tmp_path / "out")])
    rss_gb = rss_kb / 1024**2
    ok = (
        sweep["events"] == 10_000_000
        and sweep["actors"] == 100_000
        and sweep["rows"] == 32
        and sweep["seconds"] <= 300
        and rss_gb <= 4
        and n_events == 1_000_000
        and seconds <= 60
    )
    record(
        "10",
        ok,
        f"sweep over {sweep['events']:,} events / {sweep['actors']:,} actors: {sweep['seconds']:.1f}s, peak RSS {rss_gb:.2f} GB; "
        f"pipeline on {n_events:,} events: {seconds:.1f}s",
    )
    assert ok


# -- 11 ----------------------------------------------------------------------


def test_criterion_11_determinism(tmp_path):
    log = tmp_path / "log.csv"
    subprocess.run([sys.executable, "-m", "logrisk.cli", "synth", "log", "--out", str(log), "--seed", "7", "--twin-pairs", "5"], check=True, capture_output=True)
    reports = []
    for i, threads in enumerate(("1", "8", "1")):
        out = tmp_path / f"run{i}"
        subprocess.run(
            [sys.executable, "-m", "logrisk.cli", "pipeline", str(log), "--seed", "7", "--threads", threads, "--out", str(out)],
            check=True,
            capture_output=True,
        )
        reports.append((out / "report.json").read_bytes())
    ok = reports[0] == reports[1] == reports[2]
    record("11", ok, f"report.json byte-identical across two --threads 1 runs and a --threads 8 run ({len(reports[0]):,} bytes)")
    assert ok
