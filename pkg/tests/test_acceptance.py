"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line.

Run directly (``python3 tests/test_acceptance.py``) or through pytest; the
verdicts are repeated in the pytest terminal summary.
"""
import math
import time
from dataclasses import replace
from statistics import median

import mpmath
import numpy as np
import pytest

from _support import OBJECTIVES, fd_gradient, objective, rel_err, small_problem
from _verdicts import verdict
from dpdcan import accountant, data, dp_engine, losses, metrics, model, train

SEEDS = range(5)
EPOCHS = 40
SEPARATION = 2.0


# ---------------------------------------------------------------- accountant

def test_c01_gaussian_limit():
    start = time.perf_counter()
    worst = 0.0
    for sigma in (0.5, 1.0, 2.0, 4.0, 8.0):
        for alpha in range(2, 65):
            exact = alpha / (2 * sigma**2)
            worst = max(worst, abs(accountant.sgm_rdp_step(1.0, sigma, alpha) - exact) / exact)
    elapsed = time.perf_counter() - start
    verdict(1, worst <= 1e-12 and elapsed < 1.0,
            f"max rel err {worst:.2e} over 315 (alpha, sigma) pairs, {elapsed:.3f}s")


def test_c02_spot_value():
    mpmath.mp.dps = 50
    q, s = mpmath.mpf("0.01"), mpmath.mpf(2)
    terms = [mpmath.binomial(2, k) * (1 - q) ** (2 - k) * q**k * mpmath.e ** ((k * k - k) / (2 * s * s))
             for k in range(3)]
    oracle = mpmath.log(mpmath.fsum(terms))
    value = accountant.sgm_rdp_step(0.01, 2.0, 2)
    err = abs(value - float(oracle)) / float(oracle)
    verdict(2, err <= 1e-12 and abs(value - 2.84e-5) < 0.01e-5,
            f"R={value:.10e} oracle={mpmath.nstr(oracle, 12)} rel err {err:.2e}")


def test_c03_conversion():
    curve = accountant.RdpCurve((10,), np.array([1.0]))
    eps = accountant.rdp_to_dp(curve, 1e-5).epsilon
    direct = 1.0 + math.log(9 / 10) - (math.log(1e-5) + math.log(10)) / 9
    verdict(3, abs(eps - 1.918010) <= 1e-6 and abs(eps - direct) <= 1e-12,
            f"eps={eps:.9f} direct={direct:.9f}")


def test_c04_calibration_round_trip():
    start = time.perf_counter()
    rows = []
    for target in (4.0, 6.0, 8.0):
        sigma = accountant.calibrate_sigma(target, 1e-5, 0.1, 2000)
        eps = accountant.compute_epsilon(0.1, sigma, 2000, 1e-5).epsilon
        rows.append((target, sigma, eps))
    elapsed = time.perf_counter() - start
    ok = all(eps <= t and t - eps <= 1e-3 for t, _, eps in rows) and elapsed < 5.0
    detail = ", ".join(f"eps {t:g}: sigma={s:.4f} -> {e:.6f}" for t, s, e in rows)
    verdict(4, ok, f"{detail}; {elapsed:.2f}s")


# ---------------------------------------------------------------- gradients and DP engine

def test_c05_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for kind in sorted(OBJECTIVES):
        worst[kind] = 0.0
        for seed in range(20):
            params, batch, rng = small_problem(seed)
            obj = objective(kind, rng, 3, 7, 3)
            g = model.gradient_matrix(params, model.grad_factors(params, batch, obj))
            num = fd_gradient(params, batch, obj)
            worst[kind] = max(worst[kind], max(rel_err(g[i], num[i]) for i in range(3)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(5, ok, f"worst rel err {detail}; {elapsed:.1f}s")


@pytest.fixture(scope="module")
def synthetic():
    cm, labels = data.generate_synthetic(120, 60, 3, separation=SEPARATION, seed=0)
    return data.preprocess(cm), labels


def test_c06_clipping_invariant(synthetic):
    pre, _ = synthetic
    clip = 0.1
    seen = {"steps": 0, "norms": 0, "violations": 0, "max": 0.0}

    def on_step(stage, step, upd):
        seen["steps"] += 1
        for norms in (upd.protected_norms, upd.exposed_norms):
            seen["norms"] += norms.size
            seen["violations"] += int(np.sum(norms > clip + 1e-9))
            seen["max"] = max(seen["max"], float(norms.max(initial=0.0)))

    plan = train.TrainPlan(n_clusters=3, t1_epochs=10, t2_epochs=10, audit=True,
                           dp=dp_engine.DpConfig(clip_bound=clip, noise_scale=1.0))
    train.train(pre, plan, on_step=on_step)
    verdict(6, seen["violations"] == 0 and seen["norms"] > 0,
            f"{seen['violations']} violations in {seen['norms']} clipped norms over "
            f"{seen['steps']} audited steps, max norm {seen['max']:.12f}")


def test_c07_noise_isolation(synthetic):
    # Both noise seeds are evaluated on the same parameters, optimiser state
    # and lot at every step of one trajectory; see the README for why whole
    # diverging trajectories cannot share exposed updates.
    pre, _ = synthetic
    n = pre.n_cells
    cfg = dp_engine.DpConfig(clip_bound=0.1, noise_scale=1.0, lot_size=12)
    params = model.init_params(pre.n_genes, 3, 0)
    state = model.make_optimizer("adam", 1e-3, params.n_params)
    data_rng, aug_rng = np.random.default_rng(1), np.random.default_rng(3)
    noise_a, noise_b = np.random.default_rng(10), np.random.default_rng(11)
    same_exposed = differing_protected = 0
    for _ in range(50):
        idx = dp_engine.sample_lot(n, 0.1, data_rng)
        batch = model.Batch(pre.features[idx], pre.raw_selected[idx], pre.size_factors[idx], idx)
        v1, v2 = train.augment(pre.features[idx], aug_rng)
        obj = losses.InstanceObjective(losses.LossWeights(), v1, v2)
        other = dp_engine.noisy_update(params, batch, obj, cfg, noise_b, 0.1)
        params, state, upd = dp_engine.dpan_step(params, state, batch, obj, cfg, noise_a, 0.1)
        same_exposed += np.array_equal(upd.exposed_update, other.exposed_update)
        differing_protected += not np.array_equal(upd.protected_update, other.protected_update)
    verdict(7, same_exposed == 50 and differing_protected == 50,
            f"exposed bitwise equal {same_exposed}/50, protected differing {differing_protected}/50")


def test_c08_noise_calibration():
    params, batch, rng = small_problem(12, m=6)
    obj = objective("hybrid_instance", rng, 6, 7, 3)
    sigma, c, lot = 1.3, 0.1, 4
    cfg = dp_engine.DpConfig(clip_bound=c, noise_scale=sigma, lot_size=lot)
    mean = dp_engine.clipped_sums(params, batch, obj, cfg)[0] / lot
    noise_rng = np.random.default_rng(0)
    draws = np.array([dp_engine.noisy_update(params, batch, obj, cfg, noise_rng).protected_update
                      for _ in range(10_000)])
    ratio = ((draws - mean) ** 2).mean(axis=0) / (sigma * c / lot) ** 2
    worst = float(np.max(np.abs(ratio - 1)))
    verdict(8, worst <= 0.05,
            f"{ratio.size} coordinates, variance/target in [{ratio.min():.4f}, {ratio.max():.4f}]")


# ---------------------------------------------------------------- end-to-end clustering

def _run(seed, **dp):
    cm, labels = data.generate_synthetic(300, 200, 3, separation=SEPARATION, seed=seed)
    pre = data.preprocess(cm)
    plan = train.TrainPlan(n_clusters=3, t1_epochs=EPOCHS, t2_epochs=EPOCHS,
                           seeds=train.Seeds(seed, 100 + seed, 200 + seed, 300 + seed))
    epsilon = dp.pop("epsilon", None)
    if epsilon is not None:
        dp["noise_scale"] = train.noise_for_budget(epsilon, pre.n_cells, plan)
    plan = replace(plan, dp=dp_engine.DpConfig(**dp))
    start = time.perf_counter()
    result = train.train(pre, plan)
    return {"ari": metrics.ari(labels, result.assignments), "seconds": time.perf_counter() - start,
            "report": result.privacy}


class Runs(dict):
    def get_runs(self, name, **dp):
        if name not in self:
            self[name] = [_run(seed, **dict(dp)) for seed in SEEDS]
        return self[name]


@pytest.fixture(scope="module")
def runs():
    return Runs()


def _aris(rs):
    return [round(r["ari"], 3) for r in rs]


def test_c09_synthetic_clustering(runs):
    clear = runs.get_runs("clear", clip_bound=None, noise_scale=0.0)
    private = runs.get_runs("eps8", epsilon=8.0)
    m_clear, m_private = median(r["ari"] for r in clear), median(r["ari"] for r in private)
    slowest = max(r["seconds"] for r in clear + private)
    eps = max(r["report"].epsilon for r in private)
    ok = m_clear >= 0.9 and m_private >= 0.6 and slowest < 300 and eps <= 8.0
    verdict(9, ok, f"non-private median ARI {m_clear:.3f} {_aris(clear)}; "
                   f"eps=8 median ARI {m_private:.3f} {_aris(private)} (max eps {eps:.4f}); "
                   f"slowest run {slowest:.1f}s")


def test_c10_partial_vs_entire(runs):
    partial = runs.get_runs("partial", noise_scale=2.0)
    entire = runs.get_runs("entire", noise_scale=2.0, entire_network=True)
    m_p, m_e = median(r["ari"] for r in partial), median(r["ari"] for r in entire)
    doubled = all(
        p["report"].sgm_steps * 2 == e["report"].sgm_steps
        and np.array_equal(2 * p["report"].rdp_curve.values, e["report"].rdp_curve.values)
        for p, e in zip(partial, entire))
    step = accountant.sgm_rdp(0.1, 2.0)
    doubled &= np.array_equal(
        accountant.accumulate(accountant.RdpCurve.zeros(), accountant.SgmParams(0.1, 2.0, 2)).values,
        2 * step)
    eps_p = partial[0]["report"].epsilon
    eps_e = entire[0]["report"].epsilon
    ok = m_p >= m_e and eps_e > eps_p and doubled
    verdict(10, ok, f"median ARI partial {m_p:.3f} {_aris(partial)} vs entire {m_e:.3f} "
                    f"{_aris(entire)}; eps partial {eps_p:.3f} vs entire {eps_e:.3f}; "
                    f"RDP doubled {doubled}")


# ---------------------------------------------------------------- metrics and monotonicity

def _partitions(n, k=3):
    out = []

    def grow(prefix, used):
        if len(prefix) == n:
            out.append(prefix)
            return
        for b in range(min(used + 1, k)):
            grow(prefix + [b], max(used, b + 1))

    grow([], 0)
    return np.array(out)


def _oracle(parts):
    """Brute-force ARI (element-pair agreement) and NMI (joint label entropy) for all pairs."""
    k, n = parts.shape
    i, j = np.triu_indices(n, 1)
    same = (parts[:, i] == parts[:, j]).astype(np.int64)
    n11 = same @ same.T
    na, nb = same.sum(1)[:, None], same.sum(1)[None, :]
    n10, n01 = na - n11, nb - n11
    n00 = len(i) - n11 - n10 - n01
    num = 2.0 * (n11 * n00 - n01 * n10)
    den = ((n11 + n01) * (n01 + n00) + (n11 + n10) * (n10 + n00)).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ari = np.where(den == 0, 1.0, num / den)

    onehot = (parts[:, :, None] == np.arange(3)).astype(float)
    joint = np.einsum("ani,bnj->abij", onehot, onehot) / n
    marg = onehot.mean(1)

    def plogp(p):
        return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)

    h = -plogp(marg).sum(1)
    ha, hb = h[:, None], h[None, :]
    mi = ha + hb + plogp(joint).sum((2, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        nmi = np.clip(mi / np.sqrt(ha * hb), 0.0, 1.0)
    nmi = np.where((ha == 0) & (hb == 0), 1.0, np.where((ha == 0) | (hb == 0), 0.0, nmi))
    return ari, nmi


def test_c11_metrics_oracle():
    pairs, worst = 0, 0.0
    for n in range(1, 9):
        parts = _partitions(n)
        want_ari, want_nmi = _oracle(parts)
        for a in range(len(parts)):
            la = parts[a]
            for b in range(len(parts)):
                lb = parts[b]
                worst = max(worst, abs(metrics.ari(la, lb) - want_ari[a, b]),
                            abs(metrics.nmi(la, lb) - want_nmi[a, b]))
        pairs += len(parts) ** 2
    hand = (metrics.nmi([0, 0, 1, 1], [0, 1, 0, 1]), metrics.ari([0, 0, 1, 1], [0, 1, 0, 1]))
    ok = worst <= 1e-12 and abs(hand[0]) <= 1e-12 and abs(hand[1] + 0.5) <= 1e-12
    verdict(11, ok, f"{pairs} partition pairs (n<=8, <=3 clusters), max abs err {worst:.1e}; "
                    f"hand case NMI {hand[0]:.3g} ARI {hand[1]:.3g}")


def test_c12_monotonicity():
    steps = (100, 500, 1000, 2000, 5000)
    sigmas = (0.8, 1.0, 1.5, 2.0, 4.0)
    grid = np.array([[accountant.compute_epsilon(0.05, s, t, 1e-5).epsilon for t in steps]
                     for s in sigmas])
    in_t = bool(np.all(np.diff(grid, axis=1) > 0))
    in_sigma = bool(np.all(np.diff(grid, axis=0) < 0))
    verdict(12, in_t and in_sigma,
            f"5x5 grid eps range [{grid.min():.3f}, {grid.max():.3f}], increasing in T {in_t}, "
            f"decreasing in sigma {in_sigma}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
