"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line (also collected into the
terminal summary) and then asserts. Run with ``pytest tests/test_acceptance.py -s``
to see the lines inline.
"""

import math
import time

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import ACCEPTANCE_LINES
from subpop.attacks import (attack_objective, grad_opt_direction, influence_direction,
                            influence_on_target_loss)
from subpop.data import Dataset, split_dataset
from subpop.defenses import sever_scores, spectral_signatures, trim
from subpop.experiments import (ExperimentConfig, emit_reports, run_attack_pipeline, run_fig2_scenario)
from subpop.metrics import collateral_damage, target_damage
from subpop.models import ModelParams, TrainConfig, n_params, per_example_loss, train
from subpop.selection import cluster_match, kmeans, pca_fit
from subpop.theory import (MixtureSpec, chernoff_attack_bound, pigeonhole_attack_size, verify_theorem)


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. closed-form numbers

def test_criterion_1_numeric_example():
    b = chernoff_attack_bound(0.01, 1000)
    pig = pigeonhole_attack_size(1000, 5)
    prob_ok = abs(b.success_prob_lower - (1 - math.exp(-5))) <= 1e-9 and b.success_prob_lower >= 1 - math.exp(-5) - 1e-15
    ok = b.size_bound == 20 and int(b.size_bound) == 20 and prob_ok and pig == 200
    report(1, ok, f"size bound {b.size_bound:g} (want 20), prob {b.success_prob_lower:.10f} "
                  f"(want {1 - math.exp(-5):.10f}), pigeonhole {pig} (want 200)")


# ---------------------------------------------------------------------------
# 2. impossibility attack flips every trial

def test_criterion_2_impossibility():
    t0 = time.perf_counter()
    spec = MixtureSpec.uniform(5, [0.1, 0.9, 0.1, 0.9, 0.1])
    r = verify_theorem(spec, 1000, 200, seed=0)
    dt = time.perf_counter() - t0
    ok = all(v == 1.0 for v in r.flip_rate_by_tie_break.values()) and r.max_attack_size <= r.attack_size_bound \
        and r.attack_size_bound == math.ceil(1000 / 5) + 1 and dt < 10
    report(2, ok, f"flip rates {r.flip_rate_by_tie_break}, max attack size {r.max_attack_size} "
                  f"<= {r.attack_size_bound}, {dt:.2f}s")


# ---------------------------------------------------------------------------
# 3. Chernoff empirical rate

def test_criterion_3_chernoff_rate():
    t0 = time.perf_counter()
    # one subpopulation of weight 0.002, the rest of the mass on four others
    spec = MixtureSpec((0.002, 0.2495, 0.2495, 0.2495, 0.2495), (0.1, 0.9, 0.1, 0.9, 0.1))
    r = verify_theorem(spec, 1000, 2000, seed=0, tie_breaks=("zero",))
    dt = time.perf_counter() - t0
    thresh = (1 - math.exp(-1)) - 0.05
    ok = r.chernoff_empirical_rate >= thresh and r.min_weight_empirical_rate >= thresh and dt < 30
    report(3, ok, f"rate {r.chernoff_empirical_rate:.4f} (weight-0.002 subpop {r.min_weight_empirical_rate:.4f}) "
                  f">= {thresh:.4f}, size bound {r.chernoff_size_bound:g}, {dt:.2f}s")


# ---------------------------------------------------------------------------
# 4. synthetic TRIM failure

def test_criterion_4_fig2():
    t0 = time.perf_counter()
    f = run_fig2_scenario(seed=0).fig2
    dt = time.perf_counter() - t0
    checks = {
        "unpoisoned error <= 0.1": f["unpoisoned_subpop_error"] <= 0.1,
        "poisoned damage >= 0.5": f["poisoned_target_damage"] >= 0.5,
        "trim damage >= undefended - 0.05": f["trim_target_damage"] >= f["poisoned_target_damage"] - 0.05,
        "removed genuine >= 50%": f["trim_removed_genuine_fraction"] >= 0.5,
        "runtime < 30s": dt < 30,
    }
    report(4, all(checks.values()),
           f"error {f['unpoisoned_subpop_error']:.3f}, damage {f['poisoned_target_damage']:.3f}, "
           f"TRIM damage {f['trim_target_damage']:.3f}, genuine share {f['trim_removed_genuine_fraction']:.3f}, "
           f"{dt:.2f}s; failed: {[k for k, v in checks.items() if not v]}")


# ---------------------------------------------------------------------------
# 5. label flipping on six separable blobs

def six_blob_config(seed):
    return ExperimentConfig.from_dict({
        "dataset": {"orthogonal_blobs": {"n_blobs": 6, "per_blob": 100}},
        "seed": seed,
        "model": {"train": {"epochs": 60, "learning_rate": 0.05, "optimizer": "adam", "l2_reg": 0.001}},
        "selection": {"method": "cluster_match", "layer": 0, "n_components": 10, "n_clusters": 6,
                      "pick": "smallest"},
        "attack": {"alphas": [0.5, 2.0]},
        "worst_k": [1],
    })


def test_criterion_5_six_blobs():
    parts, ok = [], True
    for seed in (0, 1, 2):
        rows = run_attack_pipeline(six_blob_config(seed)).damage
        at2 = [r for r in rows if r["alpha"] == 2.0]
        worst = max(at2, key=lambda r: r["target_damage"])
        half = next(r for r in rows if r["alpha"] == 0.5 and r["subpop"] == worst["subpop"])
        good = (worst["target_damage"] >= 0.5 and worst["collateral_damage"] <= 0.05
                and worst["target_damage"] >= half["target_damage"])
        ok &= good
        parts.append(f"seed {seed}: {worst['subpop']} damage {worst['target_damage']:.3f} "
                     f"(alpha 0.5: {half['target_damage']:.3f}), collateral {worst['collateral_damage']:.3f}")
    report(5, ok, "; ".join(parts))


# ---------------------------------------------------------------------------
# 6. optimizer correctness

def fd_objective(sur, Xp, yp, target, h=1e-5):
    fd = np.zeros_like(Xp)
    for i in range(Xp.shape[0]):
        for j in range(Xp.shape[1]):
            E = np.zeros_like(Xp)
            E[i, j] = h
            fd[i, j] = (attack_objective(sur, Xp + E, yp, target)
                        - attack_objective(sur, Xp - E, yp, target)) / (2 * h)
    return fd


def binary_objective(theta, X, y, lam, w=None):
    # independent cross-entropy for a 2-class affine model
    d = X.shape[1]
    W, b = theta[:2 * d].reshape(2, d), theta[2 * d:]
    Z = X @ W.T + b
    losses = np.logaddexp(Z[:, 0], Z[:, 1]) - Z[np.arange(len(y)), y]
    w = np.full(len(y), 1.0 / len(y)) if w is None else w
    return losses @ w + 0.5 * lam * theta @ theta


def exact_fit(X, y, lam, w=None, x0=None):
    x0 = np.zeros(3 * X.shape[1]) if x0 is None else x0
    return minimize(binary_objective, x0, args=(X, y, lam, w), method="BFGS",
                    options={"gtol": 1e-12, "maxiter": 10_000}).x


def tiny_instance(seed=0, lam=0.1):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal([-1, 0], 1, (10, 2)), rng.normal([1, 0], 1, (10, 2))])
    y = np.r_[np.zeros(10, int), np.ones(10, int)]
    X[0] = [1.5, 0.0]  # a mislabeled point deep on the class-1 side
    Xt, yt = rng.normal([1, 0], 1, (10, 2)), np.ones(10, int)
    return X, y, Xt, yt, lam


def test_criterion_6_optimizers():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    fd_errs = []
    for i in range(50):
        d, K = int(rng.integers(1, 5)), int(rng.integers(2, 4))
        widths = (d, K) if i % 2 == 0 else (d, int(rng.integers(2, 6)), K)
        sur = ModelParams(widths, rng.normal(size=n_params(widths)))
        Xp, yp = rng.normal(size=(3, d)), rng.integers(0, K, 3)
        target = (rng.normal(size=(6, d)), rng.integers(0, K, 6))
        D = grad_opt_direction(sur, Xp, yp, target)
        fd = fd_objective(sur, Xp, yp, target)
        fd_errs.append(np.max(np.abs(D - fd)) / max(np.max(np.abs(fd)), 1e-12))
    fd_ok = max(fd_errs) < 1e-4

    id_errs = []
    for i in range(10):
        sur = ModelParams((3, 3), rng.normal(size=12))
        Xp, yp = rng.normal(size=(4, 3)), rng.integers(0, 3, 4)
        target = (rng.normal(size=(5, 3)), rng.integers(0, 3, 5))
        a = influence_direction(sur, Xp, yp, target, identity_hessian=True)
        id_errs.append(np.max(np.abs(a - grad_opt_direction(sur, Xp, yp, target))))
    id_ok = max(id_errs) <= 1e-8

    X, y, Xt, yt, lam = tiny_instance()
    n = len(y)
    theta = exact_fit(X, y, lam)
    model = ModelParams((2, 2), theta)
    predicted = influence_on_target_loss(model, (X, y), lam, X[0], y[0], (Xt, yt))
    w = np.full(n, 1.0 / n)
    w[0] += 1.0 / n
    theta_up = exact_fit(X, y, lam, w, theta)
    actual = (binary_objective(theta_up, Xt, yt, 0.0) - binary_objective(theta, Xt, yt, 0.0)) * n
    rel = abs(predicted - actual) / abs(actual)
    inf_ok = rel <= 0.15
    dt = time.perf_counter() - t0
    report(6, fd_ok and id_ok and inf_ok and dt < 60,
           f"max FD rel err {max(fd_errs):.2e} over 50, H=I max diff {max(id_errs):.1e}, "
           f"influence {predicted:.4f} vs retrain {actual:.4f} (rel {rel:.3f}), {dt:.2f}s")


# ---------------------------------------------------------------------------
# 7. defenses

def test_criterion_7_defenses():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    Xc = np.vstack([rng.normal([-3, 0], 0.7, (40, 2)), rng.normal([3, 0], 0.7, (40, 2))])
    yc = np.r_[np.zeros(40, int), np.ones(40, int)]
    m = 4
    clean = Dataset(Xc, yc, 2)
    data = clean.concat(Dataset(np.tile([[30.0, 0.0]], (m, 1)), np.zeros(m, int), 2,
                                poison=np.ones(m, bool), bounds=clean.bounds))
    cfg = TrainConfig(learning_rate=0.1, epochs=60, batch_size=16, l2_reg=0.01)
    first = per_example_loss(train(data, (), cfg), data.X, data.y)
    separated = first[data.poison].min() > first[~data.poison].max()
    out = trim(data, (), cfg, m)
    trim_ok = separated and out.found_fraction == 1.0

    G = rng.normal(size=(30, 10))
    C = G - G.mean(axis=0)
    _, _, Vt = np.linalg.svd(C)
    sev_err = np.max(np.abs(sever_scores(G) - (C @ Vt[0]) ** 2))
    sev_ok = sev_err <= 1e-8

    R = rng.normal(size=(200, 3))
    R[:20] += [6.0, 0, 0]
    ss_data = Dataset(R, np.r_[np.zeros(120, int), np.ones(80, int)], 2)
    removed = spectral_signatures(ss_data, ModelParams((3, 2), np.zeros(8)), 0)
    frac = len(removed) / len(ss_data)
    ss_ok = frac == 0.15
    dt = time.perf_counter() - t0
    report(7, trim_ok and sev_ok and ss_ok and dt < 60,
           f"TRIM found {out.found_fraction:.2f} (outliers separated: {separated}), "
           f"SEVER vs SVD max diff {sev_err:.1e}, SS removed fraction {frac}, {dt:.2f}s")


# ---------------------------------------------------------------------------
# 8. invariants

class _Lookup:
    def __init__(self, p):
        self.p = p

    def predict(self, X):
        return self.p[X[:, 0].astype(int)]


class _Mask:
    def __init__(self, m):
        self.m = m

    def mask(self, data):
        return self.m


def test_criterion_8_invariants(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    failures = []

    for _ in range(200):
        n = int(rng.integers(2, 50))
        y = rng.integers(0, 2, n)
        m = rng.random(n) < 0.5
        if m.all() or not m.any():
            continue
        data = Dataset(np.arange(float(n))[:, None], y, 2)
        A, B, F = _Lookup(rng.integers(0, 2, n)), _Lookup(rng.integers(0, 2, n)), _Mask(m)
        td, cd = target_damage(A, B, data, F), collateral_damage(A, B, data, F)
        err = lambda P: (P.predict(data.X) != y).astype(float).mean()
        if not (-1 <= td <= 1 and -1 <= cd <= 1) or target_damage(B, A, data, F) != -td \
                or abs(err(B) - err(A) - (m.mean() * td + (1 - m.mean()) * cd)) > 1e-12:
            failures.append("damage")
            break

    aux = Dataset(rng.normal(size=(90, 2)) * 3, rng.integers(0, 2, 90), 2)
    for k in (1, 3, 7):
        filters, _ = cluster_match(aux, ModelParams((2, 2), np.zeros(6)), 0, 2, k, seed=k)
        if not np.array_equal(np.sum([f.mask(aux) for f in filters], axis=0), np.ones(90)):
            failures.append("partition")

    for s in range(20):
        X = rng.normal(size=(int(rng.integers(5, 40)), 3))
        h = kmeans(X, int(rng.integers(1, 5)), seed=s, n_init=2).history
        if any(b > a + 1e-9 * max(1, a) for a, b in zip(h, h[1:])):
            failures.append("kmeans")
        p = pca_fit(X, 3)
        if np.max(np.abs(p.components @ p.components.T - np.eye(3))) > 1e-9:
            failures.append("pca")

    for s in range(20):
        n = int(rng.integers(20, 200))
        sp = split_dataset(Dataset(np.arange(float(n))[:, None], np.arange(n) % 2, 2), seed=s)
        ids = [set(d.uids.tolist()) for d in (sp.train, sp.aux, sp.test)]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2] or len(set.union(*ids)) != n:
            failures.append("split")

    cfg = ExperimentConfig.from_dict({"dataset": {"orthogonal_blobs": {"n_blobs": 4, "per_blob": 40}},
                                      "seed": 5, "model": {"train": {"epochs": 15}},
                                      "selection": {"method": "cluster_match", "n_components": 4,
                                                    "n_clusters": 4},
                                      "attack": {"alphas": [1.0]}, "worst_k": [1]})
    a = emit_reports(run_attack_pipeline(cfg), tmp_path / "a")
    b = emit_reports(run_attack_pipeline(cfg), tmp_path / "b")
    if any(x.read_bytes() != y.read_bytes() for x, y in zip(a, b)):
        failures.append("determinism")
    dt = time.perf_counter() - t0
    report(8, not failures and dt < 300,
           f"damage/partition/kmeans/pca/split/determinism checks, failures {sorted(set(failures))}, {dt:.2f}s "
           "(full property suites live in the per-module test files)")
