"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``config._acceptance_lines`` and printed in the
terminal summary (see ``conftest.py``). The end-to-end experiments train the
default configuration on the 4 x 3 Gaussian hierarchy (1200 train / 600 test)
and are cached per module so criteria 6 and 7 share the same runs.
"""

import math
import time
from collections import deque

import numpy as np
import pytest

from helpers import random_batch, random_unit, small_params
from maskcon import model as mdl
from maskcon.bank import BankSnapshot, MemoryBank
from maskcon.cli import EXIT_OK, main
from maskcon.evaluation import evaluate, recall_at_k
from maskcon.losses import ObjectiveConfig, baseline_objective, maskcon_objective, objective
from maskcon.numerics import finite_diff_grad, relative_error
from maskcon.relations import INFINITY, ZERO, masked_soft_relations, relations_mask
from maskcon.training import CHECKPOINT_NAME, METRICS_NAME, RunConfig, load_datasets, sweep, train

from test_evaluation import brute_force_recall

SEEDS = (0, 1, 2)
W_GRID = (0.0, 0.2, 0.5, 0.8, 1.0)
TAU_GRID = (ZERO, 0.01, 0.05, 0.1, 0.5, INFINITY)


@pytest.fixture
def report(request):
    lines = request.config._acceptance_lines

    def record(number, title, ok, detail):
        lines.append(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
        return ok

    return record


def _random_state(rng):
    b = int(rng.integers(1, 9))
    fill = int(rng.integers(0, 33))
    n_coarse = int(rng.integers(1, 5))
    params = small_params(int(rng.integers(2**31)), input_dim=int(rng.integers(2, 17)), classes=n_coarse)
    batch = random_batch(rng, b, params.input_dim, n_coarse)
    ids = rng.choice(np.arange(b + 40), size=fill, replace=False)
    bank = BankSnapshot(random_unit(rng, fill, params.proj_dim), rng.integers(0, n_coarse, fill), ids)
    return params, batch, bank


def test_criterion_1_degeneracies(report):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    argmax_ok = True
    for _ in range(100):
        params, batch, bank = _random_state(rng)
        w = float(rng.uniform())
        val = lambda kind, **kw: objective(batch, params, bank, ObjectiveConfig(kind, **kw)).value
        gaps = [
            maskcon_objective(batch, params, bank, ObjectiveConfig("maskcon", w=w, tau=INFINITY)).value
            - baseline_objective(batch, params, bank, ObjectiveConfig("grafit", w=w)).value,
            val("grafit", w=1.0) - val("supcon"),
            val("coins", w=1.0) - val("supce"),
            val("grafit", w=0.0) - val("selfcon"),
            val("coins", w=0.0) - val("selfcon"),
        ]
        worst = max(worst, max(abs(g) for g in gaps))

        key = mdl.key_project(params, batch.key_views)
        z = relations_mask(key, bank, batch.coarse_labels, ZERO).rows
        sims = key @ bank.projections.T
        for i, c in enumerate(batch.coarse_labels):
            expect = np.zeros(1 + len(bank))
            expect[0] = 1.0
            same = np.flatnonzero(bank.labels == c)
            if same.size:
                expect[1 + same[np.argmax(sims[i, same])]] = 1.0
            argmax_ok &= bool(np.array_equal(z[i], expect))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and argmax_ok and elapsed < 10
    report(1, "degeneracy identities", ok, f"max gap {worst:.1e}, argmax one-hot {argmax_ok}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_gradients(report):
    rng = np.random.default_rng(202)
    kinds = [ObjectiveConfig("supce"), ObjectiveConfig("selfcon"), ObjectiveConfig("supcon"),
             ObjectiveConfig("maskcon", w=1.0, tau=0.05)]
    start = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        n_coarse = int(rng.integers(2, 5))
        dims = dict(
            input_dim=int(rng.integers(2, 17)), hidden=(int(rng.integers(2, 17)),), feat=int(rng.integers(2, 17)),
            proj_hidden=(int(rng.integers(2, 17)),), proj=int(rng.integers(2, 17)), classes=n_coarse,
        )
        params = small_params(int(rng.integers(2**31)), **dims)
        b, fill = int(rng.integers(1, 9)), int(rng.integers(1, 33))
        batch = random_batch(rng, b, dims["input_dim"], n_coarse)
        bank = BankSnapshot(random_unit(rng, fill, dims["proj"]), rng.integers(0, n_coarse, fill), np.arange(50, 50 + fill))
        for cfg in kinds:
            out = objective(batch, params, bank, cfg)
            names = sorted(out.grads)
            num = finite_diff_grad(
                lambda t: objective(batch, params.replace(t), bank, cfg).value, {k: params.tensors[k] for k in names}
            )
            worst = max(worst, relative_error({k: out.grads[k] for k in names}, num))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 30
    report(2, "gradient suite", ok, f"max relative error {worst:.1e} over 20 configs x 4 losses, {elapsed:.1f}s")
    assert ok


def test_criterion_3_relation_rows(report):
    rng = np.random.default_rng(303)
    failures = 0
    limit_gap = 0.0
    for _ in range(1000):
        fill = int(rng.integers(1, 40))
        labels = rng.integers(0, int(rng.integers(1, 5)), size=fill)
        me = rng.integers(0, labels.max() + 1, size=1)
        sims = rng.uniform(-1, 1, size=(1, fill))
        tau = float(rng.uniform(0.01, 2.0))
        z = masked_soft_relations(sims, labels, me, tau).rows[0]
        cand = labels == me[0]
        ok = z[0] == 1.0 and np.all(z[1:][~cand] == 0.0)
        if cand.any():
            ok &= abs(z[1:][cand].max() - 1.0) <= 1e-12
            order = np.argsort(sims[0][cand], kind="stable")
            ok &= bool(np.all(np.diff(z[1:][cand][order]) >= 0))
        failures += not ok
        hot = masked_soft_relations(sims, labels, me, 1e6).rows
        limit_gap = max(limit_gap, np.abs(hot - masked_soft_relations(sims, labels, me, INFINITY).rows).max())
        top = np.sort(sims[0][cand])
        if top.size < 2 or top[-1] - top[-2] > 1e-3:
            cold = masked_soft_relations(sims, labels, me, 1e-4).rows
            limit_gap = max(limit_gap, np.abs(cold - masked_soft_relations(sims, labels, me, ZERO).rows).max())
    ok = failures == 0 and limit_gap <= 1e-4
    report(3, "relation-row properties", ok, f"{failures} violating rows of 1000, limit gap {limit_gap:.1e}")
    assert ok


def test_criterion_4_retrieval_oracle(report):
    rng = np.random.default_rng(404)
    mismatches = 0
    monotone = True
    for _ in range(50):
        emb = rng.normal(size=(200, int(rng.integers(2, 9))))
        labels = rng.integers(0, int(rng.integers(2, 20)), size=200)
        rep = recall_at_k(emb, labels, ks=(1, 2, 5, 10))
        mismatches += sum(s != brute_force_recall(emb.tolist(), labels.tolist(), k) for k, s in zip(rep.ks, rep.scores))
        monotone &= all(a <= b for a, b in zip(rep.scores, rep.scores[1:]))
    ok = mismatches == 0 and monotone
    report(4, "retrieval oracle", ok, f"{mismatches} mismatches over 50 instances x 4 K, monotone {monotone}")
    assert ok


def test_criterion_5_memory_bank(report):
    rng = np.random.default_rng(505)
    bad = 0
    for _ in range(1000):
        cap = int(rng.integers(1, 20))
        bank, ref, counter = MemoryBank(cap, dim=3), deque(maxlen=cap), 0
        for n in rng.integers(0, 25, size=int(rng.integers(1, 12))):
            rows = random_unit(rng, int(n), 3)
            labels = rng.integers(0, 5, size=int(n))
            bank.push(rows, labels, np.arange(counter, counter + n))
            ref.extend(zip(map(tuple, rows), labels.tolist(), range(counter, counter + int(n))))
            counter += int(n)
        snap = bank.snapshot()
        expect = np.array([r[0] for r in ref]).reshape(-1, 3)
        bad += not (
            np.array_equal(snap.projections, expect)
            and snap.labels.tolist() == [r[1] for r in ref]
            and snap.ids.tolist() == [r[2] for r in ref]
        )
    report(5, "memory bank vs deque", bad == 0, f"{bad} mismatching sequences of 1000")
    assert bad == 0


@pytest.fixture(scope="module")
def experiment():
    """MaskCon, SupCon and SelfCon on three seeds with the default configuration."""
    runs = {}
    for seed in SEEDS:
        cfg = RunConfig(seed=seed)
        data = load_datasets(cfg)
        for kind in ("maskcon", "supcon", "selfcon"):
            start = time.perf_counter()
            res = train(cfg.replace(objective=kind), datasets=data)
            runs[kind, seed] = (res, time.perf_counter() - start)
    return runs


@pytest.mark.slow
def test_criterion_6_end_to_end(report, experiment):
    mean = {k: float(np.mean([experiment[k, s][0].report[1] for s in SEEDS])) for k in ("maskcon", "supcon", "selfcon")}
    slowest = max(t for _, t in experiment.values())
    n_train, n_test = len(experiment["maskcon", 0][0].train), len(experiment["maskcon", 0][0].test)
    ok = (
        mean["maskcon"] >= mean["supcon"] + 0.05
        and mean["maskcon"] >= mean["selfcon"] + 0.05
        and slowest <= 300
        and (n_train, n_test) == (1200, 600)
    )
    report(
        6, "end-to-end synthetic recall@1", ok,
        f"MaskCon {mean['maskcon']:.4f}, SupCon {mean['supcon']:.4f}, SelfCon {mean['selfcon']:.4f} "
        f"(mean of 3 seeds), slowest run {slowest:.0f}s",
    )
    assert ok


@pytest.mark.slow
def test_criterion_7_relation_distance(report, experiment):
    rows = [experiment["maskcon", s][0].metrics[-1] for s in SEEDS]
    assert all(r.epoch + 1 >= 30 for r in rows)
    wins = sum(r.dz_mask <= r.dz_sup for r in rows)
    detail = ", ".join(f"seed {s}: mask {r.dz_mask:.3f} vs sup {r.dz_sup:.3f}" for s, r in zip(SEEDS, rows))
    ok = wins >= 2
    report(7, "d_z(mask) <= d_z(sup) on >= 2 of 3 seeds", ok, detail)
    assert ok


@pytest.mark.slow
def test_trained_beats_untrained(experiment):
    res = experiment["maskcon", 0][0]
    fresh = mdl.init_params(res.train.input_dim, res.train.n_coarse, rng=12345)
    assert res.report[1] > evaluate(fresh, res.test, ks=(1,))[1]


@pytest.mark.slow
def test_criterion_8_sweep_shape(report):
    cfg = RunConfig(seed=0)
    start = time.perf_counter()
    grid = {(w, t): rep[1] for w, t, rep in sweep(cfg, W_GRID, TAU_GRID, datasets=load_datasets(cfg))}
    elapsed = time.perf_counter() - start
    at = {w: grid[w, 0.05] for w in W_GRID}
    ok_w = all(at[0.0] < at[w] for w in W_GRID if w > 0)
    ok_tau = max(grid[1.0, 0.05], grid[1.0, 0.1]) > grid[1.0, INFINITY]
    ok = ok_w and ok_tau and elapsed <= 3600
    detail = (
        "recall@1 at tau=0.05 by w: " + ", ".join(f"{w:g}:{at[w]:.3f}" for w in W_GRID)
        + f"; w=1 tau 0.05/0.1/inf: {grid[1.0, 0.05]:.3f}/{grid[1.0, 0.1]:.3f}/{grid[1.0, INFINITY]:.3f}; {elapsed:.0f}s"
    )
    report(8, "sweep shape", ok, detail)
    assert ok


def test_criterion_9_reproducibility(report, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["train", "--seed", "7", "--out", str(out)]) == EXIT_OK
    same_metrics = (outs[0] / METRICS_NAME).read_bytes() == (outs[1] / METRICS_NAME).read_bytes()
    ck = outs[0] / CHECKPOINT_NAME
    again = mdl.save_checkpoint(mdl.load_checkpoint(ck), tmp_path / "again.mkcn")
    same_ckpt = ck.read_bytes() == again.read_bytes()
    ok = same_metrics and same_ckpt
    report(9, "reproducibility", ok, f"metrics CSV identical {same_metrics}, checkpoint round trip identical {same_ckpt}")
    assert ok
