"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (the lines are
printed even without ``-s``).
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from bns.cli import main
from bns.config import RunConfig, default_config
from bns.evaluate import baseline_sampler, default_field_suite, nfe_sweep, taxonomy_check
from bns.field import GaussianMixture, GMMField, LinearField
from bns.nsparams import constrained_to_raw, embed_generic, free_param_count, param_count, raw_to_constrained
from bns.scheduler import VPScheduler
from bns.solver import AB2, EULER, MIDPOINT, RK4, solve_adaptive_rk45, solve_generic, uniform_grid
from bns.train import TrainConfig, TrajectoryDataset, evaluate_params, fd_gradient, generate_dataset, grad_loss, loss_raw, train_bns
from bns.transform import precondition


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        return ok

    return emit


def test_1_taxonomy_certification(report):
    t0 = time.perf_counter()
    rep = taxonomy_check(default_field_suite(20), tol=1e-9, n_rules=50)
    dt = time.perf_counter() - t0
    worst = max(rep.max_by_check().values())
    ok = rep.passed and dt < 60
    assert report(1, ok, f"taxonomy on 20 fields, worst deviation {worst:.2e} (tol 1e-9), {dt:.1f} s (limit 60 s)")


def test_2_gradient_correctness(report):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(2024)
    gmm = GaussianMixture([0.4, 0.6], [[0.8, -0.2], [-0.6, 0.7]], [0.35, 0.5])
    u = GMMField(gmm, VPScheduler())
    worst = 0.0
    for k in range(10):
        n = (2, 3, 4)[k % 3]
        raw = constrained_to_raw(embed_generic("euler", n))
        raw.vector += 0.2 * torch.randn(raw.vector.shape, generator=g)
        ds = TrajectoryDataset(torch.randn(8, 2, generator=g), gmm.sample(8, generator=g))
        _, grad = grad_loss(raw_to_constrained(raw), u, ds)
        fd = fd_gradient(lambda v: loss_raw(v, n, u, ds), raw.vector)
        floor = 1e-3 * float(fd.abs().max())
        worst = max(worst, float(((grad - fd).abs() / torch.clamp(fd.abs(), min=floor)).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and dt < 30
    assert report(2, ok, f"10 instances n in {{2,3,4}}, worst relative error {worst:.2e} (limit 1e-4), {dt:.1f} s")


def test_3_order_of_accuracy(report):
    u = LinearField(1)
    ns = [8, 16, 32, 64]
    slopes = {}
    for name, m, order in [("euler", EULER, 1), ("midpoint", MIDPOINT, 2), ("ab2", AB2, 2), ("rk4", RK4, 4)]:
        errs = [abs(float(solve_generic(u, torch.ones(1), m, grid=uniform_grid(n)).final) - math.e) for n in ns]
        slopes[name] = (-np.polyfit(np.log(ns), np.log(errs), 1)[0], order)
    ok = all(abs(s - o) <= 0.2 for s, o in slopes.values())
    detail = ", ".join(f"{k} {s:.3f} (expect {o})" for k, (s, o) in slopes.items())
    assert report(3, ok, f"slopes on u=x: {detail}")


def test_4_bns_improvement(report):
    t0 = time.perf_counter()
    cfg = RunConfig.from_dict(default_config())
    u, sched = cfg.field(), cfg.scheduler()
    train = generate_dataset(u, 520, seed=0)
    val = generate_dataset(u, 1024, seed=1)
    tc = TrainConfig(n_nfe=8, init="midpoint", sigma0=1.0, iters=2000, seed=0)
    res = train_bns(u, sched, train, val, tc)
    bns_psnr, _ = evaluate_params(res.theta, u, val)
    baselines = {n: baseline_sampler(n, sched) for n in ("euler", "midpoint", "ab2", "ddim")}
    sweep = nfe_sweep(u, val, baselines, [8])
    base = {r.solver: r.psnr for r in sweep.rows}
    dt = time.perf_counter() - t0
    ok = bns_psnr >= base["midpoint"] + 3.0 and all(bns_psnr >= v for v in base.values()) and dt < 600
    detail = ", ".join(f"{k} {v:.2f}" for k, v in base.items())
    assert report(4, ok, f"NFE 8 PSNR dB: bns {bns_psnr:.2f} vs {detail}; {dt:.1f} s (limit 600 s)")


@pytest.mark.parametrize("sigma0", [1.0, 5.0, 10.0])
def test_5_preconditioning_recovery(sigma0, report):
    vp = VPScheduler()
    gmm = GaussianMixture([0.3, 0.7], [[1.0, 0.0], [-1.0, 0.5]], [0.4, 0.5])
    u = GMMField(gmm, vp)
    ub = precondition(u, vp, sigma0)
    x0 = torch.randn(16, 2, generator=torch.Generator().manual_seed(5))
    ref, _ = solve_adaptive_rk45(u, x0, rtol=1e-9, atol=1e-9)
    xb, _ = solve_adaptive_rk45(ub, ub.to_frame(x0), rtol=1e-9, atol=1e-9)
    err = float((ub.from_frame(xb) - ref).abs().max())
    assert report(5, err <= 1e-6, f"sigma0={sigma0:g} recovery error {err:.2e} (limit 1e-6)")


def test_6_parameter_accounting(report):
    rows = [(n, param_count(n), free_param_count(n)) for n in (4, 8, 16)]
    ok = [p for _, p, _ in rows] == [19, 53, 169]
    detail = "; ".join(f"n={n}: p={p} (p-1={p - 1} if the fixed t0 is not counted, trainable {f})" for n, p, f in rows)
    assert report(6, ok, detail)


def test_7_cli_determinism(tmp_path, report):
    small = {
        "data": {"n_train": 40, "n_val": 40},
        "train": {"iters": 30, "val_every": 10, "batch": 10},
        "sweep": {"solvers": ["euler", "midpoint", "ab2", "ddim", "bns"], "nfes": [8], "bns": {"8": "theta_nfe8.json"}},
        "taxonomy": {"n_fields": 2, "n_rules": 5},
    }
    snaps = []
    for rep in range(2):
        root = tmp_path / f"run{rep}"
        root.mkdir()
        path = root / "run.json"
        path.write_text(json.dumps(dict(small, out_dir="out")))
        c = str(path)
        codes = [
            main(["gen-data", c]),
            main(["gen-data", c, "--split", "val"]),
            main(["train", c, "--quiet"]),
            main(["sweep", c]),
            main(["check-taxonomy", c]),
            main(["sample", c, "--solver", "bns", "--nfe", "8", "--theta", str(root / "out" / "theta_nfe8.json")]),
        ]
        assert codes == [0] * 6
        snaps.append({p.name: p.read_bytes() for p in sorted((root / "out").iterdir())})
    same = snaps[0] == snaps[1]
    assert report(7, same, f"{len(snaps[0])} output files byte-identical across two runs: {same}")
