import math

import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bns.evaluate import (
    PSNR_CAP,
    baseline_sampler,
    default_field_suite,
    deviation,
    nfe_sweep,
    ns_sampler,
    psnr_db,
    rmse,
    taxonomy_check,
)
from bns.field import GaussianMixture, GMMField, LinearField
from bns.nsparams import embed_generic
from bns.scheduler import OTScheduler
from bns.train import TrajectoryDataset


def test_psnr_identical_is_capped():
    x = torch.randn(3, 4, dtype=torch.float64)
    assert torch.all(psnr_db(x, x) == PSNR_CAP)


def test_psnr_zero_db():
    assert float(psnr_db(torch.zeros(4), torch.full((4,), 2.0))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_forty_db():
    assert float(psnr_db(torch.zeros(5), torch.full((5,), 0.02))) == pytest.approx(40.0, abs=1e-10)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr_db(torch.zeros(3), torch.zeros(4))
    with pytest.raises(ValueError):
        psnr_db(torch.zeros(3), torch.zeros(3), range=0.0)


vec = arrays("float64", 6, elements=st.floats(-10, 10))


@given(vec, vec, st.permutations(range(6)))
def test_psnr_symmetric_and_permutation_invariant(a, b, perm):
    a, b = torch.from_numpy(a), torch.from_numpy(b)
    p = list(perm)
    assert float(psnr_db(a, b)) == float(psnr_db(b, a))
    assert float(psnr_db(a[p], b[p])) == pytest.approx(float(psnr_db(a, b)), rel=1e-12)


def test_rmse():
    assert float(rmse(torch.zeros(4), torch.full((4,), 0.5))) == pytest.approx(0.5)


def _dataset(u, n=6, seed=0):
    x0 = torch.randn(n, u.dim, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    return x0


def test_sweep_delta_ot_at_cap():
    xs = [0.3, -0.8]
    u = GMMField(GaussianMixture([1.0], [xs], [0.0]), OTScheduler())
    x0 = _dataset(u)
    ds = TrajectoryDataset(x0, torch.tensor(xs).expand(6, 2).clone())
    rep = nfe_sweep(u, ds, {"euler": baseline_sampler("euler")}, [1, 2, 4])
    for r in rep.rows:
        assert r.psnr >= PSNR_CAP - 1e-9 and r.capped and not r.error


def test_sweep_midpoint_beats_euler_on_exponential():
    u = LinearField(3)
    x0 = _dataset(u)
    ds = TrajectoryDataset(x0, x0 * math.e)
    nfes = [2, 4, 8, 16]
    rep = nfe_sweep(u, ds, {"euler": baseline_sampler("euler"), "midpoint": baseline_sampler("midpoint")}, nfes)
    for n in nfes:
        assert rep.get("midpoint", n).psnr > rep.get("euler", n).psnr


def test_sweep_records_failures(vp):
    u = LinearField(2)
    x0 = _dataset(u)
    ds = TrajectoryDataset(x0, x0 * math.e)
    solvers = {
        "midpoint": baseline_sampler("midpoint"),
        "rk4": baseline_sampler("rk4"),
        "bns": ns_sampler({4: embed_generic("rk4", 4)}),
    }
    rep = nfe_sweep(u, ds, solvers, [3, 4])
    assert len(rep.rows) == 6
    assert rep.get("midpoint", 3).error and math.isnan(rep.get("midpoint", 3).psnr)
    assert rep.get("bns", 3).error.startswith("KeyError")
    assert not rep.get("rk4", 4).error
    assert rep.get("bns", 4).psnr == pytest.approx(rep.get("rk4", 4).psnr, abs=1e-9)


def test_sweep_csv_deterministic(vp, gmm_field):
    x0 = _dataset(gmm_field)
    ds = TrajectoryDataset(x0, x0)
    solvers = {n: baseline_sampler(n, vp) for n in ("euler", "midpoint", "ab2", "ddim")}
    a = nfe_sweep(gmm_field, ds, solvers, [4, 8]).to_csv()
    b = nfe_sweep(gmm_field, ds, solvers, [4, 8]).to_csv()
    assert a == b
    lines = a.split("\r\n")
    assert lines[0] == "solver,nfe,psnr_db,rmse,capped,error"
    assert len(lines) == 1 + 8 + 1 and lines[-1] == ""


def test_ddim_baseline_needs_scheduler():
    with pytest.raises(ValueError):
        baseline_sampler("ddim")


def test_deviation():
    assert deviation(torch.ones(3), torch.ones(3)) == 0.0
    assert deviation(torch.zeros(2), torch.full((2,), 4.0)) == 1.0
    assert deviation(torch.zeros(2), torch.zeros(3)) == math.inf


def test_taxonomy_passes():
    rep = taxonomy_check(default_field_suite(3), n_rules=10)
    assert rep.passed
    checks = rep.max_by_check()
    assert set(checks) == {
        "canonicalize", "embed_euler", "embed_midpoint", "embed_rk4", "embed_ab2", "ei_ddim", "st_precondition",
    }
    assert max(checks.values()) <= 1e-12
    assert "PASS" in rep.table() and "FAIL" not in rep.table()


def test_taxonomy_detects_corruption():
    rep = taxonomy_check(default_field_suite(2), n_rules=5, corrupt=1e-3)
    assert not rep.passed
    assert all(v > 1e-9 for v in rep.max_by_check().values())


def test_taxonomy_empty_suite():
    with pytest.raises(ValueError):
        taxonomy_check([])
