import math

import pytest
import torch
from scipy.optimize import brentq

from bns.errors import DomainError, SNRRangeError
from bns.field import GaussianMixture, GMMField, LinearField, PolynomialField
from bns.scheduler import CosineScheduler, EdmVEScheduler, OTScheduler, ScaledSigmaScheduler, VPScheduler
from bns.solver import solve_adaptive_rk45, solve_ddim, solve_rk, uniform_grid, EULER
from bns.transform import (
    FunctionTransform,
    IdentityTransform,
    apply_st_to_field,
    ddim_r_grid,
    ddim_transform,
    ei_transform,
    precondition,
    scheduler_from_st,
    st_from_scheduler_change,
)


def _f(x):
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@pytest.mark.parametrize("sched", [OTScheduler(), CosineScheduler(), VPScheduler()], ids=repr)
def test_same_scheduler_is_identity(sched):
    T = st_from_scheduler_change(sched, sched)
    for r in (0.0, 0.1, 0.5, 0.9, 1.0):
        s, t, _, dt = T.evaluate(torch.tensor(r))
        assert _f(s) == pytest.approx(1.0, abs=1e-12)
        assert _f(t) == pytest.approx(r, abs=1e-12)


def test_ot_scaled_sigma_one_is_identity():
    T = st_from_scheduler_change(OTScheduler(), ScaledSigmaScheduler(OTScheduler(), 1.0))
    for r in (0.0, 0.3, 0.7, 1.0):
        s, t, ds, dt = (_f(v) for v in T.evaluate(torch.tensor(r)))
        assert (s, t) == (pytest.approx(1.0, abs=1e-15), pytest.approx(r, abs=1e-15))
        assert (ds, dt) == (pytest.approx(0.0, abs=1e-12), pytest.approx(1.0, abs=1e-12))


@pytest.mark.parametrize("r", [0.1, 0.5, 0.9])
def test_vp_scaled_sigma_matches_bisection_reference(r):
    vp = VPScheduler()
    target = ScaledSigmaScheduler(vp, 5.0)
    T = st_from_scheduler_change(vp, target)
    s, t = _f(T.scale(r)), _f(T.time(r))

    def snr_vp(x):
        a = math.exp(-0.25 * (1 - x) ** 2 * 19.9 - 0.05 * (1 - x))
        return a / math.sqrt(1 - a * a)

    v = _f(target.snr(r))
    t_ref = brentq(lambda x: snr_vp(x) - v, 0.0, 1 - 1e-12, xtol=1e-15, rtol=1e-15)
    a_ref = math.exp(-0.25 * (1 - t_ref) ** 2 * 19.9 - 0.05 * (1 - t_ref))
    s_ref = _f(target.coefficients(torch.tensor(r))[1]) / math.sqrt(1 - a_ref * a_ref)
    assert t == pytest.approx(t_ref, abs=1e-8)
    assert s == pytest.approx(s_ref, rel=1e-8)


@pytest.mark.parametrize(
    "source, target",
    [
        (VPScheduler(), ScaledSigmaScheduler(VPScheduler(), 5.0)),
        (VPScheduler(), ScaledSigmaScheduler(VPScheduler(), 10.0)),
        (OTScheduler(), CosineScheduler()),
        (CosineScheduler(), ScaledSigmaScheduler(CosineScheduler(), 3.0)),
        (VPScheduler(), EdmVEScheduler(sigma_max=100.0)),
    ],
    ids=lambda s: repr(s),
)
def test_transform_invariants(source, target):
    T = st_from_scheduler_change(source, target)
    assert T.validate()


@pytest.mark.parametrize(
    "source, target",
    [
        (VPScheduler(), ScaledSigmaScheduler(VPScheduler(), 5.0)),
        (OTScheduler(), CosineScheduler()),
        (OTScheduler(), ScaledSigmaScheduler(OTScheduler(), 7.0)),
    ],
    ids=lambda s: repr(s),
)
def test_scheduler_roundtrip(source, target):
    back = scheduler_from_st(st_from_scheduler_change(source, target), source)
    for r in torch.linspace(0.0, 1.0, 41):
        a, s, _, _ = back.coefficients(r)
        at, st, _, _ = target.coefficients(r)
        assert _f(a) == pytest.approx(_f(at), abs=1e-8)
        assert _f(s) == pytest.approx(_f(st), abs=1e-8)


def test_range_mismatch_names_both_intervals():
    with pytest.raises(SNRRangeError) as exc:
        st_from_scheduler_change(VPScheduler(), EdmVEScheduler(sigma_max=200.0))
    target_iv, source_iv = exc.value.interval
    assert target_iv[0] < source_iv[0]


def test_identity_field_unchanged():
    u = PolynomialField(3, seed=1)
    ub = apply_st_to_field(u, IdentityTransform())
    x = torch.randn(4, 3, generator=torch.Generator().manual_seed(0))
    for r in (0.0, 0.4, 1.0):
        torch.testing.assert_close(ub(r, x), u(r, x), rtol=0, atol=0)


def test_constant_scale_linear_field():
    one = lambda r: torch.ones_like(r)
    T = FunctionTransform(lambda r: 2 * one(r), lambda r: r, lambda r: 0 * r, one)
    ub = apply_st_to_field(LinearField(2), T)
    x = torch.tensor([0.3, -1.0])
    torch.testing.assert_close(ub(0.4, x), x)


@pytest.mark.parametrize("sigma0", [5.0, 10.0])
def test_sample_recovery_adaptive(sigma0, gmm2):
    vp = VPScheduler()
    u = GMMField(gmm2, vp)
    ub = precondition(u, vp, sigma0)
    x0 = torch.randn(8, 2, generator=torch.Generator().manual_seed(3))
    ref, _ = solve_adaptive_rk45(u, x0, rtol=1e-9, atol=1e-9)
    xb, _ = solve_adaptive_rk45(ub, ub.to_frame(x0), rtol=1e-9, atol=1e-9)
    torch.testing.assert_close(ub.from_frame(xb), ref, rtol=0, atol=1e-6)


def test_ei_x_pred_ot_scale():
    T = ei_transform("x_pred", OTScheduler())
    for r in (1e-6, 0.25, 0.5, 1 - 1e-6):
        assert _f(T.scale(r)) == pytest.approx(1 / (1 - r), rel=1e-12)
        assert _f(T.time(r)) == r


def test_ei_eps_vp_endpoint():
    T = ei_transform("eps_pred", VPScheduler())
    assert _f(T.scale(1.0)) == 1.0


def test_ei_rejects_vanishing_psi():
    with pytest.raises(DomainError):
        ei_transform("x_pred", OTScheduler()).evaluate(torch.tensor(1.0))
    with pytest.raises(ValueError):
        ei_transform("velocity", OTScheduler())


def test_ei_transform_derivatives():
    T = ei_transform("eps_pred", VPScheduler())
    assert T.validate()


def test_ddim_transform_euler_equals_ddim_every_step(gmm2):
    vp = VPScheduler()
    u = GMMField(gmm2, vp)
    t_grid = uniform_grid(10)
    T = ddim_transform(vp)
    ub = apply_st_to_field(u, T)
    r = ddim_r_grid(vp, t_grid)
    x0 = torch.randn(5, 2, generator=torch.Generator().manual_seed(4))
    bar = solve_rk(ub, ub.to_frame(x0), r, EULER)
    ref = solve_ddim(u, x0, vp, t_grid)
    for rb, xb, xr in zip(r, bar.states, ref.states):
        torch.testing.assert_close(xb / T.scale(rb), xr, rtol=0, atol=1e-10)


def test_ei_transform_euler_is_first_order_consistent(gmm2):
    """With t_r = r the Euler step freezes d(sigma/alpha)/dr at the left
    node, so it agrees with DDIM only up to O(h^2) per step."""
    vp = VPScheduler()
    u = GMMField(gmm2, vp)
    T = ei_transform("eps_pred", vp)
    ub = apply_st_to_field(u, T)
    x0 = torch.randn(5, 2, generator=torch.Generator().manual_seed(5))
    errs = []
    for n in (32, 64, 128):
        grid = uniform_grid(n)
        a = ub.from_frame(solve_rk(ub, ub.to_frame(x0), grid, EULER).final)
        b = solve_ddim(u, x0, vp, grid).final
        errs.append(float((a - b).abs().max()))
    assert errs[0] > errs[1] > errs[2]
    assert math.log2(errs[1] / errs[2]) > 0.8


def test_memoized_bisection_is_consistent():
    from bns.scheduler import CustomScheduler

    src = CustomScheduler(lambda t: t ** 2, lambda t: 1 - t ** 2,
                          lambda t: 2 * t, lambda t: -2 * t)
    T = st_from_scheduler_change(src, ScaledSigmaScheduler(src, 2.0))
    first = _f(T.time(0.37))
    assert _f(T.time(0.37)) == first
    assert 0.37 in T._memo
