import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bns.errors import ConfigError, DomainError
from bns.field import PolynomialField
from bns.nsparams import (
    GeneralUpdateRule,
    NSSolverParams,
    RawNSParams,
    canonicalize,
    constrained_to_raw,
    embed_generic,
    embed_st_solver,
    fold_transform,
    free_param_count,
    param_count,
    raw_to_constrained,
    solve_general,
)
from bns.scheduler import ScaledSigmaScheduler, VPScheduler
from bns.solver import MIDPOINT, RK4, solve_ddim, solve_generic, solve_ns, solve_rk, uniform_grid
from bns.transform import IdentityTransform, STField, ddim_r_grid, ddim_transform, st_from_scheduler_change


@pytest.mark.parametrize("n, p", [(1, 4), (4, 19), (8, 53), (16, 169)])
def test_param_count(n, p):
    assert param_count(n) == p
    assert free_param_count(n) == p - 2
    assert embed_generic("euler", n).to_vector().numel() == p


def test_param_count_rejects_zero():
    with pytest.raises(ValueError):
        param_count(0)


def test_canonicalize_base_case():
    rule = GeneralUpdateRule(torch.tensor([0.0, 1.0]), [torch.tensor([1.0])], [torch.tensor([0.25])])
    theta = canonicalize(rule)
    assert float(theta.a[0]) == 1.0 and float(theta.b[0, 0]) == 0.25


def test_canonicalize_euler_rule():
    n = 5
    h = 1.0 / n
    c = [torch.eye(i + 1)[-1] for i in range(n)]
    d = [h * torch.eye(i + 1)[-1] for i in range(n)]
    theta = canonicalize(GeneralUpdateRule(uniform_grid(n), c, d))
    torch.testing.assert_close(theta.a, torch.ones(n), rtol=0, atol=0)
    torch.testing.assert_close(theta.b, h * torch.tril(torch.ones(n, n)), rtol=0, atol=1e-16)


def test_canonicalize_random_rules_trajectory():
    g = torch.Generator().manual_seed(0)
    u = PolynomialField(3, seed=11)
    x0 = torch.randn(4, 3, generator=g)
    for _ in range(50):
        rule = GeneralUpdateRule.random(6, generator=g)
        ref = torch.stack(solve_general(rule, u, x0))
        got = solve_ns(canonicalize(rule), u, x0).stacked()
        torch.testing.assert_close(got, ref, rtol=0, atol=1e-10)


def test_rule_shape_checks():
    with pytest.raises(DomainError):
        GeneralUpdateRule(uniform_grid(2), [torch.ones(1), torch.ones(1)], [torch.ones(1), torch.ones(2)])


def test_embed_euler_one_step():
    theta = embed_generic("euler", 1)
    assert float(theta.a[0]) == 1.0 and float(theta.b[0, 0]) == 1.0


def test_embed_midpoint_two_nfe():
    theta = embed_generic("midpoint", 2)
    torch.testing.assert_close(theta.grid, torch.tensor([0.0, 0.5, 1.0]))
    torch.testing.assert_close(theta.a, torch.tensor([1.0, 1.0]))
    torch.testing.assert_close(theta.b, torch.tensor([[0.5, 0.0], [0.0, 1.0]]))


@pytest.mark.parametrize("method, nfe", [("euler", 8), ("midpoint", 16), ("rk4", 8), ("ab2", 8), ("ab2", 12)])
def test_embed_generic_trace_equality(method, nfe, gmm_field):
    x0 = torch.randn(5, 2, generator=torch.Generator().manual_seed(3))
    a = solve_ns(embed_generic(method, nfe), gmm_field, x0).stacked()
    b = solve_generic(gmm_field, x0, method, nfe).stacked()
    torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_embed_generic_random_fields(seed):
    u = PolynomialField(3, seed=100 + seed)
    x0 = torch.randn(3, 3, generator=torch.Generator().manual_seed(seed))
    for method in ("euler", "midpoint", "rk4", "ab2"):
        a = solve_ns(embed_generic(method, 8), u, x0).final
        b = solve_generic(u, x0, method, 8).final
        torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


def test_embed_on_custom_grid(gmm_field):
    grid = torch.tensor([0.0, 0.1, 0.3, 0.7, 1.0])
    x0 = torch.randn(4, 2, generator=torch.Generator().manual_seed(0))
    a = solve_ns(embed_generic(MIDPOINT, grid=grid), gmm_field, x0).final
    b = solve_rk(gmm_field, x0, grid, MIDPOINT).final
    torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


@pytest.mark.parametrize("method, nfe", [("midpoint", 7), ("rk4", 6), ("ab2", 3)])
def test_embed_indivisible(method, nfe):
    with pytest.raises(ValueError):
        embed_generic(method, nfe)


def test_rk4_embedding_grid_repeats_nodes():
    theta = embed_generic("rk4", 4)
    torch.testing.assert_close(theta.grid, torch.tensor([0.0, 0.5, 0.5, 1.0, 1.0]))
    theta.validate(strict=False)
    with pytest.raises(DomainError):
        theta.validate(strict=True)


def test_embed_st_identity_equals_generic():
    a = embed_st_solver("midpoint", IdentityTransform(), 8)
    b = embed_generic("midpoint", 8)
    assert a.max_abs_diff(b) == 0.0


def test_embed_st_ddim(gmm_field, vp):
    grid = uniform_grid(8)
    theta = embed_st_solver("euler", ddim_transform(vp), grid=ddim_r_grid(vp, grid))
    torch.testing.assert_close(theta.grid, grid, rtol=0, atol=1e-13)
    x0 = torch.randn(5, 2, generator=torch.Generator().manual_seed(8))
    a = solve_ns(theta, gmm_field, x0).stacked()
    b = solve_ddim(gmm_field, x0, vp, grid).stacked()
    torch.testing.assert_close(a, b, rtol=0, atol=1e-9)


@pytest.mark.parametrize("method, nfe", [("midpoint", 8), ("rk4", 8), ("ab2", 8)])
def test_embed_st_preconditioned_pipeline(method, nfe, gmm_field, vp):
    T = st_from_scheduler_change(vp, ScaledSigmaScheduler(vp, 5.0))
    ub = STField(gmm_field, T)
    x0 = torch.randn(5, 2, generator=torch.Generator().manual_seed(9))
    ref = ub.from_frame(solve_generic(ub, ub.to_frame(x0), method, nfe).final)
    got = solve_ns(embed_st_solver(method, T, nfe), gmm_field, x0).final
    torch.testing.assert_close(got, ref, rtol=0, atol=1e-10)


def test_fold_transform_preserves_samples(gmm_field, vp):
    T = st_from_scheduler_change(vp, ScaledSigmaScheduler(vp, 10.0))
    ub = STField(gmm_field, T)
    g = torch.Generator().manual_seed(4)
    raw = constrained_to_raw(embed_generic("midpoint", 6))
    raw.vector += 0.05 * torch.randn(raw.vector.shape, generator=g)
    theta_bar = raw_to_constrained(raw)
    x0 = torch.randn(5, 2, generator=g)
    ref = ub.from_frame(solve_ns(theta_bar, ub, ub.to_frame(x0)).final)
    got = solve_ns(fold_transform(theta_bar, T), gmm_field, x0).final
    torch.testing.assert_close(got, ref, rtol=0, atol=1e-10)


def test_equal_raw_increments_give_uniform_grid():
    n = 6
    raw = RawNSParams(n, torch.zeros(free_param_count(n)))
    torch.testing.assert_close(raw_to_constrained(raw).grid, uniform_grid(n), rtol=0, atol=1e-15)


@settings(max_examples=1000)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
def test_raw_grid_strictly_increasing(n, seed, scale):
    v = scale * torch.randn(free_param_count(n), generator=torch.Generator().manual_seed(seed))
    theta = raw_to_constrained(RawNSParams(n, v))
    theta.validate(strict=True)


@settings(max_examples=100)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_raw_roundtrip_idempotent(n, seed):
    v = 2.0 * torch.randn(free_param_count(n), generator=torch.Generator().manual_seed(seed))
    once = constrained_to_raw(raw_to_constrained(RawNSParams(n, v)))
    twice = constrained_to_raw(raw_to_constrained(once))
    torch.testing.assert_close(twice.vector, once.vector, rtol=1e-12, atol=1e-12)
    torch.testing.assert_close(once.vector, v, rtol=1e-9, atol=1e-9)


def test_raw_passes_coefficients_through():
    theta = embed_generic("ab2", 6)
    back = raw_to_constrained(constrained_to_raw(theta))
    torch.testing.assert_close(back.a, theta.a, rtol=0, atol=0)
    torch.testing.assert_close(back.b, theta.b, rtol=0, atol=0)
    torch.testing.assert_close(back.grid, theta.grid, rtol=0, atol=1e-12)


def test_json_roundtrip_bit_exact():
    g = torch.Generator().manual_seed(5)
    raw = RawNSParams(5, torch.randn(free_param_count(5), generator=g))
    theta = raw_to_constrained(raw).detach()
    again = NSSolverParams.from_json(theta.to_json())
    assert torch.equal(again.grid, theta.grid)
    assert torch.equal(again.a, theta.a)
    assert torch.equal(again.b, theta.b)
    assert again.to_json() == theta.to_json()


def test_json_layout():
    obj = json.loads(embed_generic("midpoint", 4).to_json())
    assert set(obj) == {"n", "grid", "steps"}
    assert [len(s["b"]) for s in obj["steps"]] == [1, 2, 3, 4]


@pytest.mark.parametrize(
    "text",
    [
        "not json",
        '{"n": 1, "grid": [0, 1]}',
        '{"n": 1, "grid": [0, 1], "steps": [{"a": 1, "b": [1, 2]}]}',
        '{"n": 2, "grid": [0, 0.7, 0.3], "steps": [{"a": 1, "b": [1]}, {"a": 1, "b": [1, 1]}]}',
        '{"n": 1, "grid": [0.1, 1], "steps": [{"a": 1, "b": [1]}]}',
        '{"n": 0, "grid": [0], "steps": []}',
    ],
)
def test_json_rejects_malformed(text):
    with pytest.raises(ConfigError):
        NSSolverParams.from_json(text)


def test_vector_roundtrip():
    theta = embed_generic("rk4", 8)
    again = NSSolverParams.from_vector(8, theta.to_vector())
    assert again.max_abs_diff(theta) == 0.0


def test_upper_triangle_rejected():
    theta = embed_generic("euler", 3)
    theta.b[0, 2] = 1.0
    with pytest.raises(DomainError):
        theta.validate()
