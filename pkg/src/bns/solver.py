"""Concrete integrators for ``dx/dt = u_t(x)`` on ``[0, 1]``.

Every solver returns a :class:`SolveTrace` that records each point at which
the field was evaluated (including Runge-Kutta stage states) so that traces
of different but equivalent solvers can be compared point by point.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ._util import EPS_T, scalar, tensor
from .errors import DivergenceError, DomainError, StiffnessError

DIVERGENCE_LIMIT = 1e12


# -- grids -------------------------------------------------------------------


def uniform_grid(n):
    """``n`` equal intervals on ``[0, 1]`` with exact endpoints."""
    if n < 1:
        raise ValueError(f"need at least one interval, got {n}")
    g = torch.arange(n + 1, dtype=torch.float64) / n
    g[-1] = 1.0
    return g


def check_grid(grid, strict=True):
    """Validate ``t_0 = 0 < t_1 < ... < t_n = 1`` (non-decreasing if not strict)."""
    g = tensor(grid).detach()
    if g.ndim != 1 or g.numel() < 2:
        raise DomainError("time grid needs at least two points")
    if float(g[0]) != 0.0 or float(g[-1]) != 1.0:
        raise DomainError(f"time grid must start at 0 and end at 1, got {float(g[0])}, {float(g[-1])}")
    steps = g[1:] - g[:-1]
    ok = bool(torch.all(steps > 0)) if strict else bool(torch.all(steps >= 0))
    if not ok:
        raise DomainError("time grid is not " + ("strictly increasing" if strict else "non-decreasing"))
    return g


# -- methods -----------------------------------------------------------------


@dataclass(frozen=True)
class ButcherTableau:
    """Explicit Runge-Kutta method: nodes ``c``, strictly lower ``a``, weights ``b``."""

    name: str
    c: tuple
    a: tuple
    b: tuple

    def __post_init__(self):
        m = len(self.c)
        if len(self.b) != m or len(self.a) != m or any(len(row) != m for row in self.a):
            raise ValueError("tableau shapes disagree")
        for j in range(m):
            for k in range(j, m):
                if self.a[j][k] != 0:
                    raise ValueError("tableau is not explicit (a_jk must vanish for j <= k)")
        if self.c[0] != 0:
            raise ValueError("explicit tableau needs c_0 = 0")

    @property
    def stages(self):
        return len(self.c)

    def nfe(self, intervals):
        return self.stages * intervals

    def intervals(self, nfe):
        if nfe < self.stages or nfe % self.stages:
            raise ValueError(f"{self.name} uses {self.stages} evaluations per step; {nfe} NFE is not a multiple")
        return nfe // self.stages


EULER = ButcherTableau("euler", (0.0,), ((0.0,),), (1.0,))
MIDPOINT = ButcherTableau("midpoint", (0.0, 0.5), ((0.0, 0.0), (0.5, 0.0)), (0.0, 1.0))
RK4 = ButcherTableau(
    "rk4",
    (0.0, 0.5, 0.5, 1.0),
    ((0.0, 0.0, 0.0, 0.0), (0.5, 0.0, 0.0, 0.0), (0.0, 0.5, 0.0, 0.0), (0.0, 0.0, 1.0, 0.0)),
    (1 / 6, 1 / 3, 1 / 3, 1 / 6),
)


class Multistep:
    """Stationary ``m``-step rule ``x_{i+1} = sum a_j x_{i-m+j} + h sum b_j u_{i-m+j}``.

    The first ``m - 1`` intervals are bootstrapped with one RK4 step each;
    those evaluations are counted, so ``k`` intervals cost ``k + 3(m - 1)``
    evaluations.
    """

    bootstrap = RK4

    def __init__(self, a, b, name="multistep"):
        if len(a) != len(b) or not len(a):
            raise ValueError("multistep coefficient vectors must have equal nonzero length")
        self.a = tuple(float(v) for v in a)
        self.b = tuple(float(v) for v in b)
        self.name = name

    @property
    def steps(self):
        return len(self.a)

    def coefficients(self, times, i):
        """``(a, w)`` for the update from ``x_i``; ``w`` already includes ``h``."""
        h = times[i + 1] - times[i]
        return self.a, tuple(h * v for v in self.b)

    def nfe(self, intervals):
        m = self.steps
        if intervals < m - 1:
            raise ValueError(f"{self.name} needs at least {m - 1} intervals for its bootstrap")
        return intervals + (self.bootstrap.stages - 1) * (m - 1)

    def intervals(self, nfe):
        k = nfe - (self.bootstrap.stages - 1) * (self.steps - 1)
        if k < max(1, self.steps - 1):
            raise ValueError(f"{self.name} cannot run with {nfe} NFE")
        return k


class AdamsBashforth(Multistep):
    """Variable-step Adams-Bashforth: integrate the interpolant through the last ``m`` velocities."""

    def __init__(self, m):
        super().__init__([0.0] * (m - 1) + [1.0], [0.0] * m, name=f"ab{m}")

    def coefficients(self, times, i):
        m = self.steps
        nodes = [float(times[i - m + 1 + j]) for j in range(m)]
        t0, t1 = float(times[i]), float(times[i + 1])
        w = []
        for j in range(m):
            others = [nodes[k] for k in range(m) if k != j]
            poly = np.polynomial.Polynomial.fromroots(others) if others else np.polynomial.Polynomial([1.0])
            poly = poly / float(np.prod([nodes[j] - o for o in others])) if others else poly
            prim = poly.integ()
            w.append(float(prim(t1) - prim(t0)))
        return self.a, tuple(w)


AB2 = AdamsBashforth(2)

METHODS = {"euler": EULER, "midpoint": MIDPOINT, "rk4": RK4, "ab2": AB2}


def get_method(method):
    if isinstance(method, (ButcherTableau, Multistep)):
        return method
    try:
        return METHODS[str(method).lower()]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; known: {sorted(METHODS)}") from None


# -- traces ------------------------------------------------------------------


@dataclass
class SolveTrace:
    """Points visited by a solver: ``times[i]``, ``states[i]``; ``velocities[i]``
    is the field value evaluated at point ``i`` (absent for the final point)."""

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    velocities: list = field(default_factory=list)
    nfe: int = 0

    @property
    def final(self):
        return self.states[-1]

    def stacked(self):
        return torch.stack(self.states)

    def add(self, t, x):
        self.times.append(scalar(t))
        self.states.append(x)

    def to_json(self):
        norms = [float(torch.linalg.vector_norm(x.detach()).item()) / math.sqrt(max(x.numel(), 1)) for x in self.states]
        return json.dumps({"times": self.times, "rms_norms": norms, "nfe": self.nfe}, indent=2)


def _check_state(x, step, limit=DIVERGENCE_LIMIT):
    xd = x.detach()
    if not bool(torch.all(torch.isfinite(xd))) or float(xd.abs().max()) > limit:
        raise DivergenceError(f"state diverged at step {step}", step=step)


# -- fixed-step solvers ------------------------------------------------------


def _rk_interval(u, x, t, h, tab, trace, check, step):
    ks = []
    for j in range(tab.stages):
        if j == 0:
            xi = x
        else:
            xi = x + h * sum(tab.a[j][l] * ks[l] for l in range(j) if tab.a[j][l] != 0)
            if check:
                _check_state(xi, step)
            trace.add(t + tab.c[j] * h, xi)
        k = u(t + tab.c[j] * h, xi)
        ks.append(k)
        trace.velocities.append(k)
        trace.nfe += u.nfe_per_call
    return x + h * sum(tab.b[j] * ks[j] for j in range(tab.stages) if tab.b[j] != 0), ks


def solve_rk(u, x0, grid, tab=EULER, check=True):
    """Explicit Runge-Kutta over each interval of ``grid``; no FSAL reuse."""
    tab = get_method(tab)
    grid = check_grid(grid, strict=False)
    x = tensor(x0)
    trace = SolveTrace()
    trace.add(grid[0], x)
    for i in range(grid.numel() - 1):
        t, h = float(grid[i]), float(grid[i + 1] - grid[i])
        x, _ = _rk_interval(u, x, t, h, tab, trace, check, i)
        if check:
            _check_state(x, i)
        trace.add(grid[i + 1], x)
    return trace


def solve_multistep(u, x0, grid, method=AB2, check=True):
    """Linear multistep solve; the first ``m - 1`` intervals use RK4."""
    method = get_method(method)
    grid = check_grid(grid)
    times = [float(v) for v in grid]
    k = len(times) - 1
    m = method.steps
    if k < m - 1:
        raise ValueError(f"{method.name} needs at least {m - 1} intervals, grid has {k}")
    x = tensor(x0)
    trace = SolveTrace()
    trace.add(times[0], x)
    xs, us = [x], []
    for i in range(k):
        t, h = times[i], times[i + 1] - times[i]
        if i < m - 1:
            x, ks = _rk_interval(u, x, t, h, method.bootstrap, trace, check, i)
            us.append(ks[0])
        else:
            ui = u(t, x)
            trace.velocities.append(ui)
            trace.nfe += u.nfe_per_call
            us.append(ui)
            a, w = method.coefficients(times, i)
            x = sum(a[j] * xs[i - m + 1 + j] for j in range(m) if a[j] != 0) + sum(
                w[j] * us[i - m + 1 + j] for j in range(m) if w[j] != 0
            )
        if check:
            _check_state(x, i)
        xs.append(x)
        trace.add(times[i + 1], x)
    return trace


def solve_generic(u, x0, method, nfe=None, grid=None, check=True):
    """Run ``method`` with ``nfe`` evaluations on a uniform grid, or on ``grid``."""
    method = get_method(method)
    if grid is None:
        grid = uniform_grid(method.intervals(nfe))
    if isinstance(method, Multistep):
        return solve_multistep(u, x0, grid, method, check=check)
    return solve_rk(u, x0, grid, method, check=check)


# -- adaptive oracle ---------------------------------------------------------

_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_DP_E = tuple(b5 - b4 for b5, b4 in zip(_DP_B5, _DP_B4))


def _err_norm(err, x, xn, rtol, atol):
    scale = atol + rtol * torch.maximum(x.abs(), xn.abs())
    r = (err / scale) ** 2
    # per-sample RMS, worst sample controls the step
    per = r.mean(-1) if r.ndim else r
    return float(torch.sqrt(per).max())


def solve_adaptive_rk45(u, x0, rtol=1e-5, atol=1e-5, t_end=1.0 - EPS_T, h0=None,
                        max_steps=1_000_000, h_min=1e-12, safety=0.9):
    """Dormand-Prince 5(4) with PI step control.

    Integrates adaptively on ``[0, t_end]`` (the clamped interval) and closes
    the remaining ``1 - t_end`` with one explicit step using the FSAL
    velocity already evaluated at ``t_end``, so the field is never evaluated at
    ``t = 1``. Batched states share one step size chosen by the worst sample.

    Returns ``(x1, nfe)``.
    """
    if not (rtol > 0 and atol > 0):
        raise ValueError("rtol and atol must be positive")
    x = tensor(x0).detach()
    t = 0.0
    k1 = u(t, x)
    nfe = u.nfe_per_call
    if h0 is None:
        # Hairer-Wanner starting step
        d0 = _err_norm(x, x, x, rtol, atol) if x.abs().max() > 0 else 0.0
        d1 = _err_norm(k1, x, x, rtol, atol)
        h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h0 = min(h0, t_end)
        x1 = x + h0 * k1
        k2 = u(t + h0, x1)
        nfe += u.nfe_per_call
        d2 = _err_norm(k2 - k1, x, x, rtol, atol) / h0
        h1 = (0.01 / max(d1, d2)) ** 0.2 if max(d1, d2) > 1e-15 else max(1e-6, h0 * 1e-3)
        h = min(100 * h0, h1, t_end)
    else:
        h = min(float(h0), t_end)
    err_prev = 1e-4
    alpha, beta = 0.7 / 5, 0.4 / 5
    steps = 0
    while t < t_end:
        steps += 1
        if steps > max_steps:
            raise StiffnessError(f"exceeded {max_steps} steps at t={t}")
        if h < h_min:
            raise StiffnessError(f"step size {h:.3e} below {h_min:.0e} at t={t}")
        last = t + h >= t_end
        if last:
            h = t_end - t
        ks = [k1]
        for j in range(1, 7):
            xi = x + h * sum(a * kk for a, kk in zip(_DP_A[j], ks) if a != 0)
            ks.append(u(t + _DP_C[j] * h, xi))
            nfe += u.nfe_per_call
        x_new = xi  # row 6 of A equals the 5th-order weights
        err = h * sum(e * kk for e, kk in zip(_DP_E, ks) if e != 0)
        en = _err_norm(err, x, x_new, rtol, atol)
        if not math.isfinite(en):
            h *= 0.25
            continue
        if en <= 1.0:
            t = t_end if last else t + h
            x, k1 = x_new, ks[6]
            fac = safety * en ** (-alpha) * err_prev ** beta if en > 0 else 5.0
            h *= min(5.0, max(0.2, fac))
            err_prev = max(en, 1e-4)
        else:
            h *= max(0.2, safety * en ** (-alpha))
    if t_end < 1.0:
        x = x + (1.0 - t_end) * k1
    return x, nfe


# -- non-stationary sampler --------------------------------------------------


def solve_ns(theta, u, x0, check=True):
    """Non-stationary sampling: ``x_{i+1} = a_i x_0 + sum_{j<=i} b_ij u_{t_j}(x_j)``.

    Evaluates ``u`` exactly ``n`` times. Differentiable with respect to every
    entry of ``theta`` (grid times included) when those are tensors that
    require grad.
    """
    x0 = tensor(x0)
    trace = SolveTrace()
    trace.add(theta.grid[0], x0)
    x = x0
    us = []
    for i in range(theta.n):
        ui = u(theta.grid[i], x)
        us.append(ui)
        trace.velocities.append(ui)
        trace.nfe += u.nfe_per_call
        acc = theta.a[i] * x0
        for j in range(i + 1):
            acc = acc + theta.b[i, j] * us[j]
        x = acc
        if check:
            try:
                _check_state(x, i)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} (theta n={theta.n}, id={id(theta):#x})", step=i) from None
        trace.add(theta.grid[i + 1], x)
    return trace


# -- exponential integrator oracle --------------------------------------------


def solve_ddim(u, x0, sched, grid, check=True):
    """First-order exponential integrator (DDIM) written out in closed form.

    The eps prediction is recovered from the velocity through the
    parameterization identity, so this needs ``alpha_t > 0`` on every
    evaluation time.
    """
    from .field import param_coefficients

    grid = check_grid(grid)
    x = tensor(x0)
    trace = SolveTrace()
    trace.add(grid[0], x)
    for i in range(grid.numel() - 1):
        t, tn = grid[i], grid[i + 1]
        ui = u(t, x)
        trace.velocities.append(ui)
        trace.nfe += u.nfe_per_call
        beta, gamma = param_coefficients("eps_pred", sched, t)
        eps = (ui - beta * x) / gamma
        a, s = sched.coefficients(t)[:2]
        an, sn = sched.coefficients(tn)[:2]
        x = (an / a) * x + (sn - s * an / a) * eps
        if check:
            _check_state(x, i)
        trace.add(tn, x)
    return trace


def solve_transformed(u, transform, x0, solve):
    """Run ``solve(ubar, xbar0)`` on the transformed field and map back.

    Returns ``(x1, trace)`` where ``trace`` lives in the transformed frame.
    """
    from .transform import STField

    ubar = STField(u, transform)
    trace = solve(ubar, ubar.to_frame(x0))
    return ubar.from_frame(trace.final), trace
