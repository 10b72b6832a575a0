"""Non-stationary solver parameters: containers, canonical form, embeddings
of generic and scale-time solvers, and the unconstrained training
parameterization."""

import json
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ._util import fmt17, scalar, tensor
from .errors import ConfigError, DomainError
from .solver import ButcherTableau, Multistep, check_grid, get_method, uniform_grid
from .transform import IdentityTransform


def param_count(n):
    """Scalars in an ``n``-step solver: ``n + 1`` times, ``n`` ``a`` and ``n(n+1)/2`` ``b``."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    return n * (n + 5) // 2 + 1


def free_param_count(n):
    """Trainable scalars once both endpoints are pinned (``t_0 = 0``, ``t_n = 1``)."""
    return param_count(n) - 2


@dataclass
class NSSolverParams:
    """``grid`` has ``n + 1`` times, ``a`` has ``n`` entries and ``b`` is ``n x n``
    lower triangular; step ``i`` is ``x_{i+1} = a_i x_0 + sum_{j<=i} b_ij u_j``."""

    grid: torch.Tensor
    a: torch.Tensor
    b: torch.Tensor

    def __post_init__(self):
        self.grid, self.a, self.b = tensor(self.grid), tensor(self.a), tensor(self.b)
        n = self.a.numel()
        if self.grid.shape != (n + 1,) or self.b.shape != (n, n):
            raise DomainError(
                f"inconsistent shapes: grid {tuple(self.grid.shape)}, a {tuple(self.a.shape)}, b {tuple(self.b.shape)}"
            )

    @property
    def n(self):
        return self.a.numel()

    def validate(self, strict=True):
        """Endpoints, grid order (strict or non-decreasing), finiteness, zero upper triangle."""
        check_grid(self.grid, strict=strict)
        for name, v in (("grid", self.grid), ("a", self.a), ("b", self.b)):
            if not bool(torch.all(torch.isfinite(v.detach()))):
                raise DomainError(f"non-finite entries in {name}")
        if bool(torch.any(torch.triu(self.b.detach(), diagonal=1) != 0)):
            raise DomainError("b has nonzero entries above the diagonal")
        return self

    def detach(self):
        return NSSolverParams(self.grid.detach().clone(), self.a.detach().clone(), self.b.detach().clone())

    def steps(self):
        return [(self.a[i], self.b[i, : i + 1]) for i in range(self.n)]

    def to_vector(self):
        idx = torch.tril_indices(self.n, self.n)
        return torch.cat([self.grid, self.a, self.b[idx[0], idx[1]]])

    @classmethod
    def from_vector(cls, n, vec):
        vec = tensor(vec)
        if vec.numel() != param_count(n):
            raise ValueError(f"expected {param_count(n)} values, got {vec.numel()}")
        grid, a, low = vec[: n + 1], vec[n + 1 : 2 * n + 1], vec[2 * n + 1 :]
        idx = torch.tril_indices(n, n)
        b = torch.zeros(n, n, dtype=vec.dtype).index_put((idx[0], idx[1]), low)
        return cls(grid, a, b)

    def max_abs_diff(self, other):
        return max(
            float((self.grid - other.grid).abs().max()),
            float((self.a - other.a).abs().max()),
            float((self.b - other.b).abs().max()),
        )

    def to_json(self):
        d = self.detach()
        steps = ",\n".join(
            '    {"a": %s, "b": [%s]}' % (fmt17(d.a[i]), ", ".join(fmt17(v) for v in d.b[i, : i + 1]))
            for i in range(d.n)
        )
        return '{\n  "n": %d,\n  "grid": [%s],\n  "steps": [\n%s\n  ]\n}\n' % (
            d.n,
            ", ".join(fmt17(v) for v in d.grid),
            steps,
        )

    @classmethod
    def from_json(cls, text, strict=True):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"solver parameters are not valid JSON: {exc}") from None
        if not isinstance(obj, dict) or set(obj) != {"n", "grid", "steps"}:
            raise ConfigError("solver parameter JSON needs exactly the keys n, grid, steps")
        n = obj["n"]
        if not isinstance(n, int) or n < 1:
            raise ConfigError(f"n must be a positive integer, got {n!r}")
        if len(obj["grid"]) != n + 1 or len(obj["steps"]) != n:
            raise ConfigError(f"n={n} but grid has {len(obj['grid'])} and steps has {len(obj['steps'])} entries")
        b = torch.zeros(n, n, dtype=torch.float64)
        a = torch.zeros(n, dtype=torch.float64)
        for i, step in enumerate(obj["steps"]):
            if not isinstance(step, dict) or set(step) != {"a", "b"} or len(step["b"]) != i + 1:
                raise ConfigError(f"step {i} must be {{'a': float, 'b': [{i + 1} floats]}}")
            a[i] = float(step["a"])
            b[i, : i + 1] = torch.tensor([float(v) for v in step["b"]], dtype=torch.float64)
        theta = cls(torch.tensor([float(v) for v in obj["grid"]], dtype=torch.float64), a, b)
        try:
            theta.validate(strict=strict)
        except DomainError as exc:
            raise ConfigError(str(exc)) from None
        return theta

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path, strict=True):
        with open(path) as fh:
            return cls.from_json(fh.read(), strict=strict)


# -- general update rules ------------------------------------------------------


@dataclass
class GeneralUpdateRule:
    """``x_{i+1} = sum_{j<=i} c_i[j] x_j + sum_{j<=i} d_i[j] u_j`` on ``grid``."""

    grid: torch.Tensor
    c: list
    d: list

    def __post_init__(self):
        self.grid = tensor(self.grid)
        n = self.grid.numel() - 1
        if len(self.c) != n or len(self.d) != n:
            raise DomainError(f"rule needs {n} steps, got {len(self.c)} c and {len(self.d)} d")
        self.c = [tensor(v) for v in self.c]
        self.d = [tensor(v) for v in self.d]
        for i in range(n):
            if self.c[i].shape != (i + 1,) or self.d[i].shape != (i + 1,):
                raise DomainError(f"step {i}: c and d need {i + 1} entries")

    @property
    def n(self):
        return len(self.c)

    @classmethod
    def random(cls, n, generator=None, scale=0.3):
        grid = torch.sort(torch.rand(n - 1, generator=generator, dtype=torch.float64)).values
        grid = torch.cat([torch.zeros(1, dtype=torch.float64), grid, torch.ones(1, dtype=torch.float64)])
        c, d = [], []
        for i in range(n):
            ci = scale * torch.randn(i + 1, generator=generator, dtype=torch.float64)
            ci[-1] += 1.0
            c.append(ci)
            d.append(scale * torch.randn(i + 1, generator=generator, dtype=torch.float64))
        return cls(grid, c, d)


def solve_general(rule, u, x0):
    """Direct simulation of a general rule; returns the list of states."""
    xs, us = [tensor(x0)], []
    for i in range(rule.n):
        us.append(u(rule.grid[i], xs[-1]))
        x = sum(rule.c[i][j] * xs[j] for j in range(i + 1)) + sum(rule.d[i][j] * us[j] for j in range(i + 1))
        xs.append(x)
    return xs


def canonicalize(rule):
    """Eliminate ``x_1..x_i`` from each step of a general rule.

    ``a_i = c_i[0] + sum_{1<=j<=i} c_i[j] a_{j-1}`` and
    ``b_i[j] = d_i[j] + sum_{j<l<=i} c_i[l] b_{l-1}[j]``.
    """
    n = rule.n
    a = [None] * n
    b = [None] * n
    for i in range(n):
        ci, di = rule.c[i], rule.d[i]
        ai = ci[0]
        bi = di.clone()
        for l in range(1, i + 1):
            ai = ai + ci[l] * a[l - 1]
            bi = torch.cat([bi[:l] + ci[l] * b[l - 1], bi[l:]])
        a[i], b[i] = ai, bi
    B = torch.zeros(n, n, dtype=torch.float64)
    rows = [torch.cat([b[i], torch.zeros(n - i - 1, dtype=torch.float64)]) for i in range(n)]
    B = torch.stack(rows) if n else B
    return NSSolverParams(rule.grid, torch.stack(a), B)


# -- embeddings ----------------------------------------------------------------


def _generic_rule(method, nfe, grid=None):
    """``(times, c, d)`` of ``method`` written as a general rule on its own points."""
    method = get_method(method)
    if grid is None:
        grid = uniform_grid(method.intervals(nfe))
    times_g = [scalar(v) for v in check_grid(grid)]
    k = len(times_g) - 1
    if nfe is not None and method.nfe(k) != nfe:
        raise ValueError(f"{method.name} on {k} intervals uses {method.nfe(k)} NFE, not {nfe}")
    times, c, d = [], [], []

    def rk_interval(tab, p0, t, h):
        # points p0 .. p0 + m - 1 hold the stages; p0 + m is the next grid point
        m = tab.stages
        for j in range(m):
            times.append(t + tab.c[j] * h)
        for j in range(1, m + 1):
            coef = tab.b if j == m else tab.a[j]
            p = p0 + j - 1  # step from point p to p + 1
            cj = torch.zeros(p + 1, dtype=torch.float64)
            dj = torch.zeros(p + 1, dtype=torch.float64)
            cj[p0] = 1.0
            for l in range(min(j, m)):
                dj[p0 + l] = h * coef[l]
            c.append(cj)
            d.append(dj)

    if isinstance(method, ButcherTableau):
        for i in range(k):
            rk_interval(method, i * method.stages, times_g[i], times_g[i + 1] - times_g[i])
    elif isinstance(method, Multistep):
        m, boot = method.steps, method.bootstrap
        nb = m - 1
        for i in range(nb):
            rk_interval(boot, i * boot.stages, times_g[i], times_g[i + 1] - times_g[i])
        pidx = lambda i: boot.stages * i if i <= nb else boot.stages * nb + (i - nb)
        for i in range(nb, k):
            times.append(times_g[i])
            p = pidx(i)
            ai, wi = method.coefficients(times_g, i)
            cj = torch.zeros(p + 1, dtype=torch.float64)
            dj = torch.zeros(p + 1, dtype=torch.float64)
            for j in range(m):
                q = pidx(i - m + 1 + j)
                cj[q] += ai[j]
                dj[q] += wi[j]
            c.append(cj)
            d.append(dj)
    else:  # pragma: no cover
        raise TypeError(type(method))
    times.append(times_g[-1])
    return times, c, d


def _map_rule(times, c, d, transform):
    """Map a general rule on ``xbar = s x`` in ``r`` to a canonical NS solver in ``t``."""
    if isinstance(transform, IdentityTransform):
        return canonicalize(GeneralUpdateRule(torch.tensor(times, dtype=torch.float64), c, d))
    ev = [transform.evaluate(tensor(r)) for r in times]
    s = torch.stack([e[0] for e in ev])
    t = torch.stack([e[1] for e in ev])
    ds = torch.stack([e[2] for e in ev])
    dt = torch.stack([e[3] for e in ev])
    cc, dd = [], []
    for p in range(len(c)):
        q = slice(0, p + 1)
        cc.append((c[p] * s[q] + d[p] * ds[q]) / s[p + 1])
        dd.append(d[p] * dt[q] * s[q] / s[p + 1])
    return canonicalize(GeneralUpdateRule(t, cc, dd))


def embed_generic(method, nfe=None, grid=None):
    """NS parameters reproducing ``method`` (euler, midpoint, rk4, ab2...).

    Runge-Kutta stage times become grid points, so methods with repeated
    nodes (RK4) give non-decreasing rather than strictly increasing grids.
    """
    times, c, d = _generic_rule(method, nfe, grid)
    return _map_rule(times, c, d, IdentityTransform())


def embed_st_solver(method, transform, nfe=None, grid=None):
    """NS parameters over the original field equal to ``method`` applied to the
    transformed field, with ``x(1) = xbar(1) / s_1``. ``grid`` is in ``r``."""
    times, c, d = _generic_rule(method, nfe, grid)
    return _map_rule(times, c, d, transform)


def fold_transform(theta_bar, transform):
    """Rewrite NS parameters acting on the transformed field as NS parameters
    acting on the original field (same trajectory, same NFE)."""
    n = theta_bar.n
    c, d = [], []
    for i in range(n):
        ci = torch.zeros(i + 1, dtype=torch.float64)
        ci[0] = 1.0
        c.append(ci * theta_bar.a[i])
        d.append(theta_bar.b[i, : i + 1])
    return _map_rule([scalar(r) for r in theta_bar.grid], c, d, transform)


# -- unconstrained parameterization --------------------------------------------

_LN2 = math.log(2.0)
# smallest relative increment kept when mapping a grid back to raw values
_MIN_INCREMENT = 1e-12


@dataclass
class RawNSParams:
    """Flat unconstrained vector: ``n - 1`` time logits, ``n`` values of ``a``,
    then the lower triangle of ``b`` row by row (``param_count(n) - 2`` values)."""

    n: int
    vector: torch.Tensor

    def __post_init__(self):
        if self.vector.numel() != free_param_count(self.n):
            raise ValueError(f"raw vector for n={self.n} needs {free_param_count(self.n)} values")


def raw_to_constrained(raw):
    """Softplus increments normalized to sum to one; ``a`` and ``b`` pass through.

    The last increment is pinned to ``softplus(0)`` so the map is one-to-one.
    """
    n, v = raw.n, raw.vector
    inc = torch.cat([F.softplus(v[: n - 1]), torch.full((1,), _LN2, dtype=v.dtype)])
    inc = torch.clamp(inc, min=1e-300)
    cum = torch.cumsum(inc, 0)
    zero, one = torch.zeros(1, dtype=v.dtype), torch.ones(1, dtype=v.dtype)
    grid = torch.cat([zero, cum[:-1] / cum[-1], one])
    a = v[n - 1 : 2 * n - 1]
    low = v[2 * n - 1 :]
    idx = torch.tril_indices(n, n)
    b = torch.zeros(n, n, dtype=v.dtype).index_put((idx[0], idx[1]), low)
    return NSSolverParams(grid, a, b)


def _softplus_inv(y):
    # log(exp(y) - 1), stable for large and small y
    return y + torch.log(-torch.expm1(-y))


def constrained_to_raw(theta):
    """Inverse of :func:`raw_to_constrained`; increments are floored at
    ``1e-12`` of the last one so repeated times remain representable."""
    n = theta.n
    g = theta.grid.detach()
    inc = g[1:] - g[:-1]
    last = inc[-1]
    if float(last) <= 0:
        raise DomainError("last grid increment must be positive")
    rel = torch.clamp(inc[:-1] / last, min=_MIN_INCREMENT) * _LN2
    idx = torch.tril_indices(n, n)
    vec = torch.cat([_softplus_inv(rel), theta.a.detach(), theta.b.detach()[idx[0], idx[1]]])
    return RawNSParams(n, vec)
