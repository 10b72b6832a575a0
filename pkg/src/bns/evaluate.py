"""Metrics, NFE sweeps against baseline solvers, and the equivalence suite
that certifies embeddings against native solver implementations."""

import io
import math
import time
from dataclasses import dataclass, field

import torch

from ._util import scalar, tensor
from .errors import BNSError, DomainError
from .field import PolynomialField
from .nsparams import GeneralUpdateRule, canonicalize, embed_generic, embed_st_solver, solve_general
from .scheduler import ScaledSigmaScheduler, VPScheduler
from .solver import (
    MIDPOINT,
    get_method,
    solve_ddim,
    solve_generic,
    solve_ns,
    solve_rk,
    solve_transformed,
    uniform_grid,
)
from .transform import SchedulerChangeTransform, ddim_r_grid, ddim_transform

PSNR_CAP = 200.0


def psnr_db(approx, reference, range=2.0):
    """Peak signal-to-noise ratio over the last axis, ``10 log10(range^2 / MSE)``.

    Capped at 200 dB once ``MSE < range^2 * 1e-20``. Batched inputs give one
    value per sample.
    """
    a, r = tensor(approx), tensor(reference)
    if a.shape != r.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(r.shape)}")
    if not range > 0:
        raise ValueError(f"range must be positive, got {range}")
    mse = ((a - r) ** 2).mean(-1)
    floor = range * range * 1e-20
    out = 10.0 * torch.log10(range * range / torch.clamp(mse, min=floor))
    return torch.where(mse < floor, torch.full_like(out, PSNR_CAP), out)


def rmse(approx, reference):
    a, r = tensor(approx), tensor(reference)
    if a.shape != r.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(r.shape)}")
    return torch.sqrt(((a - r) ** 2).mean(-1))


# -- sweeps --------------------------------------------------------------------


@dataclass
class SweepRow:
    solver: str
    nfe: int
    psnr: float = math.nan
    rmse: float = math.nan
    wall_time: float = 0.0
    capped: bool = False
    error: str = ""


def _csv_field(v):
    s = str(v)
    if any(ch in s for ch in ',"\r\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s


def _fmt(v):
    return "" if isinstance(v, float) and math.isnan(v) else repr(float(v))


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)

    def get(self, solver, nfe):
        for r in self.rows:
            if r.solver == solver and r.nfe == nfe:
                return r
        raise KeyError((solver, nfe))

    def to_csv(self, include_time=False):
        """RFC 4180 CSV; wall time is omitted by default so files are reproducible."""
        head = ["solver", "nfe", "psnr_db", "rmse", "capped", "error"] + (["wall_time_s"] if include_time else [])
        out = [",".join(head)]
        for r in self.rows:
            vals = [r.solver, r.nfe, _fmt(r.psnr), _fmt(r.rmse), int(r.capped), r.error]
            if include_time:
                vals.append(f"{r.wall_time:.6f}")
            out.append(",".join(_csv_field(v) for v in vals))
        return "\r\n".join(out) + "\r\n"

    def table(self):
        buf = io.StringIO()
        buf.write(f"{'solver':<10} {'nfe':>4} {'psnr_db':>10} {'rmse':>12} {'time_s':>8}  note\n")
        for r in self.rows:
            note = r.error or ("capped" if r.capped else "")
            buf.write(f"{r.solver:<10} {r.nfe:>4} {r.psnr:>10.4f} {r.rmse:>12.4e} {r.wall_time:>8.3f}  {note}\n")
        return buf.getvalue()


def baseline_sampler(name, sched=None):
    """``sample(u, x0, nfe) -> x1`` for a named baseline.

    ``euler``, ``midpoint``, ``rk4`` and ``ab2`` run on uniform grids sized to
    the NFE budget; ``ddim`` takes ``nfe`` uniform steps in ``t`` and needs the
    scheduler.
    """
    name = name.lower()
    if name == "ddim":
        if sched is None:
            raise ValueError("ddim baseline needs the scheduler")
        return lambda u, x0, nfe: solve_ddim(u, x0, sched, uniform_grid(nfe)).final
    method = get_method(name)
    return lambda u, x0, nfe: solve_generic(u, x0, method, nfe).final


def ns_sampler(thetas):
    """Sampler backed by trained NS parameters, keyed by NFE."""

    def sample(u, x0, nfe):
        if nfe not in thetas:
            raise KeyError(f"no trained parameters for NFE={nfe}")
        theta = thetas[nfe]
        if theta.n * u.nfe_per_call != nfe * u.nfe_per_call or theta.n != nfe:
            raise ValueError(f"parameters have n={theta.n}, requested NFE={nfe}")
        return solve_ns(theta, u, x0).final

    return sample


def nfe_sweep(u, dataset, solvers, nfes, psnr_range=2.0):
    """Mean PSNR and RMSE of every ``(solver, nfe)`` cell against ``dataset.x1``.

    ``solvers`` maps names to ``sample(u, x0, nfe)`` callables. Failing cells
    are recorded with their error message.
    """
    report = SweepReport()
    for name, sample in solvers.items():
        for nfe in nfes:
            row = SweepRow(name, int(nfe))
            t0 = time.perf_counter()
            try:
                with torch.no_grad():
                    x1 = sample(u, dataset.x0, int(nfe))
                p = psnr_db(x1, dataset.x1, psnr_range)
                row.psnr = float(p.mean())
                row.rmse = float(rmse(x1, dataset.x1).mean())
                row.capped = bool(torch.all(p >= PSNR_CAP))
                if not math.isfinite(row.psnr):
                    row.error = "non-finite output"
            except (BNSError, ValueError, KeyError, ArithmeticError) as exc:
                row.error = f"{type(exc).__name__}: {exc}".strip()
            row.wall_time = time.perf_counter() - t0
            report.rows.append(row)
    return report


# -- equivalence suite -----------------------------------------------------------


@dataclass
class TaxonomyRow:
    check: str
    field: str
    deviation: float
    tol: float

    @property
    def passed(self):
        return math.isfinite(self.deviation) and self.deviation <= self.tol


@dataclass
class TaxonomyReport:
    rows: list = field(default_factory=list)

    @property
    def passed(self):
        return bool(self.rows) and all(r.passed for r in self.rows)

    def max_by_check(self):
        out = {}
        for r in self.rows:
            out[r.check] = max(out.get(r.check, 0.0), r.deviation)
        return out

    def to_csv(self):
        out = ["check,field,max_deviation,tol,passed"]
        for r in self.rows:
            out.append(",".join(_csv_field(v) for v in (r.check, r.field, repr(r.deviation), repr(r.tol), int(r.passed))))
        return "\r\n".join(out) + "\r\n"

    def table(self):
        buf = io.StringIO()
        buf.write(f"{'check':<22} {'fields':>6} {'max_deviation':>14}  status\n")
        for check, dev in self.max_by_check().items():
            rows = [r for r in self.rows if r.check == check]
            ok = all(r.passed for r in rows)
            buf.write(f"{check:<22} {len(rows):>6} {dev:>14.3e}  {'PASS' if ok else 'FAIL'}\n")
        return buf.getvalue()


def deviation(a, b):
    """Max-norm deviation relative to ``max(1, |b|_inf)``."""
    a, b = tensor(a).detach(), tensor(b).detach()
    if a.shape != b.shape:
        return math.inf
    d = float((a - b).abs().max())
    return d / max(1.0, float(b.abs().max())) if math.isfinite(d) else math.inf


def default_field_suite(n_fields=20, dim=3, seed=0):
    return [PolynomialField(dim, seed=seed + k) for k in range(n_fields)]


def _corrupt(theta, amount):
    if amount:
        theta.b = theta.b + amount * torch.tril(torch.ones_like(theta.b))
    return theta


def taxonomy_check(fields, tol=1e-9, nfe=8, n_rules=50, rule_steps=6, n_samples=4, seed=0, corrupt=0.0,
                   sched=None, sigma0=5.0):
    """Dual-path simulation of every embedding against its native solver.

    Checks per field: ``canonicalize`` on random general rules; ``embed_generic``
    for Euler, Midpoint, RK4 and AB2; Euler on the DDIM transform versus the
    closed-form DDIM update on VP; Midpoint on the ``sigma0``-preconditioned
    field versus its NS embedding. ``corrupt`` adds a constant to every
    embedded ``b`` coefficient to exercise the harness itself.
    """
    fields = list(fields)
    if not fields:
        raise ValueError("field suite is empty")
    sched = sched or VPScheduler()
    g = torch.Generator().manual_seed(int(seed))
    report = TaxonomyReport()
    grid = uniform_grid(nfe)
    T_ddim = ddim_transform(sched)
    r_ddim = ddim_r_grid(sched, grid)
    T_pre = SchedulerChangeTransform(sched, ScaledSigmaScheduler(sched, sigma0))

    embeds = {m: _corrupt(embed_generic(m, nfe), corrupt) for m in ("euler", "midpoint", "rk4", "ab2")}
    ns_ddim = _corrupt(embed_st_solver("euler", T_ddim, grid=r_ddim), corrupt)
    ns_pre = _corrupt(embed_st_solver(MIDPOINT, T_pre, nfe), corrupt)
    pre_points = None

    for k, u in enumerate(fields):
        label = getattr(u, "name", None) or f"{type(u).__name__}[{getattr(u, 'seed', k)}]"
        x0 = torch.randn(n_samples, u.dim, generator=g, dtype=torch.float64)

        def add(check, fn):
            try:
                dev = fn()
            except (BNSError, ValueError, ArithmeticError, RuntimeError):
                dev = math.inf
            report.rows.append(TaxonomyRow(check, label, dev, tol))

        def canon():
            worst = 0.0
            for _ in range(n_rules):
                rule = GeneralUpdateRule.random(rule_steps, generator=g)
                theta = _corrupt(canonicalize(rule), corrupt)
                ref = torch.stack(solve_general(rule, u, x0))
                worst = max(worst, deviation(solve_ns(theta, u, x0, check=False).stacked(), ref))
            return worst

        add("canonicalize", canon)
        for m, theta in embeds.items():
            add(f"embed_{m}", lambda m=m, theta=theta: deviation(
                solve_ns(theta, u, x0, check=False).stacked(), solve_generic(u, x0, m, nfe, check=False).stacked()))

        add("ei_ddim", lambda: deviation(
            solve_ns(ns_ddim, u, x0, check=False).stacked(), solve_ddim(u, x0, sched, grid, check=False).stacked()))

        def pre():
            nonlocal pre_points
            _, tr = solve_transformed(u, T_pre, x0, lambda ub, xb: solve_rk(ub, xb, uniform_grid(nfe // 2), MIDPOINT, check=False))
            if pre_points is None:
                pre_points = torch.stack([T_pre.scale(r).detach() for r in tr.times])
            native = tr.stacked() / pre_points.reshape(-1, *([1] * (tr.stacked().ndim - 1)))
            return deviation(solve_ns(ns_pre, u, x0, check=False).stacked(), native)

        add("st_precondition", pre)
    return report
