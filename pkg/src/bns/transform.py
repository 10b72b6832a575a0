"""Scale-time transforms ``xbar(r) = s_r x(t_r)`` and the fields they induce.

A transform is a pair of functions ``r -> (s_r, t_r)`` with ``t_0 = 0``,
``t_1 = 1`` and ``s_r > 0``. Scheduler changes, preconditioning and
exponential integrators are all instances.
"""

import threading

import torch

from ._util import EPS_T, check_time, scalar, tensor
from .errors import DomainError, SNRRangeError
from .field import VelocityField
from .scheduler import EdmVEScheduler, Scheduler, ScaledSigmaScheduler


class STTransform:
    """Base class; subclasses implement :meth:`evaluate`."""

    def evaluate(self, r):
        """``(s, t, ds, dt)`` at ``r`` as differentiable tensors."""
        raise NotImplementedError

    def __call__(self, r):
        check_time(r, what="r")
        return self.evaluate(tensor(r))

    def scale(self, r):
        return self.evaluate(tensor(r))[0]

    def time(self, r):
        return self.evaluate(tensor(r))[1]

    def validate(self, n_grid=100, fd_step=1e-6, rtol=1e-4):
        """Endpoint, positivity, monotonicity and derivative checks."""
        s0, t0 = scalar(self.scale(0.0)), scalar(self.time(0.0))
        s1, t1 = scalar(self.scale(1.0)), scalar(self.time(1.0))
        if t0 != 0.0 or t1 != 1.0:
            raise DomainError(f"transform must have t_0=0, t_1=1; got {t0}, {t1}")
        if not (s0 > 0 and s1 > 0):
            raise DomainError(f"transform scale must be positive at endpoints; got {s0}, {s1}")
        rs = torch.linspace(0.01, 0.99, n_grid, dtype=torch.float64)
        ts = torch.stack([self.time(r) for r in rs])
        if not bool(torch.all(ts[1:] > ts[:-1])):
            raise DomainError("transform time is not strictly increasing")
        for r in rs[::10]:
            s, t, ds, dt = self.evaluate(r)
            sp, tp, _, _ = self.evaluate(r + fd_step)
            sm, tm, _, _ = self.evaluate(r - fd_step)
            for name, exact, fd in (("ds", ds, (sp - sm) / (2 * fd_step)), ("dt", dt, (tp - tm) / (2 * fd_step))):
                e, f = scalar(exact), scalar(fd)
                if abs(e - f) > rtol * max(abs(e), abs(f), 1e-8):
                    raise DomainError(f"{name} mismatch at r={float(r)}: {e} vs finite difference {f}")
        return True


class IdentityTransform(STTransform):
    def evaluate(self, r):
        one = torch.ones_like(r)
        return one, r, torch.zeros_like(r), one


class FunctionTransform(STTransform):
    """Transform from callables ``s(r)``, ``t(r)`` and their derivatives."""

    def __init__(self, s, t, ds, dt):
        self._s, self._t, self._ds, self._dt = s, t, ds, dt

    def evaluate(self, r):
        return tensor(self._s(r)), tensor(self._t(r)), tensor(self._ds(r)), tensor(self._dt(r))


class SchedulerChangeTransform(STTransform):
    """Transform that re-expresses a ``source`` scheduler path under ``target``.

    ``t_r = snr_source^-1(snr_target(r))`` and ``s_r = alpha'_r / alpha_{t_r}``
    (or the sigma ratio, whichever denominator is larger). ``dt/dr`` uses the
    inverse-function rule, never finite differences. Derivatives are taken at
    ``min(r, 1 - EPS_T)`` because the source SNR slope is unbounded at ``t = 1``.
    """

    def __init__(self, source, target):
        self.source, self.target = source, target
        lo_s, hi_s = source.snr_range()
        lo_t = scalar(target.snr(0.0))
        hi_t = scalar(target.snr(1.0 - EPS_T))
        if lo_t < lo_s * (1 - 1e-12) - 1e-300 or hi_t > hi_s:
            raise SNRRangeError(
                f"target snr range [{lo_t!r}, {hi_t!r}] (clamped) not inside source range [{lo_s!r}, {hi_s!r}]",
                interval=((lo_t, hi_t), (lo_s, hi_s)),
            )
        self._closed = source._snr_inverse_closed(tensor(0.5)) is not None
        self._memo = {}
        self._memo_lock = threading.Lock()

    def _time(self, r):
        rf = scalar(r)
        if rf == 0.0:
            return torch.zeros((), dtype=torch.float64)
        if rf == 1.0:
            return torch.ones((), dtype=torch.float64)
        if self._closed or r.requires_grad:
            return self.source.snr_inverse(self.target.snr(r))
        # bisection results are memoized on the (fixed) evaluation grid
        with self._memo_lock:
            t = self._memo.get(rf)
        if t is None:
            t = self.source.snr_inverse(self.target.snr(r)).detach()
            with self._memo_lock:
                self._memo[rf] = t
        return t

    def evaluate(self, r):
        r = tensor(r)
        t = self._time(r)
        a, sg, da, dsg = self.source.coefficients(t)
        ab, sb, dab, dsb = self.target.coefficients(r)
        use_alpha = bool(abs(scalar(a)) >= abs(scalar(sg)))
        s = ab / a if use_alpha else sb / sg
        if scalar(r) > 1.0 - EPS_T:
            rc = torch.clamp(r, max=1.0 - EPS_T)
            tc = self._time(rc)
            a, sg, da, dsg = self.source.coefficients(tc)
            ab, sb, dab, dsb = self.target.coefficients(rc)
        else:
            rc, tc = r, t
        dt = self.target.dsnr(rc) / self.source.dsnr(tc)
        if use_alpha:
            ds = (dab - (ab / a) * da * dt) / a
        else:
            ds = (dsb - (sb / sg) * dsg * dt) / sg
        return s, t, ds, dt


def st_from_scheduler_change(source, target):
    return SchedulerChangeTransform(source, target)


class EITransform(STTransform):
    """``s_r = 1 / psi_r``, ``t_r = r`` with ``psi = alpha`` (eps) or ``sigma`` (x).

    Euler on the resulting field is a first-order exponential integrator in
    ``r``; see :func:`ddim_transform` for the variant that reproduces DDIM
    steps exactly.
    """

    def __init__(self, param, sched):
        if param not in ("eps_pred", "x_pred"):
            raise ValueError(f"exponential transform needs eps_pred or x_pred, got {param!r}")
        self.param, self.sched = param, sched
        for r in (EPS_T, 1.0 - EPS_T):
            if scalar(self._psi(tensor(r))[0]) == 0.0:
                raise DomainError(f"psi vanishes at r={r} inside the clamped interval")

    def _psi(self, r):
        a, s, da, ds = self.sched.coefficients(r)
        return (a, da) if self.param == "eps_pred" else (s, ds)

    def evaluate(self, r):
        r = tensor(r)
        psi, dpsi = self._psi(r)
        if scalar(psi) == 0.0:
            raise DomainError(f"psi = 0 at r={scalar(r)}; exponential transform undefined")
        return 1.0 / psi, r, -dpsi / (psi * psi), torch.ones_like(r)


def ei_transform(param, sched):
    return EITransform(param, sched)


def ddim_transform(sched):
    """Scheduler change to ``(1, sigma_0/alpha_0 (1 - r))``.

    The scaled state is ``x / alpha`` and its velocity is constant along a
    frozen eps prediction, so an Euler step equals one DDIM step for any grid.
    Needs ``alpha_0 > 0`` (VP); for schedulers with ``alpha_0 = 0`` the
    noise-to-signal ratio is unbounded at ``t = 0``.
    """
    a0, s0 = (scalar(z) for z in sched.coefficients(tensor(0.0))[:2])
    if a0 <= 0.0:
        raise DomainError(f"{sched.kind}: alpha_0 = {a0}; DDIM transform needs alpha_0 > 0")
    return SchedulerChangeTransform(sched, EdmVEScheduler(sigma_max=s0 / a0))


def ddim_r_grid(sched, t_grid):
    """``r`` values at which the DDIM transform visits the given ``t`` times."""
    T = ddim_transform(sched)
    smax = T.target.sigma_max
    out = []
    for t in t_grid:
        tf = scalar(t)
        if tf == 0.0:
            out.append(0.0)
        elif tf == 1.0:
            out.append(1.0)
        else:
            out.append(1.0 - 1.0 / (smax * scalar(sched.snr(tf))))
    return torch.tensor(out, dtype=torch.float64)


class TransformedScheduler(Scheduler):
    """Scheduler ``(s_r alpha_{t_r}, s_r sigma_{t_r})`` induced by a transform."""

    kind = "transformed"

    def __init__(self, transform, source):
        self.transform, self.source = transform, source

    def coefficients(self, r):
        s, t, ds, dt = self.transform.evaluate(r)
        a, sg, da, dsg = self.source.coefficients(t)
        return s * a, s * sg, ds * a + s * da * dt, ds * sg + s * dsg * dt


def scheduler_from_st(transform, source):
    return TransformedScheduler(transform, source)


class STField(VelocityField):
    """``ubar_r(x) = (ds/s) x + dt s u_{t_r}(x / s)``.

    ``s_start`` and ``s_end`` map states in and out of the transformed frame:
    ``xbar(0) = s_start x(0)`` and ``x(1) = xbar(1) / s_end``.
    """

    def __init__(self, u, transform):
        super().__init__(u.dim)
        self.u, self.transform = u, transform
        self.s_start = transform.scale(0.0).detach()
        self.s_end = transform.scale(1.0).detach()

    def velocity(self, r, x):
        s, t, ds, dt = self.transform.evaluate(r)
        return (ds / s) * x + (dt * s) * self.u(t, x / s)

    def to_frame(self, x0):
        return self.s_start * tensor(x0)

    def from_frame(self, xbar):
        return tensor(xbar) / self.s_end


def apply_st_to_field(u, transform):
    return STField(u, transform)


def precondition(u, sched, sigma0):
    """Field under the scheduler change ``sigma -> sigma0 sigma``."""
    return STField(u, SchedulerChangeTransform(sched, ScaledSigmaScheduler(sched, sigma0)))
