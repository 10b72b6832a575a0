"""Gaussian-path schedulers ``(alpha_t, sigma_t)``.

A scheduler defines the conditional path ``p_t(x | x1) = N(alpha_t x1, sigma_t^2 I)``
with ``t = 0`` at noise and ``t = 1`` at data. All evaluation goes through
torch so that times may carry gradients (the trained time grid of a solver
flows through here).
"""

import math

import torch

from ._util import EPS_T, scalar, tensor, check_time
from .errors import ConfigError, DomainError, SNRRangeError

VP_B = 20.0
VP_b = 0.1
EDM_SIGMA_MAX = 80.0


class Scheduler:
    """Base scheduler; subclasses implement :meth:`coefficients`.

    Instances are immutable after construction and safe to share between
    threads.
    """

    kind = "custom"
    #: subject to alpha_0 = 0 = sigma_1, alpha_1 = 1 in strict validation
    training_scheduler = False
    #: tolerance on alpha_0 under strict validation
    alpha0_tol = 0.0

    def coefficients(self, t):
        """Return ``(alpha, sigma, dalpha, dsigma)`` as tensors; no validation."""
        raise NotImplementedError

    def __call__(self, t):
        check_time(t)
        return self.coefficients(tensor(t))

    def snr(self, t):
        a, s, _, _ = self.coefficients(tensor(t))
        return a / s

    def dsnr(self, t):
        a, s, da, ds = self.coefficients(tensor(t))
        return (da * s - a * ds) / (s * s)

    def dsigma2(self, t):
        """Time derivative of sigma_t^2."""
        _, s, _, ds = self.coefficients(tensor(t))
        return 2.0 * s * ds

    def snr_range(self):
        return scalar(self.snr(0.0)), scalar(self.snr(1.0))

    # -- inversion -----------------------------------------------------------

    def snr_inverse(self, v):
        """Time ``t`` with ``snr(t) = v``.

        Differentiable in ``v``. Uses a closed form when the subclass has one,
        else monotone bisection with an implicit-function gradient.
        """
        vf = scalar(v)
        lo, hi = self.snr_range()
        if not (vf >= lo * (1 - 1e-12) - 1e-300 and vf <= hi * (1 + 1e-12)):
            raise SNRRangeError(
                f"snr value {vf!r} outside attainable range [{lo!r}, {hi!r}] of {self.kind}",
                interval=(lo, hi),
            )
        if vf <= lo:
            return torch.zeros((), dtype=tensor(0.0).dtype)
        if vf >= hi:
            return torch.ones((), dtype=tensor(0.0).dtype)
        closed = self._snr_inverse_closed(tensor(v))
        if closed is not None:
            return closed
        return _SNRInverse.apply(tensor(v), self)

    def _snr_inverse_closed(self, v):
        return None

    def snr_inverse_bisect(self, v):
        """Plain float bisection; independent of any closed form."""
        v = float(v)
        lo, hi = 0.0, 1.0
        flo, fhi = self.snr_range()
        if not flo <= v <= fhi:
            raise SNRRangeError(f"snr value {v!r} outside [{flo!r}, {fhi!r}]", interval=(flo, fhi))
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if scalar(self.snr(mid)) < v:
                lo = mid
            else:
                hi = mid
        # pick the closer bracket end
        if abs(scalar(self.snr(lo)) - v) <= abs(scalar(self.snr(hi)) - v):
            return lo
        return hi

    # -- validation ----------------------------------------------------------

    def validate(self, strict=None, n_grid=200):
        """Check endpoint conditions and SNR monotonicity; raise DomainError."""
        if strict is None:
            strict = self.training_scheduler
        a0, s0, _, _ = (scalar(z) for z in self.coefficients(tensor(0.0)))
        a1, s1, _, _ = (scalar(z) for z in self.coefficients(tensor(1.0)))
        if not s0 > 0:
            raise DomainError(f"{self.kind}: sigma_0 must be positive, got {s0}")
        if abs(a1 - 1.0) > 1e-15 or abs(s1) > 1e-15:
            raise DomainError(f"{self.kind}: need alpha_1=1, sigma_1=0, got ({a1}, {s1})")
        if strict:
            if not self.training_scheduler:
                raise DomainError(f"{self.kind} is not a training scheduler; use strict=False")
            if abs(a0) > self.alpha0_tol:
                raise DomainError(f"{self.kind}: alpha_0={a0} exceeds {self.alpha0_tol}")
        grid = torch.linspace(EPS_T, 1 - EPS_T, n_grid, dtype=torch.float64)
        vals = torch.stack([self.snr(g) for g in grid])
        if not bool(torch.all(vals[1:] > vals[:-1])):
            raise DomainError(f"{self.kind}: snr is not strictly increasing")
        return True

    def to_config(self):
        raise ConfigError(f"scheduler {self.kind} has no config representation")

    def __repr__(self):
        return f"{type(self).__name__}()"


class _SNRInverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, v, sched):
        t = torch.tensor(sched.snr_inverse_bisect(float(v)), dtype=v.dtype)
        ctx.save_for_backward(t)
        ctx.sched = sched
        return t

    @staticmethod
    def backward(ctx, grad):
        (t,) = ctx.saved_tensors
        return grad / ctx.sched.dsnr(t), None


class OTScheduler(Scheduler):
    kind = "ot"
    training_scheduler = True

    def coefficients(self, t):
        one = torch.ones_like(t)
        return t, 1.0 - t, one, -one

    def dsigma2(self, t):
        return -2.0 * (1.0 - tensor(t))

    def _snr_inverse_closed(self, v):
        return 1.0 / (1.0 + 1.0 / v)

    def to_config(self):
        return {"kind": "ot"}


class CosineScheduler(Scheduler):
    kind = "cosine"
    training_scheduler = True

    def coefficients(self, t):
        h = 0.5 * math.pi
        c, s = torch.cos(h * t), torch.sin(h * t)
        # cos(pi/2) is not exactly 0 in floating point
        c = torch.where(t == 1.0, torch.zeros_like(c), c)
        return s, c, h * c, -h * s

    def _snr_inverse_closed(self, v):
        return torch.atan(v) * (2.0 / math.pi)

    def to_config(self):
        return {"kind": "cosine"}


class VPScheduler(Scheduler):
    """Variance preserving: ``alpha_t = xi(1-t)``, ``sigma_t = sqrt(1 - xi(1-t)^2)``."""

    kind = "vp"
    training_scheduler = True
    alpha0_tol = 1e-2

    def __init__(self, B=VP_B, b=VP_b):
        self.B = float(B)
        self.b = float(b)

    def _log_xi(self, s):
        return -0.25 * s * s * (self.B - self.b) - 0.5 * s * self.b

    def coefficients(self, t):
        s = 1.0 - t
        log_xi = self._log_xi(s)
        xi = torch.exp(log_xi)
        # d xi / ds = xi * dlog_xi/ds ; ds/dt = -1
        dalpha = xi * (0.5 * s * (self.B - self.b) + 0.5 * self.b)
        sigma2 = -torch.expm1(2.0 * log_xi)
        sigma = torch.sqrt(sigma2)
        dsigma = -xi * dalpha / sigma
        return xi, sigma, dalpha, dsigma

    def dsigma2(self, t):
        a, _, da, _ = self.coefficients(tensor(t))
        return -2.0 * a * da

    def _snr_inverse_closed(self, v):
        # -log xi = 0.5 log(1 + 1/v^2); solve A s^2 + C s - L = 0 for s = 1 - t
        L = 0.5 * torch.log1p(1.0 / (v * v))
        A = 0.25 * (self.B - self.b)
        C = 0.5 * self.b
        s = 2.0 * L / (C + torch.sqrt(C * C + 4.0 * A * L))
        return 1.0 - s

    def to_config(self):
        cfg = {"kind": "vp"}
        if self.B != VP_B or self.b != VP_b:
            cfg.update(B=self.B, b=self.b)
        return cfg

    def __repr__(self):
        return f"VPScheduler(B={self.B}, b={self.b})"


class EdmVEScheduler(Scheduler):
    """Variance exploding target scheduler ``(1, sigma_max (1 - t))``."""

    kind = "edm_ve"

    def __init__(self, sigma_max=EDM_SIGMA_MAX):
        if not sigma_max > 0:
            raise ConfigError("sigma_max must be positive")
        self.sigma_max = float(sigma_max)

    def coefficients(self, t):
        one = torch.ones_like(t)
        return one, self.sigma_max * (1.0 - t), torch.zeros_like(t), -self.sigma_max * one

    def _snr_inverse_closed(self, v):
        return 1.0 - 1.0 / (self.sigma_max * v)

    def to_config(self):
        return {"kind": "edm_ve", "sigma_max": self.sigma_max}

    def __repr__(self):
        return f"EdmVEScheduler(sigma_max={self.sigma_max})"


class ScaledSigmaScheduler(Scheduler):
    """Preconditioned scheduler: ``sigma' = sigma0 * sigma`` and ``alpha' = alpha + k sigma^2``.

    ``k = (sigma0 - 1) alpha_0 / sigma_0^2`` is zero whenever the base has
    ``alpha_0 = 0`` (OT, cosine), giving exactly ``alpha' = alpha``. For VP the
    small offset keeps ``snr'(0) = snr(0)`` so the scheduler change starts at
    ``t = 0``; ``sigma^2`` (unlike ``sigma``) is smooth at ``t = 1``, so the
    induced transform stays smooth there too.
    """

    kind = "scaled_sigma"

    def __init__(self, base, sigma0):
        if not sigma0 > 0:
            raise ConfigError("sigma0 must be positive")
        self.base = base
        self.sigma0 = float(sigma0)
        a0, s0, _, _ = (scalar(z) for z in base.coefficients(tensor(0.0)))
        self.offset = (self.sigma0 - 1.0) * a0 / (s0 * s0)

    def coefficients(self, t):
        a, s, da, ds = self.base.coefficients(t)
        k = self.offset
        if k == 0.0:
            return a, self.sigma0 * s, da, self.sigma0 * ds
        return a + k * s * s, self.sigma0 * s, da + k * self.base.dsigma2(t), self.sigma0 * ds

    def dsigma2(self, t):
        return self.sigma0 ** 2 * self.base.dsigma2(t)

    def snr(self, t):
        if self.offset == 0.0:
            return self.base.snr(t) / self.sigma0
        _, s, _, _ = self.base.coefficients(tensor(t))
        return (self.base.snr(t) + self.offset * s) / self.sigma0

    def dsnr(self, t):
        if self.offset == 0.0:
            return self.base.dsnr(t) / self.sigma0
        _, _, _, ds = self.base.coefficients(tensor(t))
        return (self.base.dsnr(t) + self.offset * ds) / self.sigma0

    def _snr_inverse_closed(self, v):
        if self.offset != 0.0:
            return None
        closed = self.base._snr_inverse_closed(v * self.sigma0)
        return closed

    def to_config(self):
        return {"kind": "scaled_sigma", "base": self.base.to_config(), "sigma0": self.sigma0}

    def __repr__(self):
        return f"ScaledSigmaScheduler({self.base!r}, sigma0={self.sigma0})"


class CustomScheduler(Scheduler):
    """Scheduler from torch-compatible callables.

    Missing derivative callables fall back to central differences (step 1e-6).
    """

    kind = "custom"

    def __init__(self, alpha, sigma, dalpha=None, dsigma=None, training=False):
        self._alpha, self._sigma = alpha, sigma
        self._dalpha, self._dsigma = dalpha, dsigma
        self.training_scheduler = training

    @staticmethod
    def _fd(f, t, h=1e-6):
        lo = torch.clamp(t - h, min=0.0)
        hi = torch.clamp(t + h, max=1.0)
        return (f(hi) - f(lo)) / (hi - lo)

    def coefficients(self, t):
        a, s = self._alpha(t), self._sigma(t)
        da = self._dalpha(t) if self._dalpha else self._fd(self._alpha, t)
        ds = self._dsigma(t) if self._dsigma else self._fd(self._sigma, t)
        return tensor(a), tensor(s), tensor(da), tensor(ds)


_KINDS = {
    "ot": OTScheduler,
    "cosine": CosineScheduler,
    "cosine_cs": CosineScheduler,
    "vp": VPScheduler,
    "edm_ve": EdmVEScheduler,
}


def scheduler_from_config(cfg):
    """Build a scheduler from ``"vp"`` or ``{"kind": "scaled_sigma", "base": "ot", "sigma0": 5}``."""
    if isinstance(cfg, Scheduler):
        return cfg
    if isinstance(cfg, str):
        cfg = {"kind": cfg}
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ConfigError(f"scheduler config needs a 'kind': {cfg!r}")
    cfg = dict(cfg)
    kind = str(cfg.pop("kind")).lower()
    try:
        if kind == "scaled_sigma":
            base = scheduler_from_config(cfg.pop("base"))
            sigma0 = cfg.pop("sigma0")
            sched = ScaledSigmaScheduler(base, sigma0)
        elif kind in _KINDS:
            sched = _KINDS[kind](**cfg)
            cfg = {}
        else:
            raise ConfigError(f"unknown scheduler kind {kind!r}")
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad scheduler config: {exc}") from None
    if cfg:
        raise ConfigError(f"unknown scheduler keys: {sorted(cfg)}")
    return sched


def eval_scheduler(sched, t):
    """``(alpha, sigma, dalpha, dsigma)`` at ``t`` as floats, with range checks."""
    return tuple(scalar(z) for z in sched(t))


def snr_inverse(sched, v):
    return scalar(sched.snr_inverse(v))
