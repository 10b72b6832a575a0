"""Velocity fields: the evaluation contract, parameterization wrappers and
closed-form Gaussian-mixture oracles."""

import math
import threading
from dataclasses import dataclass

import torch

from ._util import EPS_T, scalar, tensor
from .errors import ConfigError, DomainError

PARAMS = ("velocity", "eps_pred", "x_pred")


class VelocityField:
    """``u(t, x) -> dx/dt`` on states of fixed dimension ``dim``.

    ``x`` may carry leading batch dimensions; one call counts as one function
    evaluation regardless of batch size. The counter is guarded by a lock.
    """

    #: largest time at which the field is defined
    t_max = 1.0
    #: evaluations charged per call
    nfe_per_call = 1

    def __init__(self, dim):
        self.dim = int(dim)
        self._nfe = 0
        self._lock = threading.Lock()

    @property
    def nfe(self):
        return self._nfe

    def reset_nfe(self):
        with self._lock:
            self._nfe = 0

    def __call__(self, t, x):
        x = tensor(x)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state has dimension {x.shape[-1]}, field expects {self.dim}")
        with self._lock:
            self._nfe += self.nfe_per_call
        return self.velocity(tensor(t), x)

    def velocity(self, t, x):
        raise NotImplementedError


class FunctionField(VelocityField):
    """Wrap a plain callable ``fn(t, x)``."""

    def __init__(self, fn, dim, name="function"):
        super().__init__(dim)
        self.fn = fn
        self.name = name

    def velocity(self, t, x):
        return self.fn(t, x)


class LinearField(VelocityField):
    """``u(t, x) = rate * x``; exact flow is ``x0 * exp(rate * t)``."""

    def __init__(self, dim=1, rate=1.0):
        super().__init__(dim)
        self.rate = float(rate)

    def velocity(self, t, x):
        return self.rate * x


class ConstantField(VelocityField):
    def __init__(self, value):
        value = tensor(value).reshape(-1)
        super().__init__(value.numel())
        self.value = value

    def velocity(self, t, x):
        return self.value.expand_as(x).clone()


class PolynomialField(VelocityField):
    """Random smooth field, quadratic in ``x`` and linear in ``t``.

    Coefficients are drawn once from ``seed``; kept small so trajectories on
    ``[0, 1]`` stay bounded for unit-scale initial states.
    """

    def __init__(self, dim, seed=0, scale=0.4, quad=0.05):
        super().__init__(dim)
        g = torch.Generator().manual_seed(int(seed))
        r = lambda *shape: torch.randn(*shape, generator=g, dtype=torch.float64)
        self.c0, self.c1 = scale * r(dim), scale * r(dim)
        self.A0, self.A1 = scale * r(dim, dim), scale * r(dim, dim)
        self.Q = quad * r(dim, dim, dim)
        self.seed = int(seed)

    def velocity(self, t, x):
        lin = x @ (self.A0 + t * self.A1).T
        quad = torch.einsum("ijk,...j,...k->...i", self.Q, x, x)
        return self.c0 + t * self.c1 + lin + quad


# -- parameterization (velocity / eps / x prediction) -------------------------


def param_coefficients(param, sched, t):
    """``(beta_t, gamma_t)`` with ``u = beta x + gamma f`` for model output ``f``."""
    a, s, da, ds = sched.coefficients(tensor(t))
    if param == "velocity":
        return torch.zeros_like(a), torch.ones_like(a)
    if param == "eps_pred":
        if scalar(a) == 0.0:
            raise DomainError(f"eps_pred: beta = dalpha/alpha undefined, alpha_t = 0 at t={scalar(t)}")
        return da / a, (ds * a - s * da) / a
    if param == "x_pred":
        if scalar(s) == 0.0:
            raise DomainError(f"x_pred: beta = dsigma/sigma undefined, sigma_t = 0 at t={scalar(t)}")
        return ds / s, (s * da - ds * a) / s
    raise ValueError(f"unknown parameterization {param!r}; expected one of {PARAMS}")


class ParamVelocityField(VelocityField):
    """Velocity field ``beta_t x + gamma_t f_t(x)`` from a model output field."""

    def __init__(self, model, param, sched):
        super().__init__(model.dim)
        if param not in PARAMS:
            raise ValueError(f"unknown parameterization {param!r}")
        self.model, self.param, self.sched = model, param, sched
        self.t_max = getattr(model, "t_max", 1.0)

    def velocity(self, t, x):
        beta, gamma = param_coefficients(self.param, self.sched, t)
        return beta * x + gamma * self.model(t, x)


class ModelOutputField(VelocityField):
    """Inverse of :class:`ParamVelocityField`: ``f = (u - beta x) / gamma``."""

    def __init__(self, u, param, sched):
        super().__init__(u.dim)
        if param not in PARAMS:
            raise ValueError(f"unknown parameterization {param!r}")
        self.u, self.param, self.sched = u, param, sched
        self.t_max = getattr(u, "t_max", 1.0)

    def velocity(self, t, x):
        beta, gamma = param_coefficients(self.param, self.sched, t)
        if scalar(gamma) == 0.0:
            raise DomainError(f"{self.param}: gamma_t = 0 at t={scalar(t)}")
        return (self.u(t, x) - beta * x) / gamma


def to_velocity(model, param, sched):
    return model if param == "velocity" else ParamVelocityField(model, param, sched)


def from_velocity(u, param, sched):
    return u if param == "velocity" else ModelOutputField(u, param, sched)


class CFGField(VelocityField):
    """``(1 + w) u_cond - w u_uncond``; each call costs two evaluations."""

    nfe_per_call = 2

    def __init__(self, u_cond, u_uncond, w):
        if u_cond.dim != u_uncond.dim:
            raise ValueError(f"dimension mismatch: {u_cond.dim} vs {u_uncond.dim}")
        super().__init__(u_cond.dim)
        self.u_cond, self.u_uncond, self.w = u_cond, u_uncond, float(w)
        self.t_max = min(u_cond.t_max, u_uncond.t_max)

    def velocity(self, t, x):
        if self.w == 0.0:
            return self.u_cond(t, x)
        return (1.0 + self.w) * self.u_cond(t, x) - self.w * self.u_uncond(t, x)


def cfg_combine(u_cond, u_uncond, w):
    return CFGField(u_cond, u_uncond, w)


# -- Gaussian mixture oracle -------------------------------------------------


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic mixture ``sum_k w_k N(mu_k, s_k^2 I)``; ``s_k = 0`` is a point mass."""

    weights: torch.Tensor
    means: torch.Tensor
    stds: torch.Tensor

    def __post_init__(self):
        w, m, s = tensor(self.weights).reshape(-1), tensor(self.means), tensor(self.stds).reshape(-1)
        if m.ndim == 1:
            m = m.reshape(1, -1)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)
        k = w.numel()
        if m.shape[0] != k or s.numel() != k:
            raise ConfigError(f"mixture shapes disagree: {k} weights, {m.shape[0]} means, {s.numel()} stds")
        if not bool(torch.all(w > 0)):
            raise ConfigError("mixture weights must be positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights sum to {float(w.sum())!r}, not 1")
        if not bool(torch.all(s >= 0)):
            raise ConfigError("mixture stds must be non-negative")

    @property
    def dim(self):
        return self.means.shape[1]

    @classmethod
    def from_config(cls, cfg):
        extra = set(cfg) - {"weights", "means", "stds"}
        if extra:
            raise ConfigError(f"unknown mixture keys: {sorted(extra)}")
        try:
            return cls(cfg["weights"], cfg["means"], cfg["stds"])
        except KeyError as exc:
            raise ConfigError(f"mixture config missing {exc}") from None

    def to_config(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
        }

    def sample(self, n, generator=None):
        idx = torch.multinomial(self.weights, n, replacement=True, generator=generator)
        z = torch.randn(n, self.dim, generator=generator, dtype=torch.float64)
        return self.means[idx] + self.stds[idx, None] * z


class GMMField(VelocityField):
    """Exact marginal velocity of the Gaussian path started from a mixture.

    Each component evolves as ``N(alpha mu_k, v_k I)`` with
    ``v_k = alpha^2 s_k^2 + sigma^2``; the marginal velocity is the
    responsibility-weighted sum of the component velocities
    ``dalpha mu_k + (dv_k / 2 v_k)(x - alpha mu_k)``. Responsibilities are
    computed in the log domain.
    """

    def __init__(self, gmm, sched, strict=None):
        super().__init__(gmm.dim)
        sched.validate(strict=strict)
        self.gmm, self.sched = gmm, sched
        self._log_w = torch.log(gmm.weights)
        self._s2 = gmm.stds ** 2
        if bool(torch.any(gmm.stds == 0)):
            self.t_max = 1.0 - EPS_T

    def _check(self, t):
        v = scalar(t)
        if not (0.0 <= v <= self.t_max) or math.isnan(v):
            raise DomainError(f"GMM field evaluated at t={v}, outside [0, {self.t_max}]")

    def _components(self, t, x):
        a, s, da, _ = self.sched.coefficients(t)
        var = a * a * self._s2 + s * s
        diff = x.unsqueeze(-2) - a * self.gmm.means
        logp = self._log_w - 0.5 * self.dim * torch.log(var) - 0.5 * (diff * diff).sum(-1) / var
        resp = torch.softmax(logp, dim=-1)
        return a, s, da, var, diff, resp

    def velocity(self, t, x):
        self._check(t)
        a, s, da, var, diff, resp = self._components(t, x)
        dvar = 2.0 * a * da * self._s2 + self.sched.dsigma2(t)
        comp = da * self.gmm.means + (0.5 * dvar / var).unsqueeze(-1) * diff
        return (resp.unsqueeze(-1) * comp).sum(-2)

    def posterior_mean(self, t, x):
        """``E[x1 | x_t = x]``."""
        t, x = tensor(t), tensor(x)
        self._check(t)
        a, s, da, var, diff, resp = self._components(t, x)
        shrink = (a * self._s2 / var).unsqueeze(-1)
        return (resp.unsqueeze(-1) * (self.gmm.means + shrink * diff)).sum(-2)


def gmm_marginal_velocity(gmm, sched, strict=None):
    return GMMField(gmm, sched, strict=strict)
