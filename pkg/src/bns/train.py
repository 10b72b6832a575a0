"""Bespoke solver optimization: oracle datasets, the PSNR loss, exact
gradients through the non-stationary recursion, and the training loop."""

import json
import math
from dataclasses import dataclass, field

import torch

from ._util import fmt17, scalar, tensor
from .errors import ConfigError, DivergenceError, DomainError
from .nsparams import (
    NSSolverParams,
    RawNSParams,
    constrained_to_raw,
    embed_generic,
    embed_st_solver,
    fold_transform,
    raw_to_constrained,
)
from .scheduler import ScaledSigmaScheduler
from .solver import DIVERGENCE_LIMIT, solve_adaptive_rk45, solve_ns, uniform_grid
from .transform import IdentityTransform, STField, SchedulerChangeTransform, ddim_r_grid, ddim_transform

MSE_FLOOR = 1e-20
MSE_CAP = 1e12
INITS = ("euler", "midpoint", "rk4", "ab2", "ddim")


# -- datasets ------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryPair:
    x0: torch.Tensor
    x1: torch.Tensor


class TrajectoryDataset:
    """Pairs ``(x0, x(1))`` stored as two ``(N, d)`` tensors."""

    def __init__(self, x0, x1):
        x0, x1 = tensor(x0), tensor(x1)
        if x0.ndim != 2 or x0.shape != x1.shape:
            raise ValueError(f"x0 {tuple(x0.shape)} and x1 {tuple(x1.shape)} must be matching (N, d) arrays")
        if not (bool(torch.all(torch.isfinite(x0))) and bool(torch.all(torch.isfinite(x1)))):
            raise ValueError("dataset contains non-finite values")
        self.x0, self.x1 = x0, x1
        self.nfe = []

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        if not pairs:
            raise ValueError("empty pair list")
        return cls(torch.stack([tensor(p.x0) for p in pairs]), torch.stack([tensor(p.x1) for p in pairs]))

    def __len__(self):
        return self.x0.shape[0]

    def __getitem__(self, i):
        if isinstance(i, int):
            return TrajectoryPair(self.x0[i], self.x1[i])
        return TrajectoryDataset(self.x0[i], self.x1[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self):
        return self.x0.shape[1]

    def to_json(self):
        rows = []
        for a, b in zip(self.x0.tolist(), self.x1.tolist()):
            rows.append('  {"x0": [%s], "x1": [%s]}' % (", ".join(map(fmt17, a)), ", ".join(map(fmt17, b))))
        return "[\n" + ",\n".join(rows) + "\n]\n"

    @classmethod
    def from_json(cls, text):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"dataset is not valid JSON: {exc}") from None
        if not isinstance(obj, list) or not obj:
            raise ConfigError("dataset must be a nonempty JSON array")
        try:
            x0 = [[float(v) for v in r["x0"]] for r in obj]
            x1 = [[float(v) for v in r["x1"]] for r in obj]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed dataset record: {exc}") from None
        try:
            return cls(torch.tensor(x0, dtype=torch.float64), torch.tensor(x1, dtype=torch.float64))
        except (ValueError, RuntimeError) as exc:
            raise ConfigError(f"malformed dataset: {exc}") from None

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def _as_dataset(batch):
    if isinstance(batch, TrajectoryDataset):
        return batch
    return TrajectoryDataset.from_pairs(batch)


def source_std(sched, sigma0=1.0):
    """Standard deviation of the source: ``sigma0 * sigma_0`` of the scheduler."""
    return float(sigma0) * scalar(sched.coefficients(tensor(0.0))[1])


def generate_dataset(u, count, std=1.0, rtol=1e-5, atol=1e-5, seed=0, chunk=128):
    """Sample ``x0 ~ N(0, std^2 I)`` and integrate each with the adaptive oracle.

    Samples are solved in chunks sharing a step size; ``dataset.nfe`` lists
    the oracle evaluations per chunk.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    g = torch.Generator().manual_seed(int(seed))
    x0 = float(std) * torch.randn(count, u.dim, generator=g, dtype=torch.float64)
    x1, nfes = [], []
    for start in range(0, count, chunk):
        xb, nfe = solve_adaptive_rk45(u, x0[start : start + chunk], rtol=rtol, atol=atol)
        bad = ~torch.isfinite(xb).all(-1)
        if bool(bad.any()):
            idx = start + int(torch.nonzero(bad)[0])
            raise DivergenceError(f"oracle diverged on sample {idx}", sample=idx)
        x1.append(xb)
        nfes.append(nfe)
    ds = TrajectoryDataset(x0, torch.cat(x1))
    ds.nfe = nfes
    return ds


# -- loss ----------------------------------------------------------------------


def run_solver(theta, u, x0, check=True):
    """Final state of the NS solver; for an :class:`STField` the start is
    scaled into the frame and the end mapped back to the original one."""
    if isinstance(u, STField):
        return u.from_frame(solve_ns(theta, u, u.to_frame(x0), check=check).final)
    return solve_ns(theta, u, x0, check=check).final


def per_sample_mse(x, y):
    return ((x - y) ** 2).mean(-1)


def loss(theta, u, batch, divergence="raise"):
    """PSNR loss ``-mean log MSE`` over the batch, MSE floored at ``1e-20``.

    Larger is better: training maximizes this quantity.

    With ``divergence="clip"`` samples whose solution is non-finite or beyond
    the divergence limit contribute ``-log(1e12)`` instead of raising; the
    remaining samples are re-solved without them so gradients stay finite.
    """
    ds = _as_dataset(batch)
    if divergence == "raise":
        xn = run_solver(theta, u, ds.x0)
        mse = per_sample_mse(xn, ds.x1)
        return -torch.log(torch.clamp(mse, min=MSE_FLOOR, max=MSE_CAP)).mean()
    if divergence != "clip":
        raise ValueError(f"divergence must be 'raise' or 'clip', got {divergence!r}")
    xn = run_solver(theta, u, ds.x0, check=False)
    ok = torch.isfinite(xn.detach()).all(-1) & (xn.detach().abs().amax(-1) <= DIVERGENCE_LIMIT)
    n_bad = int((~ok).sum())
    if n_bad == len(ds):
        raise DivergenceError(f"all {n_bad} samples diverged")
    if n_bad:
        xn = run_solver(theta, u, ds.x0[ok], check=False)
        mse = per_sample_mse(xn, ds.x1[ok])
    else:
        mse = per_sample_mse(xn, ds.x1)
    total = torch.log(torch.clamp(mse, min=MSE_FLOOR, max=MSE_CAP)).sum() + n_bad * math.log(MSE_CAP)
    return -total / len(ds)


def grad_loss(theta, u, batch, divergence="raise"):
    """``(loss, gradient)`` with respect to the raw (unconstrained) vector of ``theta``."""
    raw = constrained_to_raw(theta)
    vec = raw.vector.clone().requires_grad_(True)
    L = loss(raw_to_constrained(RawNSParams(raw.n, vec)), u, batch, divergence=divergence)
    (g,) = torch.autograd.grad(L, vec)
    return float(L.detach()), g


def loss_raw(vec, n, u, batch):
    """Loss as a function of the raw vector (used for finite-difference checks)."""
    return loss(raw_to_constrained(RawNSParams(n, tensor(vec))), u, batch)


def fd_gradient(fn, vec, rel_step=1e-5):
    """Central finite differences of scalar ``fn`` with step ``rel_step * (1 + |p|)``."""
    vec = tensor(vec).detach()
    out = torch.empty_like(vec)
    for k in range(vec.numel()):
        h = rel_step * (1.0 + abs(float(vec[k])))
        up, dn = vec.clone(), vec.clone()
        up[k] += h
        dn[k] -= h
        out[k] = (float(fn(up)) - float(fn(dn))) / (2.0 * h)
    return out


# -- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    n_nfe: int = 8
    init: str = "midpoint"
    sigma0: float = 1.0
    lr: float = 5e-4
    batch: int = 40
    iters: int = 15000
    val_every: int = 100
    seed: int = 0
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.0
    lr_power: float = 1.0
    psnr_range: float = 2.0

    def __post_init__(self):
        if int(self.n_nfe) < 1:
            raise ConfigError(f"n_nfe must be >= 1, got {self.n_nfe}")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}, got {self.init!r}")
        for name in ("sigma0", "lr", "batch", "iters", "val_every", "eps", "psnr_range"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas!r}")


@dataclass
class TrainResult:
    theta: NSSolverParams  # acts on the original field
    theta_frame: NSSolverParams  # acts on the preconditioned field
    history: list = field(default_factory=list)
    best_val_psnr: float = -math.inf
    transform: object = None

    def history_csv(self):
        lines = ["iter,train_loss,val_psnr,best_val_psnr"]
        for h in self.history:
            lines.append(
                f"{h['iter']},{fmt17(h['train_loss'])},{fmt17(h['val_psnr'])},{fmt17(h['best_val_psnr'])}"
            )
        return "\r\n".join(lines) + "\r\n"


def precondition_transform(sched, sigma0):
    if float(sigma0) == 1.0:
        return IdentityTransform()
    return SchedulerChangeTransform(sched, ScaledSigmaScheduler(sched, sigma0))


def initial_params(init, n_nfe, sched, sigma0=1.0):
    """Init solver expressed as NS parameters over the preconditioned field."""
    if init == "ddim":
        frame = sched if float(sigma0) == 1.0 else ScaledSigmaScheduler(sched, sigma0)
        try:
            T = ddim_transform(frame)
        except DomainError as exc:
            raise ConfigError(f"ddim init: {exc}") from None
        # uniform steps in t of the frame scheduler
        return embed_st_solver("euler", T, grid=ddim_r_grid(frame, uniform_grid(n_nfe)))
    try:
        return embed_generic(init, n_nfe)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def psnr_batch(x, y, psnr_range=2.0):
    from .evaluate import psnr_db

    return psnr_db(x, y, psnr_range)


def evaluate_params(theta, u, ds, psnr_range=2.0):
    """Mean PSNR and mean loss of ``theta`` over ``ds`` (divergent samples clipped)."""
    with torch.no_grad():
        xn = run_solver(theta, u, ds.x0, check=False)
        mse = per_sample_mse(xn, ds.x1)
        mse = torch.where(torch.isfinite(mse), mse, torch.full_like(mse, MSE_CAP))
        p = psnr_batch(xn.nan_to_num(nan=1e12, posinf=1e12, neginf=-1e12), ds.x1, psnr_range)
        L = -torch.log(torch.clamp(mse, min=MSE_FLOOR, max=MSE_CAP)).mean()
    return float(p.mean()), float(L)


def train_bns(u, sched, dataset, val_dataset, cfg=None, log=None):
    """Optimize an ``n_nfe``-step NS solver for ``u`` against oracle pairs.

    The parameters are optimized over the ``sigma0``-preconditioned field and
    returned folded back onto ``u``. Validation PSNR is computed every
    ``val_every`` iterations (and at the start and end); the parameters with
    the best validation PSNR are returned.
    """
    cfg = cfg or TrainConfig()
    ds, vs = _as_dataset(dataset), _as_dataset(val_dataset)
    if not len(ds) or not len(vs):
        raise ValueError("datasets must be nonempty")
    T = precondition_transform(sched, cfg.sigma0)
    ubar = u if isinstance(T, IdentityTransform) else STField(u, T)

    theta0 = initial_params(cfg.init, int(cfg.n_nfe), sched, cfg.sigma0)
    raw = constrained_to_raw(theta0)
    vec = torch.nn.Parameter(raw.vector.clone())
    n = raw.n
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam([vec], lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)
    else:
        opt = torch.optim.SGD([vec], lr=cfg.lr, momentum=cfg.momentum)
    sched_lr = torch.optim.lr_scheduler.PolynomialLR(opt, total_iters=int(cfg.iters), power=cfg.lr_power)
    gen = torch.Generator().manual_seed(int(cfg.seed))

    def current():
        with torch.no_grad():
            return raw_to_constrained(RawNSParams(n, vec.detach().clone()))

    history = []
    # the init solver itself is a candidate; keep its exact parameters
    best_theta, best = theta0, -math.inf
    pending = []

    def log_point(it, theta):
        nonlocal best, best_theta
        vp, _ = evaluate_params(theta, ubar, vs, cfg.psnr_range)
        if pending:
            tl = sum(pending) / len(pending)
        else:
            tl = evaluate_params(theta, ubar, ds, cfg.psnr_range)[1]
        pending.clear()
        if vp > best:
            best, best_theta = vp, theta
        history.append({"iter": it, "train_loss": tl, "val_psnr": vp, "best_val_psnr": best})
        if log:
            log(f"iter {it:6d}  train_loss {tl:.6f}  val_psnr {vp:.4f}  best {best:.4f}")

    log_point(0, theta0)
    it = 0
    bs = min(int(cfg.batch), len(ds))
    while it < cfg.iters:
        perm = torch.randperm(len(ds), generator=gen)
        all_bad = True
        for start in range(0, len(ds) - bs + 1, bs):
            if it >= cfg.iters:
                break
            batch = ds[perm[start : start + bs]]
            opt.zero_grad()
            try:
                L = loss(raw_to_constrained(RawNSParams(n, vec)), ubar, batch, divergence="clip")
            except DivergenceError:
                it += 1
                sched_lr.step()
                continue
            all_bad = False
            # the PSNR loss is maximized
            (-L).backward()
            opt.step()
            sched_lr.step()
            it += 1
            pending.append(float(L.detach()))
            if it % cfg.val_every == 0 or it == cfg.iters:
                log_point(it, current())
        if all_bad:
            raise DivergenceError(f"every batch diverged in the epoch ending at iteration {it}")

    return TrainResult(
        theta=fold_transform(best_theta, T) if not isinstance(T, IdentityTransform) else best_theta,
        theta_frame=best_theta,
        history=history,
        best_val_psnr=best,
        transform=T,
    )
