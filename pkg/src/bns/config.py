"""Run configuration: one JSON document describing the field, data, solver,
training, sweep and equivalence-suite settings. Unknown keys are errors."""

import copy
import json
import os
from dataclasses import dataclass

from .errors import ConfigError
from .field import PARAMS, CFGField, GaussianMixture, GMMField, from_velocity, to_velocity
from .scheduler import scheduler_from_config
from .train import INITS, TrainConfig

DEFAULTS = {
    "seed": 0,
    "out_dir": "out",
    "field": {
        "scheduler": "vp",
        "gmm": {"weights": [1.0], "means": [[0.5, -0.5]], "stds": [0.3]},
        "param": "velocity",
        "guidance": None,
        "sigma0": 1.0,
    },
    "data": {
        "train": "train.json",
        "val": "val.json",
        "n_train": 520,
        "n_val": 1024,
        "rtol": 1e-5,
        "atol": 1e-5,
    },
    "solver": {"nfe": 8, "init": "midpoint"},
    "train": {
        "lr": 5e-4,
        "batch": 40,
        "iters": 2000,
        "val_every": 100,
        "optimizer": "adam",
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "momentum": 0.0,
        "lr_power": 1.0,
        "psnr_range": 2.0,
    },
    "sweep": {
        "solvers": ["euler", "midpoint", "ab2", "ddim", "bns"],
        "nfes": [4, 8, 16],
        "bns": {},
        "psnr_range": 2.0,
    },
    "taxonomy": {"n_fields": 20, "dim": 3, "tol": 1e-9, "nfe": 8, "n_rules": 50, "sigma0": 5.0},
}

_NULLABLE = {("field", "guidance")}


def _merge(base, over, path=()):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            where = ".".join(path + (k,))
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and base[k] and k not in ("gmm", "bns"):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(path + (k,))!r} must be an object")
            out[k] = _merge(base[k], v, path + (k,))
        else:
            out[k] = v
    return out


def _positive(value, name, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or (integer and not isinstance(value, int)):
        raise ConfigError(f"{name} must be a {'positive integer' if integer else 'positive number'}, got {value!r}")
    if not value > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return value


@dataclass
class RunConfig:
    raw: dict
    base_dir: str = "."

    @classmethod
    def from_dict(cls, obj, base_dir="."):
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, obj), base_dir)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(obj, os.path.dirname(os.path.abspath(path)))

    # -- accessors -----------------------------------------------------------

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self):
        return self.raw["seed"]

    @property
    def out_dir(self):
        return os.path.join(self.base_dir, self.raw["out_dir"])

    def data_path(self, split):
        return os.path.join(self.out_dir, self.raw["data"][split])

    def validate(self):
        r = self.raw
        if isinstance(r["seed"], bool) or not isinstance(r["seed"], int) or r["seed"] < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {r['seed']!r}")
        f = r["field"]
        self.scheduler()
        self.gmm()
        if f["param"] not in PARAMS:
            raise ConfigError(f"field.param must be one of {PARAMS}, got {f['param']!r}")
        g = f["guidance"]
        if g is not None:
            if not isinstance(g, dict) or set(g) - {"w", "uncond"} or "w" not in g or "uncond" not in g:
                raise ConfigError("field.guidance must be {'w': float, 'uncond': mixture}")
            GaussianMixture.from_config(g["uncond"])
        _positive(f["sigma0"], "field.sigma0")
        d = r["data"]
        for k in ("n_train", "n_val"):
            _positive(d[k], f"data.{k}", integer=True)
        for k in ("rtol", "atol"):
            _positive(d[k], f"data.{k}")
        s = r["solver"]
        _positive(s["nfe"], "solver.nfe", integer=True)
        if s["init"] not in INITS:
            raise ConfigError(f"solver.init must be one of {INITS}, got {s['init']!r}")
        self.train_config()
        sw = r["sweep"]
        if not isinstance(sw["solvers"], list) or not sw["solvers"]:
            raise ConfigError("sweep.solvers must be a nonempty list")
        for n in sw["nfes"]:
            _positive(n, "sweep.nfes entry", integer=True)
        if not isinstance(sw["bns"], dict):
            raise ConfigError("sweep.bns must map NFE to parameter files")
        t = r["taxonomy"]
        for k in ("n_fields", "dim", "nfe", "n_rules"):
            _positive(t[k], f"taxonomy.{k}", integer=True)
        _positive(t["tol"], "taxonomy.tol")
        return self

    def scheduler(self):
        return scheduler_from_config(self.raw["field"]["scheduler"])

    def gmm(self):
        g = self.raw["field"]["gmm"]
        if not isinstance(g, dict):
            raise ConfigError("field.gmm must be an object")
        return GaussianMixture.from_config(g)

    def field(self):
        """Velocity field as configured: mixture oracle, routed through the
        chosen model parameterization, optionally guidance-combined."""
        f = self.raw["field"]
        sched = self.scheduler()

        def build(gmm):
            u = GMMField(gmm, sched)
            return to_velocity(from_velocity(u, f["param"], sched), f["param"], sched)

        u = build(self.gmm())
        if f["guidance"] is not None:
            u = CFGField(u, build(GaussianMixture.from_config(f["guidance"]["uncond"])), f["guidance"]["w"])
        return u

    def train_config(self, **overrides):
        t = dict(self.raw["train"])
        kw = dict(
            n_nfe=self.raw["solver"]["nfe"],
            init=self.raw["solver"]["init"],
            sigma0=self.raw["field"]["sigma0"],
            seed=self.raw["seed"],
            lr=t["lr"],
            batch=t["batch"],
            iters=t["iters"],
            val_every=t["val_every"],
            optimizer=t["optimizer"],
            betas=tuple(t["betas"]),
            eps=t["eps"],
            momentum=t["momentum"],
            lr_power=t["lr_power"],
            psnr_range=t["psnr_range"],
        )
        kw.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return TrainConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad train config: {exc}") from None


def default_config():
    return copy.deepcopy(DEFAULTS)
