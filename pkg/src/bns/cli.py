"""``bns`` command line: dataset generation, training, sampling, sweeps and the
equivalence suite.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 equivalence check failure.
"""

import argparse
import os
import sys

import torch

from .config import RunConfig, default_config
from .errors import BNSError, ConfigError, DivergenceError, StiffnessError
from .evaluate import baseline_sampler, default_field_suite, nfe_sweep, ns_sampler, taxonomy_check
from .nsparams import NSSolverParams, free_param_count, param_count
from .train import TrajectoryDataset, generate_dataset, source_std, train_bns

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return v


def _load_config(path):
    if path is None:
        return RunConfig.from_dict(default_config())
    return RunConfig.load(path)


def _makedirs(path):
    if path:
        os.makedirs(path, exist_ok=True)


def _load_dataset(path, what):
    if not os.path.exists(path):
        raise ConfigError(f"{what} dataset {path} not found (run gen-data first)")
    return TrajectoryDataset.load(path)


def _write(path, text):
    _makedirs(os.path.dirname(path))
    with open(path, "w", newline="") as fh:
        fh.write(text)


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    d = cfg["data"]
    split = args.split
    count = args.count if args.count is not None else d["n_train" if split == "train" else "n_val"]
    seed = args.seed if args.seed is not None else cfg.seed + (0 if split == "train" else 1)
    out = args.out or cfg.data_path(split)
    u = cfg.field()
    std = source_std(cfg.scheduler())
    ds = generate_dataset(u, count, std=std, rtol=d["rtol"], atol=d["atol"], seed=seed)
    ds.save(_prepare(out))
    nfe = ds.nfe
    print(f"wrote {len(ds)} pairs (dim {ds.dim}) to {out}")
    print(f"oracle NFE per chunk: min {min(nfe)}  mean {sum(nfe) / len(nfe):.1f}  max {max(nfe)}  total {sum(nfe)}")
    return EXIT_OK


def _prepare(path):
    _makedirs(os.path.dirname(os.path.abspath(path)))
    return path


def cmd_train(args):
    cfg = _load_config(args.config)
    tc = cfg.train_config(n_nfe=args.nfe, init=args.init, sigma0=args.sigma0, iters=args.iters, seed=args.seed)
    out = args.out or cfg.out_dir
    train = _load_dataset(args.train or cfg.data_path("train"), "training")
    val = _load_dataset(args.val or cfg.data_path("val"), "validation")
    u = cfg.field()
    if train.dim != u.dim:
        raise ConfigError(f"dataset dimension {train.dim} does not match field dimension {u.dim}")
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    res = train_bns(u, cfg.scheduler(), train, val, tc, log=log)
    _makedirs(out)
    n = tc.n_nfe
    res.theta.save(os.path.join(out, f"theta_nfe{n}.json"))
    _write(os.path.join(out, f"history_nfe{n}.csv"), res.history_csv())
    from .plotting import plot_history

    plot_history(res.history, os.path.join(out, f"history_nfe{n}.png"))
    last = res.history[-1]
    print(f"final validation PSNR {last['val_psnr']:.4f} dB; best {res.best_val_psnr:.4f} dB")
    print(f"wrote theta_nfe{n}.json, history_nfe{n}.csv, history_nfe{n}.png to {out}")
    return EXIT_OK


def _solvers(cfg, names, theta_args, sched):
    thetas = {}
    for nfe, path in cfg["sweep"]["bns"].items():
        thetas[int(nfe)] = os.path.join(cfg.out_dir, path)
    for item in theta_args or []:
        nfe, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--theta expects NFE=PATH, got {item!r}")
        try:
            thetas[int(nfe)] = path
        except ValueError:
            raise ConfigError(f"--theta expects NFE=PATH, got {item!r}") from None
    out = {}
    for name in names:
        if name == "bns":
            loaded = {}
            for nfe, path in sorted(thetas.items()):
                if not os.path.exists(path):
                    raise ConfigError(f"parameter file {path} not found")
                loaded[nfe] = NSSolverParams.load(path, strict=False)
            out[name] = ns_sampler(loaded)
        else:
            try:
                out[name] = baseline_sampler(name, sched)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
    return out


def cmd_sweep(args):
    cfg = _load_config(args.config)
    out = args.out or cfg.out_dir
    sw = cfg["sweep"]
    data = _load_dataset(args.data or cfg.data_path("val"), "evaluation")
    u = cfg.field()
    solvers = _solvers(cfg, args.solvers or sw["solvers"], args.theta, cfg.scheduler())
    report = nfe_sweep(u, data, solvers, args.nfes or sw["nfes"], psnr_range=sw["psnr_range"])
    _makedirs(out)
    _write(os.path.join(out, "sweep.csv"), report.to_csv())
    from .plotting import plot_sweep

    plot_sweep(report, os.path.join(out, "sweep.png"))
    print(report.table(), end="")
    print(f"wrote sweep.csv and sweep.png to {out}")
    return EXIT_OK


def cmd_check_taxonomy(args):
    cfg = _load_config(args.config)
    t = cfg["taxonomy"]
    out = args.out or cfg.out_dir
    n_fields = args.n_fields or t["n_fields"]
    tol = args.tol or t["tol"]
    report = taxonomy_check(
        default_field_suite(n_fields, dim=t["dim"], seed=cfg.seed),
        tol=tol,
        nfe=t["nfe"],
        n_rules=t["n_rules"],
        seed=cfg.seed,
        corrupt=args.corrupt,
        sigma0=t["sigma0"],
    )
    _makedirs(out)
    _write(os.path.join(out, "taxonomy.csv"), report.to_csv())
    from .plotting import plot_taxonomy

    plot_taxonomy(report, os.path.join(out, "taxonomy.png"))
    print(report.table(), end="")
    print(("PASS" if report.passed else "FAIL") + f": {len(report.rows)} checks, tol {tol:g}")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_sample(args):
    cfg = _load_config(args.config)
    u = cfg.field()
    sched = cfg.scheduler()
    seed = args.seed if args.seed is not None else cfg.seed
    g = torch.Generator().manual_seed(seed)
    x0 = source_std(sched) * torch.randn(args.count, u.dim, generator=g, dtype=torch.float64)
    if args.solver == "bns":
        if not args.theta:
            raise ConfigError("--solver bns needs --theta PATH")
        theta = NSSolverParams.load(args.theta, strict=False)
        sample = ns_sampler({theta.n: theta})
    else:
        try:
            sample = baseline_sampler(args.solver, sched)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    try:
        with torch.no_grad():
            x1 = sample(u, x0, args.nfe)
    except ValueError as exc:
        if isinstance(exc, BNSError) and not isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    out = args.out or os.path.join(cfg.out_dir, f"samples_{args.solver}_nfe{args.nfe}.json")
    TrajectoryDataset(x0, x1).save(_prepare(out))
    print(f"wrote {args.count} samples ({args.solver}, NFE {args.nfe}) to {out}")
    return EXIT_OK


def cmd_param_count(args):
    print("n,p,p_without_t0,trainable")
    for n in args.n:
        p = param_count(n)
        print(f"{n},{p},{p - 1},{free_param_count(n)}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser():
    p = _Parser(prog="bns", description="Bespoke non-stationary ODE solvers for Gaussian-path sampling.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="integrate oracle trajectories and write (x0, x1) pairs")
    g.add_argument("config", nargs="?", help="run config JSON (defaults if omitted)")
    g.add_argument("--count", type=_positive_int, help="number of pairs (default from config)")
    g.add_argument("--out", help="output dataset path (default <out_dir>/<data.train|data.val>)")
    g.add_argument("--seed", type=int, help="sampling seed (default: seed, or seed+1 for val)")
    g.add_argument("--split", choices=("train", "val"), default="train", help="which split to write")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="optimize an NS solver; writes theta JSON, history CSV and PNG")
    t.add_argument("config", nargs="?")
    t.add_argument("--nfe", type=_positive_int, help="solver steps")
    t.add_argument("--init", help="initial solver: euler, midpoint, rk4, ab2, ddim")
    t.add_argument("--sigma0", type=_positive_float, help="preconditioning scale (1 = none)")
    t.add_argument("--iters", type=_positive_int, help="optimizer iterations")
    t.add_argument("--seed", type=int, help="shuffling seed")
    t.add_argument("--train", help="training dataset path")
    t.add_argument("--val", help="validation dataset path")
    t.add_argument("--out", help="output directory")
    t.add_argument("--quiet", action="store_true", help="suppress per-validation log lines")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="PSNR of each solver at each NFE; writes sweep.csv and sweep.png")
    s.add_argument("config", nargs="?")
    s.add_argument("--data", help="evaluation dataset (default: validation split)")
    s.add_argument("--solvers", nargs="+", help="euler midpoint rk4 ab2 ddim bns")
    s.add_argument("--nfes", nargs="+", type=_positive_int, help="NFE values")
    s.add_argument("--theta", action="append", metavar="NFE=PATH", help="trained parameters for the bns rows")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("check-taxonomy", help="certify solver embeddings; exit 4 on any failure")
    c.add_argument("config", nargs="?")
    c.add_argument("--n-fields", type=_positive_int, help="random polynomial fields in the suite")
    c.add_argument("--tol", type=_positive_float, help="max allowed relative deviation")
    c.add_argument("--corrupt", type=float, default=0.0, help="perturb embedded b coefficients (harness self-test)")
    c.add_argument("--out", help="output directory")
    c.set_defaults(func=cmd_check_taxonomy)

    m = sub.add_parser("sample", help="draw source samples and solve them with one solver")
    m.add_argument("config", nargs="?")
    m.add_argument("--solver", required=True, help="euler, midpoint, rk4, ab2, ddim or bns")
    m.add_argument("--nfe", type=_positive_int, required=True)
    m.add_argument("--theta", help="NS parameter file (for --solver bns)")
    m.add_argument("--count", type=_positive_int, default=16)
    m.add_argument("--seed", type=int)
    m.add_argument("--out", help="output JSON path")
    m.set_defaults(func=cmd_sample)

    q = sub.add_parser("param-count", help="parameter counts of n-step NS solvers")
    q.add_argument("n", nargs="+", type=_positive_int)
    q.set_defaults(func=cmd_param_count)
    return p


def main(argv=None):
    threads = os.environ.get("BNS_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"bns: ignoring non-integer BNS_THREADS={threads!r}", file=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"bns: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, StiffnessError, ArithmeticError) as exc:
        print(f"bns: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BNSError as exc:
        print(f"bns: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"bns: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
