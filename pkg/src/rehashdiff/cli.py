"""Command-line entry point.

Every subcommand that writes files also writes ``<primary output>.manifest.json``
recording the command line, merged configuration, input and output digests. The
``replay`` subcommand re-runs a manifest and verifies its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as ds
from .checks import format_table, run_suite
from .denoiser import ExactPosteriorDenoiser, LinearSoftmaxDenoiser
from .evaluation import (SamplerSpec, capacity_sweep, default_bench_samplers, diversity,
                         empirical_distribution, sampler_bench, tv_distance, write_sweep_csv)
from .imaging import export_grid
from .kernels import NoSupportError
from .samplers import SAMPLERS, CfgConfig, GumbelConfig, generate
from .schedule import LINEAR, TIMELINE_KINDS, DomainError, NoiseSchedule
from .training import LOSS_KINDS, OPTIMIZERS, TrainConfig, TrainingDiverged, train
from .vocab import ContractError, VocabSpec

log = logging.getLogger("rehashdiff")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

# flags that must be present after the config file has been merged in
_REQUIRED = {
    "train": ("dataset", "out"),
    "sample": ("out",),
    "eval": ("dataset", "samples"),
    "bench": ("dataset", "out"),
    "sweep": ("dataset", "out"),
    "gen-data": ("out",),
}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list:
    return [int(v) for v in text.replace(" ", "").split(",") if v]


def _str_list(text: str) -> list:
    return [v for v in text.replace(" ", "").split(",") if v]


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Collects inputs and outputs of one invocation for its manifest."""

    def __init__(self, argv, args):
        self.argv = list(argv)
        self.args = args
        self.inputs: list = []
        self.outputs: list = []
        self.volatile: list = []

    def read(self, path) -> Path:
        self.inputs.append(str(path))
        return Path(path)

    def wrote(self, path, volatile: bool = False) -> None:
        self.outputs.append(str(path))
        if volatile:
            self.volatile.append(str(path))

    def manifest(self) -> dict:
        config = {k: v for k, v in sorted(vars(self.args).items()) if k != "func"}
        return {
            "command": self.argv,
            "cwd": os.getcwd(),
            "config": config,
            "seed": config.get("seed"),
            "version": __version__,
            "inputs": {p: sha256(p) for p in self.inputs},
            "outputs": {p: sha256(p) for p in self.outputs},
            "volatile": self.volatile,
        }

    def write_manifest(self) -> Path | None:
        if not self.outputs:
            return None
        path = Path(self.outputs[0] + ".manifest.json")
        path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8", newline="\n")
        return path


def read_config(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _config_defaults(sub: argparse.ArgumentParser, raw: dict) -> dict:
    actions = {a.dest: a for a in sub._actions}
    out = {}
    for key, val in raw.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            out[key] = val.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                out[key] = action.type(val)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
        else:
            out[key] = val
        if action.choices is not None and out[key] not in action.choices:
            raise UsageError(f"config key {key!r}: {val!r} not in {sorted(action.choices)}")
    return out


# ---- denoiser construction ----

def _load_dataset(run: Run, path) -> ds.ToyDataset:
    return ds.load(run.read(path))


def _build_denoiser(run: Run, args, data=None):
    if args.denoiser == "exact":
        if data is None:
            if not args.dataset:
                raise UsageError("--denoiser exact needs --dataset")
            data = _load_dataset(run, args.dataset)
        # partial states after parallel decoding can leave the data support
        return ExactPosteriorDenoiser(data, strict=False)
    if not args.params:
        raise UsageError("--denoiser linear needs --params")
    return LinearSoftmaxDenoiser.load(run.read(args.params))


def _cfg(args):
    if args.cfg_lo is None and args.cfg_hi is None:
        return None
    lo = args.cfg_lo if args.cfg_lo is not None else args.cfg_hi
    hi = args.cfg_hi if args.cfg_hi is not None else lo
    if lo == hi:
        return CfgConfig("constant", w=lo, w_lo=lo, w_hi=hi, space=args.cfg_space)
    return CfgConfig("linear", w_lo=lo, w_hi=hi, space=args.cfg_space)


def _label(args):
    return None if args.label is None or args.label < 0 else args.label


def read_partial(path, spec: VocabSpec, L: int) -> np.ndarray:
    """One line of comma-separated flat indices; ``*`` or any index >= d marks a free slot."""
    text = Path(path).read_text(encoding="utf-8").strip()
    vals = [spec.d if tok.strip() == "*" else int(tok) for tok in text.split(",")]
    if len(vals) != L:
        raise ContractError(f"{path}: expected {L} entries, got {len(vals)}")
    x = np.asarray(vals, dtype=np.int64)
    if (x < 0).any() or (x >= spec.size).any():
        raise ContractError(f"{path}: indices must lie in [0, {spec.size})")
    return x


def write_samples(samples: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(samples.shape[1])])
        w.writerows(samples.tolist())


def read_samples(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or not rows[0][0].startswith("x"):
        raise ContractError(f"{path}: missing sample header")
    return np.array([[int(v) for v in r] for r in rows[1:]], dtype=np.int64).reshape(-1, len(rows[0]))


# ---- subcommands ----

def cmd_gen_data(run: Run, args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.kind == "grid":
        data = ds.generate_grid_patterns(args.side, args.d, args.classes, rng, m=args.m,
                                         max_per_class=args.max_per_class)
    else:
        if args.rows:
            rows = [[float(v) for v in r.split(",")] for r in args.rows.split(";")]
        else:
            rows = np.full((args.d, args.d), 1.0 / args.d)
        data = ds.generate_markov(args.length, args.d, rows, rng, m=args.m)
    ds.save(data, args.out)
    run.wrote(args.out)
    print(f"wrote {len(data)} sequences (L={data.length}, d={data.spec.d}, m={data.spec.m}) to {args.out}")
    return EXIT_OK


def cmd_train(run: Run, args) -> int:
    data = _load_dataset(run, args.dataset)
    if args.m is not None:
        data = data.with_capacity(args.m)
    config = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                         optimizer=args.optimizer, drop_prob=args.drop_prob, t_min=args.t_min,
                         loss=args.loss, seed=args.seed, log_every=args.log_every,
                         time_channel=args.time_channel)
    result = train(config, data, NoiseSchedule(args.schedule))
    model = result.best if args.keep_best else result.denoiser
    model.save(args.out)
    run.wrote(args.out)
    metrics = args.metrics or args.out + ".metrics.csv"
    with open(metrics, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss", "wall_time"))
        for step, loss, wall in result.log:
            w.writerow((step, f"{loss:.6f}", f"{wall:.3f}"))
    # wall-clock column differs between runs
    run.wrote(metrics, volatile=True)
    print(f"final loss {result.final_loss:.5f} (best {result.best_loss:.5f}); params -> {args.out}")
    return EXIT_OK


def cmd_sample(run: Run, args) -> int:
    if args.denoiser == "exact" and not args.dataset:
        raise UsageError("--denoiser exact needs --dataset")
    den = _build_denoiser(run, args)
    kwargs = {"timeline": args.timeline, "label": _label(args), "cfg": _cfg(args)}
    if args.sampler == "mvtm":
        kwargs["gumbel"] = GumbelConfig(args.g0)
    if args.sampler in ("rehash", "hybrid") and args.max_decode:
        kwargs["max_decode"] = args.max_decode
    if args.sampler == "hybrid" and args.dfm_steps:
        kwargs["dfm_steps"] = _int_list(args.dfm_steps)
    if args.inpaint:
        kwargs["x_init"] = read_partial(run.read(args.inpaint), den.spec, den.length)
    result = generate(args.sampler, den, args.steps, args.num_samples, args.seed, **kwargs)
    write_samples(result.samples, args.out)
    run.wrote(args.out)
    if args.grid:
        side = math.isqrt(den.length)
        export_grid(result.samples[: args.grid_count], den.spec, side, args.grid)
        run.wrote(args.grid)
    print(f"wrote {args.num_samples} samples to {args.out}")
    return EXIT_OK


def cmd_eval(run: Run, args) -> int:
    data = _load_dataset(run, args.dataset)
    samples = read_samples(run.read(args.samples))
    if samples.shape[1] != data.length:
        raise ContractError("sample length does not match the dataset")
    emp = empirical_distribution(samples)
    tv = tv_distance(emp, data.distribution(_label(args)))
    distinct, entropy = diversity(emp)
    print(f"n={emp.total} tv={tv:.6f} entropy={entropy:.6f} distinct={distinct}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("n", "tv", "entropy", "distinct"))
            w.writerow((emp.total, f"{tv:.6f}", f"{entropy:.6f}", distinct))
        run.wrote(args.out)
    return EXIT_OK


def _bench_samplers(args) -> list:
    names = _str_list(args.samplers)
    unknown = set(names) - set(SAMPLERS)
    if unknown:
        raise UsageError(f"unknown sampler(s): {', '.join(sorted(unknown))}")
    defaults = default_bench_samplers(args.g0_seed, args.max_decode, args.rehash_timeline,
                                      args.mvtm_timeline)
    specs = []
    for name in names:
        if name == "rehash":
            specs.append(defaults[0])
        elif name == "mvtm":
            specs.extend(defaults[1:])
        else:
            specs.append(SamplerSpec(name, name))
    return specs


def cmd_bench(run: Run, args) -> int:
    from .plotting import plot_bench

    data = _load_dataset(run, args.dataset)
    den = _build_denoiser(run, args, data if args.denoiser == "exact" else None)
    seeds = [args.seed + i for i in range(args.seeds)]
    report = sampler_bench(data, den, _bench_samplers(args), _int_list(args.steps_list), seeds,
                           n_samples=args.num_samples, label=_label(args),
                           timeline=args.timeline, cfg=_cfg(args))
    report.write_csv(args.out)
    run.wrote(args.out)
    plot = args.plot or str(Path(args.out).with_suffix(".png"))
    plot_bench(report, plot)
    run.wrote(plot)
    for row in report.summary():
        print(f"{row['sampler']:<22} K={row['K']:<3} tv={row['tv_mean']:.4f} +/- {row['tv_std']:.4f}")
    return EXIT_OK


def cmd_sweep(run: Run, args) -> int:
    from .plotting import plot_sweep

    data = _load_dataset(run, args.dataset)
    config = TrainConfig(steps=args.train_steps, batch_size=args.batch_size, lr=args.lr,
                         loss=args.loss, seed=args.seed)
    rows = capacity_sweep(data, _int_list(args.m_values), config, K=args.steps,
                          n_samples=args.num_samples, seed=args.seed, timeline=args.timeline,
                          label=_label(args))
    write_sweep_csv(rows, args.out)
    run.wrote(args.out)
    plot = args.plot or str(Path(args.out).with_suffix(".png"))
    plot_sweep(rows, plot)
    run.wrote(plot)
    for r in rows:
        print(f"m={r['m']:<3} tv={r['tv']:.4f} entropy={r['entropy']:.4f} loss={r['final_loss']:.4f}")
    return EXIT_OK


def cmd_kernel_check(run: Run, args) -> int:
    from .kernels import transition_matrix

    results = run_suite(args.seed)
    print(format_table(results))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("check", "status", "detail"))
            for r in results:
                w.writerow((r.name, "PASS" if r.passed else "FAIL", r.detail))
        run.wrote(args.out)
    if args.dump_matrix:
        d, m, s, t = args.dump_matrix.split(",")
        Q = transition_matrix(VocabSpec(int(d), int(m)), float(s), float(t), LINEAR)
        path = args.matrix_out or "transition_matrix.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"to{j}" for j in range(Q.shape[1])])
            w.writerows([[repr(float(v)) for v in row] for row in Q])
        run.wrote(path)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


@contextlib.contextmanager
def _cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def cmd_replay(run: Run, args) -> int:
    man = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    with _cwd(man["cwd"]):
        for path, digest in man["inputs"].items():
            if not Path(path).exists() or sha256(path) != digest:
                print(f"input changed: {path}", file=sys.stderr)
                return EXIT_FAILURE
        code = main(man["command"])
        if code != EXIT_OK:
            return code
        volatile = set(man["volatile"])
        bad = [p for p, digest in man["outputs"].items()
               if p not in volatile and sha256(p) != digest]
    for p in bad:
        print(f"output differs: {p}", file=sys.stderr)
    if not bad:
        print(f"replayed {len(man['outputs']) - len(volatile)} outputs byte-identical")
    return EXIT_FAILURE if bad else EXIT_OK


# ---- parser ----

def _add_sampling(p, steps_default=8):
    p.add_argument("--denoiser", choices=("exact", "linear"), default="exact")
    p.add_argument("--dataset", help="dataset file (exact denoiser)")
    p.add_argument("--params", help="parameter file (linear denoiser)")
    p.add_argument("--timeline", choices=TIMELINE_KINDS, default="linear")
    p.add_argument("--cfg-lo", type=float, help="guidance weight at the first step")
    p.add_argument("--cfg-hi", type=float, help="guidance weight at the last step")
    p.add_argument("--cfg-space", choices=("logit", "prob"), default="logit")
    p.add_argument("--label", type=int, help="class label; negative means unconditional")
    p.add_argument("--num-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-decode", type=int, help="cap on tokens decoded per rehash step")


def build_parser() -> tuple:
    parser = argparse.ArgumentParser(prog="rehashdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    table = {}

    def sub(name, func, help_):
        p = subs.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key=value file merged under the flags")
        p.set_defaults(func=func)
        table[name] = p
        return p

    p = sub("gen-data", cmd_gen_data, "generate a toy dataset")
    p.add_argument("--kind", choices=("grid", "markov"), default="grid")
    p.add_argument("--side", type=int, default=4, help="grid side (L = side**2)")
    p.add_argument("--length", type=int, default=4, help="markov sequence length")
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--max-per-class", type=int)
    p.add_argument("--rows", help="markov transition rows 'a,b;c,d' (default uniform)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub("train", cmd_train, "fit the linear softmax denoiser")
    p.add_argument("--dataset")
    p.add_argument("--out", help="parameter file")
    p.add_argument("--metrics", help="metrics CSV (default <out>.metrics.csv)")
    p.add_argument("--m", type=int, help="override the dataset noise capacity")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="adam")
    p.add_argument("--loss", choices=LOSS_KINDS, default="ddm-linear")
    p.add_argument("--schedule", choices=("linear", "cosine"), default="linear")
    p.add_argument("--drop-prob", type=float, default=0.1)
    p.add_argument("--t-min", type=float, default=1e-3)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--time-channel", action="store_true")
    p.add_argument("--keep-best", action="store_true", help="save the best logged snapshot")
    p.add_argument("--seed", type=int, default=0)

    p = sub("sample", cmd_sample, "draw samples from a denoiser")
    _add_sampling(p)
    p.add_argument("--sampler", choices=SAMPLERS, default="rehash")
    p.add_argument("--steps", type=int, default=8, help="number of reverse steps K")
    p.add_argument("--g0", type=float, default=1.0, help="MVTM Gumbel intensity")
    p.add_argument("--dfm-steps", help="hybrid: comma-separated 1-based DFM steps")
    p.add_argument("--inpaint", help="partial sequence file")
    p.add_argument("--out", default="samples.csv")
    p.add_argument("--grid", help="PGM montage of the first samples")
    p.add_argument("--grid-count", type=int, default=64)

    p = sub("eval", cmd_eval, "compare samples against the dataset distribution")
    p.add_argument("--dataset")
    p.add_argument("--samples")
    p.add_argument("--label", type=int)
    p.add_argument("--out", help="metrics CSV")

    p = sub("bench", cmd_bench, "TV of each sampler across step counts and seeds")
    _add_sampling(p)
    p.add_argument("--samplers", default="rehash,mvtm", help=f"subset of {','.join(SAMPLERS)}")
    p.add_argument("--steps-list", default="4,8,16")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds starting at --seed")
    p.add_argument("--g0-seed", type=int, default=0, help="seed for the three MVTM intensities")
    p.add_argument("--rehash-timeline", choices=TIMELINE_KINDS)
    p.add_argument("--mvtm-timeline", choices=TIMELINE_KINDS)
    p.add_argument("--out")
    p.add_argument("--plot", help="PNG figure (default: --out with .png)")

    p = sub("sweep", cmd_sweep, "retrain and evaluate across noise capacities")
    p.add_argument("--dataset")
    p.add_argument("--m-values", default="1,2,4,8,16")
    p.add_argument("--train-steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--loss", choices=LOSS_KINDS, default="ddm-linear")
    p.add_argument("--steps", type=int, default=16, help="sampling steps K")
    p.add_argument("--timeline", choices=TIMELINE_KINDS, default="cosine")
    p.add_argument("--num-samples", type=int, default=10_000)
    p.add_argument("--label", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--plot", help="PNG figure (default: --out with .png)")

    p = sub("kernel-check", cmd_kernel_check, "run the kernel invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="results CSV")
    p.add_argument("--dump-matrix", metavar="D,M,S,T", help="write Q_{t|s} for these values")
    p.add_argument("--matrix-out", help="matrix CSV path")

    p = sub("replay", cmd_replay, "re-run a manifest and verify its outputs")
    p.add_argument("manifest")
    return parser, table


def _parse(argv) -> argparse.Namespace:
    parser, table = build_parser()
    args = parser.parse_args(argv)
    sub = table[args.command]
    if getattr(args, "config", None):
        try:
            sub.set_defaults(**_config_defaults(sub, read_config(args.config)))
        except (UsageError, OSError) as exc:
            sub.error(str(exc))
        args = parser.parse_args(argv)
    missing = [k for k in _REQUIRED.get(args.command, ()) if getattr(args, k) in (None, "")]
    if missing:
        sub.error("the following arguments are required: "
                  + ", ".join("--" + k.replace("_", "-") for k in missing))
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(argv, args)
    if getattr(args, "config", None):
        run.read(args.config)
    try:
        code = args.func(run, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, DomainError, NoSupportError, ds.DatasetFormatError,
            TrainingDiverged, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    if args.command != "replay":
        run.write_manifest()
    return code


if __name__ == "__main__":
    sys.exit(main())
