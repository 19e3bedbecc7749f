"""Distribution-recovery metrics, sampler benchmark and noise-capacity sweep."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .dataset import ToyDataset
from .denoiser import Denoiser
from .samplers import CfgConfig, GumbelConfig, generate, swept_gumbel_configs
from .training import TrainConfig, train

log = logging.getLogger(__name__)

BENCH_FIELDS = ("sampler", "K", "seed", "tv", "entropy", "distinct")
SWEEP_FIELDS = ("m", "tv", "entropy", "distinct", "final_loss")


@dataclass
class EmpiricalDistribution:
    counts: Counter
    total: int

    def probs(self) -> dict:
        return {k: c / self.total for k, c in self.counts.items()}


def _as_samples(runs) -> np.ndarray:
    if isinstance(runs, np.ndarray):
        return runs if runs.ndim == 2 else runs[None, :]
    if hasattr(runs, "samples"):
        return runs.samples
    parts = [r.samples if hasattr(r, "samples") else np.atleast_2d(np.asarray(r)) for r in runs]
    lengths = {p.shape[1] for p in parts}
    if len(lengths) != 1:
        raise ValueError("all runs must share the sequence length")
    return np.concatenate(parts, axis=0)


def empirical_distribution(runs) -> EmpiricalDistribution:
    """Exact histogram over sampled sequences (runs, SampleRun, or an (N, L) array)."""
    samples = _as_samples(runs)
    uniq, counts = np.unique(samples, axis=0, return_counts=True)
    hist = Counter({tuple(int(k) for k in row): int(c) for row, c in zip(uniq, counts)})
    return EmpiricalDistribution(hist, int(samples.shape[0]))


def tv_distance(p, q) -> float:
    """Half the L1 distance. Accepts dicts over a shared universe or aligned arrays."""
    if isinstance(p, EmpiricalDistribution):
        p = p.probs()
    if isinstance(q, EmpiricalDistribution):
        q = q.probs()
    if isinstance(p, dict) or isinstance(q, dict):
        keys = set(p) | set(q)
        return 0.5 * math.fsum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    return 0.5 * float(np.abs(p - q).sum())


def diversity(runs) -> tuple:
    """(distinct sequence count, Shannon entropy in nats) of the empirical distribution."""
    emp = runs if isinstance(runs, EmpiricalDistribution) else empirical_distribution(runs)
    probs = np.array(list(emp.counts.values()), dtype=np.float64) / emp.total
    entropy = float(-(probs * np.log(probs)).sum())
    return len(emp.counts), max(entropy, 0.0)


@dataclass(frozen=True)
class SamplerSpec:
    """A named sampler configuration for benchmarking."""

    name: str
    kind: str
    options: tuple = ()

    def kwargs(self) -> dict:
        return dict(self.options)


def default_bench_samplers(g0_seed: int = 0, max_decode=None, rehash_timeline=None,
                           mvtm_timeline=None) -> list:
    """Rehash plus MVTM at three intensities drawn uniformly on [0.5, 4]."""
    rehash_opts = (("max_decode", max_decode),)
    if rehash_timeline is not None:
        rehash_opts += (("timeline", rehash_timeline),)
    mvtm_opts = () if mvtm_timeline is None else (("timeline", mvtm_timeline),)
    specs = [SamplerSpec("rehash", "rehash", rehash_opts)]
    for tag, g in zip("abc", swept_gumbel_configs(g0_seed)):
        specs.append(SamplerSpec(f"mvtm-{tag}(g0={g.g0:.3f})", "mvtm", (("gumbel", g),) + mvtm_opts))
    return specs


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def summary(self) -> list:
        """(sampler, K, mean tv, std tv, mean entropy, mean distinct) per cell group."""
        groups: dict = {}
        for r in self.rows:
            groups.setdefault((r["sampler"], r["K"]), []).append(r)
        out = []
        for (name, K), rs in sorted(groups.items()):
            tvs = np.array([r["tv"] for r in rs])
            out.append({
                "sampler": name, "K": K, "tv_mean": float(tvs.mean()),
                "tv_std": float(tvs.std(ddof=1)) if len(tvs) > 1 else 0.0,
                "entropy": float(np.mean([r["entropy"] for r in rs])),
                "distinct": float(np.mean([r["distinct"] for r in rs])),
            })
        return out

    def mean_tv(self, sampler_prefix: str, K: int) -> float:
        tvs = [r["tv"] for r in self.rows if r["sampler"].startswith(sampler_prefix) and r["K"] == K]
        return float(np.mean(tvs))

    def write_csv(self, path) -> None:
        rows = sorted(self.rows, key=lambda r: (r["sampler"], r["K"], r["seed"]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(BENCH_FIELDS)
            for r in rows:
                w.writerow([r["sampler"], r["K"], r["seed"], f"{r['tv']:.6f}",
                            f"{r['entropy']:.6f}", r["distinct"]])
            for s in self.summary():
                w.writerow([s["sampler"], s["K"], "mean", f"{s['tv_mean']:.6f}",
                            f"{s['entropy']:.6f}", f"{s['distinct']:.1f}"])
                w.writerow([s["sampler"], s["K"], "std", f"{s['tv_std']:.6f}", "", ""])


def sampler_bench(dataset: ToyDataset, denoiser: Denoiser, samplers, K_values, seeds, *,
                  n_samples: int = 100_000, label=None, timeline: str = "linear",
                  cfg: CfgConfig | None = None) -> BenchReport:
    """TV between sampled and true distributions for every (sampler, K, seed) cell.

    A ``timeline`` entry in a sampler's options overrides the shared ``timeline``.
    """
    target = dataset.distribution(label)
    report = BenchReport()
    for spec in samplers:
        for K in K_values:
            for seed in seeds:
                kwargs = {"timeline": timeline, **spec.kwargs()}
                run = generate(spec.kind, denoiser, K, n_samples, seed, label=label, cfg=cfg,
                               **kwargs)
                emp = empirical_distribution(run)
                distinct, entropy = diversity(emp)
                report.rows.append({"sampler": spec.name, "K": int(K), "seed": int(seed),
                                    "tv": tv_distance(emp, target), "entropy": entropy,
                                    "distinct": distinct})
                log.info("%s K=%d seed=%d tv=%.4f", spec.name, K, seed, report.rows[-1]["tv"])
    return report


def capacity_sweep(dataset: ToyDataset, m_values, train_config: TrainConfig, *, K: int = 16,
                   n_samples: int = 10_000, seed: int = 0, timeline: str = "cosine",
                   label=None) -> list:
    """Retrain and sample once per noise capacity ``m``; one result row per m."""
    rows = []
    target = dataset.distribution(label)
    for m in m_values:
        if m < 1:
            raise ValueError("noise capacity must be >= 1")
        data_m = dataset.with_capacity(int(m))
        result = train(train_config, data_m)
        run = generate("rehash", result.denoiser, K, n_samples, seed, timeline=timeline, label=label)
        emp = empirical_distribution(run)
        distinct, entropy = diversity(emp)
        rows.append({"m": int(m), "tv": tv_distance(emp, target), "entropy": entropy,
                     "distinct": distinct, "final_loss": result.final_loss})
        log.info("m=%d tv=%.4f loss=%.4f", m, rows[-1]["tv"], result.final_loss)
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([r["m"], f"{r['tv']:.6f}", f"{r['entropy']:.6f}", r["distinct"],
                        f"{r['final_loss']:.6f}"])
