"""Kernel invariant suite backing the ``kernel-check`` command."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .dataset import ToyDataset
from .denoiser import ExactPosteriorDenoiser
from .kernels import (NoSupportError, exact_reverse_oracle, forward_step_prob,
                      reverse_step_distribution, transition_matrix)
from .schedule import LINEAR, fwd_ratio
from .vocab import Mask, Valid, VocabSpec, unflat_index


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _sorted_times(rng, n):
    return np.sort(rng.uniform(0.0, 1.0, size=n))


def check_row_stochastic(rng, n_configs=100, tol=1e-12) -> CheckResult:
    worst = 0.0
    for _ in range(n_configs):
        spec = VocabSpec(int(rng.integers(1, 17)), int(rng.integers(1, 9)))
        s, t = _sorted_times(rng, 2)
        Q = transition_matrix(spec, s, t, LINEAR)
        if (Q < 0).any():
            return CheckResult("row-stochastic", False, "negative entry")
        worst = max(worst, float(np.abs(Q.sum(axis=1) - 1.0).max()))
    return CheckResult("row-stochastic", worst <= tol, f"max |row sum - 1| = {worst:.2e} (tol {tol:g})")


def check_chapman_kolmogorov(rng, n_configs=100, tol=1e-10) -> CheckResult:
    worst = 0.0
    for _ in range(n_configs):
        spec = VocabSpec(int(rng.integers(1, 17)), int(rng.integers(1, 9)))
        s, u, t = _sorted_times(rng, 3)
        lhs = transition_matrix(spec, s, u, LINEAR) @ transition_matrix(spec, u, t, LINEAR)
        worst = max(worst, float(np.abs(lhs - transition_matrix(spec, s, t, LINEAR)).max()))
    return CheckResult("chapman-kolmogorov", worst <= tol, f"max abs error = {worst:.2e} (tol {tol:g})")


def single_mask_kernel(frm, to, a) -> float:
    """The one-absorbing-token forward kernel written case by case."""
    if isinstance(to, Mask) and not isinstance(frm, Mask):
        return 1.0 - a
    if to == frm and not isinstance(frm, Mask):
        return a
    if to == frm and isinstance(frm, Mask):
        return 1.0
    return 0.0


def check_single_mask_reduction(rng, max_d=16) -> CheckResult:
    mismatches = 0
    pairs = 0
    for d in range(1, max_d + 1):
        spec = VocabSpec(d, 1)
        s, t = _sorted_times(rng, 2)
        a = fwd_ratio(LINEAR, s, t)
        toks = [unflat_index(k, spec) for k in range(spec.size)]
        for frm, to in itertools.product(toks, toks):
            pairs += 1
            if forward_step_prob(frm, to, s, t, LINEAR, spec) != single_mask_kernel(frm, to, a):
                mismatches += 1
    return CheckResult("m=1 reduction", mismatches == 0, f"{mismatches} mismatches over {pairs} pairs")


def random_dataset(rng, d, m, L, max_support=8, n_classes=2) -> ToyDataset:
    universe = d ** L
    size = int(rng.integers(1, min(max_support, universe) + 1))
    codes = rng.choice(universe, size=size, replace=False)
    seqs = np.array([np.unravel_index(c, (d,) * L) for c in codes]).reshape(size, L)
    labels = tuple(int(x) for x in rng.integers(0, n_classes, size=size))
    weights = rng.uniform(0.1, 1.0, size=size)
    return ToyDataset(VocabSpec(d, m), seqs, labels, weights, n_classes=n_classes)


def check_oracle_equivalence(rng, tol=1e-10, max_d=4, max_m=3, max_L=3, max_support=8) -> CheckResult:
    """Analytic reverse kernel fed with exact posteriors vs brute-force enumeration."""
    worst, states, failures = 0.0, 0, []
    for d, m, L in itertools.product(range(1, max_d + 1), range(1, max_m + 1), range(1, max_L + 1)):
        data = random_dataset(rng, d, m, L, max_support)
        spec = data.spec
        den = ExactPosteriorDenoiser(data)
        s, t = sorted(rng.uniform(0.02, 0.98, size=2))
        for label in (None, 0):
            if not data.select(label)[0].size:
                continue
            for xt in itertools.product(range(spec.size), repeat=L):
                states += 1
                try:
                    ref = exact_reverse_oracle(data, xt, s, t, LINEAR, spec, label)
                except NoSupportError:
                    try:
                        den.predict(np.array(xt), t, label)
                        failures.append((d, m, L, xt, "oracle has no support, denoiser does"))
                    except NoSupportError:
                        pass
                    continue
                p = den.predict(np.array(xt), t, label)
                got = np.stack([reverse_step_distribution(k, p[i], s, t, LINEAR, spec)
                                for i, k in enumerate(xt)])
                worst = max(worst, float(np.abs(got - ref).max()))
    ok = worst <= tol and not failures
    return CheckResult("oracle equivalence", ok,
                       f"{states} states, max abs error = {worst:.2e} (tol {tol:g}), "
                       f"{len(failures)} support mismatches")


def permute_mask_indices(xt, spec, rng):
    """Relabel mask indices with a random permutation, then shuffle them across masked slots."""
    xt = np.array(xt)
    masked = xt >= spec.d
    perm = rng.permutation(spec.m)
    vals = spec.d + perm[xt[masked] - spec.d]
    xt[masked] = rng.permutation(vals)
    return xt


def check_mask_invariance(rng, n_perms=1000) -> CheckResult:
    violations = 0
    for _ in range(n_perms):
        d, m, L = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 5))
        data = random_dataset(rng, d, m, L)
        spec = data.spec
        x0 = data.sequences[rng.integers(len(data))]
        masked = rng.random(L) < 0.6
        xt = np.where(masked, spec.d + rng.integers(m, size=L), x0)
        s, t = sorted(rng.uniform(0.02, 0.98, size=2))
        den = ExactPosteriorDenoiser(data)
        alt = permute_mask_indices(xt, spec, rng)
        same = np.array_equal(den.predict(xt, t), den.predict(alt, t)) and np.array_equal(
            exact_reverse_oracle(data, xt, s, t, LINEAR, spec),
            exact_reverse_oracle(data, alt, s, t, LINEAR, spec))
        violations += not same
    return CheckResult("mask-index invariance", violations == 0,
                       f"{violations} violations over {n_perms} permutations")


SUITE = (
    check_row_stochastic,
    check_chapman_kolmogorov,
    check_single_mask_reduction,
    check_oracle_equivalence,
    check_mask_invariance,
)


def run_suite(seed: int = 0) -> list:
    results = []
    for fn in SUITE:
        start = time.perf_counter()
        res = fn(np.random.default_rng(seed))
        res.seconds = time.perf_counter() - start
        results.append(res)
    return results


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:5.2f}s  {r.detail}")
    return "\n".join(lines)
