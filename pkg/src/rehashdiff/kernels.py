"""Forward corruption, transition matrices and the reverse kernel.

Mask indices are interchangeable: a valid token is corrupted to any specific mask
index with probability ``(1 - alpha_{t|s}) / m`` and a mask token re-randomizes its
index uniformly at every step.
"""

from __future__ import annotations

import numpy as np

from .dataset import ToyDataset
from .schedule import NoiseSchedule, fwd_ratio
from .vocab import ContractError, Mask, Sequence, Token, Valid, VocabSpec, flat_index


class NoSupportError(ValueError):
    """The observed corrupted sequence is inconsistent with every dataset example."""


def corrupt(x0, t: float, sched: NoiseSchedule, spec: VocabSpec, rng: np.random.Generator):
    """Sample x_t ~ q(x_t | x_0) position-wise.

    ``x0`` may be a :class:`Sequence` (returns a Sequence) or an integer array of
    any batch shape (returns an array). ``t`` may be a scalar or an array
    broadcastable against the leading batch axes of ``x0``.
    """
    if isinstance(x0, Sequence):
        arr = corrupt(x0.to_array(), t, sched, spec, rng)
        return Sequence(spec, tuple(arr))
    x0 = np.asarray(x0, dtype=np.int64)
    if (x0 >= spec.d).any() or (x0 < 0).any():
        raise ContractError("corrupt expects an all-valid x0")
    keep_prob = np.vectorize(sched.alpha, otypes=[np.float64])(np.asarray(t, dtype=np.float64))
    keep_prob = keep_prob.reshape(keep_prob.shape + (1,) * (x0.ndim - keep_prob.ndim))
    u = rng.random(x0.shape)
    idx = rng.integers(spec.m, size=x0.shape)
    return np.where(u < keep_prob, x0, spec.d + idx)


def forward_step_prob(frm: Token, to: Token, s: float, t: float,
                      sched: NoiseSchedule, spec: VocabSpec) -> float:
    """q(x_t = to | x_s = frm) for one position, per specific mask index."""
    flat_index(frm, spec)
    flat_index(to, spec)
    a = fwd_ratio(sched, s, t)
    if isinstance(frm, Valid):
        if isinstance(to, Valid):
            return a if to == frm else 0.0
        return (1.0 - a) / spec.m
    if isinstance(to, Mask):
        return 1.0 / spec.m
    return 0.0


def transition_matrix(spec: VocabSpec, s: float, t: float, sched: NoiseSchedule) -> np.ndarray:
    """Dense (d+m) x (d+m) row-stochastic Q_{t|s} = a I + (1-a) M + pi."""
    a = fwd_ratio(sched, s, t)
    d, m = spec.d, spec.m
    Q = np.zeros((d + m, d + m))
    Q[:d, :d] = a * np.eye(d)
    Q[:d, d:] = (1.0 - a) / m
    Q[d:, d:] = 1.0 / m
    return Q


def forward_marginal(x0, t: float, sched: NoiseSchedule, spec: VocabSpec) -> np.ndarray:
    """Per-position distribution of x_t given x_0, shape ``(L, d+m)``."""
    x0 = x0.to_array() if isinstance(x0, Sequence) else np.asarray(x0, dtype=np.int64)
    if (x0 >= spec.d).any():
        raise ContractError("forward_marginal expects an all-valid x0")
    a = sched.alpha(t)
    out = np.zeros(x0.shape + (spec.size,))
    np.put_along_axis(out, x0[..., None], a, axis=-1)
    out[..., spec.d:] = sched.mask_rate(t) / spec.m
    return out


def reverse_step_distribution(x_t_tok, p, s: float, t: float,
                              sched: NoiseSchedule, spec: VocabSpec) -> np.ndarray:
    """q(x_s | x_t) at one position over all d+m flat slots.

    An unmasked token is carried over. A masked token puts
    ``(alpha_s - alpha_t)/(1 - alpha_t) * p`` on the valid slots and
    ``(1 - alpha_s)/(m (1 - alpha_t))`` on every mask slot.
    """
    k = flat_index(x_t_tok, spec) if isinstance(x_t_tok, (Valid, Mask)) else int(x_t_tok)
    if not s < t:
        raise ContractError(f"need s < t, got s={s}, t={t}")
    out = np.zeros(spec.size)
    if k < spec.d:
        out[k] = 1.0
        return out
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (spec.d,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError("p must be a normalized distribution over d valid tokens")
    denom = sched.mask_rate(t)
    out[:spec.d] = (sched.alpha(s) - sched.alpha(t)) / denom * p
    out[spec.d:] = sched.mask_rate(s) / (spec.m * denom)
    return out


def _reverse_kernel_given_x0(xt_k: int, x0_k: int, s, t, sched, spec) -> np.ndarray:
    out = np.zeros(spec.size)
    if xt_k < spec.d:
        out[xt_k] = 1.0
        return out
    denom = sched.mask_rate(t)
    out[x0_k] = (sched.alpha(s) - sched.alpha(t)) / denom
    out[spec.d:] = sched.mask_rate(s) / (spec.m * denom)
    return out


def exact_reverse_oracle(dataset: ToyDataset, x_t, s: float, t: float,
                         sched: NoiseSchedule, spec: VocabSpec, label=None) -> np.ndarray:
    """Brute-force q(x_s^i | x_t) marginalized over the exact posterior q(x_0 | x_t).

    Enumerates the dataset support with plain Python loops. Each position's
    likelihood is ``alpha_t`` on a matching unmasked token and ``(1-alpha_t)/m``
    on any masked token. Returns an ``(L, d+m)`` array.
    """
    xt = [int(k) for k in (x_t.flat if isinstance(x_t, Sequence) else x_t)]
    seqs, weights = dataset.select(label)
    if len(seqs) > 10_000:
        raise ContractError("dataset support too large to enumerate")
    a_t = sched.alpha(t)
    mask_lik = sched.mask_rate(t) / spec.m
    post = []
    for row, w in zip(seqs, weights):
        lik = float(w)
        for xt_k, x0_k in zip(xt, row):
            if xt_k >= spec.d:
                lik *= mask_lik
            elif xt_k == x0_k:
                lik *= a_t
            else:
                lik = 0.0
                break
        post.append(lik)
    total = sum(post)
    if total <= 0.0:
        raise NoSupportError("x_t is inconsistent with every example in the dataset")
    out = np.zeros((len(xt), spec.size))
    for row, lik in zip(seqs, post):
        if lik == 0.0:
            continue
        for i, (xt_k, x0_k) in enumerate(zip(xt, row)):
            out[i] += (lik / total) * _reverse_kernel_given_x0(xt_k, int(x0_k), s, t, sched, spec)
    return out
