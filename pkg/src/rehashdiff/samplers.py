"""Reverse-process samplers over batches of flat-index sequences.

Every sampler works on an ``(N, L)`` integer state and consumes a fixed number of
random draws per step regardless of the data, so runs are pure functions of the
generator seed. :func:`generate` splits large jobs into chunks with independent
counter-based streams keyed by ``(seed, chunk index)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .denoiser import LOG_FLOOR, Denoiser, log_softmax, softmax
from .schedule import LINEAR, NoiseSchedule, timeline_points
from .vocab import ContractError, Sequence

log = logging.getLogger(__name__)

SAMPLERS = ("rehash", "mvtm", "dfm", "hybrid")
CHUNK = 4096


@dataclass(frozen=True)
class CfgConfig:
    """Guidance strength; ``linear`` mode ramps from ``w_lo`` at step 1 to ``w_hi`` at step K."""

    mode: str = "constant"
    w: float = 1.0
    w_lo: float = 1.0
    w_hi: float = 1.0
    space: str = "logit"

    def __post_init__(self):
        if self.mode not in ("constant", "linear"):
            raise ContractError(f"unknown guidance mode {self.mode!r}")
        if self.space not in ("logit", "prob"):
            raise ContractError(f"unknown guidance space {self.space!r}")
        if self.w < 0 or self.w_lo < 0 or self.w_lo > self.w_hi:
            raise ContractError("need w >= 0 and 0 <= w_lo <= w_hi")

    def weight(self, k: int, K: int) -> float:
        if self.mode == "constant":
            return self.w
        return self.w_lo + (self.w_hi - self.w_lo) * (k - 1) / max(K - 1, 1)


@dataclass(frozen=True)
class GumbelConfig:
    g0: float = 1.0

    def __post_init__(self):
        if self.g0 < 0:
            raise ContractError("g0 must be >= 0")

    def intensity(self, t: float) -> float:
        return self.g0 * t


def swept_gumbel_configs(seed: int, n: int = 3, lo: float = 0.5, hi: float = 4.0) -> list:
    """``n`` intensities drawn uniformly on ``[lo, hi]`` from a seeded stream."""
    rng = np.random.default_rng(seed)
    return [GumbelConfig(float(g)) for g in rng.uniform(lo, hi, size=n)]


@dataclass
class SampleRun:
    samples: np.ndarray
    sampler: str
    K: int
    timeline: str
    label: int | None = None
    seed: int | None = None
    trajectory: list = field(default_factory=list)

    @property
    def sequences(self) -> list:
        return [tuple(int(k) for k in row) for row in self.samples]

    def as_sequences(self, spec) -> list:
        return [Sequence(spec, tuple(row)) for row in self.samples]


def cfg_combine(logits_uncond, logits_cond, w: float) -> np.ndarray:
    """``uncond + w * (cond - uncond)``, written so w=0 and w=1 are exact."""
    u = np.asarray(logits_uncond, dtype=np.float64)
    c = np.asarray(logits_cond, dtype=np.float64)
    if u.shape != c.shape:
        raise ContractError(f"shape mismatch {u.shape} vs {c.shape}")
    if w == 0:
        return u.copy()
    if w == 1:
        return c.copy()
    return (1.0 - w) * u + w * c


class Guide:
    """Per-step denoiser queries with optional classifier-free guidance."""

    def __init__(self, denoiser: Denoiser, label, cfg: CfgConfig | None, K: int):
        denoiser.check_label(label)
        self.denoiser, self.label, self.cfg, self.K = denoiser, label, cfg, K

    def _guided(self, k):
        return self.label is not None and self.cfg is not None

    def probs(self, x, t, k):
        if not self._guided(k):
            return self.denoiser.predict(x, t, self.label)
        w = self.cfg.weight(k, self.K)
        if self.cfg.space == "prob":
            pu = self.denoiser.predict(x, t, None)
            pc = self.denoiser.predict(x, t, self.label)
            p = np.clip(pu + w * (pc - pu), 0.0, None)
            return p / p.sum(axis=-1, keepdims=True)
        return softmax(self.logits(x, t, k))

    def logits(self, x, t, k):
        if not self._guided(k):
            return self.denoiser.predict_logits(x, t, self.label)
        if self.cfg.space == "prob":
            with np.errstate(divide="ignore"):
                return np.maximum(np.log(self.probs(x, t, k)), LOG_FLOOR)
        w = self.cfg.weight(k, self.K)
        return cfg_combine(self.denoiser.predict_logits(x, t, None),
                           self.denoiser.predict_logits(x, t, self.label), w)


def _categorical(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw along the last axis; zero-mass categories are never chosen."""
    cum = np.cumsum(weights, axis=-1)
    target = u * cum[..., -1]
    return np.minimum((cum <= target[..., None]).sum(axis=-1), weights.shape[-1] - 1)


def initial_state(n: int, L: int, spec, rng) -> np.ndarray:
    """x_1 drawn uniformly from the mask indices."""
    return spec.d + rng.integers(spec.m, size=(n, L))


def rehash_step(x, t, s, guide: Guide, k: int, sched: NoiseSchedule, spec, rng, *,
                max_decode: int | None = None, steps_after: int = 0) -> np.ndarray:
    """One reverse step t -> s.

    Masked positions get fresh uniform mask indices, then draw from
    ``[(1 - r) p, r]`` with ``r = (1 - alpha_s)/(1 - alpha_t)`` the merged mask
    outcome. A drawn mask outcome stays masked; decoded tokens never change.

    ``max_decode`` caps newly decoded tokens per row. The cap is lifted as far as
    needed for the remaining ``steps_after`` steps to finish decoding, and the
    kept subset is chosen uniformly at random.
    """
    x = np.array(x, dtype=np.int64)
    n, L = x.shape
    d = spec.d
    masked = x >= d
    x = np.where(masked, d + rng.integers(spec.m, size=x.shape), x)
    u = rng.random(x.shape)
    if max_decode is not None:
        keys = rng.random(x.shape)
        u_forced = rng.random(x.shape)
    rows = masked.any(axis=1)
    if not rows.any():
        return x
    p = np.zeros((n, L, d))
    p[rows] = guide.probs(x[rows], t, k)
    r = sched.mask_rate(s) / sched.mask_rate(t)
    q = np.concatenate([(1.0 - r) * p, np.full((n, L, 1), r)], axis=-1)
    draw = _categorical(q, u)
    fired = masked & (draw < d)
    if max_decode is not None:
        n_masked = masked.sum(axis=1)
        n_fired = fired.sum(axis=1)
        n_keep = np.minimum(np.maximum(np.minimum(n_fired, max_decode),
                                       n_masked - max_decode * steps_after), n_masked)
        forced_vals = _categorical(p, u_forced)
        # fired positions first, then other masked ones, each in random order
        prio = np.where(fired, keys, np.where(masked, 1.0 + keys, 3.0))
        order = np.argsort(prio, axis=1, kind="stable")
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(L)[None, :].repeat(n, 0), axis=1)
        keep = rank < n_keep[:, None]
        draw = np.where(fired, draw, forced_vals)
        fired = keep & masked
    return np.where(fired, draw, x)


def mvtm_step(x, t, s, guide: Guide, k: int, gumbel: GumbelConfig, sched: NoiseSchedule,
              spec, rng, *, n_generate=None) -> np.ndarray:
    """Predict-all then re-mask the lowest-confidence newly decoded positions.

    Scores are guided log-probabilities plus ``G(t)`` Gumbel noise; confidence adds
    a second independent Gumbel draw. Previously decoded positions are pinned at
    +inf confidence. ``floor(G * (1 - alpha_s))`` positions are re-masked, with
    ``G`` the number of generated positions (``L`` unless inpainting); ties go to
    the lower position index.
    """
    x = np.array(x, dtype=np.int64)
    n, L = x.shape
    d = spec.d
    g_score = rng.gumbel(size=(n, L, d))
    g_conf = rng.gumbel(size=(n, L))
    masked = x >= d
    rows = masked.any(axis=1)
    if not rows.any():
        return x
    logp = np.zeros((n, L, d))
    logp[rows] = log_softmax(guide.logits(x[rows], t, k))
    g = gumbel.intensity(t)
    score = logp + g * g_score
    pred = score.argmax(axis=-1)
    out = np.where(masked, pred, x)
    conf = np.take_along_axis(score, pred[..., None], axis=-1)[..., 0] + g * g_conf
    conf = np.where(masked, conf, np.inf)
    if n_generate is None:
        n_generate = np.full(n, L)
    # small slack absorbs rounding in products like 9 * (2/3)
    n_re = np.floor(np.asarray(n_generate) * sched.mask_rate(s) + 1e-9).astype(np.int64)
    n_masked = masked.sum(axis=1)
    if (n_re > n_masked).any():
        log.debug("re-mask count clamped to masked count in %d rows", int((n_re > n_masked).sum()))
    n_re = np.minimum(n_re, n_masked)
    order = np.argsort(conf, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(L)[None, :].repeat(n, 0), axis=1)
    remask = rank < n_re[:, None]
    return np.where(remask, d, out)


def dfm_step(x, t, s, guide: Guide, k: int, sched: NoiseSchedule, spec, rng) -> np.ndarray:
    """Discrete flow-matching jump step.

    Samples x0_hat from the guided prediction and jumps each position to it with
    probability ``1 - exp(-lambda)``, ``lambda = (j_t - j_s)/j_t`` with
    ``j = 1 - alpha``. Jumps onto the current token carry no intensity, so
    decoded positions move only when x0_hat disagrees with them. At the terminal
    step (``j_s = 0``) masked positions always jump.
    """
    x = np.array(x, dtype=np.int64)
    n, L = x.shape
    u_pred = rng.random(x.shape)
    u_jump = rng.random(x.shape)
    j_t, j_s = sched.mask_rate(t), sched.mask_rate(s)
    masked = x >= spec.d
    x0_hat = _categorical(guide.probs(x, t, k), u_pred)
    lam = np.where(x0_hat == x, 0.0, (j_t - j_s) / j_t)
    p_jump = -np.expm1(-lam)
    if j_s == 0.0:
        p_jump = np.where(masked, 1.0, p_jump)
    jump = u_jump < p_jump
    return np.where(jump, x0_hat, x)


def _run(step_kinds, denoiser, K, n, rng, *, timeline="linear", label=None, cfg=None,
         sched=LINEAR, gumbel=None, x_init=None, max_decode=None, keep_trajectory=False):
    spec, L = denoiser.spec, denoiser.length
    tl = timeline_points(K, timeline)
    guide = Guide(denoiser, label, cfg, K)
    # drawn unconditionally so every sampler consumes the stream identically
    x = initial_state(n, L, spec, rng)
    pinned = None
    if x_init is not None:
        x = np.broadcast_to(np.asarray(x_init, dtype=np.int64), (n, L)).copy()
        pinned = x < spec.d
    n_generate = (x >= spec.d).sum(axis=1)
    traj = [x.copy()] if keep_trajectory else []
    for k, t, s in tl.steps():
        kind = step_kinds(k)
        if kind == "rehash":
            x = rehash_step(x, t, s, guide, k, sched, spec, rng, max_decode=max_decode,
                            steps_after=K - k)
        elif kind == "dfm":
            x = dfm_step(x, t, s, guide, k, sched, spec, rng)
        else:
            x = mvtm_step(x, t, s, guide, k, gumbel or GumbelConfig(), sched, spec, rng,
                          n_generate=n_generate)
        if pinned is not None:
            x = np.where(pinned, x_init, x)
        if keep_trajectory:
            traj.append(x.copy())
    return x, traj


def _as_run(name, K, timeline, label, x, traj):
    return SampleRun(x, name, K, timeline, label, trajectory=traj)


def sample_rehash(denoiser, K, rng, n=1, *, timeline="linear", label=None, cfg=None,
                  sched=LINEAR, max_decode=None, x_init=None, keep_trajectory=False) -> SampleRun:
    """Rehash sampler from x_1 ~ U(masks) along ``timeline_points(K, timeline)``.

    ``max_decode=1`` with ``K >= L`` decodes one token per step, which makes the
    sampler an any-order autoregressive model and exact under an exact denoiser.
    """
    x, traj = _run(lambda k: "rehash", denoiser, K, n, rng, timeline=timeline, label=label,
                   cfg=cfg, sched=sched, x_init=x_init, max_decode=max_decode,
                   keep_trajectory=keep_trajectory)
    return _as_run("rehash", K, timeline, label, x, traj)


def sample_mvtm(denoiser, K, rng, n=1, *, gumbel=None, timeline="linear", label=None, cfg=None,
                sched=LINEAR, x_init=None, keep_trajectory=False) -> SampleRun:
    """Confidence-based predict/re-mask sampler starting from Mask(1)^L."""
    if x_init is None:
        x_init = np.full(denoiser.length, denoiser.spec.d)
    x, traj = _run(lambda k: "mvtm", denoiser, K, n, rng, timeline=timeline, label=label,
                   cfg=cfg, sched=sched, gumbel=gumbel or GumbelConfig(), x_init=x_init,
                   keep_trajectory=keep_trajectory)
    return _as_run("mvtm", K, timeline, label, x, traj)


def sample_dfm(denoiser, K, rng, n=1, *, timeline="linear", label=None, cfg=None,
               sched=LINEAR, x_init=None, keep_trajectory=False) -> SampleRun:
    x, traj = _run(lambda k: "dfm", denoiser, K, n, rng, timeline=timeline, label=label,
                   cfg=cfg, sched=sched, x_init=x_init, keep_trajectory=keep_trajectory)
    return _as_run("dfm", K, timeline, label, x, traj)


def default_dfm_steps(K: int) -> frozenset:
    """Middle and final steps."""
    return frozenset({math.ceil(K / 2), K})


def sample_hybrid(denoiser, K, rng, n=1, *, dfm_steps=None, timeline="linear", label=None,
                  cfg=None, sched=LINEAR, max_decode=None, x_init=None,
                  keep_trajectory=False) -> SampleRun:
    """Rehash trajectory with DFM refinement at the 1-based steps in ``dfm_steps``."""
    steps = default_dfm_steps(K) if dfm_steps is None else frozenset(dfm_steps)
    if not steps <= set(range(1, K + 1)):
        raise ContractError(f"DFM step indices must lie in 1..{K}")
    x, traj = _run(lambda k: "dfm" if k in steps else "rehash", denoiser, K, n, rng,
                   timeline=timeline, label=label, cfg=cfg, sched=sched, x_init=x_init,
                   max_decode=max_decode, keep_trajectory=keep_trajectory)
    return _as_run("hybrid", K, timeline, label, x, traj)


def sample_inpaint(x_partial, denoiser, K, rng, n=1, *, sampler="rehash", **kwargs) -> SampleRun:
    """Generate the masked positions of ``x_partial``; valid positions stay fixed."""
    if isinstance(x_partial, Sequence):
        x_partial = x_partial.to_array()
    x_partial = np.asarray(x_partial, dtype=np.int64)
    if x_partial.shape != (denoiser.length,):
        raise ContractError("x_partial must be a single sequence of the model length")
    fn = SAMPLER_FUNCS[sampler]
    return fn(denoiser, K, rng, n, x_init=x_partial, **kwargs)


SAMPLER_FUNCS = {
    "rehash": sample_rehash,
    "mvtm": sample_mvtm,
    "dfm": sample_dfm,
    "hybrid": sample_hybrid,
}


def chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    """Independent Philox stream for chunk ``chunk`` of a job seeded with ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk,))))


def generate(sampler: str, denoiser, K: int, n: int, seed: int, *, chunk: int = CHUNK,
             **kwargs) -> SampleRun:
    """Draw ``n`` samples in chunks with order-independent per-chunk streams."""
    if sampler not in SAMPLER_FUNCS:
        raise ContractError(f"unknown sampler {sampler!r}")
    fn = SAMPLER_FUNCS[sampler]
    parts = []
    for c, start in enumerate(range(0, n, chunk)):
        size = min(chunk, n - start)
        parts.append(fn(denoiser, K, chunk_rng(seed, c), size, **kwargs).samples)
    return SampleRun(np.concatenate(parts, axis=0), sampler, K, kwargs.get("timeline", "linear"),
                     kwargs.get("label"), seed)
