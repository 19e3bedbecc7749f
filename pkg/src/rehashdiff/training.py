"""Time-weighted masked cross-entropy objectives and a small training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import ToyDataset
from .denoiser import LinearSoftmaxDenoiser, log_softmax
from .kernels import corrupt
from .schedule import LINEAR, NoiseSchedule
from .vocab import ContractError

log = logging.getLogger(__name__)

LOSS_KINDS = ("ddm-linear", "ddm-general", "mvtm")
OPTIMIZERS = ("adam", "sgd")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-2
    optimizer: str = "adam"
    drop_prob: float = 0.1
    t_min: float = 1e-3
    loss: str = "ddm-linear"
    seed: int = 0
    log_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    time_channel: bool = False

    def __post_init__(self):
        if not 0.0 < self.t_min < 1.0:
            raise ContractError("t_min must lie in (0, 1)")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ContractError("drop_prob must lie in [0, 1]")
        if self.loss not in LOSS_KINDS:
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ContractError("steps >= 0, batch_size >= 1, log_every >= 1 required")


@dataclass
class LossReport:
    loss: float
    grads: dict
    n_masked: int


@dataclass
class CorruptedBatch:
    x0: np.ndarray
    xt: np.ndarray
    t: np.ndarray
    labels: list


def corrupt_batch(x0, labels, sched: NoiseSchedule, rng, spec, *, t_min=1e-3,
                  drop_prob=0.1, t=None) -> CorruptedBatch:
    """Draw t ~ U(t_min, 1), corrupt, then drop labels to the null label."""
    x0 = np.asarray(x0, dtype=np.int64)
    n = x0.shape[0]
    if t is None:
        t = rng.uniform(t_min, 1.0, size=n)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    xt = corrupt(x0, t, sched, spec, rng)
    drop = rng.random(n) < drop_prob
    if labels is None:
        labels = [None] * n
    labels = [None if dr else lab for lab, dr in zip(labels, drop)]
    return CorruptedBatch(x0, xt, t, labels)


def masked_cross_entropy(denoiser: LinearSoftmaxDenoiser, batch: CorruptedBatch,
                         weights) -> LossReport:
    """Batch mean of weight_n * sum over masked i of -log p(x0^i | x_t).

    The gradient w.r.t. the logits at a masked position is
    ``weight_n / N * (softmax - onehot(x0^i))``.
    """
    n, d = batch.x0.shape[0], denoiser.spec.d
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), (n,))
    logits = denoiser.predict_logits(batch.xt, batch.t, batch.labels)
    logp = log_softmax(logits)
    masked = batch.xt >= d
    nll = -np.take_along_axis(logp, batch.x0[..., None], axis=-1)[..., 0]
    per_example = (nll * masked).sum(axis=1)
    loss = float((weights * per_example).sum() / n)
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, batch.x0[..., None],
                      np.take_along_axis(dlogits, batch.x0[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= (masked * (weights / n)[:, None])[..., None]
    grads = denoiser.backward(batch.xt, batch.t, batch.labels, dlogits)
    return LossReport(loss, grads, int(masked.sum()))


def loss_weights(kind: str, t: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    if kind == "ddm-linear":
        return 1.0 / t
    if kind == "ddm-general":
        return np.array([sched.loss_weight(float(ti)) for ti in t])
    if kind == "mvtm":
        return np.ones_like(t)
    raise ContractError(f"unknown loss {kind!r}")


def _loss(kind, denoiser, x0, labels, sched, rng, t_min, drop_prob, t):
    batch = corrupt_batch(x0, labels, sched, rng, denoiser.spec, t_min=t_min,
                          drop_prob=drop_prob, t=t)
    return masked_cross_entropy(denoiser, batch, loss_weights(kind, batch.t, sched))


def ddm_linear_loss(denoiser, x0, labels, sched=LINEAR, rng=None, *, t_min=1e-3,
                    drop_prob=0.1, t=None) -> LossReport:
    """Masked cross-entropy weighted by 1/t (linear-schedule objective)."""
    if sched.kind != "linear":
        raise ContractError("ddm_linear_loss requires the linear schedule")
    return _loss("ddm-linear", denoiser, x0, labels, sched, rng, t_min, drop_prob, t)


def ddm_general_loss(denoiser, x0, labels, sched=LINEAR, rng=None, *, t_min=1e-3,
                     drop_prob=0.1, t=None) -> LossReport:
    """Masked cross-entropy weighted by -alpha'(t) / (1 - alpha(t))."""
    return _loss("ddm-general", denoiser, x0, labels, sched, rng, t_min, drop_prob, t)


def mvtm_loss(denoiser, x0, labels, sched=LINEAR, rng=None, *, t_min=1e-3,
              drop_prob=0.1, t=None) -> LossReport:
    """Unweighted masked cross-entropy."""
    return _loss("mvtm", denoiser, x0, labels, sched, rng, t_min, drop_prob, t)


def _flatten(params: dict) -> np.ndarray:
    return np.concatenate([np.ravel(v) for v in params.values()])


def _unflatten(vec: np.ndarray, like: dict) -> dict:
    out, off = {}, 0
    for name, arr in like.items():
        out[name] = vec[off:off + arr.size].reshape(arr.shape)
        off += arr.size
    return out


def reference_loss(params: dict, spec, batch: CorruptedBatch, weights, label_rows,
                   dtype=np.longdouble) -> float:
    """Masked cross-entropy evaluated directly from raw parameters in ``dtype``.

    Independent of the denoiser's own forward pass; the finite-difference side
    of :func:`grad_check` uses it in extended precision so that roundoff of the
    loss stays well below ``h`` times the error floor.
    """
    W = np.asarray(params["W"], dtype=dtype)
    xt, x0 = batch.xt, batch.x0
    n, L = xt.shape
    logits = np.asarray(params["b"], dtype=dtype)[None] + np.asarray(params["C"], dtype=dtype)[label_rows]
    for j in range(L):
        logits = logits + W[:, j, xt[:, j], :].transpose(1, 0, 2)
    if "a" in params:
        logits = logits + np.asarray(batch.t, dtype=dtype)[:, None, None] * np.asarray(params["a"], dtype=dtype)
    top = logits.max(axis=-1, keepdims=True)
    lse = top[..., 0] + np.log(np.exp(logits - top).sum(axis=-1))
    nll = lse - np.take_along_axis(logits, x0[..., None], axis=-1)[..., 0]
    masked = xt >= spec.d
    w = np.asarray(weights, dtype=dtype)
    return (w * (nll * masked).sum(axis=1)).sum() / n


def grad_check(denoiser: LinearSoftmaxDenoiser, x0, labels, kind: str = "ddm-linear",
               sched: NoiseSchedule = LINEAR, rng=None, *, n_checks: int = 200,
               h: float = 1e-5, t_min: float = 1e-3, drop_prob: float = 0.1) -> float:
    """Max relative error between analytic and central-difference gradients.

    The corruption is drawn once and held fixed; ``n_checks`` parameters are
    chosen at random. Error is ``|analytic - numeric| / (|numeric| + 1e-8)``.
    Numeric derivatives come from :func:`reference_loss` in extended precision.
    """
    if denoiser.n_params > 100_000:
        raise ContractError("grad_check is limited to <= 1e5 parameters")
    rng = np.random.default_rng() if rng is None else rng
    batch = corrupt_batch(x0, labels, sched, rng, denoiser.spec, t_min=t_min, drop_prob=drop_prob)
    weights = loss_weights(kind, batch.t, sched)
    rows = denoiser.label_rows(batch.labels, batch.x0.shape[0])
    like = denoiser.params()
    theta = _flatten(like).astype(np.longdouble)
    analytic = _flatten(masked_cross_entropy(denoiser, batch, weights).grads)
    picks = rng.choice(theta.size, size=min(n_checks, theta.size), replace=False)
    worst = 0.0
    for k in picks:
        vals = []
        for sign in (1.0, -1.0):
            probe = theta.copy()
            probe[k] += sign * h
            vals.append(reference_loss(_unflatten(probe, like), denoiser.spec, batch, weights, rows))
        numeric = float((vals[0] - vals[1]) / (2 * h))
        worst = max(worst, abs(analytic[k] - numeric) / (abs(numeric) + 1e-8))
    return worst


@dataclass
class TrainResult:
    denoiser: LinearSoftmaxDenoiser
    best: LinearSoftmaxDenoiser
    log: list = field(default_factory=list)
    final_loss: float = float("nan")
    best_loss: float = float("nan")


class _Adam:
    def __init__(self, cfg: TrainConfig, like: dict):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in like.items()}
        self.v = {k: np.zeros_like(v) for k, v in like.items()}
        self.k = 0

    def step(self, params: dict, grads: dict) -> dict:
        c = self.cfg
        self.k += 1
        out = {}
        for name, p in params.items():
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            mhat = self.m[name] / (1 - c.beta1 ** self.k)
            vhat = self.v[name] / (1 - c.beta2 ** self.k)
            out[name] = p - c.lr * mhat / (np.sqrt(vhat) + c.eps)
        return out


def train(config: TrainConfig, dataset: ToyDataset, sched: NoiseSchedule = LINEAR,
          init: LinearSoftmaxDenoiser | None = None) -> TrainResult:
    """Fit a LinearSoftmaxDenoiser by minibatch optimization.

    Deterministic given ``config.seed``. The reported ``final_loss`` is the mean
    loss over the last ``log_every`` steps; ``best`` is the snapshot at the end of
    the logging window with the lowest mean loss.
    """
    if len(dataset) == 0:
        raise ContractError("dataset must be nonempty")
    model = init if init is not None else LinearSoftmaxDenoiser.zeros(
        dataset.spec, dataset.length, dataset.n_classes, config.time_channel)
    result = TrainResult(model, model)
    if config.steps == 0:
        return result
    rng = np.random.default_rng(config.seed)
    probs = dataset.weights / dataset.weights.sum()
    params = model.params()
    adam = _Adam(config, params) if config.optimizer == "adam" else None
    window, start = [], time.perf_counter()
    best = float("inf")
    for step in range(1, config.steps + 1):
        idx = rng.choice(len(dataset), size=config.batch_size, p=probs)
        labels = [dataset.labels[i] for i in idx]
        report = _loss(config.loss, model, dataset.sequences[idx], labels, sched, rng,
                       config.t_min, config.drop_prob, None)
        if not np.isfinite(report.loss):
            raise TrainingDiverged(f"loss became {report.loss} at step {step}")
        if adam is not None:
            params = adam.step(params, report.grads)
        else:
            params = {k: v - config.lr * report.grads[k] for k, v in params.items()}
        model = model.with_params(**params)
        window.append(report.loss)
        if step % config.log_every == 0 or step == config.steps:
            mean = float(np.mean(window))
            result.log.append((step, mean, time.perf_counter() - start))
            log.debug("step %d loss %.5f", step, mean)
            if mean < best:
                best, result.best = mean, model
            result.final_loss = mean
            window = []
    result.denoiser = model
    result.best_loss = best
    return result
