"""Denoisers: maps from a corrupted sequence (+ label) to per-position
distributions over the ``d`` valid tokens.

Inputs are flat-index arrays of shape ``(L,)`` or ``(N, L)``; outputs have shape
``(..., L, d)``. Mask mass is never predicted here; samplers inject it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import ToyDataset
from .kernels import NoSupportError
from .schedule import LINEAR, NoiseSchedule
from .vocab import ContractError, Sequence, VocabSpec

# floor for log(0) so that guidance arithmetic stays finite
LOG_FLOOR = -1e4


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _as_batch(x, spec: VocabSpec, length: int):
    if isinstance(x, Sequence):
        x = x.to_array()
    x = np.asarray(x, dtype=np.int64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != length:
        raise ContractError(f"expected sequences of length {length}, got shape {x.shape}")
    if (x2 < 0).any() or (x2 >= spec.size).any():
        raise ContractError("token index out of range for vocabulary")
    return x2, single


class Denoiser:
    """Common interface; subclasses set ``spec``, ``length``, ``n_classes``."""

    spec: VocabSpec
    length: int
    n_classes: int

    def predict(self, x, t: float, label=None) -> np.ndarray:
        return softmax(self.predict_logits(x, t, label))

    def predict_logits(self, x, t: float, label=None) -> np.ndarray:
        raise NotImplementedError

    def check_label(self, label):
        if label is not None and not (0 <= int(label) < self.n_classes):
            raise ContractError(f"unknown label {label!r}")


class ExactPosteriorDenoiser(Denoiser):
    """Bayes posterior marginals p(x_0^i = v | x_t, label) over a ToyDataset.

    The forward likelihood factors ``alpha_t`` (per unmasked position) and
    ``(1 - alpha_t)/m`` (per masked position) are shared by every candidate x_0,
    so the posterior is the prior restricted to examples agreeing with x_t on its
    unmasked positions, independent of ``t`` and of which mask indices appear.

    With ``strict=False``, a row inconsistent with every example falls back to the
    label's prior marginals at masked positions instead of raising.
    """

    def __init__(self, dataset: ToyDataset, sched: NoiseSchedule = LINEAR, strict: bool = True):
        self.dataset = dataset
        self.sched = sched
        self.strict = strict
        self.spec = dataset.spec
        self.length = dataset.length
        self.n_classes = dataset.n_classes
        self._cache = {}

    def _support(self, label):
        if label not in self._cache:
            seqs, w = self.dataset.select(label)
            keep = w > 0
            seqs, w = seqs[keep], w[keep]
            d, L = self.spec.d, self.length
            onehot = np.zeros((len(seqs), L * d))
            onehot[np.arange(len(seqs))[:, None], np.arange(L) * d + seqs] = 1.0
            self._cache[label] = (seqs, w, onehot)
        return self._cache[label]

    def predict(self, x, t: float = 0.5, label=None) -> np.ndarray:
        self.check_label(label)
        x2, single = _as_batch(x, self.spec, self.length)
        seqs, w, onehot = self._support(label)
        masked = x2 >= self.spec.d
        ok = np.ones((x2.shape[0], len(seqs)), dtype=bool)
        for i in range(self.length):
            ok &= masked[:, i, None] | (x2[:, i, None] == seqs[None, :, i])
        post = ok * w[None, :]
        total = post.sum(axis=1, keepdims=True)
        empty = total[:, 0] <= 0
        if empty.any():
            if self.strict:
                raise NoSupportError(
                    f"{int(empty.sum())} input(s) inconsistent with every example")
            post[empty] = w
            total[empty] = w.sum()
        p = (post / total) @ onehot
        p = p.reshape(x2.shape[0], self.length, self.spec.d)
        if empty.any():
            rows, cols = np.nonzero(empty[:, None] & ~masked)
            p[rows, cols] = 0.0
            p[rows, cols, x2[rows, cols]] = 1.0
        return p[0] if single else p

    def predict_logits(self, x, t: float = 0.5, label=None) -> np.ndarray:
        p = self.predict(x, t, label)
        with np.errstate(divide="ignore"):
            return np.maximum(np.log(p), LOG_FLOOR)


_MAGIC = b"RHDNPARM"
_HEADER = struct.Struct("<8sIIIIII")
PARAM_VERSION = 1


@dataclass(frozen=True, eq=False)
class LinearSoftmaxDenoiser(Denoiser):
    """Pairwise linear logits followed by a softmax.

    logits[i, v] = b[i, v] + C[label, i, v] + sum_j W[i, j, x^j, v]
    (+ t * a[i, v] when the optional time channel is on). Row ``n_classes`` of
    ``C`` is the null label.
    """

    spec: VocabSpec
    W: np.ndarray
    b: np.ndarray
    C: np.ndarray
    a: np.ndarray | None = None

    PARAM_NAMES = ("W", "b", "C", "a")

    def __post_init__(self):
        L, L2, V, d = self.W.shape
        if L != L2 or V != self.spec.size or d != self.spec.d:
            raise ContractError(f"W has shape {self.W.shape}, inconsistent with {self.spec}")
        if self.b.shape != (L, d) or self.C.ndim != 3 or self.C.shape[1:] != (L, d):
            raise ContractError("b / C shapes inconsistent with W")
        if self.a is not None and self.a.shape != (L, d):
            raise ContractError("a must have shape (L, d)")
        for name in self.PARAM_NAMES:
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=np.float64)
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, spec: VocabSpec, length: int, n_classes: int = 1, time_channel: bool = False):
        L, V, d = length, spec.size, spec.d
        return cls(spec, np.zeros((L, L, V, d)), np.zeros((L, d)),
                   np.zeros((n_classes + 1, L, d)), np.zeros((L, d)) if time_channel else None)

    @property
    def length(self) -> int:
        return self.W.shape[0]

    @property
    def n_classes(self) -> int:
        return self.C.shape[0] - 1

    @property
    def time_channel(self) -> bool:
        return self.a is not None

    @property
    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in self.PARAM_NAMES if getattr(self, n) is not None)

    def params(self) -> dict:
        return {n: getattr(self, n) for n in self.PARAM_NAMES if getattr(self, n) is not None}

    def with_params(self, **arrays) -> "LinearSoftmaxDenoiser":
        return replace(self, **arrays)

    def label_rows(self, labels, n: int) -> np.ndarray:
        """Row indices into ``C`` for a scalar or per-example label."""
        if labels is None or np.isscalar(labels):
            self.check_label(labels)
            return np.full(n, self.n_classes if labels is None else int(labels))
        rows = np.array([self.n_classes if lab is None else int(lab) for lab in labels])
        if rows.shape != (n,) or (rows < 0).any() or (rows > self.n_classes).any():
            raise ContractError("per-example labels must be known classes or None")
        return rows

    def _wmat(self):
        L, V, d = self.length, self.spec.size, self.spec.d
        return self.W.transpose(1, 2, 0, 3).reshape(L * V, L * d)

    def predict_logits(self, x, t: float = 0.5, label=None) -> np.ndarray:
        x2, single = _as_batch(x, self.spec, self.length)
        n, L, V, d = x2.shape[0], self.length, self.spec.size, self.spec.d
        wmat = self._wmat()
        acc = np.zeros((n, L * d))
        for j in range(L):
            acc += wmat[j * V + x2[:, j]]
        out = acc.reshape(n, L, d) + self.b + self.C[self.label_rows(label, n)]
        if self.a is not None:
            out = out + np.reshape(np.asarray(t, dtype=np.float64), (-1, 1, 1)) * self.a
        return out[0] if single else out

    def backward(self, x, t, label, dlogits: np.ndarray) -> dict:
        """Parameter gradients given d(loss)/d(logits) of shape ``(N, L, d)``."""
        x2, _ = _as_batch(x, self.spec, self.length)
        n, L, V, d = x2.shape[0], self.length, self.spec.size, self.spec.d
        onehot = np.zeros((n, L * V))
        onehot[np.arange(n)[:, None], np.arange(L) * V + x2] = 1.0
        gW = (onehot.T @ dlogits.reshape(n, L * d)).reshape(L, V, L, d).transpose(2, 0, 1, 3)
        gC = np.zeros_like(self.C)
        np.add.at(gC, self.label_rows(label, n), dlogits)
        grads = {"W": gW, "b": dlogits.sum(axis=0), "C": gC}
        if self.a is not None:
            tt = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
            grads["a"] = np.einsum("n,nld->ld", tt, dlogits)
        return grads

    def save(self, path) -> None:
        header = _HEADER.pack(_MAGIC, PARAM_VERSION, self.length, self.spec.d, self.spec.m,
                              self.n_classes, int(self.time_channel))
        with open(path, "wb") as fh:
            fh.write(header)
            for arr in self.params().values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "LinearSoftmaxDenoiser":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise ValueError(f"{path}: truncated parameter file")
        magic, version, L, d, m, n_classes, tflag = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a denoiser parameter file")
        if version != PARAM_VERSION:
            raise ValueError(f"{path}: unsupported parameter version {version}")
        spec = VocabSpec(d, m)
        shapes = [(L, L, d + m, d), (L, d), (n_classes + 1, L, d)] + ([(L, d)] if tflag else [])
        need = sum(int(np.prod(s)) for s in shapes) * 8
        if len(raw) - _HEADER.size != need:
            raise ValueError(f"{path}: expected {need} parameter bytes, got {len(raw) - _HEADER.size}")
        arrays, off = [], _HEADER.size
        for shape in shapes:
            size = int(np.prod(shape)) * 8
            arrays.append(np.frombuffer(raw, dtype="<f8", count=size // 8, offset=off).reshape(shape))
            off += size
        return cls(spec, *arrays)
