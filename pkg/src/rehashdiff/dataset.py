"""Synthetic labeled token datasets with exactly known distributions."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .vocab import ContractError, LabeledExample, Sequence, VocabSpec

FORMAT_VERSION = 1
_MAGIC = "#rehashdiff-dataset"
NULL_LABEL = "~"


class DatasetFormatError(ValueError):
    pass


class EmptyDatasetError(DatasetFormatError):
    pass


@dataclass(frozen=True, eq=False)
class ToyDataset:
    """Weighted set of labeled clean sequences.

    ``sequences`` is an ``(S, L)`` array of flat indices, ``labels`` holds class
    ids in ``[0, n_classes)`` or ``None``. ``exact`` is False when the support was
    sampled rather than enumerated.
    """

    spec: VocabSpec
    sequences: np.ndarray
    labels: tuple
    weights: np.ndarray
    n_classes: int = 1
    exact: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        seqs = np.asarray(self.sequences, dtype=np.int64)
        if seqs.ndim != 2 or seqs.shape[0] == 0:
            raise EmptyDatasetError("dataset has no sequences")
        w = np.asarray(self.weights, dtype=np.float64)
        labels = tuple(None if lab is None else int(lab) for lab in self.labels)
        if w.shape != (seqs.shape[0],) or len(labels) != seqs.shape[0]:
            raise ContractError("sequences, labels and weights must align")
        if (seqs < 0).any() or (seqs >= self.spec.d).any():
            raise ContractError("dataset sequences must be all-valid")
        if (w < 0).any() or not w.sum() > 0:
            raise ContractError("weights must be nonnegative with a positive total")
        for lab in labels:
            if lab is not None and not 0 <= lab < self.n_classes:
                raise ContractError(f"label {lab} not in class list")
        seqs.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "sequences", seqs)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "labels", labels)

    @property
    def length(self) -> int:
        return self.sequences.shape[1]

    @property
    def classes(self) -> tuple:
        return tuple(range(self.n_classes))

    def __len__(self):
        return self.sequences.shape[0]

    @property
    def examples(self) -> list:
        return [
            LabeledExample(Sequence(self.spec, tuple(row)), lab, float(w))
            for row, lab, w in zip(self.sequences, self.labels, self.weights)
        ]

    def normalized(self) -> "ToyDataset":
        return replace(self, weights=self.weights / self.weights.sum())

    def with_capacity(self, m: int) -> "ToyDataset":
        """Same data under a vocabulary with noise capacity ``m``."""
        return replace(self, spec=VocabSpec(self.spec.d, m))

    def select(self, label=None):
        """Support rows and weights for ``label`` (``None`` marginalizes labels)."""
        if label is None:
            return self.sequences, self.weights
        if not 0 <= int(label) < self.n_classes:
            raise ContractError(f"unknown label {label!r}")
        keep = np.array([lab == label for lab in self.labels])
        return self.sequences[keep], self.weights[keep]

    def distribution(self, label=None) -> dict:
        """Exact distribution ``{flat tuple: probability}`` for ``label``."""
        seqs, w = self.select(label)
        out: dict = {}
        for row, wi in zip(seqs, w):
            key = tuple(int(k) for k in row)
            out[key] = out.get(key, 0.0) + float(wi)
        total = sum(out.values())
        if total <= 0:
            raise ContractError(f"no mass for label {label!r}")
        return {k: v / total for k, v in out.items()}

    def structurally_equal(self, other: "ToyDataset") -> bool:
        return (
            self.spec == other.spec
            and self.n_classes == other.n_classes
            and self.labels == other.labels
            and np.array_equal(self.sequences, other.sequences)
            and np.array_equal(self.weights, other.weights)
        )


def _stripe_colorings(n: int, d: int):
    """Color sequences of length n over d colors with adjacent stripes differing."""
    for first in range(d):
        for rest in itertools.product(range(d - 1), repeat=n - 1):
            cols = [first]
            for r in rest:
                cols.append(r if r < cols[-1] else r + 1)
            yield cols


_GRID_KINDS = ("rows", "cols", "diag", "antidiag")


def _grid(kind, side, colors):
    r, c = np.indices((side, side))
    if kind == "rows":
        idx = r
    elif kind == "cols":
        idx = c
    elif kind == "diag":
        idx = r + c
    else:
        idx = c - r + side - 1
    return np.asarray(colors)[idx].reshape(-1)


def generate_grid_patterns(side: int, d: int, classes: int = 2, rng=None, m: int = 1,
                           max_per_class: int | None = None) -> ToyDataset:
    """Class-conditional striped grids flattened row-major (L = side**2).

    Class 0 has horizontal stripes, class 1 vertical, 2 and 3 the two diagonal
    orientations. Adjacent stripes always differ in color. Checkerboards are both
    diagonal and antidiagonal; a pattern belongs to the first class producing it,
    so every sequence has a unique class. Patterns within a class carry equal weight; with ``rng`` and
    ``max_per_class`` a random subset of each class is kept.
    """
    if side < 2 or d < 2:
        raise ContractError("need side >= 2 and d >= 2")
    if not 1 <= classes <= len(_GRID_KINDS):
        raise ContractError(f"classes must be in 1..{len(_GRID_KINDS)}")
    rows, labels, seen = [], [], set()
    for label, kind in enumerate(_GRID_KINDS[:classes]):
        n_stripes = side if kind in ("rows", "cols") else 2 * side - 1
        family = []
        for cols in _stripe_colorings(n_stripes, d):
            grid = _grid(kind, side, cols)
            if tuple(grid) not in seen:
                seen.add(tuple(grid))
                family.append(grid)
        if max_per_class is not None and len(family) > max_per_class:
            if rng is None:
                rng = np.random.default_rng(0)
            pick = np.sort(rng.choice(len(family), size=max_per_class, replace=False))
            family = [family[i] for i in pick]
        rows.extend(family)
        labels.extend([label] * len(family))
    weights = np.full(len(rows), 1.0 / len(rows))
    return ToyDataset(VocabSpec(d, m), np.array(rows), tuple(labels), weights,
                      n_classes=classes, meta={"kind": "grid", "side": side})


def generate_markov(L: int, d: int, rows, rng=None, m: int = 1, initial=None,
                    enumerate_limit: int = 10_000, n_samples: int = 10_000) -> ToyDataset:
    """Order-1 Markov chain dataset.

    The first token is drawn from ``initial``; by default it is ``rows[0]``, as if
    the chain were preceded by token 0. When ``d**L`` fits under
    ``enumerate_limit`` the support is enumerated with exact chain probabilities;
    otherwise ``n_samples`` draws form an empirical (non-exact) dataset.
    """
    P = np.asarray(rows, dtype=np.float64)
    if P.shape != (d, d) or (P < 0).any() or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
        raise ContractError("transition rows must be a stochastic d x d matrix")
    p0 = P[0] if initial is None else np.asarray(initial, dtype=np.float64)
    if p0.shape != (d,) or (p0 < 0).any() or not np.isclose(p0.sum(), 1.0, atol=1e-12):
        raise ContractError("initial distribution must be stochastic")
    spec = VocabSpec(d, m)
    if d ** L <= enumerate_limit:
        seqs, weights = [], []
        for seq in itertools.product(range(d), repeat=L):
            w = p0[seq[0]]
            for a, b in zip(seq, seq[1:]):
                w *= P[a, b]
            if w > 0:
                seqs.append(seq)
                weights.append(w)
        weights = np.array(weights)
        return ToyDataset(spec, np.array(seqs), (0,) * len(seqs), weights / weights.sum(),
                          meta={"kind": "markov"})
    if rng is None:
        rng = np.random.default_rng(0)
    out = np.empty((n_samples, L), dtype=np.int64)
    out[:, 0] = rng.choice(d, size=n_samples, p=p0)
    cum = np.cumsum(P, axis=1)
    for i in range(1, L):
        u = rng.random(n_samples)
        out[:, i] = np.minimum((u[:, None] > cum[out[:, i - 1]]).sum(axis=1), d - 1)
    uniq, counts = np.unique(out, axis=0, return_counts=True)
    return ToyDataset(spec, uniq, (0,) * len(uniq), counts / counts.sum(), exact=False,
                      meta={"kind": "markov"})


def save(dataset: ToyDataset, path) -> None:
    lines = [
        f"{_MAGIC} version={FORMAT_VERSION} d={dataset.spec.d} m={dataset.spec.m} "
        f"L={dataset.length} classes={dataset.n_classes} exact={int(dataset.exact)}"
    ]
    for row, lab, w in zip(dataset.sequences, dataset.labels, dataset.weights):
        label = NULL_LABEL if lab is None else str(lab)
        lines.append(f"{label} {float(w)!r} {','.join(str(int(k)) for k in row)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _parse_header(line: str) -> dict:
    parts = line.split()
    if not parts or parts[0] != _MAGIC:
        raise DatasetFormatError("line 1: missing dataset header")
    fields = {}
    for tok in parts[1:]:
        key, _, val = tok.partition("=")
        try:
            fields[key] = int(val)
        except ValueError as exc:
            raise DatasetFormatError(f"line 1: bad header field {tok!r}") from exc
    for key in ("version", "d", "m", "L", "classes"):
        if key not in fields:
            raise DatasetFormatError(f"line 1: header lacks {key}")
    if fields["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {fields['version']}")
    return fields


def load(path, spec: VocabSpec | None = None) -> ToyDataset:
    """Read a dataset; ``spec`` (if given) must match the header."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise EmptyDatasetError(f"{path}: empty dataset file")
    hdr = _parse_header(lines[0])
    file_spec = VocabSpec(hdr["d"], hdr["m"])
    if spec is not None and spec != file_spec:
        raise DatasetFormatError(f"header spec {file_spec} does not match expected {spec}")
    seqs, labels, weights = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            label = None if parts[0] == NULL_LABEL else int(parts[0])
            weight = float(parts[1])
            row = [int(k) for k in parts[2].split(",")]
            if len(parts) != 3:
                raise ValueError("expected 3 fields")
        except (ValueError, IndexError) as exc:
            raise DatasetFormatError(f"{path}:{lineno}: malformed record: {exc}") from exc
        if len(row) != hdr["L"]:
            raise DatasetFormatError(f"{path}:{lineno}: expected length {hdr['L']}, got {len(row)}")
        seqs.append(row)
        labels.append(label)
        weights.append(weight)
    if not seqs:
        raise EmptyDatasetError(f"{path}: no records")
    try:
        return ToyDataset(file_spec, np.array(seqs), tuple(labels), np.array(weights),
                          n_classes=hdr["classes"], exact=bool(hdr.get("exact", 1)))
    except ContractError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
