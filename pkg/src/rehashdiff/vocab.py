"""Extended vocabulary with ``d`` valid codes and ``m`` interchangeable mask indices.

Domain indices are 1-based (``Valid(1)..Valid(d)``, ``Mask(1)..Mask(m)``). The flat
layout used by every array in the package is 0-based with valid codes first::

    [0, d)      valid codes
    [d, d + m)  mask indices
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence as _Seq, Union

import numpy as np


class ContractError(ValueError):
    """Raised when an input violates an operation's precondition."""


@dataclass(frozen=True)
class VocabSpec:
    d: int
    m: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ContractError(f"d must be an integer >= 1, got {self.d!r}")
        if int(self.m) != self.m or self.m < 1:
            raise ContractError(f"m must be an integer >= 1, got {self.m!r}")

    @property
    def size(self) -> int:
        return self.d + self.m

    def is_mask(self, flat):
        return np.asarray(flat) >= self.d


@dataclass(frozen=True)
class Valid:
    i: int

    def __repr__(self):
        return f"Valid({self.i})"


@dataclass(frozen=True)
class Mask:
    j: int

    def __repr__(self):
        return f"Mask({self.j})"


Token = Union[Valid, Mask]


def flat_index(tok: Token, spec: VocabSpec) -> int:
    if isinstance(tok, Valid):
        if not 1 <= tok.i <= spec.d:
            raise ContractError(f"{tok!r} out of range for d={spec.d}")
        return tok.i - 1
    if isinstance(tok, Mask):
        if not 1 <= tok.j <= spec.m:
            raise ContractError(f"{tok!r} out of range for m={spec.m}")
        return spec.d + tok.j - 1
    raise ContractError(f"not a token: {tok!r}")


def unflat_index(k: int, spec: VocabSpec) -> Token:
    k = int(k)
    if not 0 <= k < spec.size:
        raise ContractError(f"flat index {k} out of range [0, {spec.size})")
    if k < spec.d:
        return Valid(k + 1)
    return Mask(k - spec.d + 1)


@dataclass(frozen=True)
class Sequence:
    """Immutable token sequence stored as flat indices."""

    spec: VocabSpec
    flat: tuple

    def __post_init__(self):
        flat = tuple(int(k) for k in self.flat)
        if len(flat) < 1:
            raise ContractError("sequence length must be >= 1")
        for k in flat:
            if not 0 <= k < self.spec.size:
                raise ContractError(f"flat index {k} out of range for {self.spec}")
        object.__setattr__(self, "flat", flat)

    @classmethod
    def from_tokens(cls, tokens: Iterable[Token], spec: VocabSpec) -> "Sequence":
        return cls(spec, tuple(flat_index(t, spec) for t in tokens))

    @property
    def tokens(self) -> list:
        return [unflat_index(k, self.spec) for k in self.flat]

    def __len__(self):
        return len(self.flat)

    def to_array(self) -> np.ndarray:
        return np.asarray(self.flat, dtype=np.int64)

    def is_clean(self) -> bool:
        return all(k < self.spec.d for k in self.flat)


@dataclass(frozen=True)
class LabeledExample:
    x0: Sequence
    label: int | None = None
    weight: float = 1.0

    def __post_init__(self):
        if not self.x0.is_clean():
            raise ContractError("x0 must contain only valid tokens")
        if not self.weight >= 0:
            raise ContractError(f"weight must be >= 0, got {self.weight}")


def mask_bitmap(x: Union[Sequence, _Seq[Token], np.ndarray], spec: VocabSpec | None = None):
    """Per-position mask indicator.

    Accepts a :class:`Sequence`, a list of tokens, or a flat-index array (which
    needs ``spec``). Arrays of any batch shape are supported.
    """
    if isinstance(x, Sequence):
        return [k >= x.spec.d for k in x.flat]
    if isinstance(x, np.ndarray):
        if spec is None:
            raise ContractError("spec is required for flat-index arrays")
        return x >= spec.d
    return [isinstance(tok, Mask) for tok in x]
