"""Grayscale montage export (binary PGM, P5)."""

from __future__ import annotations

import math

import numpy as np

from .vocab import ContractError, VocabSpec


def grid_image(sequences, spec: VocabSpec, side: int) -> np.ndarray:
    """Tile ``n`` sequences of length ``side**2`` into a square uint8 montage.

    Gray level is ``round(255 * flat / (d + m - 1))``, so mask tokens land in the
    top band. Unused tiles stay black.
    """
    seqs = np.atleast_2d(np.asarray(sequences, dtype=np.int64))
    if seqs.shape[1] != side * side:
        raise ContractError(f"sequence length {seqs.shape[1]} is not side**2 = {side * side}")
    n = seqs.shape[0]
    per_row = max(1, math.ceil(math.sqrt(n)))
    width = side * per_row
    img = np.zeros((width, width), dtype=np.uint8)
    top = spec.size - 1
    gray = np.rint(255.0 * seqs / top).astype(np.uint8) if top > 0 else np.zeros_like(seqs, dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, per_row)
        img[r * side:(r + 1) * side, c * side:(c + 1) * side] = gray[k].reshape(side, side)
    return img


def export_grid(sequences, spec: VocabSpec, side: int, path) -> np.ndarray:
    """Write the montage as ``P5 W H 255`` followed by raw bytes; returns the image."""
    L = np.atleast_2d(np.asarray(sequences)).shape[1]
    if math.isqrt(L) ** 2 != L:
        raise ContractError(f"sequence length {L} is not a perfect square")
    img = grid_image(sequences, spec, side)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5 {w} {h} 255\n".encode("ascii"))
        fh.write(img.tobytes())
    return img


def read_pgm(path) -> np.ndarray:
    raw = open(path, "rb").read()
    header, _, body = raw.partition(b"\n")
    magic, w, h, maxval = header.split()
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 image")
    return np.frombuffer(body, dtype=np.uint8).reshape(int(h), int(w))
