"""Spatial and spectral dictionaries: random initializations and fixed transforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("random_gaussian", "haar_2d", "dct_1d", "identity")


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class DictionarySpec:
    """What to build.

    ``rows`` x ``cols`` is the shape of the returned matrix. For ``haar_2d``
    the matrix acts on column-major vectorized ``side x side`` images, so
    ``rows == cols == side**2`` with ``side`` a power of two.
    """

    kind: str
    rows: int
    cols: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dictionary kind {self.kind!r}; expected one of {KINDS}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"dictionary dimensions must be positive, got {self.rows}x{self.cols}")
        if self.kind in ("identity", "dct_1d", "haar_2d") and self.rows != self.cols:
            raise ValueError(f"{self.kind} requires rows == cols, got {self.rows}x{self.cols}")
        if self.kind == "haar_2d":
            side = int(round(np.sqrt(self.rows)))
            if side * side != self.rows or not _is_pow2(side):
                raise ValueError(
                    f"haar_2d requires rows == side**2 with side a power of two, got rows={self.rows}"
                )


def haar_1d(n: int) -> np.ndarray:
    """Orthonormal multilevel Haar synthesis matrix; column 0 is the DC atom."""
    if not _is_pow2(n):
        raise ValueError(f"Haar length must be a power of two, got {n}")
    # analysis matrix built coarse-to-fine, synthesis is its transpose
    W = np.ones((1, 1))
    while W.shape[0] < n:
        m = W.shape[0]
        avg = np.kron(W, [1.0, 1.0])
        det = np.kron(np.eye(m), [1.0, -1.0])
        W = np.vstack([avg, det]) / np.sqrt(2.0)
    return W.T


def dct_1d(n: int) -> np.ndarray:
    """Orthonormal DCT-II synthesis matrix (columns are the cosine atoms)."""
    k = np.arange(n)[None, :]
    t = np.arange(n)[:, None]
    C = np.cos(np.pi * (t + 0.5) * k / n) * np.sqrt(2.0 / n)
    C[:, 0] = 1.0 / np.sqrt(n)
    return C


def haar_2d(side: int) -> np.ndarray:
    """Separable 2-D Haar synthesis for column-major vectorized ``side x side`` images."""
    H = haar_1d(side)
    return np.kron(H, H)


def build(spec: DictionarySpec) -> np.ndarray:
    if spec.kind == "identity":
        return np.eye(spec.rows)
    if spec.kind == "dct_1d":
        return dct_1d(spec.rows)
    if spec.kind == "haar_2d":
        return haar_2d(int(round(np.sqrt(spec.rows))))
    rng = np.random.default_rng(spec.seed)
    D = rng.standard_normal((spec.rows, spec.cols))
    return D / np.linalg.norm(D, axis=0, keepdims=True)


def spatial_transform(rows: int, cols: int) -> np.ndarray:
    """Fixed orthonormal spatial basis for a ``rows x cols`` band.

    2-D Haar when the band is square with a power-of-two side, otherwise the
    separable 2-D DCT.
    """
    if rows == cols and _is_pow2(rows):
        return build(DictionarySpec("haar_2d", rows * rows, rows * rows))
    return np.kron(dct_1d(cols), dct_1d(rows))


def spectral_transform(bands: int) -> np.ndarray:
    """Fixed spectral basis arranged as a ``bands x bands`` right factor (atoms in rows)."""
    return dct_1d(bands).T
