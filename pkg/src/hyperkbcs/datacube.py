"""Hyperspectral datacubes: matricization, impulse corruption, PSNR, synthesis and I/O.

A cube is stored as a ``(rows, cols, bands)`` array. Its band matrix has one
column per band, each column being the column-major vectorization of that
band, so ``matricize`` is just a Fortran-order reshape.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"HSCUBE01"
_HEADER = struct.Struct("<8sIII")
NOISE_KINDS = ("random_valued", "salt_and_pepper")
PSNR_CAP = 120.0


class CubeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class HyperCube:
    """A ``rows x cols x bands`` datacube with finite intensities in ``[0, 1]``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"cube data must be a non-empty 3-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("cube contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError(
                f"cube values must lie in [0, 1], got [{data.min():.6g}, {data.max():.6g}]"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @classmethod
    def normalized(cls, data) -> "HyperCube":
        """Affinely rescale arbitrary finite data into ``[0, 1]``; constant data maps to 0."""
        data = np.asarray(data, dtype=np.float64)
        return cls(_rescale(data)[0])

    def band(self, j: int) -> np.ndarray:
        return self.data[:, :, j]


@dataclass(frozen=True)
class NoiseSpec:
    fraction: float
    kind: str = "random_valued"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"noise fraction must lie in [0, 1], got {self.fraction}")
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")


@dataclass(frozen=True)
class KroneckerModel:
    """Generating model of a synthetic cube.

    ``scale * D1 @ Z @ D2 + offset`` is the band matrix of the cube.
    """

    D1: np.ndarray
    Z: np.ndarray
    D2: np.ndarray
    scale: float = 1.0
    offset: float = 0.0

    def reconstruct(self) -> np.ndarray:
        return self.scale * (self.D1 @ self.Z @ self.D2) + self.offset

    def folded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact factors ``(D1, Z, D2)`` of the rescaled cube.

        The offset is absorbed by one extra constant atom on each side, so
        ``D1 @ Z @ D2`` reproduces ``reconstruct()`` up to rounding.
        """
        n, k1 = self.D1.shape
        k2, b = self.D2.shape
        D1 = np.hstack([self.D1, np.full((n, 1), 1.0 / np.sqrt(n))])
        D2 = np.vstack([self.D2, np.full((1, b), 1.0 / np.sqrt(b))])
        Z = np.zeros((k1 + 1, k2 + 1))
        Z[:k1, :k2] = self.scale * self.Z
        Z[k1, k2] = self.offset * np.sqrt(n * b)
        return D1, Z, D2


def matricize(cube: HyperCube) -> np.ndarray:
    """Band matrix of shape ``(rows * cols, bands)``."""
    r, c, b = cube.shape
    return cube.data.reshape(r * c, b, order="F").copy()


def dematricize(m, rows: int, cols: int) -> HyperCube:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != rows * cols:
        raise ValueError(
            f"band matrix of shape {m.shape} cannot hold {rows}x{cols} bands "
            f"({rows}*{cols} = {rows * cols} pixels)"
        )
    return HyperCube(m.reshape(rows, cols, m.shape[1], order="F"))


def corrupted_count(fraction: float, size: int) -> int:
    # round half up, so 0.3 * 262144 -> 78643
    return int(np.floor(fraction * size + 0.5))


def corrupt(x, spec: NoiseSpec) -> tuple[np.ndarray, np.ndarray]:
    """Replace a random subset of entries with impulse noise.

    Exactly ``round(fraction * x.size)`` entries are chosen without
    replacement over the whole array. Returns the noisy copy and the boolean
    mask of corrupted positions.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    count = corrupted_count(spec.fraction, x.size)
    idx = rng.choice(x.size, size=count, replace=False)
    if spec.kind == "random_valued":
        values = rng.uniform(0.0, 1.0, size=count)
    else:
        values = rng.integers(0, 2, size=count).astype(np.float64)
    y = x.copy()
    mask = np.zeros(x.shape, dtype=bool)
    y.reshape(-1)[idx] = values
    mask.reshape(-1)[idx] = True
    return y, mask


def psnr(reference, estimate, cap: float = PSNR_CAP) -> float:
    """PSNR in dB with peak value 1; ``cap`` is returned for a perfect match."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if reference.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {estimate.shape}")
    mse = float(np.mean((reference - estimate) ** 2))
    if mse == 0.0:
        return float(cap)
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def _rescale(X: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(X.min()), float(X.max())
    if hi - lo <= 0.0:
        return np.zeros_like(X), 0.0, 0.0
    scale = 1.0 / (hi - lo)
    return (X - lo) / (hi - lo), scale, -lo * scale


def synth_cube(
    rows: int,
    cols: int,
    bands: int,
    spatial_atoms: int,
    spectral_atoms: int,
    sparsity: float,
    seed: int = 0,
    nonnegative: bool = False,
) -> tuple[HyperCube, KroneckerModel]:
    """Draw a cube that follows the Kronecker model exactly.

    ``D1`` has unit-norm Gaussian columns, ``D2`` unit-norm Gaussian rows and
    ``Z`` has ``round(sparsity * spatial_atoms * spectral_atoms)`` standard
    normal nonzeros at random positions. The product is rescaled to ``[0, 1]``.

    With ``nonnegative=True`` every draw is replaced by its absolute value,
    giving a linear-mixing cube (nonnegative abundance maps times nonnegative
    spectra). Its intensities are skewed towards dark values like radiance
    data, instead of piling up around the middle of the range.
    """
    n = rows * cols
    if min(rows, cols, bands) < 1:
        raise ValueError(f"cube dimensions must be positive, got {rows}x{cols}x{bands}")
    if not 1 <= spatial_atoms <= n:
        raise ValueError(f"spatial_atoms must lie in [1, {n}] (rows*cols), got {spatial_atoms}")
    if not 1 <= spectral_atoms <= bands:
        raise ValueError(f"spectral_atoms must lie in [1, {bands}] (bands), got {spectral_atoms}")
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity}")

    rng = np.random.default_rng(seed)
    draw = (lambda shape: np.abs(rng.standard_normal(shape))) if nonnegative else rng.standard_normal
    D1 = draw((n, spatial_atoms))
    D1 /= np.linalg.norm(D1, axis=0, keepdims=True)
    D2 = draw((spectral_atoms, bands))
    D2 /= np.linalg.norm(D2, axis=1, keepdims=True)
    nnz = corrupted_count(sparsity, spatial_atoms * spectral_atoms)
    Z = np.zeros((spatial_atoms, spectral_atoms))
    support = rng.choice(Z.size, size=nnz, replace=False)
    Z.reshape(-1)[support] = draw(nnz)

    X, scale, offset = _rescale(D1 @ Z @ D2)
    model = KroneckerModel(D1, Z, D2, scale, offset)
    return dematricize(X, rows, cols), model


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_cube(data) -> bytes:
    data = np.asarray(data, dtype="<f8")
    if data.ndim != 3:
        raise ValueError(f"expected a 3-D array, got shape {data.shape}")
    r, c, b = data.shape
    return _HEADER.pack(MAGIC, r, c, b) + data.ravel(order="F").tobytes()


def decode_cube(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < _HEADER.size:
        raise CubeFormatError(f"{source}: file too short for an HSC1 header ({len(raw)} bytes)")
    magic, r, c, b = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CubeFormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 8 * r * c * b
    if len(raw) != expected:
        raise CubeFormatError(
            f"{source}: payload holds {len(raw)} bytes, expected {expected} for {r}x{c}x{b}"
        )
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return flat.reshape((r, c, b), order="F").astype(np.float64)


def write_cube(path, cube) -> None:
    """Write a cube (``HyperCube`` or raw 3-D array) in HSC1 format, atomically."""
    data = cube.data if isinstance(cube, HyperCube) else cube
    _atomic_write(path, encode_cube(data))


def read_array(path) -> np.ndarray:
    """Raw HSC1 payload as a ``(rows, cols, bands)`` array, without range checks."""
    path = Path(path)
    return decode_cube(path.read_bytes(), str(path))


def read_cube(path, normalize: bool = False) -> HyperCube:
    data = read_array(path)
    if normalize and (data.min() < 0.0 or data.max() > 1.0):
        return HyperCube.normalized(data)
    return HyperCube(data)
