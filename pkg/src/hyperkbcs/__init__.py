"""Impulse denoising of hyperspectral datacubes with Kronecker blind compressed sensing."""

from hyperkbcs.datacube import (
    HyperCube,
    KroneckerModel,
    NoiseSpec,
    corrupt,
    dematricize,
    matricize,
    psnr,
    read_cube,
    synth_cube,
    write_cube,
)
from hyperkbcs.solver import DenoiseResult, KbcsParams, SolverState, denoise

__all__ = [
    "DenoiseResult",
    "HyperCube",
    "KbcsParams",
    "KroneckerModel",
    "NoiseSpec",
    "SolverState",
    "corrupt",
    "dematricize",
    "denoise",
    "matricize",
    "psnr",
    "read_cube",
    "synth_cube",
    "write_cube",
]

__version__ = "0.1.0"
