"""Algorithm dispatch, parameter sweeps, sequential tuning and the PSNR benchmark."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from hyperkbcs import baselines
from hyperkbcs.datacube import (
    NOISE_KINDS,
    HyperCube,
    NoiseSpec,
    _atomic_write,
    corrupt,
    dematricize,
    matricize,
    psnr,
    read_cube,
    synth_cube,
)
from hyperkbcs.linops import LsqConfig
from hyperkbcs.solver import KbcsParams, denoise

logger = logging.getLogger(__name__)

ALGORITHMS = ("mf", "l1tv", "l1bcs", "l1kbcs", "l1kcs")
SOLVER_MODES = {"l1bcs": "bcs", "l1kbcs": "kbcs", "l1kcs": "kcs"}
# left-to-right order of the comparison panel
PANEL_ORDER = ("mf", "l1bcs", "l1kbcs", "l1tv", "l1kcs")

CSV_FIELDS = (
    "algorithm",
    "noise_fraction",
    "seed",
    "psnr_db",
    "iterations",
    "wall_time_s",
    "params_digest",
    "error",
)
SWEEP_FIELDS = (
    "value",
    "objective",
    "residual_norm",
    "regularizer_norm",
    "psnr_db",
    "iterations",
    "error",
)

DEFAULT_GRID = (1e2, 1e1, 1.0, 1e-1, 1e-2)
TUNE_ORDER = {
    "l1kbcs": ("lambda1", "lambda2", "lambda3", "mu"),
    "l1bcs": ("lambda1", "lambda2", "mu"),
    "l1kcs": ("lambda1",),
    "l1tv": ("lambda_tv",),
    "mf": ("window",),
}
_LAMBDA_GRID = (1e-1, 1.0, 1e1, 1e2, 1e3, 1e4)
TUNE_GRIDS = {
    "lambda1": _LAMBDA_GRID,
    "lambda2": _LAMBDA_GRID,
    "lambda3": _LAMBDA_GRID,
    "lambda_tv": (0.1, 0.2, 0.5, 1.0, 2.0),
    "mu": (10.0, 100.0, 1000.0),
    "window": (3, 5, 7, 9),
}
# rounds run by the benchmark's tuning stage unless the config says otherwise
BENCH_TUNE_ROUNDS = 2
# weights that may not be zeroed while earlier ones are tuned
_POSITIVE = {"mu", "window", "lambda_tv"}
# which regularizer value goes on the L-curve axis when a weight is swept
_REGULARIZER_OF = {
    "lambda1": "coef_l1",
    "lambda2": "spatial_fro2",
    "lambda3": "spectral_fro2",
    "lambda_tv": "tv",
}


@dataclass
class RunOutput:
    estimate: np.ndarray
    raw: np.ndarray
    iterations: int
    converged: bool
    objective: float
    residual_norm: float
    regularizers: dict
    wall_time_s: float


@dataclass
class BenchRecord:
    algorithm: str
    noise_fraction: float
    seed: int
    psnr_db: float
    iterations: int
    wall_time_s: float
    params_digest: str
    error: str = ""

    def row(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "noise_fraction": f"{self.noise_fraction:g}",
            "seed": self.seed,
            "psnr_db": "" if math.isnan(self.psnr_db) else f"{self.psnr_db:.6f}",
            "iterations": self.iterations,
            "wall_time_s": f"{self.wall_time_s:.3f}",
            "params_digest": self.params_digest,
            "error": self.error,
        }


def params_digest(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def kbcs_params(params: dict, mode: str, seed: int) -> tuple[KbcsParams, int | None, int | None]:
    """Split a flat parameter block into ``KbcsParams`` and the atom counts."""
    p = dict(params)
    k1 = p.pop("k1", None)
    k2 = p.pop("k2", None)
    lsq = p.pop("lsq", None)
    p.setdefault("seed", seed)
    known = {f.name for f in dataclasses.fields(KbcsParams)}
    unknown = set(p) - known
    if unknown:
        raise ValueError(f"unknown solver parameters: {sorted(unknown)}")
    if lsq is not None:
        p["lsq"] = LsqConfig(**lsq)
    return KbcsParams(**{**p, "mode": mode}), k1, k2


def tv_params(params: dict) -> baselines.TvParams:
    p = dict(params)
    lsq = p.pop("lsq", None)
    known = {f.name for f in dataclasses.fields(baselines.TvParams)}
    unknown = set(p) - known
    if unknown:
        raise ValueError(f"unknown l1-TV parameters: {sorted(unknown)}")
    if lsq is not None:
        p["lsq"] = LsqConfig(**lsq)
    return baselines.TvParams(**p)


def run_algorithm(name: str, noisy: HyperCube, params: dict | None = None, seed: int = 0) -> RunOutput:
    """Denoise ``noisy`` with one of ``ALGORITHMS``.

    ``params`` is the algorithm's flat parameter block, e.g. ``{"window": 5}``
    for ``mf`` or ``{"lambda1": 0.1, "k1": 256}`` for the solver modes.
    """
    if name not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {name!r}; expected one of {ALGORITHMS}")
    params = dict(params or {})
    t0 = time.perf_counter()
    Y = matricize(noisy)
    if name == "mf":
        unknown = set(params) - {"window"}
        if unknown:
            raise ValueError(f"unknown median filter parameters: {sorted(unknown)}")
        out = baselines.median_filter(noisy, int(params.get("window", 3))).data
        raw, iterations, converged, objective, regs = out, 0, True, float("nan"), {}
    elif name == "l1tv":
        tp = tv_params(params)
        raw, iterations = baselines.l1tv_denoise(noisy, tp, return_iterations=True)
        converged = iterations < tp.max_iter
        tv = sum(baselines.total_variation(raw[:, :, j]) for j in range(raw.shape[2]))
        objective = float(np.abs(noisy.data - raw).sum() + tp.lambda_tv * tv)
        regs = {"tv": tv}
    else:
        kp, k1, k2 = kbcs_params(params, SOLVER_MODES[name], seed)
        res = denoise(Y, kp, k1=k1, k2=k2, image_shape=(noisy.rows, noisy.cols))
        raw = res.X_hat.reshape(noisy.shape, order="F")
        iterations, converged, objective = res.iterations, res.converged, res.final_objective
        s = res.state
        regs = {
            "coef_l1": float(np.abs(s.Z).sum()),
            "spatial_fro2": float(np.sum(s.D1**2)),
            "spectral_fro2": float(np.sum(s.D2**2)),
        }
    wall = time.perf_counter() - t0
    return RunOutput(
        estimate=np.clip(raw, 0.0, 1.0),
        raw=raw,
        iterations=int(iterations),
        converged=bool(converged),
        objective=float(objective),
        residual_norm=float(np.abs(noisy.data - raw).sum()),
        regularizers=regs,
        wall_time_s=wall,
    )


# --- sweeps and tuning -----------------------------------------------------


@dataclass
class SweepRow:
    value: float
    objective: float
    residual_norm: float
    regularizer_norm: float
    psnr_db: float
    iterations: int
    error: str = ""

    def row(self) -> dict:
        def fmt(v):
            return "" if isinstance(v, float) and math.isnan(v) else f"{v:.10g}"

        return {
            "value": f"{self.value:g}",
            "objective": fmt(self.objective),
            "residual_norm": fmt(self.residual_norm),
            "regularizer_norm": fmt(self.regularizer_norm),
            "psnr_db": fmt(self.psnr_db),
            "iterations": self.iterations,
            "error": self.error,
        }


def sweep(algorithm, noisy: HyperCube, reference: HyperCube, param: str, grid, fixed=None,
          seed: int = 0, cache: dict | None = None) -> list[SweepRow]:
    """One run per grid value with ``param`` varied and everything else held at ``fixed``.

    Each row carries the data misfit and the regularizer value matching
    ``param`` (the two L-curve axes) plus the PSNR against ``reference``.
    A failing value is recorded in the row's ``error`` field. ``cache``, if
    given, maps parameter digests to rows so that repeated points are not
    rerun.
    """
    if len(grid) == 0:
        raise ValueError("sweep grid is empty")
    rows = []
    for value in grid:
        params = {**(fixed or {}), param: value}
        key = params_digest(params)
        if cache is not None and key in cache:
            rows.append(dataclasses.replace(cache[key], value=float(value)))
            continue
        try:
            out = run_algorithm(algorithm, noisy, params, seed)
        except Exception as exc:  # recorded, the sweep carries on
            logger.warning("sweep %s=%g failed: %s", param, value, exc)
            nan = float("nan")
            row = SweepRow(float(value), nan, nan, nan, nan, 0, f"{type(exc).__name__}: {exc}")
        else:
            row = SweepRow(
                value=float(value),
                objective=out.objective,
                residual_norm=out.residual_norm,
                regularizer_norm=out.regularizers.get(_REGULARIZER_OF.get(param, ""), float("nan")),
                psnr_db=psnr(reference.data, out.estimate),
                iterations=out.iterations,
            )
        if cache is not None:
            cache[key] = row
        rows.append(row)
    return rows


METRICS = ("psnr", "objective")


def recommend(rows: list[SweepRow], metric: str = "psnr") -> float:
    """Grid value with the highest PSNR, or the lowest objective (first one on ties)."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    key = "psnr_db" if metric == "psnr" else "objective"
    ok = [r for r in rows if not math.isnan(getattr(r, key))]
    if not ok:
        raise RuntimeError("every sweep value failed")
    if metric == "psnr":
        return max(ok, key=lambda r: r.psnr_db).value
    return min(ok, key=lambda r: r.objective).value


def _as_param_value(param: str, value: float):
    return int(value) if param == "window" else value


def tune_sequential(algorithm, noisy: HyperCube, reference: HyperCube, order=None, grids=None,
                    base=None, seed: int = 0, rounds: int = 1):
    """Tune weights one at a time, L-curve style.

    In the first round the i-th weight is swept with the later ones set to
    zero (split weights such as ``mu`` must stay positive, so they are
    tuned last and keep their defaults until then) and the earlier ones at their tuned values. Each further round
    re-sweeps every weight with all the others at their current values,
    stopping early once a round changes nothing. Returns the tuned
    parameter block and the sweep table of every stage, keyed
    ``name`` for the first round and ``name@k`` for round ``k``.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    order = tuple(order or TUNE_ORDER[algorithm])
    grids = {**TUNE_GRIDS, **(grids or {})}
    tuned = dict(base or {})
    tables = {}
    cache: dict = {}
    for rnd in range(1, rounds + 1):
        changed = False
        for i, name in enumerate(order):
            fixed = dict(tuned)
            if rnd == 1:
                for later in order[i + 1:]:
                    if later not in _POSITIVE:
                        fixed[later] = 0.0
            grid = [_as_param_value(name, v) for v in grids[name]]
            rows = sweep(algorithm, noisy, reference, name, grid, fixed, seed, cache)
            tables[name if rnd == 1 else f"{name}@{rnd}"] = rows
            best = _as_param_value(name, recommend(rows))
            changed |= tuned.get(name) != best
            tuned[name] = best
            logger.info("tuned %s %s = %g (round %d)", algorithm, name, best, rnd)
        if rnd > 1 and not changed:
            break
    return tuned, tables


# --- output helpers --------------------------------------------------------


def write_csv(path, fieldnames, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    _atomic_write(path, buf.getvalue().encode())


def to_uint8(band) -> np.ndarray:
    return np.rint(np.clip(np.asarray(band, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image_u8: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image_u8, dtype=np.uint8)).save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


def export_band_png(cube_data, band: int, path) -> None:
    cube_data = np.asarray(cube_data)
    bands = cube_data.shape[2]
    if not 0 <= band < bands:
        raise IndexError(f"band index {band} out of range; valid range is 0..{bands - 1}")
    write_png(path, to_uint8(cube_data[:, :, band]))


def panel(images, gap: int = 2) -> np.ndarray:
    """Images side by side, separated by white columns."""
    h = images[0].shape[0]
    sep = np.full((h, gap), 255, dtype=np.uint8)
    parts = []
    for k, img in enumerate(images):
        if k:
            parts.append(sep)
        parts.append(img)
    return np.hstack(parts)


# --- benchmark -------------------------------------------------------------


@dataclass
class BenchConfig:
    cube: dict = field(default_factory=lambda: {"synth": dict(DEFAULT_SYNTH)})
    noise_fractions: list = field(default_factory=lambda: [0.1, 0.3, 0.5])
    noise_kind: str = "random_valued"
    algorithms: list = field(default_factory=lambda: list(ALGORITHMS))
    params: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [1])
    png_band: int | None = 0
    tune: dict | None = None
    workers: int = 1

    def __post_init__(self):
        if not self.algorithms:
            raise ValueError("at least one algorithm is required")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise ValueError(f"unknown algorithms {bad}; expected a subset of {ALGORITHMS}")
        for f in self.noise_fractions:
            if not 0.0 <= f <= 1.0:
                raise ValueError(f"noise fractions must lie in [0, 1], got {f}")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if ("synth" in self.cube) == ("path" in self.cube):
            raise ValueError("cube must give exactly one of 'synth' or 'path'")

    @classmethod
    def from_dict(cls, data: dict) -> "BenchConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "BenchConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


DEFAULT_SYNTH = {
    "rows": 32,
    "cols": 32,
    "bands": 16,
    "spatial_atoms": 64,
    "spectral_atoms": 4,
    "sparsity": 0.1,
    "seed": 1,
    "nonnegative": True,
}
# offset added to the cube seed for the held-out validation cube
VALIDATION_SEED_OFFSET = 1000


def make_synth(spec: dict, seed_offset: int = 0) -> HyperCube:
    s = {**DEFAULT_SYNTH, **spec}
    cube, _ = synth_cube(
        s["rows"], s["cols"], s["bands"], s["spatial_atoms"], s["spectral_atoms"],
        s["sparsity"], seed=s["seed"] + seed_offset, nonnegative=s["nonnegative"],
    )
    return cube


def load_clean(config: BenchConfig) -> HyperCube:
    if "path" in config.cube:
        return read_cube(config.cube["path"], normalize=True)
    return make_synth(config.cube["synth"])


def validation_cube(config: BenchConfig) -> HyperCube:
    tune = config.tune or {}
    if "validation_path" in tune:
        return read_cube(tune["validation_path"], normalize=True)
    if "synth" not in config.cube:
        raise ValueError("tuning a file-based cube needs tune.validation_path")
    return make_synth(config.cube["synth"], VALIDATION_SEED_OFFSET)


def tune_all(config: BenchConfig, fraction: float, outdir: Path | None = None) -> dict:
    """Tuned parameter block per algorithm for one noise level, from the validation cube."""
    tune = config.tune or {}
    clean = validation_cube(config)
    vseed = int(tune.get("validation_seed", VALIDATION_SEED_OFFSET))
    noisy_data, _ = corrupt(matricize(clean), NoiseSpec(fraction, config.noise_kind, vseed))
    noisy = dematricize(noisy_data, clean.rows, clean.cols)
    algorithms = tune.get("algorithms", config.algorithms)
    tuned = {}
    for alg in config.algorithms:
        base = dict(config.params.get(alg, {}))
        if alg not in algorithms:
            tuned[alg] = base
            continue
        order = tune.get("order", {}).get(alg)
        params, tables = tune_sequential(alg, noisy, clean, order, tune.get("grids"), base, vseed,
                                         int(tune.get("rounds", BENCH_TUNE_ROUNDS)))
        tuned[alg] = params
        if outdir is not None:
            for name, rows in tables.items():
                write_csv(outdir / f"sweep_{alg}_{fraction:g}_{name.replace('@', '_round')}.csv", SWEEP_FIELDS,
                          [r.row() for r in rows])
    return tuned


def _run_cell(args):
    alg, clean_data, noisy_data, fraction, seed, params = args
    clean = HyperCube(clean_data)
    noisy = HyperCube(noisy_data)
    digest = params_digest({"algorithm": alg, **params})
    try:
        out = run_algorithm(alg, noisy, params, seed)
    except Exception as exc:
        logger.error("cell %s/%g/%d failed: %s", alg, fraction, seed, exc)
        rec = BenchRecord(alg, fraction, seed, float("nan"), 0, 0.0, digest, f"{type(exc).__name__}: {exc}")
        return rec, None
    rec = BenchRecord(alg, fraction, seed, psnr(clean.data, out.estimate), out.iterations,
                      out.wall_time_s, digest)
    return rec, out.estimate


def run_bench(config: BenchConfig, outdir) -> list[BenchRecord]:
    """Run every (fraction, seed, algorithm) cell and write ``results.csv``.

    With ``png_band`` set, each (fraction, seed) also gets one grayscale PNG
    per image (ground truth, noisy, every algorithm) and a side-by-side panel.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    clean = load_clean(config)
    X = matricize(clean)

    tuned_by_fraction = {}
    jobs = []
    noisy_by_cell = {}
    for fraction in config.noise_fractions:
        if config.tune and config.tune.get("enabled", True):
            tuned = tune_all(config, fraction, outdir)
            tuned_by_fraction[f"{fraction:g}"] = tuned
        else:
            tuned = {a: dict(config.params.get(a, {})) for a in config.algorithms}
        for seed in config.seeds:
            Yd, _ = corrupt(X, NoiseSpec(fraction, config.noise_kind, seed))
            noisy = dematricize(Yd, clean.rows, clean.cols)
            noisy_by_cell[(fraction, seed)] = noisy
            for alg in config.algorithms:
                jobs.append((alg, clean.data, noisy.data, fraction, seed, tuned[alg]))
    if tuned_by_fraction:
        _atomic_write(outdir / "tuned_params.json",
                      json.dumps(tuned_by_fraction, indent=2, sort_keys=True).encode())

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]

    records = [rec for rec, _ in results]
    write_csv(outdir / "results.csv", CSV_FIELDS, [r.row() for r in records])

    if config.png_band is not None:
        band = config.png_band
        estimates = {(r.algorithm, r.noise_fraction, r.seed): est for r, est in results}
        for (fraction, seed), noisy in noisy_by_cell.items():
            tag = f"f{fraction:g}_s{seed}"
            images = [("ground_truth", clean.data), ("noisy", noisy.data)]
            for alg in PANEL_ORDER:
                est = estimates.get((alg, fraction, seed))
                if est is not None:
                    images.append((alg, est))
            for label, data in images:
                export_band_png(data, band, outdir / f"{tag}_{label}.png")
            write_png(outdir / f"{tag}_panel.png", panel([to_uint8(d[:, :, band]) for _, d in images]))
    return records
