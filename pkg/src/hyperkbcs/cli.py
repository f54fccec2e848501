"""Command-line front end.

Subcommands: ``synth``, ``corrupt``, ``denoise``, ``bench``, ``sweep``,
``psnr`` and ``export-png``. Every command exits 0 on full success and
nonzero otherwise; errors are reported on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from hyperkbcs import bench
from hyperkbcs.datacube import (
    NOISE_KINDS,
    CubeFormatError,
    NoiseSpec,
    _atomic_write,
    corrupt,
    psnr,
    read_array,
    read_cube,
    synth_cube,
    write_cube,
)
from hyperkbcs.linops import NonFiniteError

logger = logging.getLogger("hyperkbcs")

EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_sets(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise CliError(f"expected KEY=VALUE, got {pair!r}")
        out[key] = _parse_value(value)
    return out


def _load_json(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise CliError(f"{path}: config must be a JSON object")
    return data


def _read(path, normalize: bool = True):
    path = Path(path)
    if not path.exists():
        raise CliError(f"input file not found: {path}")
    return read_cube(path, normalize=normalize)


def _parse_grid(text: str) -> list[float]:
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"grid must be comma-separated numbers, got {text!r}") from None
    if not grid:
        raise CliError("grid is empty")
    return grid


def _algorithm_params(args) -> dict:
    params = _load_json(args.config) if args.config else {}
    params.update(_parse_sets(args.set))
    if getattr(args, "max_iter", None) is not None:
        params["max_iter"] = args.max_iter
    if getattr(args, "k1", None) is not None:
        params["k1"] = args.k1
    if getattr(args, "k2", None) is not None:
        params["k2"] = args.k2
    return params


# --- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    n = args.rows * args.cols
    spatial = args.spatial_atoms if args.spatial_atoms is not None else max(1, min(64, n // 4))
    spectral = args.spectral_atoms if args.spectral_atoms is not None else min(4, args.bands)
    cube, _ = synth_cube(
        args.rows, args.cols, args.bands, spatial, spectral, args.sparsity,
        seed=args.seed, nonnegative=not args.gaussian,
    )
    write_cube(args.output, cube)
    d = cube.data
    print(f"wrote {args.output}: {args.rows}x{args.cols}x{args.bands}, "
          f"min {d.min():.4f} max {d.max():.4f} mean {d.mean():.4f} std {d.std():.4f}")
    return 0


def cmd_corrupt(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise CliError(f"input file not found: {src}")
    data = read_array(src)
    noisy, mask = corrupt(data, NoiseSpec(args.fraction, args.kind, args.seed))
    write_cube(args.output, noisy)
    mask_path = args.mask or str(Path(args.output).with_suffix(".mask.hsc"))
    write_cube(mask_path, mask.astype(np.float64))
    print(f"corrupted entries: {int(mask.sum())} of {mask.size}")
    print(f"mask: {mask_path}")
    return 0


def cmd_denoise(args) -> int:
    noisy = _read(args.input)
    params = _algorithm_params(args)
    out = bench.run_algorithm(args.algorithm, noisy, params, args.seed)
    write_cube(args.output, out.estimate)
    lines = [
        f"algorithm: {args.algorithm}",
        f"input: {args.input}",
        f"output: {args.output}",
        f"iterations: {out.iterations}",
        f"converged: {str(out.converged).lower()}",
        f"final_objective: {out.objective:.10g}",
        f"wall_time_s: {out.wall_time_s:.3f}",
        f"seed: {args.seed}",
        f"params: {json.dumps(params, sort_keys=True)}",
    ]
    if args.reference:
        ref = _read(args.reference)
        if ref.shape != noisy.shape:
            raise CliError(f"reference shape {ref.shape} differs from input shape {noisy.shape}")
        lines.append(f"noisy_psnr_db: {psnr(ref.data, noisy.data):.4f}")
        lines.append(f"psnr_db: {psnr(ref.data, out.estimate):.4f}")
    report = "\n".join(lines) + "\n"
    report_path = args.report or str(Path(args.output).with_suffix(".report.txt"))
    _atomic_write(report_path, report.encode())
    sys.stdout.write(report)
    return 0


def cmd_bench(args) -> int:
    data = _load_json(args.config) if args.config else {}
    if args.algorithms:
        data["algorithms"] = args.algorithms.split(",")
    if args.fractions:
        data["noise_fractions"] = _parse_grid(args.fractions)
    if args.seed is not None:
        data["seeds"] = [args.seed]
    if args.workers is not None:
        data["workers"] = args.workers
    if args.no_tune:
        data["tune"] = None
    config = bench.BenchConfig.from_dict(data)
    records = bench.run_bench(config, args.output)
    failed = [r for r in records if r.error]
    for r in records:
        status = f"error: {r.error}" if r.error else f"{r.psnr_db:.2f} dB"
        print(f"{r.algorithm:8s} f={r.noise_fraction:g} seed={r.seed}: {status}")
    print(f"wrote {Path(args.output) / 'results.csv'}")
    return EXIT_FAILURE if failed else 0


def cmd_sweep(args) -> int:
    noisy = _read(args.input)
    reference = _read(args.reference)
    if reference.shape != noisy.shape:
        raise CliError(f"reference shape {reference.shape} differs from input shape {noisy.shape}")
    fixed = _algorithm_params(args)
    grid = _parse_grid(args.grid) if args.grid else list(bench.DEFAULT_GRID)
    if args.param == "window":
        grid = [int(v) for v in grid]
    if args.sequential:
        for later in args.sequential.split(","):
            fixed[later] = 0.0
    rows = bench.sweep(args.algorithm, noisy, reference, args.param, grid, fixed, args.seed)
    bench.write_csv(args.output, bench.SWEEP_FIELDS, [r.row() for r in rows])
    for r in rows:
        status = f"error: {r.error}" if r.error else f"psnr {r.psnr_db:.2f} dB, objective {r.objective:.6g}"
        print(f"{args.param}={r.value:g}: {status}")
    try:
        best = bench.recommend(rows, args.metric)
    except RuntimeError as exc:
        raise CliError(str(exc)) from None
    print(f"recommended {args.param} = {best:g} (by {args.metric})")
    return EXIT_FAILURE if any(r.error for r in rows) else 0


def cmd_psnr(args) -> int:
    ref = _read(args.reference, normalize=False)
    est = _read(args.estimate, normalize=False)
    if ref.shape != est.shape:
        raise CliError(f"shape mismatch: {args.reference} is {ref.shape}, {args.estimate} is {est.shape}")
    print(f"{psnr(ref.data, est.data):.2f}")
    return 0


def cmd_export_png(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise CliError(f"input file not found: {src}")
    bench.export_band_png(read_array(src), args.band, args.output)
    return 0


# --- parser ------------------------------------------------------------------


def _add_params_flags(p):
    p.add_argument("--config", help="JSON object of algorithm parameters")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one parameter (value parsed as JSON); repeatable")
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--k1", type=int, help="number of spatial atoms")
    p.add_argument("--k2", type=int, help="number of spectral atoms")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperkbcs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic Kronecker-sparse cube")
    p.add_argument("rows", type=int)
    p.add_argument("cols", type=int)
    p.add_argument("bands", type=int)
    p.add_argument("--spatial-atoms", type=int, dest="spatial_atoms")
    p.add_argument("--spectral-atoms", type=int, dest="spectral_atoms")
    p.add_argument("--sparsity", type=float, default=0.1)
    p.add_argument("--gaussian", action="store_true",
                   help="signed Gaussian factors instead of nonnegative mixing")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corrupt", help="add impulse noise and write the mask")
    p.add_argument("input")
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--kind", choices=NOISE_KINDS, default="random_valued")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--mask", help="mask path (default: <output>.mask.hsc)")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("denoise", help="run one algorithm on a cube")
    p.add_argument("algorithm", choices=bench.ALGORITHMS)
    p.add_argument("input")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--report", help="report path (default: <output>.report.txt)")
    p.add_argument("--reference", help="clean cube; adds PSNR lines to the report")
    _add_params_flags(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("bench", help="PSNR table over algorithms, noise levels and seeds")
    p.add_argument("--config", help="JSON benchmark config")
    p.add_argument("--output", "-o", required=True, help="output directory")
    p.add_argument("--algorithms", help="comma-separated subset of " + ",".join(bench.ALGORITHMS))
    p.add_argument("--fractions", help="comma-separated noise fractions")
    p.add_argument("--seed", type=int, help="run a single noise seed")
    p.add_argument("--workers", type=int)
    p.add_argument("--no-tune", action="store_true", dest="no_tune", help="skip parameter tuning")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="vary one parameter over a grid")
    p.add_argument("algorithm", choices=bench.ALGORITHMS)
    p.add_argument("param")
    p.add_argument("--input", required=True, help="noisy cube")
    p.add_argument("--reference", required=True, help="clean validation cube")
    p.add_argument("--grid", help="comma-separated values (default: 100,10,1,0.1,0.01)")
    p.add_argument("--sequential", metavar="NAMES",
                   help="comma-separated parameters held at zero during the sweep")
    p.add_argument("--metric", choices=bench.METRICS, default="psnr")
    p.add_argument("--output", "-o", required=True)
    _add_params_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("psnr", help="PSNR between two cubes")
    p.add_argument("reference")
    p.add_argument("estimate")
    p.set_defaults(func=cmd_psnr)

    p = sub.add_parser("export-png", help="write one band as an 8-bit grayscale PNG")
    p.add_argument("input")
    p.add_argument("band", type=int)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_export_png)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, CubeFormatError, ValueError, IndexError, NonFiniteError, OSError) as exc:
        print(f"hyperkbcs {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
