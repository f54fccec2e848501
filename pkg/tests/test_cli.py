import csv
import json

import numpy as np
import pytest
from PIL import Image

from hyperkbcs.cli import main
from hyperkbcs.datacube import read_array, write_cube


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def cube_path(tmp_path, capsys):
    path = tmp_path / "clean.hsc"
    assert run(capsys, "synth", 8, 8, 4, "--seed", 1, "-o", path)[0] == 0
    return path


# --- synth ---------------------------------------------------------------------


def test_synth_file_size_and_stats(cube_path, capsys):
    assert cube_path.stat().st_size == 8 + 12 + 8 * 8 * 4 * 8 == 2068


def test_synth_is_byte_identical_for_a_seed(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "synth", 6, 5, 3, "--seed", 9, "-o", tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_synth_rejects_too_many_atoms(tmp_path, capsys):
    code, _, err = run(capsys, "synth", 4, 4, 3, "--spatial-atoms", 17, "-o", tmp_path / "x")
    assert code != 0 and "spatial_atoms" in err
    assert not (tmp_path / "x").exists()


# --- corrupt -------------------------------------------------------------------


def test_corrupt_zero_fraction_keeps_payload(cube_path, tmp_path, capsys):
    out = tmp_path / "noisy.hsc"
    code, text, _ = run(capsys, "corrupt", cube_path, "--fraction", 0, "-o", out)
    assert code == 0 and "corrupted entries: 0" in text
    assert out.read_bytes() == cube_path.read_bytes()
    assert read_array(tmp_path / "noisy.mask.hsc").sum() == 0


def test_corrupt_count_on_64_cubed(tmp_path, capsys):
    write_cube(tmp_path / "big.hsc", np.full((64, 64, 64), 0.5))
    code, text, _ = run(
        capsys, "corrupt", tmp_path / "big.hsc", "--fraction", 0.3, "-o", tmp_path / "n.hsc",
        "--mask", tmp_path / "m.hsc",
    )
    assert code == 0 and "corrupted entries: 78643" in text
    mask = read_array(tmp_path / "m.hsc")
    assert set(np.unique(mask)) == {0.0, 1.0} and mask.sum() == 78643


def test_corrupt_missing_input_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.hsc"
    code, _, err = run(capsys, "corrupt", missing, "--fraction", 0.1, "-o", tmp_path / "o.hsc")
    assert code != 0 and str(missing) in err


# --- denoise -------------------------------------------------------------------


def read_report(path):
    return dict(line.split(": ", 1) for line in path.read_text().splitlines())


def test_denoise_mf_constant_cube(tmp_path, capsys):
    write_cube(tmp_path / "c.hsc", np.full((5, 6, 2), 0.25))
    code, _, _ = run(capsys, "denoise", "mf", tmp_path / "c.hsc", "-o", tmp_path / "d.hsc")
    assert code == 0
    np.testing.assert_array_equal(read_array(tmp_path / "d.hsc"), read_array(tmp_path / "c.hsc"))
    report = read_report(tmp_path / "d.report.txt")
    assert report["algorithm"] == "mf" and report["iterations"] == "0"


def test_denoise_zero_iterations_report(cube_path, tmp_path, capsys):
    code, text, _ = run(capsys, "denoise", "l1kbcs", cube_path, "-o", tmp_path / "d.hsc", "--max-iter", 0)
    assert code == 0
    report = read_report(tmp_path / "d.report.txt")
    assert report["iterations"] == "0" and report["converged"] == "false"
    for key in ("final_objective", "wall_time_s", "params"):
        assert key in report
    assert json.loads(report["params"]) == {"max_iter": 0}
    assert "iterations: 0" in text


def test_denoise_parameter_sources(cube_path, tmp_path, capsys):
    cfg = tmp_path / "p.json"
    cfg.write_text(json.dumps({"lambda1": 0.5, "k1": 16}))
    code, _, _ = run(
        capsys, "denoise", "l1kbcs", cube_path, "-o", tmp_path / "d.hsc", "--config", cfg,
        "--set", "lambda1=2", "--set", "bregman=additive", "--max-iter", 3, "--report", tmp_path / "r.txt",
    )
    assert code == 0
    params = json.loads(read_report(tmp_path / "r.txt")["params"])
    assert params == {"lambda1": 2, "k1": 16, "bregman": "additive", "max_iter": 3}


def test_denoise_solver_error_is_nonzero(cube_path, tmp_path, capsys):
    code, _, err = run(capsys, "denoise", "l1kcs", cube_path, "-o", tmp_path / "d.hsc", "--k1", 5)
    assert code != 0 and "k1" in err


def test_denoise_bad_set_syntax(cube_path, tmp_path, capsys):
    code, _, err = run(capsys, "denoise", "mf", cube_path, "-o", tmp_path / "d.hsc", "--set", "window")
    assert code != 0 and "KEY=VALUE" in err


def test_denoise_reports_psnr_gain(tmp_path, capsys):
    # 30% random-valued noise on the 32x32x16 benchmark cube, default weights
    clean, noisy = tmp_path / "clean.hsc", tmp_path / "noisy.hsc"
    run(capsys, "synth", 32, 32, 16, "--seed", 1, "-o", clean)
    run(capsys, "corrupt", clean, "--fraction", 0.3, "--seed", 1, "-o", noisy)
    code, _, _ = run(
        capsys, "denoise", "l1kbcs", noisy, "-o", tmp_path / "d.hsc", "--reference", clean, "--k1", 256,
    )
    assert code == 0
    report = read_report(tmp_path / "d.report.txt")
    assert float(report["psnr_db"]) > float(report["noisy_psnr_db"])


# --- psnr ----------------------------------------------------------------------


def test_psnr_command(tmp_path, capsys):
    write_cube(tmp_path / "z.hsc", np.zeros((3, 3, 2)))
    write_cube(tmp_path / "h.hsc", np.full((3, 3, 2), 0.5))
    write_cube(tmp_path / "s.hsc", np.zeros((3, 2, 2)))
    assert run(capsys, "psnr", tmp_path / "z.hsc", tmp_path / "z.hsc")[1].strip() == "120.00"
    assert run(capsys, "psnr", tmp_path / "z.hsc", tmp_path / "h.hsc")[1].strip() == "6.02"
    code, _, err = run(capsys, "psnr", tmp_path / "z.hsc", tmp_path / "s.hsc")
    assert code != 0 and "shape mismatch" in err


# --- export-png ----------------------------------------------------------------


def test_export_png(tmp_path, capsys):
    write_cube(tmp_path / "z.hsc", np.zeros((4, 3, 2)))
    write_cube(tmp_path / "o.hsc", np.ones((4, 3, 2)))
    assert run(capsys, "export-png", tmp_path / "z.hsc", 1, "-o", tmp_path / "z.png")[0] == 0
    assert run(capsys, "export-png", tmp_path / "o.hsc", 0, "-o", tmp_path / "o.png")[0] == 0
    with Image.open(tmp_path / "z.png") as img:
        assert img.mode == "L" and set(img.tobytes()) == {0}
    with Image.open(tmp_path / "o.png") as img:
        assert set(img.tobytes()) == {255}
    code, _, err = run(capsys, "export-png", tmp_path / "z.hsc", 2, "-o", tmp_path / "x.png")
    assert code != 0 and "0..1" in err


# --- sweep ---------------------------------------------------------------------


@pytest.fixture
def sweep_inputs(tmp_path, capsys):
    clean, noisy = tmp_path / "clean.hsc", tmp_path / "noisy.hsc"
    run(capsys, "synth", 8, 8, 4, "--seed", 2, "-o", clean)
    run(capsys, "corrupt", clean, "--fraction", 0.3, "--seed", 2, "-o", noisy)
    return clean, noisy


def test_sweep_default_grid(sweep_inputs, tmp_path, capsys):
    clean, noisy = sweep_inputs
    out = tmp_path / "sweep.csv"
    code, text, _ = run(
        capsys, "sweep", "l1kbcs", "lambda1", "--input", noisy, "--reference", clean, "-o", out,
        "--k1", 16, "--max-iter", 10,
    )
    assert code == 0 and "recommended lambda1" in text
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["value"]) for r in rows] == [100, 10, 1, 0.1, 0.01]
    assert set(rows[0]) == {"value", "objective", "residual_norm", "regularizer_norm", "psnr_db", "iterations", "error"}


def test_sweep_single_value_matches_denoise(sweep_inputs, tmp_path, capsys):
    clean, noisy = sweep_inputs
    run(
        capsys, "sweep", "l1kbcs", "lambda1", "--grid", "0.5", "--input", noisy, "--reference", clean,
        "-o", tmp_path / "s.csv", "--k1", 16, "--max-iter", 15,
    )
    run(
        capsys, "denoise", "l1kbcs", noisy, "-o", tmp_path / "d.hsc", "--reference", clean,
        "--set", "lambda1=0.5", "--k1", 16, "--max-iter", 15,
    )
    with open(tmp_path / "s.csv", newline="") as fh:
        (row,) = list(csv.DictReader(fh))
    report = read_report(tmp_path / "d.report.txt")
    assert float(row["psnr_db"]) == pytest.approx(float(report["psnr_db"]), abs=1e-4)
    assert int(row["iterations"]) == int(report["iterations"])
    assert float(row["objective"]) == pytest.approx(float(report["final_objective"]), rel=1e-9)


def test_sweep_sequential_zeroes_named_weights(sweep_inputs, tmp_path, capsys):
    clean, noisy = sweep_inputs
    code, _, _ = run(
        capsys, "sweep", "l1kbcs", "lambda1", "--grid", "1,0.01", "--sequential", "lambda2,lambda3",
        "--input", noisy, "--reference", clean, "-o", tmp_path / "s.csv", "--k1", 16, "--max-iter", 5,
    )
    assert code == 0


def test_sweep_window_grid_is_integral(sweep_inputs, tmp_path, capsys):
    clean, noisy = sweep_inputs
    code, text, _ = run(
        capsys, "sweep", "mf", "window", "--grid", "3,5", "--input", noisy, "--reference", clean,
        "-o", tmp_path / "s.csv",
    )
    assert code == 0 and "recommended window" in text


def test_sweep_failures_give_nonzero_exit(sweep_inputs, tmp_path, capsys):
    clean, noisy = sweep_inputs
    code, _, _ = run(
        capsys, "sweep", "l1tv", "lambda_tv", "--grid=-1,0.5", "--input", noisy, "--reference", clean,
        "-o", tmp_path / "s.csv", "--max-iter", 5,
    )
    assert code != 0
    with open(tmp_path / "s.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and rows[0]["error"] and not rows[1]["error"]


# --- bench ---------------------------------------------------------------------


def bench_config(tmp_path, **changes):
    data = {
        "cube": {"synth": {"rows": 8, "cols": 8, "bands": 4, "spatial_atoms": 8, "spectral_atoms": 2}},
        "noise_fractions": [0.1],
        "algorithms": ["mf"],
        "seeds": [1],
    }
    data.update(changes)
    path = tmp_path / "bench.json"
    path.write_text(json.dumps(data))
    return path


def test_bench_single_cell(tmp_path, capsys):
    code, _, _ = run(capsys, "bench", "--config", bench_config(tmp_path), "-o", tmp_path / "out")
    assert code == 0
    with open(tmp_path / "out" / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert list(rows[0])[:6] == ["algorithm", "noise_fraction", "seed", "psnr_db", "iterations", "wall_time_s"]
    assert (tmp_path / "out" / "f0.1_s1_panel.png").exists()


def test_bench_flags_override_config(tmp_path, capsys):
    code, _, _ = run(
        capsys, "bench", "--config", bench_config(tmp_path), "-o", tmp_path / "out", "--fractions", "0.2,0.4",
        "--algorithms", "mf,l1tv", "--seed", 7,
    )
    assert code == 0
    with open(tmp_path / "out" / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {(r["algorithm"], r["noise_fraction"], r["seed"]) for r in rows} == {
        ("mf", "0.2", "7"), ("mf", "0.4", "7"), ("l1tv", "0.2", "7"), ("l1tv", "0.4", "7"),
    }


def test_bench_cell_failure_sets_exit_code(tmp_path, capsys):
    cfg = bench_config(tmp_path, algorithms=["mf", "l1kcs"], params={"l1kcs": {"k1": 3}})
    code, text, _ = run(capsys, "bench", "--config", cfg, "-o", tmp_path / "out")
    assert code != 0 and "error" in text
    with open(tmp_path / "out" / "results.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_bench_invalid_config(tmp_path, capsys):
    cfg = bench_config(tmp_path, noise_fractions=[2.0])
    code, _, err = run(capsys, "bench", "--config", cfg, "-o", tmp_path / "out")
    assert code != 0 and "[0, 1]" in err
    code, _, err = run(capsys, "bench", "--config", tmp_path / "missing.json", "-o", tmp_path / "out")
    assert code != 0 and "missing.json" in err
