import math

import numpy as np
import pytest

from cicreg import cli
from cicreg.ledger import RunCommand, list_runs, open_ledger
from cicreg.records import read_records, write_records
from cicreg.volume import Volume, load_volume, save_volume
from cicreg.warp import load_field, save_field, warp_volume
from phantoms import constant_field, smooth_field, smooth_volume

FAST = ["--set", "levels=1", "--set", "iters_per_level=3"]


@pytest.fixture
def pair(tmp_path):
    moving = tmp_path / "moving.mvol"
    fixed = tmp_path / "fixed.mvol"
    save_volume(smooth_volume((16, 16, 16), seed=1), moving)
    save_volume(smooth_volume((16, 16, 16), seed=2), fixed)
    return str(moving), str(fixed)


def run(argv):
    return cli.main([str(a) for a in argv])


class TestRegister:
    def test_writes_every_output(self, pair, tmp_path):
        out = tmp_path / "run"
        assert run(["register", "--moving", pair[0], "--fixed", pair[1], "--out", out, *FAST]) == cli.EXIT_OK
        for name in ("u_MF.mvol", "u_FM.mvol", "warped_MF.mvol", "trace.rec", "jacobian.rec", "metrics.rec"):
            assert (out / name).is_file()
        assert len(read_records([out / "trace.rec"])) == 3
        record = read_records([out / "pair.rec"])[0]
        assert record["method"] == "cicreg"
        assert record["moving"] == pair[0]
        for key in ("ssim", "pct_nonpositive", "cycle_residual_mean", "elapsed_seconds"):
            assert key in record
        manifest = read_records([out / "manifest.rec"])[0]
        assert manifest["command"] == "register"
        assert manifest["seed"] == 42
        assert "levels=1" in manifest["config_overrides"]

    def test_warped_output_matches_the_field(self, pair, tmp_path):
        out = tmp_path / "run"
        run(["register", "--moving", pair[0], "--fixed", pair[1], "--out", out, *FAST])
        # fields are stored as float32, the warped image was computed from the float64 field
        expected = warp_volume(load_volume(pair[0]), load_field(out / "u_MF.mvol"))
        np.testing.assert_allclose(load_volume(out / "warped_MF.mvol").data, expected.data, atol=1e-5)

    def test_nifti_field_format(self, pair, tmp_path):
        out = tmp_path / "run"
        argv = ["register", "--moving", pair[0], "--fixed", pair[1], "--out", out, "--field-format", "nifti"]
        assert run([*argv, *FAST]) == cli.EXIT_OK
        assert load_field(out / "u_MF.nii.gz").dims == (16, 16, 16)

    def test_batch_and_parallel_runs_agree(self, pair, tmp_path):
        argv = ["register", "--moving", pair[0], "--fixed", pair[1], "--moving", pair[1], "--fixed", pair[0], *FAST]
        assert run([*argv, "--out", tmp_path / "serial"]) == cli.EXIT_OK
        assert run([*argv, "--out", tmp_path / "parallel", "--jobs", "2"]) == cli.EXIT_OK
        for index in ("pair_000", "pair_001"):
            serial = (tmp_path / "serial" / index / "u_MF.mvol").read_bytes()
            assert serial == (tmp_path / "parallel" / index / "u_MF.mvol").read_bytes()

    def test_ledger_collects_the_run(self, pair, tmp_path):
        argv = ["register", "--moving", pair[0], "--fixed", pair[1], "--out", tmp_path / "run"]
        run([*argv, "--ledger", tmp_path / "ledger", "--method", "ours", *FAST])
        runs = list_runs(open_ledger(tmp_path / "ledger"), RunCommand.REGISTER)
        assert [r.method for r in runs] == ["ours"]
        assert runs[0].elapsed_seconds > 0

    def test_config_file_and_seed_flag(self, pair, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("levels = 1\niters_per_level = 2\nseed = 3\n")
        out = tmp_path / "run"
        argv = ["register", "--moving", pair[0], "--fixed", pair[1], "--out", out, "--config", config]
        assert run([*argv, "--seed", "8"]) == cli.EXIT_OK
        assert read_records([out / "manifest.rec"])[0]["seed"] == 8
        assert len(read_records([out / "trace.rec"])) == 2

    def test_unequal_pair_counts_are_a_usage_error(self, pair, tmp_path, capsys):
        argv = ["register", "--moving", pair[0], "--moving", pair[1], "--fixed", pair[1], "--out", tmp_path]
        assert run(argv) == cli.EXIT_USAGE
        assert capsys.readouterr().err.startswith("error: --moving given 2 time(s)")

    def test_unknown_config_key(self, pair, tmp_path, capsys):
        argv = ["register", "--moving", pair[0], "--fixed", pair[1], "--out", tmp_path, "--set", "lambda_jak=1"]
        assert run(argv) == cli.EXIT_INPUT
        assert "Did you mean 'lambda_jac'?" in capsys.readouterr().err

    def test_missing_input_is_an_io_error(self, pair, tmp_path, capsys):
        argv = ["register", "--moving", tmp_path / "nope.mvol", "--fixed", pair[1], "--out", tmp_path / "run"]
        assert run([*argv, *FAST]) == cli.EXIT_IO
        assert not (tmp_path / "run").exists()

    def test_dim_mismatch_is_invalid_input(self, pair, tmp_path, capsys):
        other = tmp_path / "small.mvol"
        save_volume(smooth_volume((16, 16, 12)), other)
        argv = ["register", "--moving", pair[0], "--fixed", other, "--out", tmp_path / "run", *FAST]
        assert run(argv) == cli.EXIT_INPUT
        assert "differ" in capsys.readouterr().err


def test_argparse_errors_exit_with_usage_code(capsys):
    with pytest.raises(SystemExit) as excinfo:
        run(["register", "--moving", "m.mvol"])
    assert excinfo.value.code == cli.EXIT_USAGE


def test_warp_command(pair, tmp_path):
    field = tmp_path / "shift.mvol"
    save_field(constant_field((16, 16, 16), (1.0, 0.0, 0.0)), field)
    out = tmp_path / "warped.mvol"
    assert run(["warp", "--moving", pair[0], "--field", field, "--out", out]) == cli.EXIT_OK
    expected = warp_volume(load_volume(pair[0]), load_field(field))
    assert np.array_equal(load_volume(out).data, expected.data)
    assert read_records([f"{out}.manifest.rec"])[0]["command"] == "warp"


def test_evaluate_command(pair, tmp_path):
    out = tmp_path / "metrics.rec"
    assert run(["evaluate", "--warped", pair[0], "--fixed", pair[0], "--out", out, "--method", "m"]) == cli.EXIT_OK
    record = read_records([out])[0]
    assert record["method"] == "m"
    assert record["ssim"] == pytest.approx(1.0)
    assert record["psnr"] == math.inf
    assert record["mse"] == 0.0


def test_evaluate_records_undefined_metrics_as_null(tmp_path):
    a, b = tmp_path / "a.mvol", tmp_path / "b.mvol"
    save_volume(Volume(np.zeros((8, 8, 8))), a)
    save_volume(Volume(np.full((8, 8, 8), 0.5)), b)
    assert run(["evaluate", "--moving", a, "--fixed", b, "--out", tmp_path / "m.rec"]) == cli.EXIT_OK
    assert read_records([tmp_path / "m.rec"])[0]["ncc"] is None


def test_jacobian_command(tmp_path):
    field = tmp_path / "u.nii.gz"
    save_field(smooth_field((10, 10, 10), 1.0), field)
    out = tmp_path / "audit"
    assert run(["jacobian", "--field", field, "--out", out]) == cli.EXIT_OK
    for name in ("det.nii.gz", "logjd.nii.gz", "magnitude.nii.gz", "jacobian.rec", "manifest.rec"):
        assert (out / name).is_file()
    for view in ("sagittal", "coronal", "axial"):
        assert (out / f"logjd_{view}.pgm").read_bytes().startswith(b"P5\n10 10\n255\n")
    assert read_records([out / "jacobian.rec"])[0]["field"] == str(field)


def test_slices_command(tmp_path):
    volume = tmp_path / "v.mvol"
    save_volume(smooth_volume((6, 8, 10)), volume)
    assert run(["slices", "--volume", volume, "--out", tmp_path / "fig"]) == cli.EXIT_OK
    # Should be width x height = second x third dims for the sagittal plane
    assert (tmp_path / "fig_sagittal.pgm").read_bytes().startswith(b"P5\n8 10\n255\n")
    assert (tmp_path / "fig_coronal.pgm").read_bytes().startswith(b"P5\n6 10\n255\n")
    assert (tmp_path / "fig_axial.pgm").read_bytes().startswith(b"P5\n6 8\n255\n")


class TestSliceToPgm:
    def test_scaling_and_layout(self):
        pgm = cli.slice_to_pgm(np.array([[0.0, 1.0], [2.0, 3.0]]))
        assert pgm == b"P5\n2 2\n255\n" + bytes([0, 170, 85, 255])

    def test_constant_slice_is_black(self):
        assert cli.slice_to_pgm(np.full((3, 2), 0.7)).endswith(bytes(6))


class TestReport:
    @pytest.fixture
    def records(self, tmp_path):
        first = {"method": "ours", "ssim": 0.8, "psnr": 30.0, "elapsed_seconds": 2}
        second = {"method": "ours", "ssim": 0.9, "psnr": math.inf, "elapsed_seconds": 4}
        write_records(tmp_path / "a" / "pair.rec", [first])
        write_records(tmp_path / "b" / "pair.rec", [second])
        write_records(tmp_path / "c" / "pair.rec", [{"method": "base", "ssim": 0.7, "psnr": None}])
        return tmp_path

    def test_summary_rows(self, records, capsys):
        out = records / "summary.rec"
        assert run(["report", str(records / "**" / "pair.rec"), "--out", out]) == cli.EXIT_OK
        rows = {(r["method"], r["metric"]): r for r in read_records([out])}
        ssim = rows[("ours", "ssim")]
        assert ssim["mean"] == pytest.approx(0.85)
        assert ssim["std"] == pytest.approx(0.05)
        assert ssim["n"] == 2
        assert (rows[("ours", "psnr")]["n"], rows[("ours", "psnr")]["n_excluded"]) == (1, 1)
        assert rows[("base", "psnr")]["mean"] is None
        timing = rows[("ours", "elapsed_seconds")]
        assert (timing["mean"], timing["median"], timing["min"], timing["max"]) == (3.0, 3.0, 2.0, 4.0)
        table = capsys.readouterr().out
        assert "0.8500 ± 0.0500" in table
        assert "n/a" in table

    def test_no_records(self, tmp_path, capsys):
        assert run(["report", str(tmp_path / "*.rec"), "--out", tmp_path / "s.rec"]) == cli.EXIT_INPUT
        assert "No records found" in capsys.readouterr().err

    def test_records_without_metrics(self, tmp_path):
        write_records(tmp_path / "x.rec", [{"method": "m", "note": "nothing"}])
        with pytest.raises(cli.InvalidInputError, match="No per-pair metric records"):
            cli.aggregate_records(read_records([tmp_path / "x.rec"]))


def test_timing_summary_ignores_non_finite():
    assert cli.timing_summary([1.0, math.inf, 3.0]) == {"n": 2, "mean": 2.0, "median": 2.0, "min": 1.0, "max": 3.0}
    assert cli.timing_summary([])["mean"] is None


def test_print_error_is_one_line(capsys, monkeypatch):
    monkeypatch.setenv("CICREG_NO_COLOR", "1")
    cli.print_error("bad\nthing  happened")
    assert capsys.readouterr().err == "error: bad thing happened\n"
