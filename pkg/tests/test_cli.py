"""End-to-end tests of the command line through Typer's runner."""

import csv
import json

import pytest
from typer.testing import CliRunner

from ttnf_tool import __version__
from ttnf_tool.commands import bench
from ttnf_tool.errors import EXIT_INTERNAL
from ttnf_tool.main import app

runner = CliRunner()


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for name in ("TTNF_STEPS", "TTNF_SEEDS", "TTNF_SCENE"):
        monkeypatch.delenv(name, raising=False)
    return tmp_path


def _config(path, **values):
    path.write_text(json.dumps(values, indent=2))
    return path


def _manifest(directory):
    return json.loads((directory / "manifest.json").read_text())


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestBasics:
    def test_help(self):
        result = runner.invoke(app, ["--help"])
        assert result.exit_code == 0
        for command in ("denoise", "bench", "fit", "render", "scene", "convert", "info"):
            assert command in result.output

    def test_version(self):
        result = runner.invoke(app, ["version"])
        assert result.exit_code == 0
        assert __version__ in result.output

    def test_invalid_memory_budget(self):
        result = runner.invoke(app, ["--mem-budget", "0", "version"])
        assert result.exit_code == 2


class TestDenoise:
    @pytest.fixture
    def sweep(self, workdir):
        return _config(
            workdir / "sweep.json",
            modes=[4, 4, 4],
            gen_rank=2,
            fit_ranks=[2],
            methods=["tt_svd", "sampling_v2"],
            families=["normal"],
            scales=[0.1],
            seeds=[0],
            steps=5,
            batch=16,
        )

    def test_writes_csv_and_manifest(self, sweep, workdir):
        result = runner.invoke(app, ["denoise", "-c", str(sweep), "-o", "out"])
        assert result.exit_code == 0, result.output
        rows = _rows(workdir / "out" / "denoise.csv")
        assert [r["method"] for r in rows] == ["tt_svd", "sampling_v2"]
        manifest = _manifest(workdir / "out")
        assert manifest["command"] == "denoise"
        assert manifest["status"] == "ok"
        assert manifest["seeds"] == [0]
        assert manifest["config"]["modes"] == [4, 4, 4]
        assert len(manifest["extra"]["seconds"]) == 2

    def test_no_timing_output_is_reproducible(self, sweep, workdir):
        for out in ("a", "b"):
            result = runner.invoke(app, ["denoise", "-c", str(sweep), "-o", out, "--no-timing"])
            assert result.exit_code == 0, result.output
        assert (workdir / "a" / "denoise.csv").read_text() == (workdir / "b" / "denoise.csv").read_text()

    def test_seed_rebase(self, sweep, workdir):
        result = runner.invoke(app, ["denoise", "-c", str(sweep), "-o", "out", "--seed", "7"])
        assert result.exit_code == 0, result.output
        assert {r["seed"] for r in _rows(workdir / "out" / "denoise.csv")} == {"7"}

    def test_bad_config_exits_2_with_failed_manifest(self, workdir):
        bad = _config(workdir / "bad.json", modes=[4, 4], bogus=1)
        result = runner.invoke(app, ["denoise", "-c", str(bad), "-o", "out"])
        assert result.exit_code == 2
        manifest = _manifest(workdir / "out")
        assert manifest["status"] == "failed"
        assert "unknown key 'bogus'" in manifest["error"]

    def test_missing_config_exits_2(self, workdir):
        result = runner.invoke(app, ["denoise", "-c", "absent.json", "-o", "out"])
        assert result.exit_code == 2


class TestBench:
    def test_writes_one_row_per_cell(self, workdir):
        cfg = _config(workdir / "bench.json", log2_sizes=[8], ranks=[2, 4], batches=[64])
        result = runner.invoke(app, ["bench", "-c", str(cfg), "-o", "out", "--no-timing"])
        assert result.exit_code == 0, result.output
        rows = _rows(workdir / "out" / "bench.csv")
        assert len(rows) == 8
        assert {r["kind"] for r in rows} == {"v1", "v2", "v3", "dense"}
        assert _manifest(workdir / "out")["status"] == "ok"

    def test_size_not_a_power_of_the_mode(self, workdir):
        cfg = _config(workdir / "bench.json", log2_sizes=[7], mode_size=4)
        result = runner.invoke(app, ["bench", "-c", str(cfg), "-o", "out"])
        assert result.exit_code == 2

    def test_parallel_jobs_match_serial(self, workdir):
        cfg = _config(workdir / "bench.json", log2_sizes=[8], ranks=[2, 4], batches=[64])
        for out, jobs in (("serial", "1"), ("parallel", "2")):
            result = runner.invoke(app, ["bench", "-c", str(cfg), "-o", out, "--no-timing", "--jobs", jobs])
            assert result.exit_code == 0, result.output
        serial = _rows(workdir / "serial" / "bench.csv")
        parallel = _rows(workdir / "parallel" / "bench.csv")
        # allocation peaks vary between processes
        for rows in (serial, parallel):
            for row in rows:
                row.pop("measured_peak_elems")
        assert parallel == serial

    def test_unexpected_error_exits_1_with_failed_manifest(self, workdir, monkeypatch):
        def boom(cfg, jobs=1):
            raise RuntimeError("boom")

        monkeypatch.setattr(bench, "run_bench", boom)
        result = runner.invoke(app, ["bench", "-o", "out"])
        assert result.exit_code == EXIT_INTERNAL
        manifest = _manifest(workdir / "out")
        assert manifest["status"] == "failed"
        assert manifest["error"] == "RuntimeError: boom"


class TestScenePipeline:
    @pytest.fixture
    def fitted(self, workdir):
        result = runner.invoke(
            app, ["scene", "--levels", "2", "--image-size", "8", "--samples", "8", "-o", "scene"]
        )
        assert result.exit_code == 0, result.output
        cfg = _config(
            workdir / "fit.json",
            scene="scene",
            r_max=8,
            steps=3,
            samples_per_ray=8,
            rays_per_batch=64,
            log_every=1,
        )
        result = runner.invoke(app, ["fit", "-c", str(cfg), "-o", "fit", "--no-timing"])
        assert result.exit_code == 0, result.output
        return workdir / "fit"

    def test_fit_outputs(self, fitted):
        assert (fitted / "grid.ttnf").exists()
        assert (fitted / "grid.json").exists()
        metrics = _rows(fitted / "metrics.csv")
        assert [m["step"] for m in metrics] == ["0", "1", "2", "3", "3"]
        assert [m["split"] for m in metrics[-2:]] == ["train", "test"]
        assert all(m["seconds"] == "0" for m in metrics)
        views = _rows(fitted / "views.csv")
        assert [v["split"] for v in views].count("test") == 2
        manifest = _manifest(fitted)
        assert manifest["status"] == "ok"
        assert set(manifest["extra"]["psnr"]) == {"train", "test"}

    def test_render_against_the_scene(self, fitted, workdir):
        cfg = _config(workdir / "render.json", scene="scene", samples_per_ray=8)
        result = runner.invoke(app, ["render", "-c", str(cfg), "--checkpoint", str(fitted / "grid.ttnf"), "-o", "img"])
        assert result.exit_code == 0, result.output
        assert len(list((workdir / "img").glob("view_*.ppm"))) == 8
        assert len(_rows(workdir / "img" / "views.csv")) == 8

    def test_render_with_orbit_cameras(self, fitted, workdir):
        cfg = _config(workdir / "render.json", samples_per_ray=4, image_size=6, image_format="png", sampler="v3")
        result = runner.invoke(app, ["render", "-c", str(cfg), "--checkpoint", str(fitted / "grid.ttnf"), "-o", "img"])
        assert result.exit_code == 0, result.output
        assert len(list((workdir / "img").glob("view_*.png"))) == 8
        assert not (workdir / "img" / "views.csv").exists()

    def test_rerun_outputs_are_byte_identical(self, fitted, workdir):
        result = runner.invoke(app, ["fit", "-c", "fit.json", "-o", "fit_again", "--no-timing"])
        assert result.exit_code == 0, result.output
        for name in ("metrics.csv", "views.csv", "grid.ttnf", "grid.json"):
            assert (workdir / "fit_again" / name).read_bytes() == (fitted / name).read_bytes(), name

        _config(workdir / "render.json", scene="scene", samples_per_ray=8, image_format="png")
        for out in ("img_a", "img_b"):
            result = runner.invoke(
                app, ["render", "-c", "render.json", "--checkpoint", str(fitted / "grid.ttnf"), "-o", out]
            )
            assert result.exit_code == 0, result.output
        produced = sorted(p.name for p in (workdir / "img_a").iterdir() if p.name != "manifest.json")
        assert "views.csv" in produced and "view_000.png" in produced
        for name in produced:
            assert (workdir / "img_a" / name).read_bytes() == (workdir / "img_b" / name).read_bytes(), name

    def test_info(self, fitted):
        result = runner.invoke(app, ["info", str(fitted / "grid.ttnf")])
        assert result.exit_code == 0, result.output
        assert "8, 28" in result.output

    def test_convert(self, fitted, workdir):
        result = runner.invoke(app, ["convert", str(fitted / "grid.ttnf"), "-o", "conv"])
        assert result.exit_code == 0, result.output
        meta = json.loads((workdir / "conv" / "grid_reduced.json").read_text())
        assert meta["identity_mask"] == [True, False]
        assert meta["grid"]["levels"] == 2

    def test_float32_precision(self, fitted, workdir):
        result = runner.invoke(app, ["--precision", "f32", "fit", "-c", "fit.json", "-o", "fit32"])
        assert result.exit_code == 0, result.output
        assert json.loads((workdir / "fit32" / "grid.json").read_text())["dtype"] == "float32"


class TestRenderErrors:
    def test_without_checkpoint_exits_2(self):
        result = runner.invoke(app, ["render", "-o", "img"])
        assert result.exit_code == 2

    def test_missing_checkpoint_exits_4(self, workdir):
        result = runner.invoke(app, ["render", "--checkpoint", "nope.ttnf", "-o", "img"])
        assert result.exit_code == 4
        assert _manifest(workdir / "img")["status"] == "failed"

    def test_v1_is_rejected(self, workdir):
        cfg = _config(workdir / "render.json", checkpoint="nope.ttnf", sampler="v1")
        result = runner.invoke(app, ["render", "-c", str(cfg), "-o", "img"])
        assert result.exit_code == 2

    def test_info_on_missing_checkpoint(self):
        result = runner.invoke(app, ["info", "nope.ttnf"])
        assert result.exit_code == 4
