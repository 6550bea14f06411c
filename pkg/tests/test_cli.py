import json

import numpy as np
import pytest

from demcorrect import fractal_dem, load_grid, save_grid, synth_landcover
from demcorrect.cli import ConfigError, main, resolve_config, worker_count


@pytest.fixture
def workspace(tmp_path):
    """Small synthetic inputs on disk plus a config tuned to their size."""
    dem = fractal_dem(5, seed=3, roughness_decay=0.45)   # 33x33
    land = synth_landcover(dem, seed=5)
    reference = dem
    degraded = dem.with_values(dem.values + 2.0)  # constant 2 m bias
    paths = {}
    for name, grid in (("reference", reference), ("dem", degraded),
                       ("bare", land.bare), ("urban", land.urban),
                       ("forest", land.forest), ("strata", land.strata)):
        p = tmp_path / f"{name}.asc"
        save_grid(grid, p)
        paths[name] = str(p)
    paths["out_dir"] = str(tmp_path / "out")
    config = {
        "paths": paths,
        "windows": {"texture_radius": 3, "texture_threshold": 0.5,
                    "vrm_radius": 2, "landcover_radius": 2},
        "gbdt": {"n_trees": 8},
        "sampling": {"rate": 1.0},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    return cfg_path, tmp_path


def run_cli(*args):
    return main([str(a) for a in args])


class TestConfig:
    def test_defaults_plus_file_plus_flags(self, workspace):
        cfg_path, tmp = workspace

        class Args:
            config = str(cfg_path)
            set = ["sampling.rate=0.5"]
            model = ["mlr"]
            seed = 99
            out = str(tmp / "elsewhere")

        cfg = resolve_config(Args())
        assert cfg["sampling"]["rate"] == 0.5
        assert cfg["models"] == ["mlr"]
        assert cfg["sampling"]["seed"] == 99
        assert cfg["paths"]["out_dir"].endswith("elsewhere")
        assert cfg["gbdt"]["n_trees"] == 8  # from file

    def test_unknown_key_rejected(self):
        class Args:
            config = None
            set = ["nonsense.key=1"]
            model = None
            seed = None
            out = None

        with pytest.raises(ConfigError, match="nonsense"):
            resolve_config(Args())

    def test_unknown_model_rejected(self):
        class Args:
            config = None
            set = ['models=["xgboost"]']
            model = None
            seed = None
            out = None

        with pytest.raises(ConfigError, match="xgboost"):
            resolve_config(Args())

    def test_missing_config_file_exit_2(self, tmp_path):
        assert run_cli("features", "--config", tmp_path / "nope.json") == 2

    def test_worker_count_env(self, monkeypatch):
        monkeypatch.delenv("DEMCORRECT_THREADS", raising=False)
        assert worker_count() == 1
        monkeypatch.setenv("DEMCORRECT_THREADS", "4")
        assert worker_count() == 4
        monkeypatch.setenv("DEMCORRECT_THREADS", "zero")
        with pytest.raises(ConfigError):
            worker_count()


class TestFeatures:
    def test_writes_layers_and_manifest(self, workspace):
        cfg_path, tmp = workspace
        assert run_cli("features", "--config", cfg_path) == 0
        out = tmp / "out"
        manifest = json.loads((out / "features_manifest.json").read_text())
        assert len(manifest["layers"]) == 11
        for entry in manifest["layers"]:
            assert (out / entry["file"]).is_file()

    def test_missing_mask_path_exit_2_names_path(self, workspace, capsys):
        cfg_path, tmp = workspace
        cfg = json.loads(cfg_path.read_text())
        cfg["paths"]["bare"] = str(tmp / "missing_mask.asc")
        cfg_path.write_text(json.dumps(cfg))
        assert run_cli("features", "--config", cfg_path) == 2
        assert "missing_mask.asc" in capsys.readouterr().err

    def test_rerun_identical_checksums(self, workspace):
        cfg_path, tmp = workspace
        run_cli("features", "--config", cfg_path)
        m1 = (tmp / "out" / "features_manifest.json").read_text()
        run_cli("features", "--config", cfg_path)
        m2 = (tmp / "out" / "features_manifest.json").read_text()
        assert m1 == m2

    def test_flat_dem_zero_slope_layer(self, workspace):
        cfg_path, tmp = workspace
        cfg = json.loads(cfg_path.read_text())
        flat = fractal_dem(5, relief_amplitude=0.0)
        save_grid(flat, tmp / "flat.asc")
        cfg["paths"]["dem"] = str(tmp / "flat.asc")
        cfg["paths"]["out_dir"] = str(tmp / "flatout")
        cfg_path.write_text(json.dumps(cfg))
        assert run_cli("features", "--config", cfg_path) == 0
        s = load_grid(tmp / "flatout" / "feature_slope.asc")
        assert np.all(s.values[s.valid_mask()] == 0.0)


class TestPipeline:
    def test_full_chain(self, workspace, capsys):
        cfg_path, tmp = workspace
        out = tmp / "out"
        for cmd in ("features", "diagnose", "train", "correct", "evaluate"):
            assert run_cli(cmd, "--config", cfg_path) == 0, cmd

        coll = json.loads((out / "collinearity.json").read_text())
        assert coll["variable_names"][0] == "elevation"

        mlr = json.loads((out / "model_mlr.json").read_text())
        assert set(mlr["feature_names"]) | set(mlr["excluded_features"]) == set(
            coll["variable_names"])

        for name in ("mlr", "gbdt-depthwise", "gbdt-leafwise"):
            assert (out / f"model_{name}.json").is_file()
            assert (out / f"corrected_{name}.asc").is_file()
            abs_err = load_grid(out / f"abs_error_{name}.asc")
            v = abs_err.valid_mask()
            assert np.all(abs_err.values[v] >= 0.0)

        report = json.loads((out / "report.json").read_text())
        assert report["model_names"] == ["gbdt-depthwise", "gbdt-leafwise", "mlr"]
        # constant 2 m bias: every model nails it almost exactly
        assert report["overall"]["pct_rmse_reduction"]["mlr"] > 99.0

    def test_corrected_roundtrips_with_matching_geometry(self, workspace):
        cfg_path, tmp = workspace
        for cmd in ("features", "train", "correct"):
            run_cli(cmd, "--config", cfg_path, "--model", "mlr")
        dem = load_grid(tmp / "dem.asc")
        corrected = load_grid(tmp / "out" / "corrected_mlr.asc")
        assert corrected.geometry.matches(dem.geometry)

    def test_gbdt_uses_all_eleven_features(self, workspace):
        cfg_path, tmp = workspace
        run_cli("features", "--config", cfg_path)
        run_cli("train", "--config", cfg_path, "--model", "gbdt-depthwise")
        doc = json.loads((tmp / "out" / "model_gbdt-depthwise.json").read_text())
        assert len(doc["feature_names"]) == 11

    def test_train_without_features_exit_2(self, workspace):
        cfg_path, tmp = workspace
        assert run_cli("train", "--config", cfg_path) == 2

    def test_correct_with_explicit_model_doc(self, workspace):
        cfg_path, tmp = workspace
        run_cli("features", "--config", cfg_path)
        run_cli("train", "--config", cfg_path, "--model", "mlr")
        rc = run_cli("correct", "--config", cfg_path,
                     "--model-doc", tmp / "out" / "model_mlr.json")
        assert rc == 0
        assert (tmp / "out" / "corrected_mlr.asc").is_file()


class TestBench:
    def bench_args(self, out):
        return ("bench", "--out", out,
                "--set", "bench.size_exponent=5",
                "--set", "gbdt.n_trees=6",
                "--set", "windows.texture_radius=3",
                "--set", "sampling.rate=0.8")

    def test_bench_produces_reports(self, tmp_path):
        out = tmp_path / "bench"
        assert run_cli(*self.bench_args(out)) == 0
        for f in ("report.json", "report.txt", "report_test.json", "report_test.txt",
                  "collinearity.json", "reference.asc", "original.asc",
                  "true_error.asc", "samples_train.csv", "samples_test.csv"):
            assert (out / f).is_file(), f

    def test_bench_rerun_byte_identical(self, tmp_path):
        out = tmp_path / "bench"
        run_cli(*self.bench_args(out))
        watched = ["report.json", "report.txt", "report_test.json",
                   "model_mlr.json", "model_gbdt-depthwise.json",
                   "model_gbdt-leafwise.json", "collinearity.json"]
        first = {f: (out / f).read_bytes() for f in watched}
        run_cli(*self.bench_args(out))
        for f in watched:
            assert (out / f).read_bytes() == first[f], f

    def test_report_text_has_five_strata_rows(self, tmp_path):
        out = tmp_path / "bench"
        run_cli(*self.bench_args(out))
        lines = [l for l in (out / "report.txt").read_text().splitlines() if l]
        stems = [l.split()[0] for l in lines[1:]]
        assert stems[0] == "stratum"
        assert stems[1:] == ["urban_industrial", "agricultural", "mountain",
                             "peninsula", "grassland_shrubland", "overall"]


class TestUsage:
    def test_no_command_exit_2(self, capsys):
        assert main([]) == 2
        capsys.readouterr()

    def test_version_flag(self, capsys):
        assert main(["--version"]) == 0
        capsys.readouterr()
