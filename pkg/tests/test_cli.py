import hashlib
import json
import os

import numpy as np
import pytest

from pancal import cli, io


SCENE_ARGS = [
    "--panos", "3", "--points", "400", "--marks", "8",
    "--views-per-pano", "6", "--fov", "85", "--width", "960", "--height", "540",
]
SAMPLING_ARGS = ["--views-per-pano", "6", "--fov", "85", "--width", "960", "--height", "540"]


def run(out_dir, *args, seed=0, threads=1):
    return cli.main(["--seed", str(seed), "--threads", str(threads), "--out-dir", str(out_dir), *args])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert run(d, "synth", *SCENE_ARGS) == 0
    assert run(d, "reconstruct", *SAMPLING_ARGS, "--road-labels", str(d / "road_labels.csv")) == 0
    assert run(d, "georegister", "--origin", "40.44,-79.95,240.0") == 0
    assert run(d, "fit-plane") == 0
    assert run(d, "localize", "--image-size", "1600x1200") == 0
    assert run(d, "measure") == 0
    return d


class TestSynth:
    def test_byte_identical_reruns(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        assert run(d1, "synth", *SCENE_ARGS, seed=7) == 0
        assert run(d2, "synth", *SCENE_ARGS, seed=7) == 0
        for name in sorted(os.listdir(d1)):
            assert digest(d1 / name) == digest(d2 / name), name

    def test_invalid_pano_count_exit_2(self, tmp_path, capsys):
        assert run(tmp_path, "synth", "--panos", "1") == 2
        assert "N >= 2" in capsys.readouterr().err

    def test_default_radius_is_forty(self, tmp_path, capsys):
        assert run(tmp_path, "synth", *SCENE_ARGS) == 0
        assert "radius 40 m" in capsys.readouterr().out

    def test_spec_file_override(self, tmp_path):
        spec_file = tmp_path / "spec.json"
        spec_file.write_text(json.dumps({"num_panos": 4, "num_points": 350}))
        assert run(tmp_path / "o", "synth", *SCENE_ARGS, "--spec-file", str(spec_file)) == 0
        truth = io.read_truth(tmp_path / "o" / io.TRUTH_FILE)
        assert len(truth["pano_enu"]) == 4

    def test_unknown_spec_field_exit_2(self, tmp_path):
        spec_file = tmp_path / "spec.json"
        spec_file.write_text(json.dumps({"frobnicate": 1}))
        assert run(tmp_path / "o", "synth", "--spec-file", str(spec_file)) == 2


class TestPipeline:
    def test_full_pipeline_outputs(self, pipeline_dir):
        d = pipeline_dir
        for name in (
            io.RECONSTRUCTION_FILE,
            io.PLANE_FILE,
            io.CALIBRATION_FILE,
            io.MEASURE_REPORT_JSON,
            io.MEASURE_REPORT_TXT,
        ):
            assert (d / name).exists(), name
        report = json.loads((d / io.MEASURE_REPORT_JSON).read_text())
        assert report["rmse_pct"] < 0.01  # noiseless end to end

    def test_measure_table_zeroes(self, pipeline_dir):
        text = (pipeline_dir / io.MEASURE_REPORT_TXT).read_text()
        assert "0.00" in text

    def test_speed_and_heatmap(self, pipeline_dir, capsys):
        d = pipeline_dir
        assert run(d, "speed") == 0
        out = capsys.readouterr().out
        assert "m/s" in out and "km/h" in out
        doc = json.loads((d / io.SPEEDS_FILE).read_text())
        readings = [r for rs in doc["speeds"].values() for r in rs]
        assert readings
        truth = io.read_truth(d / io.TRUTH_FILE)
        from pancal import traffic as tf

        true_speeds = {
            t.track_id: tf.trap_speed(t, truth["trap"], truth["plane"]) for t in truth["vehicle_tracks"]
        }
        flat_true = [s for rs in true_speeds.values() for _, s in rs]
        assert readings[0]["speed_mps"] == pytest.approx(flat_true[0], rel=1e-6)
        assert run(d, "heatmap") == 0
        hm = json.loads((d / io.HEATMAP_FILE).read_text())
        assert max(max(row) for row in hm["normalized"]) == 1.0

    def test_eval_report(self, pipeline_dir):
        d = pipeline_dir
        assert (
            run(
                d,
                "eval",
                "--reconstruction", str(d / io.RECONSTRUCTION_FILE),
                "--calibration", str(d / io.CALIBRATION_FILE),
                "--plane", str(d / io.PLANE_FILE),
            )
            == 0
        )
        doc = json.loads((d / io.EVAL_FILE).read_text())
        assert doc["calibration"]["focal_pct"]["fx"] < 0.01
        assert doc["ground_distance"]["rmse_pct"] < 0.01
        assert doc["reconstruction"]["mean_center_err_m"] < 1e-4

    def test_missing_match_file_exit_2(self, tmp_path, capsys):
        assert run(tmp_path, "synth", *SCENE_ARGS) == 0
        assert run(
            tmp_path, "reconstruct", "--matches", str(tmp_path / "missing.txt"), *SAMPLING_ARGS
        ) == 2
        assert "missing.txt" in capsys.readouterr().err

    def test_measure_requires_metric_frame(self, tmp_path, pipeline_dir):
        # localize against the up-to-scale reconstruction, then try to measure
        d = tmp_path / "arb"
        d.mkdir()
        assert run(d, "synth", *SCENE_ARGS) == 0
        assert run(d, "reconstruct", *SAMPLING_ARGS) == 0
        assert run(d, "localize", "--image-size", "1600x1200") == 0
        assert run(d, "fit-plane") == 0
        assert run(d, "measure") == 2

    def test_no_pano_constraint_recorded(self, tmp_path, capsys):
        d = tmp_path / "npc"
        assert run(d, "synth", *SCENE_ARGS) == 0
        assert run(d, "reconstruct", *SAMPLING_ARGS, "--no-pano-constraint") == 0
        assert "pano constraint off" in capsys.readouterr().out


class TestDeterminism:
    def test_reconstruct_byte_identical_and_thread_independent(self, tmp_path):
        hashes = []
        for threads, sub in ((1, "t1"), (4, "t4")):
            d = tmp_path / sub
            assert run(d, "synth", *SCENE_ARGS) == 0
            assert run(d, "reconstruct", *SAMPLING_ARGS, threads=threads) == 0
            assert run(d, "georegister", "--origin", "40.44,-79.95,240.0", threads=threads) == 0
            assert run(d, "fit-plane", threads=threads) == 0
            assert run(d, "localize", "--image-size", "1600x1200", threads=threads) == 0
            hashes.append([digest(d / n) for n in (io.RECONSTRUCTION_FILE, io.PLANE_FILE, io.CALIBRATION_FILE)])
        assert hashes[0] == hashes[1]


class TestSweep:
    def test_sweep_csv_shape(self, tmp_path):
        d = tmp_path / "sweep"
        code = run(
            d,
            "sweep-panos",
            "--min", "2",
            "--max", "3",
            "--points", "300",
            "--noise-sigma", "0.5",
            "--views-per-pano", "6",
            "--fov", "85",
            "--width", "960",
            "--height", "540",
        )
        assert code == 0
        lines = (d / io.SWEEP_CSV).read_text().strip().splitlines()
        assert len(lines) == 3  # header + rows for N=2 and N=3
        # N=2 cannot geo-register (collinear); its error cells are empty
        assert lines[1].startswith("2,")
        n2 = lines[1].split(",")
        assert n2[1] == "" and n2[2] == ""
        n3 = lines[2].split(",")
        assert n3[1] != "" and n3[2] != ""


class TestHelp:
    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["synth", "--help"])
        out = capsys.readouterr().out
        assert "default: 10" in out and "default: 40" in out

    def test_unknown_flag_rejected(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--bogus"])
        assert exc.value.code == 2
