"""End-to-end CLI flows: simulate -> localize -> eval, mapgen, error paths."""

import json

import pytest

from topoloc.cli import main

SCENARIO = {
    "trajectory": {
        "shape": "corridor-with-turns",
        "duration_s": 10.0,
        "speed_mps": 8.0,
        "imu_rate_hz": 200.0,
        "frame_rate_hz": 10.0,
        "seed": 5,
        "turns": [[30.0, 30.0, 4.0]],
    },
    "world": {"landmark_count": 1500},
    "noise": {
        "sigma_accel": 0.02,
        "sigma_gyro": 0.002,
        "bias_accel": [0.02, -0.01, 0.015],
        "bias_gyro": [0.001, -0.0005, 0.0008],
        "sigma_pixel": 1.0,
        "sigma_speed": 0.1,
        "outlier_fraction": 0.2,
    },
}


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scen = root / "scenario.json"
    scen.write_text(json.dumps(SCENARIO))
    out = root / "sim"
    assert main(["simulate", "--scenario", str(scen), "--out", str(out)]) == 0
    return out


def localize_args(sim_dir, out_traj, extra=()):
    return [
        "localize",
        "--map", str(sim_dir / "map"),
        "--imu", str(sim_dir / "imu.csv"),
        "--speed", str(sim_dir / "speed.csv"),
        "--frames", str(sim_dir / "frames"),
        "--correspondences", str(sim_dir / "correspondences"),
        "--initial-pose", str(sim_dir / "initial_pose.tum"),
        "--config", str(sim_dir / "localize_config.json"),
        "--out-traj", str(out_traj),
        *extra,
    ]


def test_simulate_outputs_present(sim_dir):
    for name in (
        "scenario.json", "landmarks.ply", "imu.csv", "speed.csv",
        "ground_truth_imu.tum", "ground_truth_frames.tum", "ground_truth_cam.tum",
        "initial_pose.tum", "odometry_body.tum", "localize_config.json",
        "map/manifest.json", "frames/index.csv",
    ):
        assert (sim_dir / name).exists(), name


def test_simulate_then_localize_then_eval(sim_dir, tmp_path):
    est = tmp_path / "est.tum"
    diag = tmp_path / "diag.jsonl"
    code = main(localize_args(sim_dir, est, ["--out-diag", str(diag)]))
    assert code == 0
    assert est.exists()

    report_path = tmp_path / "ape.json"
    code = main([
        "eval",
        "--estimate", str(est),
        "--truth", str(sim_dir / "ground_truth_frames.tum"),
        "--out", str(report_path),
    ])
    assert code == 0
    report = json.loads(report_path.read_text())
    assert set(report) == {"ape_t_m", "ape_r_rad", "lon_m", "lat_m", "n_pairs", "series"}
    assert report["ape_t_m"] < 0.2
    assert report["n_pairs"] > 0

    # diagnostics JSON-lines carry the documented keys
    lines = [json.loads(l) for l in diag.read_text().splitlines()]
    assert lines
    assert set(lines[0]) == {"t", "n_matches", "n_inliers", "iterations", "cost0", "cost_final", "flags"}


def test_plot_data_csv(sim_dir, tmp_path):
    est = tmp_path / "est.tum"
    assert main(localize_args(sim_dir, est)) == 0
    out_csv = tmp_path / "errors.csv"
    code = main([
        "plot-data",
        "--estimate", str(est),
        "--truth", str(sim_dir / "ground_truth_frames.tum"),
        "--out", str(out_csv),
    ])
    assert code == 0
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "t,et,er"
    assert len(lines) > 10


def test_localize_reproducible_byte_identical(sim_dir, tmp_path):
    a, b = tmp_path / "a.tum", tmp_path / "b.tum"
    assert main(localize_args(sim_dir, a)) == 0
    assert main(localize_args(sim_dir, b)) == 0
    assert a.read_bytes() == b.read_bytes()


def test_no_speed_flag_changes_output(sim_dir, tmp_path):
    with_speed = tmp_path / "ws.tum"
    no_speed = tmp_path / "ns.tum"
    assert main(localize_args(sim_dir, with_speed)) == 0
    assert main(localize_args(sim_dir, no_speed, ["--no-speed"])) == 0
    assert with_speed.read_bytes() != no_speed.read_bytes()


def test_mapgen_cli(sim_dir, tmp_path):
    out = tmp_path / "genmap"
    code = main([
        "mapgen",
        "--cloud", str(sim_dir / "landmarks.ply"),
        "--frames", str(sim_dir / "frames"),
        "--odometry", str(sim_dir / "odometry_body.tum"),
        "--initial-pose", str(sim_dir / "initial_pose_cam.tum"),
        "--intrinsics", str(sim_dir / "intrinsics.json"),
        "--cam-to-base", str(sim_dir / "cam_to_base.json"),
        "--truth-cam", str(sim_dir / "ground_truth_cam.tum"),
        "--out", str(out),
    ])
    assert code == 0
    assert (out / "manifest.json").exists()
    report = json.loads((out / "mapgen_report.json").read_text())
    accepted = [r for r in report if r["accepted"]]
    assert len(accepted) >= 0.95 * len(report)


def test_missing_map_dir_exits_1(sim_dir, tmp_path, capsys):
    args = localize_args(sim_dir, tmp_path / "x.tum")
    args[args.index("--map") + 1] = str(tmp_path / "no_such_map")
    assert main(args) == 1
    assert "no_such_map" in capsys.readouterr().err


def test_eval_disjoint_ranges_exits_1(sim_dir, tmp_path, capsys):
    shifted = tmp_path / "shifted.tum"
    rows = (sim_dir / "ground_truth_frames.tum").read_text().splitlines()
    shifted.write_text(
        "\n".join(f"{float(r.split()[0]) + 1e6} " + " ".join(r.split()[1:]) for r in rows)
    )
    code = main([
        "eval",
        "--estimate", str(shifted),
        "--truth", str(sim_dir / "ground_truth_frames.tum"),
        "--out", str(tmp_path / "ape.json"),
    ])
    assert code == 1


def test_unknown_config_key_rejected(sim_dir, tmp_path, capsys):
    cfg = json.loads((sim_dir / "localize_config.json").read_text())
    cfg["not_a_real_key"] = 1
    bad = tmp_path / "bad_config.json"
    bad.write_text(json.dumps(cfg))
    args = localize_args(sim_dir, tmp_path / "x.tum")
    args[args.index("--config") + 1] = str(bad)
    assert main(args) == 1
    assert "not_a_real_key" in capsys.readouterr().err


def test_unknown_scenario_key_rejected(tmp_path):
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps({"trajectory": {"shape": "circle", "warp_drive": 9}}))
    assert main(["simulate", "--scenario", str(scen), "--out", str(tmp_path / "o")]) == 1


def test_bad_flag_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["localize", "--definitely-not-a-flag"])
    assert exc.value.code == 1
