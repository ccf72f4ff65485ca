"""End-to-end tests of the command line interface.

Every test drives ``diffreg.cli.main(argv)`` in process, so exit codes,
stdout, and output files are all observable without subprocess startup
cost. Scene directories are built through the ``synth`` subcommand the
same way a user would build them.
"""

import json
import os
import sys
from pathlib import Path

import numpy as np
import pytest

from diffreg.cli import GRADCHECK_SUITES, build_parser, main
from diffreg.depth import load_mask_pgm, load_pfm, save_pfm
from diffreg.geometry import CameraIntrinsics, Pose, load_pose, save_pose
from diffreg.matching import CorrespondenceSet, save_correspondences_csv
from diffreg.metrics import relative_pose_errors

HELP_DIR = Path(__file__).parent / "data" / "cli_help"

# flags for a compact scene the score-guided optimizer handles well:
# coarse latent (12x16 over 32x24), generous surface coverage, modest pose gap
CSD_SCENE = [
    "--points", "500", "--surface", "--width", "32", "--height", "24",
    "--focal", "30", "--depth-min", "1.6", "--depth-max", "3.2",
    "--max-angle", "20", "--max-translation", "0.3", "--margin", "2",
]


def make_scene(path, seed=0, extra=()):
    assert main(["synth", "--out", str(path), "--seed", str(seed), *extra]) == 0
    return Path(path)


def read_report(out_dir, fmt="json"):
    return json.loads((Path(out_dir) / f"report.{fmt}").read_text())


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_scene_files(tmp_path):
    scene = make_scene(tmp_path / "s")
    for name in (
        "cloud.xyz",
        "image_features.dfi1",
        "image_features.dfi1.json",
        "intrinsics.json",
        "gt_pose.json",
        "correspondences.csv",
    ):
        assert (scene / name).exists(), name


def test_synth_seed_is_byte_reproducible(tmp_path):
    a = make_scene(tmp_path / "a", seed=7)
    b = make_scene(tmp_path / "b", seed=7)
    c = make_scene(tmp_path / "c", seed=8)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert any(
        (a / n).read_bytes() != (c / n).read_bytes() for n in names
    ), "different seeds produced identical scenes"


def test_synth_rejects_bad_counts(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", str(tmp_path / "s"), "--points", "0"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# match / register


def test_match_writes_correspondences(tmp_path, capsys):
    scene = make_scene(tmp_path / "s")
    out = tmp_path / "pairs.csv"
    assert main(["match", "--scene", str(scene), "--out", str(out)]) == 0
    assert "matched" in capsys.readouterr().out
    rows = out.read_text().strip().splitlines()
    assert len(rows) > 50  # header + one row per matched point


def test_register_noiseless_scene_is_accurate(tmp_path):
    scene = make_scene(tmp_path / "s")
    out = tmp_path / "o"
    assert main(["register", "--scene", str(scene), "--out-dir", str(out)]) == 0
    rep = read_report(out)
    assert rep["rmse"] < 0.1
    assert rep["registration_recall"] == 1.0
    assert (out / "pose.json").exists()


def test_register_survives_30pct_outliers():
    # consensus solving should shrug off 30% wrong pairs on most draws
    import tempfile

    hits = 0
    for seed in range(20):
        with tempfile.TemporaryDirectory() as td:
            scene = make_scene(Path(td) / "s", seed=seed, extra=["--outliers", "0.3"])
            out = Path(td) / "o"
            code = main(
                ["register", "--scene", str(scene), "--out-dir", str(out),
                 "--seed", str(seed)]
            )
            if code == 0 and read_report(out)["rmse"] < 0.1:
                hits += 1
    assert hits >= 18, f"only {hits}/20 outlier scenes registered accurately"


def test_register_with_offset_tuning(tmp_path):
    scene = make_scene(tmp_path / "s")
    out = tmp_path / "o"
    code = main(
        ["register", "--scene", str(scene), "--out-dir", str(out),
         "--tune", "--tune-steps", "20"]
    )
    assert code == 0
    assert read_report(out)["rmse"] < 0.1


def test_register_seed_gives_byte_identical_outputs(tmp_path):
    scene = make_scene(tmp_path / "s", extra=["--outliers", "0.2"])
    outs = []
    for name in ("o1", "o2"):
        out = tmp_path / name
        assert main(
            ["register", "--scene", str(scene), "--out-dir", str(out), "--seed", "3"]
        ) == 0
        outs.append(out)
    for fname in ("pose.json", "report.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes(), fname


def test_register_csv_report(tmp_path):
    scene = make_scene(tmp_path / "s")
    out = tmp_path / "o"
    assert main(
        ["register", "--scene", str(scene), "--out-dir", str(out),
         "--report-fmt", "csv"]
    ) == 0
    header, row = (out / "report.csv").read_text().strip().splitlines()
    assert "rmse" in header.split(",")
    assert len(row.split(",")) == len(header.split(","))


def test_register_missing_feature_file_exits_2(tmp_path, capsys):
    scene = make_scene(tmp_path / "s")
    missing = scene / "image_features.dfi1"
    missing.unlink()
    code = main(["register", "--scene", str(scene), "--out-dir", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert str(missing) in err  # the message must name the path


def test_register_missing_scene_dir_exits_2(tmp_path, capsys):
    code = main(
        ["register", "--scene", str(tmp_path / "nope"), "--out-dir", str(tmp_path / "o")]
    )
    assert code == 2
    assert "cloud" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# pnp / ransac


def test_pnp_on_true_correspondences_recovers_pose(tmp_path):
    scene = make_scene(tmp_path / "s")
    out = tmp_path / "pose.json"
    code = main(
        ["pnp", "--corr", str(scene / "correspondences.csv"),
         "--intrinsics", str(scene / "intrinsics.json"), "--out", str(out)]
    )
    assert code == 0
    rre, rte = relative_pose_errors(load_pose(scene / "gt_pose.json"), load_pose(out))
    assert rre < 1e-6 and rte < 1e-8


def test_ransac_rejects_outliers(tmp_path, capsys):
    scene = make_scene(tmp_path / "s", extra=["--outliers", "0.4", "--points", "120"])
    out = tmp_path / "pose.json"
    inliers = tmp_path / "inliers.csv"
    code = main(
        ["ransac", "--corr", str(scene / "correspondences.csv"),
         "--intrinsics", str(scene / "intrinsics.json"),
         "--out", str(out), "--inliers-out", str(inliers)]
    )
    assert code == 0
    rre, _ = relative_pose_errors(load_pose(scene / "gt_pose.json"), load_pose(out))
    assert rre < 0.5
    kept = inliers.read_text().strip().splitlines()
    assert 60 <= len(kept) - 1 <= 120


def test_ransac_no_consensus_exits_3(tmp_path, capsys):
    # pure noise correspondences: no pose explains more than the minimal sample
    rng = np.random.default_rng(0)
    n = 40
    corr = CorrespondenceSet(
        points=rng.uniform(-5.0, 5.0, size=(n, 3)),
        pixels=rng.uniform(0.0, 128.0, size=(n, 2)),
        scores=np.ones(n),
    )
    corr_path = tmp_path / "noise.csv"
    save_correspondences_csv(corr_path, corr)
    K = CameraIntrinsics(fx=120.0, fy=120.0, cx=64.0, cy=48.0, width=128, height=96)
    K.save(tmp_path / "K.json")
    code = main(
        ["ransac", "--corr", str(corr_path), "--intrinsics", str(tmp_path / "K.json"),
         "--out", str(tmp_path / "pose.json"), "--threshold-px", "0.5"]
    )
    assert code == 3
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# densify / convert


def _sparse_depth(seed=0, shape=(24, 32), n=40):
    rng = np.random.default_rng(seed)
    vals = np.zeros(shape, dtype=np.float64)
    r = rng.integers(0, shape[0], size=n)
    c = rng.integers(0, shape[1], size=n)
    vals[r, c] = rng.uniform(1.0, 9.0, size=n)
    return vals


def test_densify_runs_and_is_deterministic(tmp_path, capsys):
    src = tmp_path / "sparse.pfm"
    save_pfm(src, _sparse_depth())
    outs = []
    for name in ("a.pfm", "b.pfm"):
        out = tmp_path / name
        code = main(
            ["densify", "--input", str(src), "--out", str(out),
             "--mask-out", str(out.with_suffix(".pgm"))]
        )
        assert code == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()

    dense = load_pfm(outs[0])
    mask = load_mask_pgm(outs[0].with_suffix(".pgm"))
    sparse = _sparse_depth()
    assert np.all(mask[sparse > 0]), "densify dropped an input pixel"
    occupied = dense[mask]
    lo, hi = sparse[sparse > 0].min(), sparse[sparse > 0].max()
    # both files round through float32, so allow a few ulps of slack
    assert occupied.size and occupied.min() >= lo * (1.0 - 1e-6)
    assert occupied.max() <= hi * (1.0 + 1e-6)


def test_convert_pfm_npy_roundtrip(tmp_path):
    src = tmp_path / "d.pfm"
    save_pfm(src, _sparse_depth(3))
    npy = tmp_path / "d.npy"
    back = tmp_path / "back.pfm"
    assert main(["convert", "--input", str(src), "--out", str(npy)]) == 0
    assert main(["convert", "--input", str(npy), "--out", str(back)]) == 0
    assert src.read_bytes() == back.read_bytes()


def test_convert_unsupported_pair_exits_2(tmp_path, capsys):
    src = tmp_path / "d.pfm"
    save_pfm(src, _sparse_depth())
    code = main(["convert", "--input", str(src), "--out", str(tmp_path / "d.xyz")])
    assert code == 2
    assert "no converter" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_all_suites_pass(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    for name in GRADCHECK_SUITES:
        assert name in out
    assert "FAIL" not in out


def test_gradcheck_suite_filter(capsys):
    assert main(["gradcheck", "--suite", "circle"]) == 0
    out = capsys.readouterr().out
    assert "circle" in out
    assert "bpnp" not in out


def test_gradcheck_injected_fault_exits_4(capsys):
    code = main(["gradcheck", "--suite", "circle", "--inject-fault"])
    assert code == 4
    assert "FAIL" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# csd-optimize


def test_csd_optimize_mock_provider_converges(tmp_path, capsys):
    scene = make_scene(tmp_path / "s", seed=0, extra=CSD_SCENE)
    out = tmp_path / "o"
    code = main(
        ["csd-optimize", "--scene", str(scene), "--out-dir", str(out),
         "--provider", "mock:depth_target", "--steps", "120",
         "--latent-h", "12", "--latent-w", "16", "--seed", "0"]
    )
    assert code == 0
    rre, rte = relative_pose_errors(
        load_pose(scene / "gt_pose.json"), load_pose(out / "pose.json")
    )
    assert rre < 0.5 and rte < 0.02

    rows = (out / "trajectory.csv").read_text().strip().splitlines()
    header = rows[0].split(",")
    i_sur = header.index("surrogate")
    i_acc = header.index("accepted")
    accepted = [float(r.split(",")[i_sur]) for r in rows[1:] if r.split(",")[i_acc] == "1"]
    assert len(accepted) >= 2
    assert all(b <= a + 1e-12 for a, b in zip(accepted, accepted[1:])), (
        "surrogate increased across an accepted step"
    )


def test_csd_optimize_seed_gives_byte_identical_outputs(tmp_path):
    scene = make_scene(tmp_path / "s", seed=1, extra=CSD_SCENE)
    outs = []
    for name in ("o1", "o2"):
        out = tmp_path / name
        code = main(
            ["csd-optimize", "--scene", str(scene), "--out-dir", str(out),
             "--provider", "mock:depth_target", "--steps", "10",
             "--latent-h", "12", "--latent-w", "16", "--seed", "5"]
        )
        assert code == 0
        outs.append(out)
    for fname in ("pose.json", "trajectory.csv"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes(), fname


def test_csd_optimize_zero_steps_rejected_at_parse(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(
            ["csd-optimize", "--scene", str(tmp_path), "--out-dir", str(tmp_path),
             "--provider", "mock:zero", "--steps", "0"]
        )
    assert exc.value.code == 2
    assert "--steps" in capsys.readouterr().err


def test_csd_optimize_unreachable_bridge_exits_5(tmp_path, capsys):
    scene = make_scene(tmp_path / "s", seed=0, extra=CSD_SCENE)
    code = main(
        ["csd-optimize", "--scene", str(scene), "--out-dir", str(tmp_path / "o"),
         "--provider", "bridge:127.0.0.1:1", "--steps", "5",
         "--latent-h", "12", "--latent-w", "16", "--timeout", "2"]
    )
    assert code == 5
    assert "error" in capsys.readouterr().err


def test_csd_optimize_command_provider(tmp_path):
    # a stdio child that answers every request with a zero residual
    child = tmp_path / "zero_provider.py"
    child.write_text(
        "import json, sys, base64, struct\n"
        "for line in sys.stdin:\n"
        "    req = json.loads(line)\n"
        "    h, w = req['latent']\n"
        "    blob = struct.pack('<%df' % (h * w), *([0.0] * (h * w)))\n"
        "    resp = {'id': req['id'],\n"
        "            'residual_b64': base64.b64encode(blob).decode(),\n"
        "            'err': None}\n"
        "    sys.stdout.write(json.dumps(resp) + '\\n')\n"
        "    sys.stdout.flush()\n"
    )
    scene = make_scene(tmp_path / "s", seed=0, extra=CSD_SCENE)
    out = tmp_path / "o"
    code = main(
        ["csd-optimize", "--scene", str(scene), "--out-dir", str(out),
         "--provider", f"cmd:{sys.executable} {child}", "--steps", "3",
         "--latent-h", "12", "--latent-w", "16"]
    )
    assert code == 0
    assert (out / "trajectory.csv").exists()


def test_csd_optimize_bad_provider_spec_exits_2(tmp_path, capsys):
    scene = make_scene(tmp_path / "s", seed=0, extra=CSD_SCENE)
    code = main(
        ["csd-optimize", "--scene", str(scene), "--out-dir", str(tmp_path / "o"),
         "--provider", "mock:not_a_kind", "--steps", "3",
         "--latent-h", "12", "--latent-w", "16"]
    )
    assert code == 2


# ---------------------------------------------------------------------------
# metrics


def test_metrics_perfect_estimate(tmp_path, capsys):
    scene = make_scene(tmp_path / "s")
    out = tmp_path / "report.json"
    code = main(
        ["metrics", "--corr", str(scene / "correspondences.csv"),
         "--gt-pose", str(scene / "gt_pose.json"),
         "--est-pose", str(scene / "gt_pose.json"),
         "--intrinsics", str(scene / "intrinsics.json"), "--out", str(out)]
    )
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["inlier_ratio"] == 1.0
    assert rep["rmse"] == 0.0
    assert rep["registration_recall"] == 1.0
    assert rep["rre_deg"] == 0.0


def test_metrics_identity_estimate_flags_failure(tmp_path):
    scene = make_scene(tmp_path / "s")
    est = tmp_path / "identity.json"
    save_pose(est, Pose.identity())
    out = tmp_path / "report.json"
    code = main(
        ["metrics", "--corr", str(scene / "correspondences.csv"),
         "--gt-pose", str(scene / "gt_pose.json"), "--est-pose", str(est),
         "--intrinsics", str(scene / "intrinsics.json"), "--out", str(out)]
    )
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["registration_recall"] == 0.0
    assert rep["rre_deg"] > 1.0


# ---------------------------------------------------------------------------
# environment / parser


def test_thread_cap_env_applied(tmp_path, monkeypatch):
    monkeypatch.setenv("DIFFREG_THREADS", "2")
    make_scene(tmp_path / "s")
    assert os.environ["OMP_NUM_THREADS"] == "2"


def test_thread_cap_env_invalid_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DIFFREG_THREADS", "zero")
    code = main(["synth", "--out", str(tmp_path / "s")])
    assert code == 2
    assert "DIFFREG_THREADS" in capsys.readouterr().err


def test_negative_weight_rejected(tmp_path, capsys):
    scene = make_scene(tmp_path / "s")
    with pytest.raises(SystemExit) as exc:
        main(
            ["register", "--scene", str(scene), "--out-dir", str(tmp_path / "o"),
             "--mu", "-0.5"]
        )
    assert exc.value.code == 2


def test_help_matches_goldens(monkeypatch):
    # pin the terminal geometry argparse uses for wrapping
    monkeypatch.setenv("COLUMNS", "80")
    monkeypatch.setenv("LINES", "24")
    parser = build_parser()
    assert parser.format_help() == (HELP_DIR / "main.txt").read_text()
    subs = parser._subparsers._group_actions[0].choices
    assert sorted(subs) == sorted(
        p.stem for p in HELP_DIR.glob("*.txt") if p.stem != "main"
    )
    for name, sp in subs.items():
        assert sp.format_help() == (HELP_DIR / f"{name}.txt").read_text(), name


def test_every_flag_documents_itself():
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    for name, sp in subs.items():
        for action in sp._actions:
            assert action.help, f"{name}: {action.option_strings} lacks help text"
