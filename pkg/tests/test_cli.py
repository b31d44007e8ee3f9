"""
Command-line tests: exit codes, error lines and the synth -> fit -> refine -> eval pipeline
"""

import json

import pytest

from camfit.core.formats import read_trajectory, write_trajectory
from camfit.main import main

SMALL = """
synth.frames = 4
synth.width = 24
synth.height = 24
synth.focal = 24
synth.camera_path = handheld
synth.static_boxes = 2
schedule.m = 3
fit.max_iterations = 40
fit.min_iterations = 40
fit.sigma_resolution = 4
refine.grid = 4
refine.stride = 1
refine.window = 3
refine.overlap = 1
refine.steps_per_window = 5
refine.global_steps = 5
"""

TINY_TRAIN = """
synth.focal = 16
synth.static_boxes = 2
schedule.m = 3
model.m = 3
model.feature_dim = 8
model.hidden_dim = 8
model.attention_heads = 2
model.attention_layers = 1
train.stages = 2:2
train.batch_size = 1
train.corpus_size = 2
train.corpus_frames = 3
train.image_size = 16
"""


def _manifest(directory):
    return json.loads((directory / "manifest.json").read_text())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "small.cfg"
    config.write_text(SMALL)
    assert main(["synth", "--config", str(config), "--seed", "1", "--out-dir", str(root / "seq")]) == 0
    assert main(["fit", "--config", str(config), "--seed", "1", "--input", str(root / "seq"), "--out-dir", str(root / "fit")]) == 0
    return root


class TestErrors:
    """Error lines and exit codes"""

    def test_empty_input(self, tmp_path, capsys):
        """Input errors exit with 1 and a tagged line on stderr"""
        (tmp_path / "empty").mkdir()
        code = main(["fit", "--input", str(tmp_path / "empty"), "--out-dir", str(tmp_path / "out")])
        assert code == 1
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err.startswith("camfit-error[input]: ")
        assert "no depth rasters" in err

    def test_unknown_config_key(self, tmp_path, capsys):
        """Configuration errors exit with 1"""
        config = tmp_path / "bad.cfg"
        config.write_text("fit.nonsense = 3\n")
        assert main(["synth", "--config", str(config), "--out-dir", str(tmp_path / "out")]) == 1
        assert "camfit-error[config]: " in capsys.readouterr().err

    def test_negative_seed(self, tmp_path, capsys):
        """Seeds must be nonnegative"""
        assert main(["synth", "--seed", "-1", "--out-dir", str(tmp_path / "out")]) == 1
        assert "camfit-error[config]" in capsys.readouterr().err

    def test_missing_subcommand(self, capsys):
        """A subcommand is required"""
        assert main([]) == 1
        err = capsys.readouterr().err
        assert "usage:" not in err
        assert err.strip().splitlines()[-1].startswith("camfit-error[input]: ")

    def test_missing_required_argument(self, capsys):
        """Usage errors are reported as one input error line"""
        assert main(["fit"]) == 1
        err = capsys.readouterr().err
        assert "usage:" not in err
        line = err.strip().splitlines()[-1]
        assert line.startswith("camfit-error[input]: camfit fit: ")
        assert "--input" in line

    def test_malformed_seed(self, capsys):
        """Argument type errors are input errors too"""
        assert main(["synth", "--seed", "abc"]) == 1
        assert "camfit-error[input]: " in capsys.readouterr().err

    def test_train_head_count_mismatch(self, tmp_path, capsys):
        """schedule.m and model.m must agree"""
        config = tmp_path / "train.cfg"
        config.write_text(TINY_TRAIN.replace("schedule.m = 3", "schedule.m = 4"))
        assert main(["train", "--config", str(config), "--out-dir", str(tmp_path / "out")]) == 1
        assert "model.m" in capsys.readouterr().err


class TestPipeline:
    """synth -> fit -> refine -> eval"""

    def test_synth_outputs(self, workspace):
        """Rasters, ground truth and a manifest"""
        seq = workspace / "seq"
        assert (seq / "depth_000003.acrs").exists()
        assert (seq / "flow_000002_bwd.acrs").exists()
        assert (seq / "mask_000000.acrs").exists()
        manifest = _manifest(seq)
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 1
        assert manifest["frames"] == 4
        assert read_trajectory(seq / "gt_trajectory.txt").focal == 24.0

    def test_fit_outputs(self, workspace):
        """Trajectory with focal header, uncertainty rasters and candidate summaries"""
        out = workspace / "fit"
        manifest = _manifest(out)
        assert manifest["selection"] == "min_loss"
        assert len(manifest["candidates"]) == 3
        assert manifest["selected_focal"] in manifest["schedule"]
        assert manifest["loss_report"]["iterations"] == 40
        assert sum(c["likelihood"] for c in manifest["candidates"]) == pytest.approx(1.0)
        trajectory = read_trajectory(out / "trajectory_init.txt")
        assert len(trajectory.indices) == 4
        assert trajectory.focal == manifest["selected_focal"]
        assert trajectory.schedule == pytest.approx(manifest["schedule"])
        for i in range(3):
            assert (out / f"uncertainty_{i:06d}.acrs").exists()

    def test_fit_is_reproducible(self, workspace, tmp_path):
        """Same inputs, configuration and seed give the same manifest"""
        args = ["fit", "--config", str(workspace / "small.cfg"), "--seed", "1", "--input", str(workspace / "seq")]
        assert main(args + ["--out-dir", str(tmp_path / "again")]) == 0
        assert _manifest(tmp_path / "again") == _manifest(workspace / "fit")

    def test_eval(self, workspace):
        """Metrics files for the fitted trajectory"""
        out = workspace / "eval"
        code = main(
            [
                "eval",
                "--trajectory",
                str(workspace / "fit" / "trajectory_init.txt"),
                "--gt",
                str(workspace / "seq" / "gt_trajectory.txt"),
                "--alignment",
                "none",
                "--out-dir",
                str(out),
            ]
        )
        assert code == 0
        text = (out / "metrics.txt").read_text()
        assert "ate=" in text and "rpe_rot=" in text and "afe=" in text
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["alignment"] == "none"
        assert _manifest(out)["metrics"]["ate"] == metrics["ate"]

    def test_eval_ground_truth_against_itself(self, workspace, tmp_path):
        """Similarity-aligned ground truth has zero error"""
        gt = str(workspace / "seq" / "gt_trajectory.txt")
        assert main(["eval", "--trajectory", gt, "--gt", gt, "--out-dir", str(tmp_path)]) == 0
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["ate"] < 1e-9
        assert metrics["rfe"] == 0.0

    def test_refine(self, workspace, tmp_path):
        """Refinement reads the fitted trajectory and the uncertainty next to it"""
        code = main(
            [
                "refine",
                "--config",
                str(workspace / "small.cfg"),
                "--input",
                str(workspace / "seq"),
                "--trajectory",
                str(workspace / "fit" / "trajectory_init.txt"),
                "--out-dir",
                str(tmp_path),
            ]
        )
        assert code == 0
        refined = read_trajectory(tmp_path / "trajectory_refined.txt")
        assert len(refined.indices) == 4
        manifest = _manifest(tmp_path)
        assert manifest["refinement"]["keyframes"] == [0, 1, 2, 3]
        assert manifest["selected_focal"] == refined.focal

    def test_refine_without_focal(self, workspace, tmp_path, capsys):
        """A trajectory without focal needs --focal"""
        bare = tmp_path / "bare.txt"
        write_trajectory(bare, read_trajectory(workspace / "seq" / "gt_trajectory.txt").poses)
        args = ["refine", "--input", str(workspace / "seq"), "--trajectory", str(bare), "--out-dir", str(tmp_path / "out")]
        assert main(args) == 1
        assert "--focal" in capsys.readouterr().err

    def test_refine_missing_uncertainty(self, workspace, tmp_path, capsys):
        """An explicit uncertainty directory must hold every raster"""
        args = [
            "refine",
            "--input",
            str(workspace / "seq"),
            "--trajectory",
            str(workspace / "fit" / "trajectory_init.txt"),
            "--uncertainty",
            str(tmp_path),
            "--out-dir",
            str(tmp_path / "out"),
        ]
        assert main(args) == 1
        assert "uncertainty_000000.acrs" in capsys.readouterr().err

    def test_synth_plot(self, tmp_path):
        """--plot adds a PNG of the ground-truth path"""
        config = tmp_path / "tiny.cfg"
        config.write_text("synth.frames = 3\nsynth.width = 16\nsynth.height = 16\nsynth.focal = 16\n")
        assert main(["synth", "--config", str(config), "--plot", "--out-dir", str(tmp_path / "out")]) == 0
        assert (tmp_path / "out" / "gt_trajectory.png").read_bytes()[:4] == b"\x89PNG"
        assert "gt_trajectory.png" in _manifest(tmp_path / "out")["artifacts"]


def _run_pipeline(root, config):
    """synth -> fit -> refine -> eval into subdirectories of root"""
    common = ["--config", str(config), "--seed", "4"]
    assert main(["synth", *common, "--out-dir", str(root / "seq")]) == 0
    assert main(["fit", *common, "--input", str(root / "seq"), "--out-dir", str(root / "fit")]) == 0
    refine = ["--input", str(root / "seq"), "--trajectory", str(root / "fit" / "trajectory_init.txt")]
    assert main(["refine", *common, *refine, "--out-dir", str(root / "refined")]) == 0
    evaluate = ["--trajectory", str(root / "refined" / "trajectory_refined.txt"), "--gt", str(root / "seq" / "gt_trajectory.txt")]
    assert main(["eval", *common, *evaluate, "--out-dir", str(root / "eval")]) == 0


class TestDeterminism:
    """Same configuration and seed, same artifacts"""

    def test_full_pipeline_is_reproducible(self, tmp_path):
        """Two pipeline runs write byte-identical files"""
        config = tmp_path / "small.cfg"
        config.write_text(SMALL)
        _run_pipeline(tmp_path / "first", config)
        _run_pipeline(tmp_path / "second", config)

        first = sorted(p.relative_to(tmp_path / "first") for p in (tmp_path / "first").rglob("*") if p.is_file())
        second = sorted(p.relative_to(tmp_path / "second") for p in (tmp_path / "second").rglob("*") if p.is_file())
        assert first == second
        assert any(p.name == "trajectory_refined.txt" for p in first)
        for relative in first:
            assert (tmp_path / "first" / relative).read_bytes() == (tmp_path / "second" / relative).read_bytes(), relative


class TestTrainPredict:
    """Training writes a checkpoint that predict can use"""

    def test_train_then_predict(self, workspace, tmp_path):
        """A tiny model trains and predicts one candidate per head"""
        config = tmp_path / "train.cfg"
        config.write_text(TINY_TRAIN)
        assert main(["train", "--config", str(config), "--out-dir", str(tmp_path / "model")]) == 0
        assert (tmp_path / "model" / "model.ckpt").exists()
        rows = json.loads((tmp_path / "model" / "train_log.json").read_text())
        assert [row["step"] for row in rows] == [0, 1]

        code = main(
            [
                "predict",
                "--input",
                str(workspace / "seq"),
                "--checkpoint",
                str(tmp_path / "model" / "model.ckpt"),
                "--out-dir",
                str(tmp_path / "pred"),
            ]
        )
        assert code == 0
        manifest = _manifest(tmp_path / "pred")
        assert manifest["selection"] == "likelihood"
        assert len(manifest["candidates"]) == 3
        assert (tmp_path / "pred" / "trajectory_init.txt").exists()


if __name__ == "__main__":
    pytest.main([__file__])
