import numpy as np
import pytest

from sketchsimp.cli import EXIT_INPUT_ERROR, EXIT_MODEL_ERROR, run
from sketchsimp.data import load_image


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    code = run(["gen-data", "--out", str(root), "--pairs", "6",
                "--rough", "6", "--clean", "6", "--seed", "3",
                "--canvas", "80"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained_dir(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run(["train", "--data", str(dataset_dir), "--preset", "desk",
                "--out", str(out),
                "iterations=6", "pretrain_iterations=3"])
    assert code == 0
    return out


class TestGenData:
    def test_layout(self, dataset_dir):
        assert len(list((dataset_dir / "pairs" / "rough").glob("*.png"))) == 6
        assert len(list((dataset_dir / "pairs" / "clean").glob("*.png"))) == 6
        assert len(list((dataset_dir / "rough").glob("*.png"))) == 6
        assert len(list((dataset_dir / "clean").glob("*.png"))) == 6


class TestTrain:
    def test_artifacts(self, trained_dir):
        assert (trained_dir / "checkpoints" / "final.ckpt").is_file()
        assert (trained_dir / "resolved-config.yaml").is_file()
        assert (trained_dir / "logs" / "train.csv").is_file()

    def test_bad_override_is_input_error(self, dataset_dir, tmp_path):
        code = run(["train", "--data", str(dataset_dir), "--preset", "desk",
                    "--out", str(tmp_path), "warp_factor=9"])
        assert code == EXIT_INPUT_ERROR

    def test_missing_dataset_is_input_error(self, tmp_path):
        code = run(["train", "--data", str(tmp_path / "nope"),
                    "--preset", "desk", "--out", str(tmp_path / "out")])
        assert code == EXIT_INPUT_ERROR


class TestSimplify:
    def test_end_to_end(self, trained_dir, dataset_dir, tmp_path):
        src = next((dataset_dir / "rough").glob("*.png"))
        code = run(["simplify",
                    "--checkpoint", str(trained_dir / "checkpoints"
                                        / "final.ckpt"),
                    "--input", str(src), "--out", str(tmp_path)])
        assert code == 0
        out = load_image(tmp_path / f"{src.stem}_out.png")
        assert out.shape == load_image(src).shape

    def test_directory_input(self, trained_dir, dataset_dir, tmp_path):
        code = run(["simplify",
                    "--checkpoint", str(trained_dir / "checkpoints"
                                        / "final.ckpt"),
                    "--input", str(dataset_dir / "rough"),
                    "--out", str(tmp_path)])
        assert code == 0
        assert len(list(tmp_path.glob("*_out.png"))) == 6

    def test_pencil_on_sketch_checkpoint_is_input_error(
            self, trained_dir, dataset_dir, tmp_path):
        src = next((dataset_dir / "clean").glob("*.png"))
        code = run(["pencil",
                    "--checkpoint", str(trained_dir / "checkpoints"
                                        / "final.ckpt"),
                    "--input", str(src), "--out", str(tmp_path)])
        assert code == EXIT_INPUT_ERROR

    def test_corrupt_checkpoint_is_model_error(self, dataset_dir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage header")
        src = next((dataset_dir / "rough").glob("*.png"))
        code = run(["simplify", "--checkpoint", str(bad),
                    "--input", str(src), "--out", str(tmp_path)])
        assert code == EXIT_MODEL_ERROR


class TestExport:
    def test_folded_checkpoint_equivalent(self, trained_dir, dataset_dir,
                                          tmp_path):
        src_ckpt = trained_dir / "checkpoints" / "final.ckpt"
        folded = tmp_path / "folded.ckpt"
        assert run(["export", str(src_ckpt), str(folded)]) == 0

        from sketchsimp.checkpoint import load_checkpoint
        from sketchsimp.inference import simplify
        img = load_image(next((dataset_dir / "rough").glob("*.png")))
        a = simplify(load_checkpoint(src_ckpt), img)
        b = simplify(load_checkpoint(folded), img)
        assert np.abs(a - b).max() < 1e-4

    def test_export_idempotent(self, trained_dir, tmp_path):
        src_ckpt = trained_dir / "checkpoints" / "final.ckpt"
        once = tmp_path / "once.ckpt"
        twice = tmp_path / "twice.ckpt"
        assert run(["export", str(src_ckpt), str(once)]) == 0
        assert run(["export", str(once), str(twice)]) == 0
        assert once.read_bytes() == twice.read_bytes()


class TestCompare:
    def test_metrics_written(self, dataset_dir, tmp_path):
        code = run(["compare", "--data", str(dataset_dir),
                    "--regimes", "mse_only", "supervised_adversarial",
                    "--preset", "desk", "--out", str(tmp_path),
                    "iterations=4", "pretrain_iterations=2"])
        assert code == 0
        text = (tmp_path / "metrics.csv").read_text()
        assert "mse_only" in text and "supervised_adversarial" in text


class TestEval:
    def test_prints_metrics(self, trained_dir, dataset_dir, capsys):
        code = run(["eval",
                    "--checkpoint", str(trained_dir / "checkpoints"
                                        / "final.ckpt"),
                    "--data", str(dataset_dir)])
        assert code == 0
        out = capsys.readouterr().out
        assert "val_mse" in out and "midtone_fraction" in out


class TestOptimizeSingle:
    def test_end_to_end(self, trained_dir, dataset_dir, tmp_path):
        src = next((dataset_dir / "rough").glob("*.png"))
        code = run(["optimize-single",
                    "--checkpoint", str(trained_dir / "checkpoints"
                                        / "final.ckpt"),
                    "--input", str(src), "--data", str(dataset_dir),
                    "--steps", "2", "--out", str(tmp_path)])
        assert code == 0
        assert (tmp_path / f"{src.stem}_optimized.png").is_file()
        assert (tmp_path / f"{src.stem}_adapted.ckpt").is_file()


class TestParser:
    def test_unknown_subcommand_nonzero(self):
        assert run(["frobnicate"]) != 0

    def test_no_args_nonzero(self):
        assert run([]) != 0

    def test_malformed_override(self, dataset_dir, tmp_path):
        code = run(["train", "--data", str(dataset_dir), "--preset", "desk",
                    "--out", str(tmp_path), "not-an-override"])
        assert code == EXIT_INPUT_ERROR
