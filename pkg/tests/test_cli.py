import csv

import numpy as np
import pytest
from click.testing import CliRunner

from sprvad.cli import main
from sprvad.config import VALID_KEYS, RunConfig
from sprvad.ingest import read_labels
from sprvad.pipeline import run_experiment
from sprvad.scoring import metrics_report, parse_metrics, read_scores_csv

FAST = ["--set", "T=2", "--set", "T_prime=1", "--set", "n=64", "--set", "widths=4,4,8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "test"
    result = CliRunner().invoke(main, ["synth", str(root), "--videos", "3", "--frames", "40",
                                       "--anomaly-fraction", "0.2", "--seed", "2"])
    assert result.exit_code == 0, result.output
    return root


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


class TestSynth:
    def test_summary(self, dataset):
        labels = read_labels(dataset)
        assert len(labels) == 120
        assert (dataset / "video_002").is_dir()

    def test_bad_fraction_is_usage_error(self, tmp_path):
        result = invoke("synth", tmp_path / "x", "--anomaly-fraction", "0.7")
        assert result.exit_code == 2
        assert "anomaly_fraction" in result.output


class TestRun:
    def test_full_run_artifacts(self, dataset, tmp_path):
        out = tmp_path / "run"
        result = invoke("run", "--dataset", dataset, "--out", out, *FAST)
        assert result.exit_code == 0, result.output
        for name in ("scores.csv", "cube_scores.csv", "telemetry.csv", "epochs.csv", "metrics.txt",
                     "appearance.ckpt", "curves.svg", "config.txt"):
            assert (out / name).exists(), name
        header = (out / "telemetry.csv").read_text().splitlines()[0]
        assert header == "epoch,batch,t,lambda,lambda_prime,mean_loss,drop_fraction"
        epochs = list(csv.DictReader((out / "epochs.csv").open()))
        assert len(epochs) == 2 and {"mean_rl_normal", "mean_rl_abnormal", "auroc"} <= set(epochs[0])
        assert "s_mot" not in (out / "scores.csv").read_text().splitlines()[0]
        assert "auroc=" in result.output

    def test_metrics_match_scores(self, dataset, tmp_path):
        out = tmp_path / "run"
        assert invoke("run", "--dataset", dataset, "--out", out, *FAST).exit_code == 0
        records = read_scores_csv(out / "scores.csv")
        labels = read_labels(dataset)
        expected = metrics_report([r.s_fused for r in records],
                                  [labels[(r.video_id, r.frame_index)] for r in records])
        reported = parse_metrics((out / "metrics.txt").read_text())
        assert reported["n_frames"] == expected["n_frames"] == 120
        assert abs(reported["auroc"] - expected["auroc"]) < 1e-6

    def test_motion_adds_column(self, dataset, tmp_path):
        out = tmp_path / "mot"
        result = invoke("run", "--dataset", dataset, "--out", out, "--motion", *FAST)
        assert result.exit_code == 0, result.output
        assert (out / "scores.csv").read_text().splitlines()[0] == "video_id,frame_index,s_app,s_mot,s_fused"
        assert (out / "motion.ckpt").exists()

    def test_stages_match_run(self, dataset, tmp_path):
        common = ["--dataset", dataset, *FAST]
        full = tmp_path / "full"
        staged = tmp_path / "staged"
        assert invoke("run", "--out", full, *common).exit_code == 0
        for stage in ("extract", "train", "score", "eval"):
            result = invoke(stage, "--out", staged, *common)
            assert result.exit_code == 0, (stage, result.output)
        assert (full / "scores.csv").read_bytes() == (staged / "scores.csv").read_bytes()
        assert (full / "metrics.txt").read_text() == (staged / "metrics.txt").read_text()

    def test_config_file_and_flags(self, dataset, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"dataset = {dataset}\nT = 1\nT_prime = 1\nn = 64\nwidths = 4,4,8\nbaseline = LBR\n")
        out = tmp_path / "cfg"
        result = invoke("run", "--config", cfg, "--out", out, "--baseline", "FBR")
        assert result.exit_code == 0, result.output
        text = (out / "config.txt").read_text()
        assert "baseline = FBR" in text and "T = 1" in text

    def test_prd_paradigm(self, dataset, tmp_path):
        result = invoke("run", "--dataset", dataset, "--out", tmp_path / "p", "--paradigm", "PRD", *FAST)
        assert result.exit_code == 0, result.output


class TestErrors:
    def test_unknown_key_is_usage_error(self, dataset, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(f"dataset = {dataset}\nlearning_rate = 0.1\n")
        result = invoke("run", "--config", cfg)
        assert result.exit_code == 2
        assert "learning_rate" in result.output
        assert all(key in result.output for key in VALID_KEYS)

    def test_bad_choice(self, dataset):
        result = invoke("run", "--dataset", dataset, "--mode", "bogus")
        assert result.exit_code == 2

    def test_merge_without_train_split(self, dataset):
        result = invoke("run", "--dataset", dataset, "--mode", "merge")
        assert result.exit_code == 2 and "train_dataset" in result.output

    def test_missing_dataset_names_stage(self, tmp_path):
        result = invoke("run", "--dataset", tmp_path / "nothing", "--out", tmp_path / "o", *FAST)
        assert result.exit_code != 0
        assert "extract" in result.output

    def test_score_without_checkpoint_names_stage(self, dataset, tmp_path):
        result = invoke("score", "--dataset", dataset, "--out", tmp_path / "o", *FAST)
        assert result.exit_code != 0
        assert "score" in result.output


class TestPipeline:
    def test_merge_mode_scores_test_split_only(self, dataset, tmp_path):
        from sprvad.synth import CorpusSpec, generate

        train_root = tmp_path / "train"
        generate(CorpusSpec(n_videos=2, frames_per_video=30, anomaly_fraction=0.0, seed=8), train_root)
        # video ids must not collide with the test split
        for d in sorted(train_root.iterdir()):
            if d.is_dir():
                d.rename(train_root / d.name.replace("video", "train"))
        for name in ("labels.csv", "objects.csv"):
            p = train_root / name
            p.write_text(p.read_text().replace("video_", "train_"))
        config = RunConfig(dataset=str(dataset), train_dataset=str(train_root), mode="merge",
                           out=str(tmp_path / "m"), T=1, T_prime=1, n=64, widths=(4, 4, 8))
        result = run_experiment(config)
        assert {r.video_id for r in result.records} == {"video_000", "video_001", "video_002"}
        assert result.metrics["n_frames"] == 120
        n_train = len(result.appearance.last_weights)
        assert n_train > len(result.cube_scores["s_app"])

    def test_reproducible(self, dataset, tmp_path):
        cfg = dict(dataset=str(dataset), T=2, T_prime=1, n=64, widths=(4, 4, 8))
        a = run_experiment(RunConfig(out=str(tmp_path / "a"), **cfg))
        b = run_experiment(RunConfig(out=str(tmp_path / "b"), **cfg))
        assert (tmp_path / "a" / "scores.csv").read_bytes() == (tmp_path / "b" / "scores.csv").read_bytes()
        assert (tmp_path / "a" / "curves.svg").read_bytes() == (tmp_path / "b" / "curves.svg").read_bytes()
        np.testing.assert_array_equal(a.cube_scores["s_app"], b.cube_scores["s_app"])
