"""End-to-end tests of the command-line interface."""

import numpy as np
import pytest

from prototower import autodiff as ad
from prototower import cli, data, trainer
from prototower.errors import ConfigError

SMALL = """
n_classes = 4
per_class = 30
d_latent = 4
d_image = 10
d_text = 8
noise_sigma = 0.2
teacher_raw_dim = 32
teacher_dim = 16
d_z = 12
d_h = 16
tower_hidden = 16
head_hidden = 16
batch_size = 16
episode_size = 32
n_epoch = 2
warmup_episodes = 2
images_per_prototype = 8
kmeans_iters = 5
knn_k = 5
probe_iters = 100
eval_kmeans_restarts = 2
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def ws(tmp_path, name="ws"):
    out = tmp_path / name
    out.mkdir()
    return out


class TestGenData:
    def test_writes_both_files(self, tmp_path, small_cfg, capsys):
        out = ws(tmp_path)
        code = cli.main(["gen-data", "--config", str(small_cfg), "--out", str(out)])
        assert code == 0
        assert (out / "dataset.bin").exists() and (out / "teacher.bin").exists()
        printed = capsys.readouterr().out
        assert "M=120" in printed and "n_classes=4" in printed

    def test_round_trips_to_generated_dataset(self, tmp_path, small_cfg):
        out = ws(tmp_path)
        cli.main(["gen-data", "--config", str(small_cfg), "--out", str(out)])
        loaded = data.load_dataset(out / "dataset.bin")
        want = data.generate_synthetic(
            4, 30, 4, 10, 8, 0.2, 100, text_noise_scale=3.0, d_style=8
        )
        np.testing.assert_array_equal(loaded.x_image, want.x_image)
        np.testing.assert_array_equal(loaded.x_text, want.x_text)
        np.testing.assert_array_equal(loaded.labels, want.labels)

    def test_same_seed_byte_identical(self, tmp_path, small_cfg):
        a, b = ws(tmp_path, "a"), ws(tmp_path, "b")
        for out in (a, b):
            cli.main([
                "gen-data", "--config", str(small_cfg),
                "--out", str(out), "--seed", "42",
            ])
        for name in ("dataset.bin", "teacher.bin"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_missing_out_dir_exits_2_naming_path(self, tmp_path, small_cfg, capsys):
        missing = tmp_path / "nowhere"
        code = cli.main(["gen-data", "--config", str(small_cfg), "--out", str(missing)])
        assert code == 2
        assert "nowhere" in capsys.readouterr().err

    def test_gap_scale_shifts_text_only(self, tmp_path, small_cfg):
        plain, gapped = ws(tmp_path, "plain"), ws(tmp_path, "gapped")
        cli.main(["gen-data", "--config", str(small_cfg), "--out", str(plain)])
        gap_cfg = tmp_path / "gap.cfg"
        gap_cfg.write_text(SMALL + "gap_scale = 2.0\n")
        cli.main(["gen-data", "--config", str(gap_cfg), "--out", str(gapped)])
        base = data.load_dataset(plain / "dataset.bin")
        moved = data.load_dataset(gapped / "dataset.bin")
        np.testing.assert_array_equal(moved.x_image, base.x_image)
        offset = moved.x_text - base.x_text
        np.testing.assert_allclose(offset - offset[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(
            np.linalg.norm(offset[0]), 2.0 * data.rms(base.x_text)
        )


def run_pipeline(tmp_path, small_cfg, out_name="run", extra=()):
    out = ws(tmp_path, out_name)
    base = ["--config", str(small_cfg), "--out", str(out), *extra]
    assert cli.main(["gen-data", *base]) == 0
    assert cli.main(["train", *base]) == 0
    return out, base


class TestTrain:
    def test_pipeline_writes_metrics_and_checkpoint(self, tmp_path, small_cfg, capsys):
        out, _ = run_pipeline(tmp_path, small_cfg)
        assert (out / "metrics.csv").exists() and (out / "checkpoint.bin").exists()
        rows = trainer.read_metrics(out / "metrics.csv")
        # 96 train rows, 32 per episode, 2 epochs -> 6 episodes of 2 steps
        assert rows[-1]["episode"] == 5
        assert len(rows) == 12
        assert "classifier source: pbt" in capsys.readouterr().out

    def test_clip_only_zeroes_proto_column(self, tmp_path, small_cfg):
        full_out, _ = run_pipeline(tmp_path, small_cfg, "full")
        clip_out, _ = run_pipeline(
            tmp_path, small_cfg, "clip", extra=["--preset", "clip-only"]
        )
        full_rows = trainer.read_metrics(full_out / "metrics.csv")
        clip_rows = trainer.read_metrics(clip_out / "metrics.csv")
        assert all(r["loss_proto"] == 0.0 for r in clip_rows)
        assert any(r["loss_proto"] > 0.0 for r in full_rows)

    def test_no_pbt_same_episode_count_different_provenance(
        self, tmp_path, small_cfg, capsys
    ):
        full_out, _ = run_pipeline(tmp_path, small_cfg, "full")
        capsys.readouterr()
        nopbt_out, _ = run_pipeline(
            tmp_path, small_cfg, "nopbt", extra=["--preset", "no-pbt"]
        )
        assert "classifier source: centroid" in capsys.readouterr().out
        full_rows = trainer.read_metrics(full_out / "metrics.csv")
        nopbt_rows = trainer.read_metrics(nopbt_out / "metrics.csv")
        assert full_rows[-1]["episode"] == nopbt_rows[-1]["episode"]

    def test_invalid_preset_exits_1(self, tmp_path, small_cfg):
        out = ws(tmp_path)
        code = cli.main([
            "gen-data", "--config", str(small_cfg),
            "--out", str(out), "--preset", "bogus",
        ])
        assert code == 1

    def test_missing_dataset_exits_2(self, tmp_path, small_cfg):
        out = ws(tmp_path)
        assert cli.main(["train", "--config", str(small_cfg), "--out", str(out)]) == 2

    def test_unknown_flag_exits_1(self):
        assert cli.main(["train", "--bogus-flag", "x"]) == 1

    def test_help_exits_0(self):
        assert cli.main(["--help"]) == 0


class TestEval:
    def test_writes_and_prints_report(self, tmp_path, small_cfg, capsys):
        out, base = run_pipeline(tmp_path, small_cfg)
        capsys.readouterr()
        assert cli.main(["eval", *base]) == 0
        printed = capsys.readouterr().out
        assert "zero_shot_top1 = " in printed
        assert (out / "results.txt").read_text() == printed

    def test_repeat_eval_appends_identical_record(self, tmp_path, small_cfg):
        out, base = run_pipeline(tmp_path, small_cfg)
        cli.main(["eval", *base])
        first = (out / "results.txt").read_text()
        cli.main(["eval", *base])
        doubled = (out / "results.txt").read_text()
        assert doubled == first * 2

    def test_zero_split_fraction_exits_1(self, tmp_path, small_cfg):
        out, _ = run_pipeline(tmp_path, small_cfg)
        bad = tmp_path / "bad.cfg"
        bad.write_text(SMALL + "split_fraction = 0.0\n")
        assert cli.main(["eval", "--config", str(bad), "--out", str(out)]) == 1

    def test_untrained_zero_shot_is_chance_level(self, tmp_path):
        # more classes than elsewhere: the chance oracle needs the
        # class-to-anchor collision rate to concentrate near 1/n_classes
        cfg_path = tmp_path / "zero.cfg"
        cfg_path.write_text(
            SMALL.replace("n_classes = 4", "n_classes = 25")
            .replace("per_class = 30", "per_class = 40")
            .replace("n_epoch = 2", "n_epoch = 0")
        )
        accs = []
        for seed in ("11", "22", "33"):
            out = ws(tmp_path, f"seed{seed}")
            base = ["--config", str(cfg_path), "--out", str(out), "--seed", seed]
            assert cli.main(["gen-data", *base]) == 0
            assert cli.main(["train", *base]) == 0
            assert cli.main(["eval", *base]) == 0
            record = dict(
                line.split(" = ")
                for line in (out / "results.txt").read_text().strip().splitlines()
            )
            accs.append(float(record["zero_shot_top1"]))
        assert abs(np.mean(accs) - 1.0 / 25.0) < 0.05


class TestClusterReport:
    def test_writes_four_scores(self, tmp_path, small_cfg, capsys):
        out, base = run_pipeline(tmp_path, small_cfg)
        capsys.readouterr()
        assert cli.main(["cluster-report", *base]) == 0
        text = (out / "cluster_report.txt").read_text()
        record = dict(line.split(" = ") for line in text.strip().splitlines())
        assert set(record) == {"image_ari", "image_ami", "text_ari", "text_ami"}
        for value in record.values():
            assert -1.0 <= float(value) <= 1.0


class TestGradCheck:
    def test_default_registry_passes(self, capsys):
        assert cli.main(["grad-check"]) == 0
        printed = capsys.readouterr().out
        assert "FAIL" not in printed
        assert printed.count("PASS") == len(cli.default_grad_cases())

    def test_wrong_gradient_reported(self):
        def broken_case(nodes):
            # value is sum of squares but the registered vjp claims ones
            (p,) = nodes
            out = np.array([[float(np.sum(p.value.values ** 2))]])
            return ad._make(out, (p,), lambda g: (np.ones(p.shape) * g[0, 0],))

        rows = cli.run_grad_checks([("broken", broken_case, [np.array([[2.0, 3.0]])])])
        assert rows[0][2] is False

    def test_empty_registry_rejected(self):
        with pytest.raises(ConfigError):
            cli.run_grad_checks([])
