import hashlib
from dataclasses import fields

import numpy as np
import pytest

import bnncap.training as training
from bnncap.data import load_digits32, normalize, channel_stats, subset
from bnncap.experiment import ConfigError, RunConfig, parse_config, run_arm, summarize


def small_data():
    train, val = load_digits32()
    train, val = subset(train, 120), subset(val, 60, seed=1)
    mean, std = channel_stats(train)
    return normalize(train, mean, std), normalize(val, mean, std)


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.he, cfg.lam, cfg.k) == (0.1, 0.9, 1e-4, 0.97, 1e-4, 5)
        assert cfg.arms == ("full", "binary", "penalty")
        assert cfg.milestones == (0.5, 0.75)

    def test_every_field_has_default(self):
        RunConfig()
        assert all(f.default is not f.default_factory for f in fields(RunConfig))

    def test_values_and_comments(self):
        cfg = parse_config("# comment\nlambda = 0.001  # inline\nhe = 1.0\narms = binary, penalty\n"
                           "augment = no\nmilestones = 0.3, 0.6\n")
        assert cfg.lam == 0.001 and cfg.he == 1.0
        assert cfg.arms == ("binary", "penalty") and cfg.augment is False
        assert cfg.milestones == (0.3, 0.6)

    def test_overrides_win(self):
        cfg = parse_config("epochs = 5\n", {"epochs": 7, "lambda": 0.5, "seed": None})
        assert cfg.epochs == 7 and cfg.lam == 0.5 and cfg.seed == 0

    @pytest.mark.parametrize("text", ["bogus = 1\n", "epochs = x\n", "arms = full, cheap\n",
                                      "epochs = 0\n", "augment = maybe\n", "no equals sign here\n"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_unknown_override(self):
        with pytest.raises(ConfigError):
            parse_config("", {"colour": "red"})

    def test_resolved_roundtrip(self):
        cfg = parse_config("lambda = 0.0003\nwidth = 0.5\narms = penalty\naugment = false\n")
        assert parse_config(cfg.resolved()) == cfg


class TestRunArm:
    def test_validation_never_augmented(self, monkeypatch, tmp_path):
        train, val = small_data()
        digest = hashlib.sha256(val.images.tobytes()).hexdigest()
        sizes = []
        real = training.augment

        def spy(batch, mode="train", rng=None, pad=4):
            sizes.append(len(batch))
            return real(batch, mode, rng, pad)

        monkeypatch.setattr(training, "augment", spy)
        cfg = RunConfig(dataset="digits", arch="lenet", width=0.25, epochs=1, batch_size=40, augment=True)
        run_arm(cfg, "penalty", 0, train, val, tmp_path)
        assert sum(sizes) == len(train)
        assert hashlib.sha256(val.images.tobytes()).hexdigest() == digest

    def test_deterministic_outputs(self, tmp_path):
        train, val = small_data()
        cfg = RunConfig(dataset="digits", arch="lenet", width=0.25, epochs=2, batch_size=40,
                        entropy_report_every=1, checkpoint_every=1)
        a = run_arm(cfg, "penalty", 3, train, val, tmp_path / "a")
        b = run_arm(cfg, "penalty", 3, train, val, tmp_path / "b")
        for name in ("metrics.csv", "entropy.csv", "config.resolved"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / "epoch1.bnnc").is_file() and a.checkpoint.name == "final.bnnc"
        timings = (tmp_path / "a" / "timings.csv").read_text().splitlines()
        assert timings[0] == "epoch,epoch_seconds" and len(timings) == 3
        assert a.val_acc == b.val_acc

    def test_entropy_csv_rows(self, tmp_path):
        train, val = small_data()
        cfg = RunConfig(dataset="digits", arch="lenet", width=0.25, epochs=1, batch_size=60,
                        entropy_report_every=1)
        run_arm(cfg, "binary", 0, train, val, tmp_path)
        lines = (tmp_path / "entropy.csv").read_text().splitlines()
        assert lines[0] == "epoch,layer,filter,entropy"
        # width 0.25 lenet: 16 + 32 binary filters
        assert len(lines) - 1 == 48

    def test_non_deterministic_logs_wall_time(self, tmp_path):
        train, val = small_data()
        cfg = RunConfig(dataset="digits", arch="lenet", width=0.25, epochs=1, batch_size=60,
                        deterministic=False)
        run_arm(cfg, "binary", 0, train, val, tmp_path)
        row = (tmp_path / "metrics.csv").read_text().splitlines()[1].split(",")
        assert float(row[-1]) > 0


def test_summary_columns():
    train, val = small_data()
    cfg = RunConfig(dataset="digits", arch="lenet", width=0.25, epochs=1, batch_size=60)
    results = [run_arm(cfg, "binary", s, train, val, None) for s in (0, 1)]
    lines = summarize(results).splitlines()
    assert lines[0].startswith("arm,runs,val_acc_mean,val_acc_ci95")
    row = lines[1].split(",")
    assert row[0] == "binary" and row[1] == "2"
    assert float(row[2]) == pytest.approx(np.mean([r.val_acc for r in results]))
