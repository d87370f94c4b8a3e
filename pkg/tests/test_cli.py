import hashlib
import json

import numpy as np
import pytest

from mopoe import cli
from mopoe import objectives as OBJ
from mopoe import tensor as T
from mopoe.harness import dataset as DS
from mopoe.models import load_checkpoint, restore_rng, save_checkpoint


def write_mini_config(path, **extra):
    cfg = {
        "dataset": {"dir": "data", "M": 2, "train": 260, "test": 60, "seed": 3},
        "model": {"latent_dim": 6, "hidden": [16]},
        "objective": {"beta": 1.0},
        "train": {"epochs": 2, "batch_size": 64, "seed": 1},
        "eval": {"joint_samples": 50, "iwae_samples": 2, "probe_samples": 150},
        "out_dir": "runs/mini",
    }
    for dotted, value in extra.items():
        section, key = dotted.split(".")
        cfg[section][key] = value
    path.write_text(json.dumps(cfg))
    return cfg


class TestConfig:
    def test_unknown_key_exits_2(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        (tmp_path / "bad.json").write_text(json.dumps({"objective": {"betta": 1.0}}))
        assert cli.main(["train", "--config", "bad.json"]) == 2
        assert "objective.betta" in capsys.readouterr().err

    def test_invalid_json_exits_2(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        (tmp_path / "bad.json").write_text("{not json")
        assert cli.main(["gen-data", "--config", "bad.json"]) == 2

    def test_bad_value_exits_2(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        (tmp_path / "bad.json").write_text(json.dumps({"objective": {"kind": "vqvae"}}))
        assert cli.main(["train", "--config", "bad.json"]) == 2
        assert "objective.kind" in capsys.readouterr().err

    def test_defaults_follow_recipe(self):
        cfg = cli.load_config(None)
        assert cfg["dataset"]["M"] == 3
        assert cfg["dataset"]["side"] == 8
        assert cfg["model"]["latent_dim"] == 16
        assert cfg["train"]["batch_size"] == 64
        assert cfg["train"]["epochs"] == 30
        assert cfg["optimizer"] == {"kind": "adam", "learning_rate": 0.001}
        assert cfg["objective"]["beta"] == 2.5

    def test_default_beta_sweep_list(self):
        assert cli.DEFAULT_BETAS == [0.5, 1.0, 2.5, 5.0, 10.0, 20.0]


class TestGenData:
    def test_rerun_identical_manifest(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write_mini_config(tmp_path / "c.json")
        assert cli.main(["gen-data", "--config", "c.json"]) == 0
        m1 = json.loads((tmp_path / "data/manifest.json").read_text())
        assert cli.main(["gen-data", "--config", "c.json"]) == 0
        m2 = json.loads((tmp_path / "data/manifest.json").read_text())
        assert m1 == m2

    def test_missing_out_dir_created(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write_mini_config(tmp_path / "c.json")
        assert cli.main(["gen-data", "--config", "c.json", "--out", "deep/nested/dir"]) == 0
        assert (tmp_path / "deep/nested/dir/manifest.json").exists()


class TestTrain:
    def test_epochs_zero_saves_initial_params(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write_mini_config(tmp_path / "c.json")
        assert cli.main(["train", "--config", "c.json", "--epochs", "0"]) == 0
        ck = load_checkpoint(tmp_path / "runs/mini/checkpoint.ckpt")
        assert ck.step == 0
        fresh = cli.build_model(
            cli.load_config("c.json", {"train.epochs": 0}),
            cli.dataset_config(cli.load_config("c.json")),
            seed=1,
        )
        for name in fresh.store.names():
            np.testing.assert_array_equal(ck.params[name], fresh.store[name].data)

    def test_poe_equals_mopoe_full_only_csv(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write_mini_config(tmp_path / "c.json")
        assert (
            cli.main(
                ["train", "--config", "c.json", "--objective", "poe", "--out", "runs/a"]
            )
            == 0
        )
        assert (
            cli.main(
                [
                    "train",
                    "--config",
                    "c.json",
                    "--objective",
                    "mopoe",
                    "--subset-policy",
                    "full_only",
                    "--out",
                    "runs/b",
                ]
            )
            == 0
        )
        rows_a = (tmp_path / "runs/a/metrics.csv").read_text().splitlines()[1:]
        rows_b = (tmp_path / "runs/b/metrics.csv").read_text().splitlines()[1:]
        # identical loss columns; run ids and variant names differ
        cols_a = [r.split(",")[4:] for r in rows_a]
        cols_b = [r.split(",")[4:] for r in rows_b]
        assert cols_a == cols_b

    def test_reproducible_runs_bit_identical(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write_mini_config(tmp_path / "c.json")
        assert cli.main(["train", "--config", "c.json", "--out", "runs/r1"]) == 0
        assert cli.main(["train", "--config", "c.json", "--out", "runs/r2"]) == 0
        csv1 = (tmp_path / "runs/r1/metrics.csv").read_bytes()
        csv2 = (tmp_path / "runs/r2/metrics.csv").read_bytes()
        assert csv1 == csv2
        h1 = hashlib.sha256((tmp_path / "runs/r1/checkpoint.ckpt").read_bytes()).hexdigest()
        h2 = hashlib.sha256((tmp_path / "runs/r2/checkpoint.ckpt").read_bytes()).hexdigest()
        assert h1 == h2


class TestResume:
    def test_checkpoint_resume_matches_uninterrupted(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg_dict = write_mini_config(tmp_path / "c.json")
        cfg = cli.load_config("c.json")
        ds_cfg = cli.dataset_config(cfg)
        DS.save_dataset("data", ds_cfg, *DS.generate_dataset(ds_cfg))
        _, train_ds, _ = DS.load_dataset("data")
        obj = OBJ.ObjectiveConfig(beta=1.0)

        # uninterrupted: 3 epochs
        model_a = cli.build_model(cfg, ds_cfg, seed=5)
        opt_a = T.OptimizerState("adam", 0.001)
        rng_a = np.random.default_rng(5)
        metrics_a = None
        for _ in range(3):
            metrics_a = OBJ.train_epoch(model_a, opt_a, train_ds.xs, obj, rng_a, batch_size=64)

        # interrupted: 2 epochs, checkpoint, reload, 1 more
        model_b = cli.build_model(cfg, ds_cfg, seed=5)
        opt_b = T.OptimizerState("adam", 0.001)
        rng_b = np.random.default_rng(5)
        for _ in range(2):
            OBJ.train_epoch(model_b, opt_b, train_ds.xs, obj, rng_b, batch_size=64)
        save_checkpoint(tmp_path / "mid.ckpt", model_b, opt_b, rng_b, 2)
        ck = load_checkpoint(tmp_path / "mid.ckpt")
        model_c = ck.restore_model()
        opt_c = ck.restore_optimizer(model_c.parameters())
        rng_c = restore_rng(ck.rng_state)
        metrics_c = OBJ.train_epoch(model_c, opt_c, train_ds.xs, obj, rng_c, batch_size=64)

        assert metrics_a == metrics_c
        for name in model_a.store.names():
            np.testing.assert_array_equal(model_a.store[name].data, model_c.store[name].data)


class TestEval:
    def _train_and_eval(self, tmp_path, m=2):
        write_mini_config(tmp_path / "c.json", **{"dataset.M": m})
        assert cli.main(["train", "--config", "c.json"]) == 0
        assert cli.main(["eval", "--config", "c.json"]) == 0
        return (tmp_path / "runs/mini/eval.csv").read_bytes()

    def test_same_checkpoint_twice_identical_csv(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        first = self._train_and_eval(tmp_path)
        assert cli.main(["eval", "--config", "c.json"]) == 0
        second = (tmp_path / "runs/mini/eval.csv").read_bytes()
        assert first == second

    def test_m3_has_seven_probe_subsets(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        self._train_and_eval(tmp_path, m=3)
        rows = (tmp_path / "runs/mini/eval.csv").read_text().splitlines()[1:]
        probe_subsets = [r.split(",")[6] for r in rows if r.split(",")[5] == "probe_accuracy"]
        assert len(probe_subsets) == 7
        assert probe_subsets == sorted(probe_subsets)
        iwae_subsets = [r.split(",")[6] for r in rows if r.split(",")[5] == "iwae_loglik"]
        assert len(iwae_subsets) == 7

    def test_missing_checkpoint_exit_2(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        write_mini_config(tmp_path / "c.json")
        assert cli.main(["eval", "--config", "c.json"]) == 2


class TestSweep:
    def test_single_beta_cell_matches_train_plus_eval(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write_mini_config(tmp_path / "c.json")
        assert cli.main(["sweep", "--config", "c.json", "--beta-list", "1.0", "--seeds", "1", "--out", "runs/sw"]) == 0
        sweep_csv = (tmp_path / "runs/sw/sweep.csv").read_text()
        assert sweep_csv.splitlines()[0] == cli.CSV_HEADER
        cell_dir = tmp_path / "runs/sw/beta1.0_seed1"
        assert (cell_dir / "checkpoint.ckpt").exists()

        assert cli.main(["train", "--config", "c.json", "--beta", "1.0", "--seed", "1", "--out", "runs/direct"]) == 0
        h_cell = hashlib.sha256((cell_dir / "checkpoint.ckpt").read_bytes()).hexdigest()
        h_direct = hashlib.sha256((tmp_path / "runs/direct/checkpoint.ckpt").read_bytes()).hexdigest()
        assert h_cell == h_direct

    def test_sweep_rows_cover_tradeoff_metrics(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write_mini_config(tmp_path / "c.json")
        assert cli.main(["sweep", "--config", "c.json", "--beta-list", "0.5", "2.0", "--seeds", "1", "--out", "runs/sw"]) == 0
        rows = (tmp_path / "runs/sw/sweep.csv").read_text().splitlines()[1:]
        metrics = {(r.split(",")[2], r.split(",")[5]) for r in rows}
        for beta in ("0.5", "2.0"):
            assert (beta, "joint_coherence") in metrics
            assert (beta, "iwae_loglik") in metrics
            assert (beta, "train_kl") in metrics


class TestVerify:
    def test_deterministic_and_passes(self, capsys):
        assert cli.main(["verify", "--instances", "2", "--seed", "0"]) == 0
        out1 = capsys.readouterr().out
        assert cli.main(["verify", "--instances", "2", "--seed", "0"]) == 0
        out2 = capsys.readouterr().out
        assert out1 == out2
        assert "verification PASSED" in out1

    def test_mutation_fails_with_exit_1(self, capsys):
        assert cli.main(["verify", "--instances", "8", "--seed", "0", "--mutate", "kl_sign"]) == 1
        out = capsys.readouterr().out
        assert "FAIL elbo_bound" in out
        assert "verification FAILED" in out
