import json
import os
import subprocess
import sys

import numpy as np
import pytest

from spectra import config as C
from spectra.cli import main

CFG_TEXT = """
[train]
total_steps = 80
agent = spectra
mixer = vdn
seed = 1
batch_size = 2
min_buffer = 2
buffer_capacity = 16
hidden_size = 8
n_head = 2
target_interval = 4

[env]
m = 2
e = 2
max_steps = 6
seed = 0
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(CFG_TEXT)
    return str(path)


@pytest.fixture(autouse=True)
def results_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SPECTRA_RESULTS_DIR", str(tmp_path / "results"))
    monkeypatch.chdir(tmp_path)
    return tmp_path


class TestConfigParsing:
    def test_sections_and_comments(self):
        sections = C.parse_config_text("# top\n[a]\nx = 1  # trailing\n\n[b]\ny = z\n")
        assert sections == {"a": {"x": "1"}, "b": {"y": "z"}}

    def test_key_outside_section_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            C.parse_config_text("x = 1\n")

    def test_overrides(self):
        sections = {"train": {"seed": "0"}}
        C.apply_overrides(sections, ["train.seed=9", "stage.2.fraction=0.7"])
        assert sections["train"]["seed"] == "9"
        assert sections["stage.2"]["fraction"] == "0.7"

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown env key"):
            C.build_env_config({"m": "2", "e": "2", "bogus": "1"})
        with pytest.raises(ValueError, match="unknown train key"):
            C.build_train_config({"train": {"total_steps": "5", "nope": "1"},
                                  "env": {"m": "2", "e": "2"}})

    def test_stage_inheritance(self):
        sections = C.parse_config_text(
            "[train]\ntotal_steps = 10\n[env]\nmax_steps = 7\n"
            "[stage.1]\nfraction = 0.5\nm = 2\ne = 2\n"
            "[stage.2]\nfraction = 0.5\nm = 3\ne = 3\n")
        cfg = C.build_train_config(sections)
        assert [s.env_cfg.m for s in cfg.stages] == [2, 3]
        assert all(s.env_cfg.max_steps == 7 for s in cfg.stages)

    def test_unit_stat_overrides(self):
        env_cfg = C.build_env_config({"m": "1", "e": "1", "hp_skirmisher": "10",
                                      "damage_bruiser": "3"})
        assert env_cfg.unit_stats["skirmisher"].hp_max == 10.0
        assert env_cfg.unit_stats["bruiser"].damage == 3.0


class TestCliCommands:
    def test_no_arguments_usage_exit_2(self):
        proc = subprocess.run([sys.executable, "-m", "spectra.cli"],
                              capture_output=True, text=True)
        assert proc.returncode == 2
        assert "usage" in proc.stderr.lower()

    def test_train_writes_run_dir_and_manifest(self, cfg_file, results_env):
        rc = main(["train", "--config", cfg_file])
        assert rc == 0
        root = results_env / "results"
        run_dirs = list(root.iterdir())
        assert len(run_dirs) == 1
        manifest = json.loads((run_dirs[0] / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert (run_dirs[0] / "metrics.csv").exists()
        assert (run_dirs[0] / "checkpoint_final.spck").exists()
        # every output path is inside the run directory
        for rel in manifest["outputs"]:
            assert not rel.startswith("..")

    def test_train_seed_override_flag(self, cfg_file, results_env, capsys):
        rc = main(["train", "--config", cfg_file, "--seed", "5",
                   "--out", str(results_env / "explicit")])
        assert rc == 0
        manifest = json.loads((results_env / "explicit" / "manifest.json").read_text())
        assert manifest["seeds"] == [5]

    def test_curriculum_requires_stages(self, cfg_file):
        rc = main(["curriculum", "--config", cfg_file])
        assert rc == 1

    def test_qmix_size_change_exits_1(self, tmp_path, cfg_file):
        text = CFG_TEXT + "\n[stage.1]\nfraction = 0.5\nm = 2\ne = 2\n" \
                          "[stage.2]\nfraction = 0.5\nm = 3\ne = 3\n"
        path = tmp_path / "curr.cfg"
        path.write_text(text)
        rc = main(["curriculum", "--config", str(path), "--mixer", "qmix"])
        assert rc == 1

    def test_props_exit_zero(self, results_env, capsys):
        rc = main(["props", "--seeds", "3", "--sizes", "2x4,3x5",
                   "--monotonicity-instances", "20"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "saqa-invariance" in out
        assert "qmix-baseline" in out

    def test_bench_writes_csv(self, results_env):
        rc = main(["bench", "--models", "spectra,sa", "--n", "4,8,16,32",
                   "--samples", "5"])
        assert rc == 0
        run_dir = next((results_env / "results").iterdir())
        assert (run_dir / "inference_times.csv").exists()
        fits = json.loads((run_dir / "mac_fits.json").read_text())
        assert {f["layer"] for f in fits} == {"saqa", "self_attention"}

    def test_eval_and_export_attn(self, cfg_file, results_env, capsys):
        out = results_env / "trained"
        assert main(["train", "--config", cfg_file, "--out", str(out)]) == 0
        ckpt_path = str(out / "checkpoint_final.spck")
        capsys.readouterr()     # drop the train command's output

        rc = main(["eval", "--checkpoint", ckpt_path, "--config", cfg_file,
                   "--episodes", "2"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert 0.0 <= report["win_rate"] <= 1.0

        rc = main(["export-attn", "--checkpoint", ckpt_path, "--config", cfg_file,
                   "--episode-seed", "1"])
        assert rc == 0
        run_dir = [d for d in (results_env / "results").iterdir()
                   if d.name.startswith("export-attn")][0]
        lines = (run_dir / "attention.csv").read_text().strip().split("\n")
        assert lines[0] == "t,agent,head,slot,entity_id,weight"
        assert len(lines) > 1
        # weights per (t, agent, head) sum to one
        import csv as csvmod
        rows = list(csvmod.DictReader(lines))
        groups = {}
        for row in rows:
            groups.setdefault((row["t"], row["agent"], row["head"]), 0.0)
            groups[(row["t"], row["agent"], row["head"])] += float(row["weight"])
        assert all(abs(total - 1.0) < 1e-6 for total in groups.values())

    def test_missing_config_exits_1(self):
        rc = main(["train", "--config", "/nonexistent.cfg"])
        assert rc == 1

    def test_props_parallel_jobs(self, results_env):
        rc = main(["props", "--seeds", "4", "--sizes", "2x4", "--jobs", "2",
                   "--monotonicity-instances", "5"])
        assert rc == 0
