"""End-to-end command-line behavior."""

import json
import os

import numpy as np
import pytest

from dualpolnet.cli import main
from dualpolnet.harness import read_jsonl

TINY = {"classes": 3, "input_size": 32, "base_width": 2, "fc1_width": 16,
        "n_drdb": 1, "epochs": 2, "batch_size": 6, "lr": 0.001, "seed": 0}


def write_cfg(tmp_path, name="cfg.json", **overrides):
    doc = dict(TINY)
    doc.update(overrides)
    path = str(tmp_path / name)
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path


def run_synth(tmp_path, cfg, out="data", per_class=4, size=32, extra=()):
    out_dir = str(tmp_path / out)
    rc = main(["synth", "--config", cfg, "--out", out_dir, "--classes", "3",
               "--per-class", str(per_class), "--size", str(size), *extra])
    assert rc == 0
    return out_dir


class TestSynth:
    def test_writes_chips_and_manifests(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        out = run_synth(tmp_path, cfg)
        assert sorted(os.listdir(out)) == ["chips", "classes.json", "test.jsonl", "train.jsonl"]
        assert len(os.listdir(os.path.join(out, "chips"))) == 12
        assert "12 chips" in capsys.readouterr().out
        classes = json.load(open(os.path.join(out, "classes.json")))["classes"]
        assert classes == ["cargo", "tanker", "fishing"]

    def test_split_counts_and_labels(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = run_synth(tmp_path, cfg, per_class=5)
        train_rows = read_jsonl(os.path.join(out, "train.jsonl"))
        test_rows = read_jsonl(os.path.join(out, "test.jsonl"))
        assert len(train_rows) == 9 and len(test_rows) == 6  # ceil/floor of 5 per class
        for rows in (train_rows, test_rows):
            assert {r["label"] for r in rows} == {0, 1, 2}
            assert all(r["path"].startswith("chips/") for r in rows)

    def test_deterministic_across_runs(self, tmp_path):
        cfg = write_cfg(tmp_path)
        a = run_synth(tmp_path, cfg, out="a")
        b = run_synth(tmp_path, cfg, out="b")
        for rel in sorted(os.listdir(os.path.join(a, "chips"))):
            one = open(os.path.join(a, "chips", rel), "rb").read()
            two = open(os.path.join(b, "chips", rel), "rb").read()
            assert one == two, rel
        assert open(os.path.join(a, "train.jsonl")).read() == \
               open(os.path.join(b, "train.jsonl")).read()

    def test_seed_flag_changes_chips(self, tmp_path):
        cfg = write_cfg(tmp_path)
        a = run_synth(tmp_path, cfg, out="a")
        b = run_synth(tmp_path, cfg, out="b", extra=("--seed", "99"))
        name = sorted(os.listdir(os.path.join(a, "chips")))[0]
        assert open(os.path.join(a, "chips", name), "rb").read() != \
               open(os.path.join(b, "chips", name), "rb").read()

    def test_bad_counts_rejected(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        rc = main(["synth", "--config", cfg, "--out", str(tmp_path / "x"),
                   "--classes", "1", "--per-class", "4"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestParams:
    def test_default_model_total(self, capsys):
        assert main(["params"]) == 0
        assert capsys.readouterr().out.strip() == "18085014"

    def test_add_fusion_is_smaller(self, tmp_path, capsys):
        concat = write_cfg(tmp_path, "c.json")
        add = write_cfg(tmp_path, "a.json", fusion="add")
        main(["params", "--config", concat])
        n_concat = int(capsys.readouterr().out.strip().splitlines()[-1])
        main(["params", "--config", add])
        n_add = int(capsys.readouterr().out.strip().splitlines()[-1])
        assert n_add < n_concat

    def test_print_config_dumps_resolved_doc(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, seed=42)
        assert main(["params", "--config", cfg, "--print-config"]) == 0
        out = capsys.readouterr().out
        doc = json.loads(out[:out.rindex("\n", 0, out.rindex("\n"))])
        assert doc["seed"] == 42 and doc["classes"] == 3

    def test_unknown_config_key_fails(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"learning_rate": 0.1}))
        assert main(["params", "--config", str(path)]) == 1
        assert "learning_rate" in capsys.readouterr().err


class TestTrainEval:
    def train_once(self, tmp_path, cfg, data, out="run", extra=()):
        out_dir = str(tmp_path / out)
        rc = main(["train", "--config", cfg, "--manifest",
                   os.path.join(data, "train.jsonl"), "--out", out_dir, *extra])
        assert rc == 0
        return out_dir

    def test_artifacts_written(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        data = run_synth(tmp_path, cfg)
        run = self.train_once(tmp_path, cfg, data)
        names = set(os.listdir(run))
        assert {"weights.dpgw", "loss_log.jsonl", "config.json", "loss_curve.png"} <= names
        assert "trained 2 epochs" in capsys.readouterr().out
        log = read_jsonl(os.path.join(run, "loss_log.jsonl"))
        assert any("accuracy" in r for r in log)
        saved_cfg = json.load(open(os.path.join(run, "config.json")))
        assert saved_cfg["base_width"] == 2

    def test_no_figures_skips_png(self, tmp_path):
        cfg = write_cfg(tmp_path)
        data = run_synth(tmp_path, cfg)
        run = self.train_once(tmp_path, cfg, data, out="nofig", extra=("--no-figures",))
        assert "loss_curve.png" not in os.listdir(run)

    def test_two_runs_bit_identical(self, tmp_path):
        cfg = write_cfg(tmp_path)
        data = run_synth(tmp_path, cfg)
        a = self.train_once(tmp_path, cfg, data, out="a", extra=("--no-figures",))
        b = self.train_once(tmp_path, cfg, data, out="b", extra=("--no-figures",))
        assert open(os.path.join(a, "weights.dpgw"), "rb").read() == \
               open(os.path.join(b, "weights.dpgw"), "rb").read()
        assert open(os.path.join(a, "loss_log.jsonl")).read() == \
               open(os.path.join(b, "loss_log.jsonl")).read()

    def test_eval_round_trip(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        data = run_synth(tmp_path, cfg)
        run = self.train_once(tmp_path, cfg, data)
        capsys.readouterr()
        out_dir = str(tmp_path / "eval")
        rc = main(["eval", "--config", cfg, "--manifest", os.path.join(data, "test.jsonl"),
                   "--weights", os.path.join(run, "weights.dpgw"), "--out", out_dir])
        assert rc == 0
        line = capsys.readouterr().out.strip()
        float(line)  # prints the two-decimal percentage alone
        assert "." in line and len(line.split(".")[1]) == 2
        assert {"confusion.csv", "confusion.png", "config.json"} <= set(os.listdir(out_dir))

    def test_eval_requires_weight_source(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        data = run_synth(tmp_path, cfg)
        rc = main(["eval", "--config", cfg, "--manifest", os.path.join(data, "test.jsonl"),
                   "--out", str(tmp_path / "e")])
        assert rc == 1
        assert "--weights" in capsys.readouterr().err

    def test_missing_manifest_fails_cleanly(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        rc = main(["train", "--config", cfg, "--manifest", str(tmp_path / "ghost.jsonl"),
                   "--out", str(tmp_path / "r")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestEvalStubs:
    def test_stub_identity_is_perfect(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        data = run_synth(tmp_path, cfg)
        capsys.readouterr()
        rc = main(["eval", "--config", cfg, "--manifest", os.path.join(data, "test.jsonl"),
                   "--stub-identity", "--out", str(tmp_path / "stub"), "--no-figures"])
        assert rc == 0
        assert capsys.readouterr().out.strip() == "100.00"

    def test_prediction_fixture_accuracy(self, tmp_path, capsys):
        counts = np.array([
            [143, 23, 43, 0, 22, 2],
            [69, 325, 19, 27, 83, 48],
            [67, 16, 359, 0, 29, 2],
            [0, 2, 0, 22, 0, 1],
            [6, 20, 2, 0, 9, 5],
            [13, 91, 1, 4, 19, 14],
        ])
        rows = []
        for t in range(6):
            for p in range(6):
                rows.extend({"label": t, "pred": p} for _ in range(int(counts[t, p])))
        pred_path = str(tmp_path / "preds.jsonl")
        with open(pred_path, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        cfg = write_cfg(tmp_path, classes=6)
        rc = main(["eval", "--config", cfg, "--predictions", pred_path,
                   "--out", str(tmp_path / "fix"), "--no-figures"])
        assert rc == 0
        assert capsys.readouterr().out.strip() == "58.68"
        csv_rows = open(str(tmp_path / "fix" / "confusion.csv")).read().splitlines()
        assert csv_rows[1].endswith("143,23,43,0,22,2")

    def test_malformed_predictions_cited(self, tmp_path, capsys):
        pred_path = tmp_path / "bad.jsonl"
        pred_path.write_text('{"label": 0}\n')
        rc = main(["eval", "--predictions", str(pred_path), "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "pred" in capsys.readouterr().err


class TestAblate:
    def test_structural_sweep(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        out = str(tmp_path / "abl")
        rc = main(["ablate", "--config", cfg, "--axis", "n_drdb", "--structural",
                   "--out", out])
        assert rc == 0
        assert "5 rows" in capsys.readouterr().out
        lines = open(os.path.join(out, "ablation_n_drdb.csv")).read().splitlines()
        assert lines[0] == "n_drdb,params"
        assert len(lines) == 6
        sizes = [int(l.split(",")[1]) for l in lines[1:]]
        assert sizes == sorted(sizes)
        assert os.path.isfile(os.path.join(out, "ablation_n_drdb.png"))

    def test_trained_sweep_smoke(self, tmp_path):
        cfg = write_cfg(tmp_path, epochs=1)
        data = run_synth(tmp_path, cfg)
        out = str(tmp_path / "abl2")
        rc = main(["ablate", "--config", cfg, "--axis", "fusion",
                   "--manifest", os.path.join(data, "train.jsonl"),
                   "--test-manifest", os.path.join(data, "test.jsonl"),
                   "--out", out, "--no-figures"])
        assert rc == 0
        lines = open(os.path.join(out, "ablation_fusion.csv")).read().splitlines()
        assert lines[0] == "fusion,zs_width,params,accuracy"
        assert len(lines) == 3

    def test_bad_axis_rejected_by_parser(self, tmp_path, capsys):
        with pytest.raises(SystemExit):
            main(["ablate", "--axis", "nope", "--out", str(tmp_path / "x")])
