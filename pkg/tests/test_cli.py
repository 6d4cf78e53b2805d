import csv
import hashlib
import json
import os

import pytest

from precarious.cli import EXIT_CONFIG, EXIT_HASH, EXIT_OK, main

TINY = {
    "n_source": 6, "n_target_train": 4, "n_target_test": 4, "n_disc_synthetic": 4, "pool_size": 8,
    "pretrain": {"epochs": 1, "learning_rate": 0.05, "frozen_layers": 0},
    "adapt": {"epochs": 1, "learning_rate": 0.01, "frozen_layers": 2},
    "finetune": {"epochs": 1, "learning_rate": 0.01, "frozen_layers": 2},
    "disc_epochs": 2, "disc_learning_rate": 0.001, "batch_size": 4,
}


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def tree_hashes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            full = os.path.join(dirpath, f)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def synth(cfg, out, count, domain="source", seed=1):
    return main(["synth", "--config", cfg, "--seed", str(seed), "--out", str(out), "--count", str(count),
                 "--domain", domain])


def test_synth_zero_count_has_valid_manifest(cfg, tmp_path):
    assert synth(cfg, tmp_path / "empty", 0) == EXIT_OK
    manifest = json.loads((tmp_path / "empty" / "manifest.json").read_text())
    assert manifest["count"] == 0
    assert manifest["command"] == "synth"
    assert set(manifest["outputs"]) == {"annotations.jsonl", "scenes.jsonl"}
    assert (tmp_path / "empty" / "annotations.jsonl").read_text() == ""


def test_synth_same_seed_is_byte_identical(cfg, tmp_path):
    out = tmp_path / "d"
    assert synth(cfg, out, 3, "target") == EXIT_OK
    first = tree_hashes(out)
    for f in list(first):
        os.remove(out / f)
    assert synth(cfg, out, 3, "target") == EXIT_OK
    assert tree_hashes(out) == first
    assert len([f for f in first if f.startswith("images")]) == 3


def test_eval_dataset_against_itself_is_perfect(cfg, tmp_path):
    data = tmp_path / "data"
    assert synth(cfg, data, 3) == EXIT_OK
    out = tmp_path / "eval"
    assert main(["eval", "--config", cfg, "--out", str(out), "--data", str(data),
                 "--detections", str(data), "--fppi", "0.1"]) == EXIT_OK
    rows = list(csv.reader(open(out / "results.csv")))
    assert rows[0] == ["schedule", "seed", "missRate@0.1FPPI_overlap0.5", "missRate@0.1FPPI_overlap0.7"]
    assert float(rows[1][2]) == 0.0 and float(rows[1][3]) == 0.0
    for name in ("roc_overlap0.5.csv", "roc_overlap0.5.svg", "roc_overlap0.7.csv", "roc_overlap0.7.svg"):
        assert (out / name).exists()
    roc = tmp_path / "roc"
    assert main(["roc", "--config", cfg, "--out", str(roc), "--data", str(data),
                 "--detections", str(out / "detections.jsonl"), "--overlap", "0.7"]) == EXIT_OK
    assert (roc / "roc.csv").exists()


def test_modified_input_is_a_hash_mismatch(cfg, tmp_path):
    data = tmp_path / "data"
    assert synth(cfg, data, 2) == EXIT_OK
    with open(data / "annotations.jsonl", "a") as fh:
        fh.write("\n")
    assert main(["stats", "--config", cfg, "--out", str(tmp_path / "s"), "--data", str(data)]) == EXIT_HASH
    assert main(["stats", "--config", cfg, "--out", str(tmp_path / "s"),
                 "--data", str(tmp_path / "missing")]) == EXIT_HASH


def test_config_errors(cfg, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x"), "--count", "1"]) == EXIT_CONFIG
    assert main(["synth", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "x"),
                 "--count", "1"]) == EXIT_CONFIG
    assert synth(cfg, tmp_path / "neg", -1) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", str(tmp_path / "x"), "--count", "1", "--seed", "-3"])
    assert exc.value.code == 2


def test_end_to_end_pipeline(cfg, tmp_path):
    d = {name: tmp_path / name for name in ("src", "tgt", "test", "dsyn", "pool")}
    assert synth(cfg, d["src"], 6, seed=1) == EXIT_OK
    assert synth(cfg, d["tgt"], 4, "target", seed=2) == EXIT_OK
    assert synth(cfg, d["test"], 4, "target", seed=3) == EXIT_OK
    assert synth(cfg, d["dsyn"], 4, seed=4) == EXIT_OK
    assert synth(cfg, d["pool"], 8, seed=5) == EXIT_OK
    disc = tmp_path / "disc"
    assert main(["train_disc", "--config", cfg, "--out", str(disc), "--real", str(d["tgt"]),
                 "--synthetic", str(d["dsyn"])]) == EXIT_OK
    assert (disc / "disc.epoch1.ckpt").exists()
    imp = tmp_path / "imp"
    assert main(["select", "--config", cfg, "--out", str(imp), "--disc", str(disc / "disc.ckpt"),
                 "--pool", str(d["pool"]), "--k", "2"]) == EXIT_OK
    assert len(json.loads((imp / "imposters.json").read_text())["entries"]) == 2
    det = tmp_path / "det"
    assert main(["train_detector", "--config", cfg, "--out", str(det), "--data", str(d["src"])]) == EXIT_OK
    adapt = tmp_path / "adapt"
    args = ["adapt", "--config", cfg, "--out", str(adapt), "--source", str(d["src"]), "--target", str(d["tgt"]),
            "--imposters", str(imp), "--test", str(d["test"])]
    assert main(args) == EXIT_OK
    rows = list(csv.reader(open(adapt / "results.csv")))
    assert [r[0] for r in rows[1:]] == ["S", "T", "S>T", "S>T+I", "S>T+I>T"]
    assert (adapt / "S_then_T_plus_I_then_T.stage2.ckpt").exists()
    # the single-stage S schedule equals train_detector on S
    assert (adapt / "S.stage0.ckpt").read_bytes() == (det / "detector.ckpt").read_bytes()
    first = tree_hashes(adapt)
    assert main(args) == EXIT_OK
    assert tree_hashes(adapt) == first
    ev = tmp_path / "ev"
    assert main(["eval", "--config", cfg, "--out", str(ev), "--data", str(d["test"]),
                 "--model", str(det / "detector.ckpt")]) == EXIT_OK
    assert (ev / "detections.jsonl").exists()
    # a schedule that needs imposters without them is a configuration error
    assert main(["adapt", "--config", cfg, "--out", str(tmp_path / "a2"), "--source", str(d["src"]),
                 "--target", str(d["tgt"])]) == EXIT_CONFIG
