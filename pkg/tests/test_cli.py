import hashlib
import json

import numpy as np
import pytest

from nanonet.arch import deserialize, load_spec, save_spec
from nanonet.cli import main
from nanonet.data import synth_dataset
from nanonet.explorer import Constraints, ProxyEvaluator, make_record
from nanonet.trainer import init_state, load_checkpoint
from oracles import WIDTHS, toy_spec
from test_data import write_sequence

SMALL = ["--arch", "nano-b", "--input-size", "16", "--synth-subjects", "6", "--synth-per-subject", "7",
         "--threads", "1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---- usage ------------------------------------------------------------------------

def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["bench"])  # missing --checkpoint
    assert exc.value.code == 1


# ---- ingest ---------------------------------------------------------------------

def test_ingest_counts_and_determinism(tmp_path, capsys):
    root = tmp_path / "ck"
    write_sequence(root, "S005", "001", 12, label="3.0")
    write_sequence(root, "S005", "002", 4, label=None)
    write_sequence(root, "S010", "001", 5, label="5.0")
    code, out, _ = run(capsys, "ingest", "--ckplus-root", root, "--out", tmp_path / "o1", "--size", 8)
    assert code == 0
    assert out.splitlines()[0] == "6 samples / 2 sequences / 2 subjects"
    run(capsys, "ingest", "--ckplus-root", root, "--out", tmp_path / "o2", "--size", 8)
    assert sha(tmp_path / "o1" / "ckplus.f32") == sha(tmp_path / "o2" / "ckplus.f32")
    manifest = json.loads((tmp_path / "o1" / "manifest-ingest.json").read_text())
    assert manifest["command"] == "ingest"
    assert manifest["artifact_sha256"]["cache"] == sha(tmp_path / "o1" / "ckplus.f32")
    assert manifest["config"]["size"] == 8


def test_ingest_missing_root(tmp_path, capsys):
    code, _, err = run(capsys, "ingest", "--ckplus-root", tmp_path / "none", "--out", tmp_path)
    assert code == 2
    assert "does not exist" in err


def test_train_from_cache(tmp_path, capsys):
    root = tmp_path / "ck"
    for k, subj in enumerate(["S001", "S002", "S003", "S004", "S005"]):
        write_sequence(root, subj, "001", 3, label=f"{k + 1}.0", size=(20, 16))
    run(capsys, "ingest", "--ckplus-root", root, "--out", tmp_path, "--size", 16)
    code, out, _ = run(capsys, "train", "--arch", "nano-b", "--input-size", 16, "--data",
                       tmp_path / "ckplus.f32", "--epochs", 1, "--out", tmp_path / "t")
    assert code == 0
    assert json.loads(out)["train_samples"] + json.loads(out)["val_samples"] == 15
    code, _, err = run(capsys, "train", "--arch", "nano-b", "--input-size", 24, "--data",
                       tmp_path / "ckplus.f32", "--epochs", 1, "--out", tmp_path / "t")
    assert code == 2 and "architecture expects" in err


# ---- train ------------------------------------------------------------------------

def test_train_zero_epochs(tmp_path, capsys):
    code, out, _ = run(capsys, "train", *SMALL, "--epochs", 0, "--seed", 3, "--out", tmp_path)
    assert code == 0
    metrics = json.loads((tmp_path / "train_metrics.json").read_text())
    assert metrics["history"] == []
    state = load_checkpoint(tmp_path / "model.ckpt")
    ref = init_state(state.spec, seed=3)
    for k in ref.params:
        np.testing.assert_array_equal(state.params[k].weights, ref.params[k].weights)


def test_train_same_seed_identical_files(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "train", *SMALL, "--epochs", 2, "--seed", 7, "--out", tmp_path / d)[0] == 0
    assert sha(tmp_path / "a" / "train_metrics.json") == sha(tmp_path / "b" / "train_metrics.json")
    assert sha(tmp_path / "a" / "model.ckpt") == sha(tmp_path / "b" / "model.ckpt")
    ma = json.loads((tmp_path / "a" / "manifest-train.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest-train.json").read_text())
    assert ma["artifact_sha256"] == mb["artifact_sha256"]
    assert ma["arch_hash"] == load_spec(tmp_path / "a" / "arch.json").content_hash()


def test_invalid_arch_file_reports_location(tmp_path, capsys):
    bad =tmp_path / "bad.json"
    save_spec(toy_spec(4, 4), bad)
    doc = json.loads(bad.read_text())
    doc["nodes"][2]["kind"] = "lstm"
    bad.write_text(json.dumps(doc))
    code, _, err = run(capsys, "train", "--arch", bad, "--out", tmp_path)
    assert code == 2
    assert "$.nodes[2].kind" in err


def test_config_precedence_and_env_threads(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "batch_size": 4, "lr": 0.01}))
    monkeypatch.setenv("NANONET_THREADS", "1")
    args = ["train", "--arch", "nano-b", "--input-size", 16, "--synth-subjects", 6, "--synth-per-subject", 7]
    code, _, _ = run(capsys, *args, "--config", cfg, "--batch-size", 8, "--out", tmp_path)
    assert code == 0
    eff = json.loads((tmp_path / "manifest-train.json").read_text())["config"]
    assert eff["epochs"] == 1          # from the config file
    assert eff["batch_size"] == 8      # CLI beats config
    assert eff["lr"] == 0.01
    assert eff["k"] == 10              # built-in default
    assert eff["threads"] == 1         # environment fallback
    cfg.write_text(json.dumps({"epochz": 1}))
    assert run(capsys, *args, "--config", cfg, "--out", tmp_path)[0] == 1


# ---- crossval ----------------------------------------------------------------------

def test_crossval_synth_nano_b(tmp_path, capsys):
    code, out, err = run(capsys, "crossval", "--arch", "nano-b", "--input-size", 24, "--data", "synth",
                         "--synth-subjects", 20, "--synth-per-subject", 7, "--epochs", 20,
                         "--batch-size", 8, "--k", 5, "--threads", 1, "--out", tmp_path)
    assert code == 0
    report = json.loads(out)
    assert len(report["fold_accuracies"]) == 5
    assert report["mean_accuracy"] >= 0.90
    assert "fold" in err and "mean" in err
    full = json.loads((tmp_path / "crossval.json").read_text())
    subjects = [s for fold in full["fold_subjects"] for s in fold]
    assert len(subjects) == len(set(subjects)) == 20


# ---- explore ----------------------------------------------------------------------

def test_explore_toy_space_matches_enumeration(tmp_path, capsys):
    hw, seed, epochs = 12, 0, 3
    seed_file = tmp_path / "toy.json"
    save_spec(toy_spec(8, 8, hw), seed_file)
    constraints = Constraints(min_accuracy=0.05, max_params=1500)
    code, out, _ = run(capsys, "explore", "--seed-arch", seed_file, "--data", "synth", "--synth-subjects", 10,
                       "--synth-per-subject", 7, "--min-accuracy", constraints.min_accuracy,
                       "--max-params", constraints.max_params, "--iterations", 12, "--population", 4,
                       "--proxy-epochs", epochs, "--rates", "channels=1", "--width-choices", "4,8,12,16",
                       "--seed", seed, "--threads", 1, "--out", tmp_path)
    assert code == 0
    summary = json.loads(out)
    assert summary["evaluated"] == 16

    # oracle: score every candidate with the same proxy protocol and take the feasible argmax
    evaluator = ProxyEvaluator(synth_dataset(10, 7, seed, hw), epochs, seed)
    best = None
    for w1 in WIDTHS:
        for w2 in WIDTHS:
            rec = make_record(toy_spec(w1, w2, hw), evaluator(toy_spec(w1, w2, hw))[0], constraints)
            if rec.feasible and (best is None or rec.u_score > best.u_score):
                best = rec
    found = deserialize((tmp_path / "best_arch.json").read_text())
    assert [n.out_channels for n in found.nodes] == [n.out_channels for n in best.spec.nodes]
    assert summary["best"]["u_score"] == pytest.approx(best.u_score, abs=1e-12)
    lines = (tmp_path / "explore_log.jsonl").read_text().splitlines()
    assert len(lines) == 16


def test_explore_impossible_constraints_exit_3(tmp_path, capsys):
    seed_file = tmp_path / "toy.json"
    save_spec(toy_spec(4, 4, 12), seed_file)
    code, out, err = run(capsys, "explore", "--seed-arch", seed_file, "--synth-subjects", 10,
                         "--synth-per-subject", 7, "--min-accuracy", 1.01, "--iterations", 1,
                         "--population", 2, "--proxy-epochs", 1, "--out", tmp_path)
    assert code == 3
    assert "no feasible candidate" in err
    assert json.loads(out)["feasible"] == 0
    assert not (tmp_path / "best_arch.json").exists()


def test_explore_best_file_round_trips(tmp_path, capsys):
    seed_file = tmp_path / "toy.json"
    save_spec(toy_spec(4, 4, 12), seed_file)
    code, _, _ = run(capsys, "explore", "--seed-arch", seed_file, "--synth-subjects", 10,
                     "--synth-per-subject", 7, "--min-accuracy", 0.01, "--iterations", 1,
                     "--population", 2, "--proxy-epochs", 1, "--out", tmp_path)
    assert code == 0
    text = (tmp_path / "best_arch.json").read_text()
    spec = deserialize(text)
    assert deserialize(text) == spec
    from nanonet.arch import serialize
    assert serialize(spec) == text


def test_explore_bad_rates(tmp_path, capsys):
    code, _, err = run(capsys, "explore", "--seed-arch", "nano-b", "--rates", "dropout=1", "--out", tmp_path)
    assert code == 1 and "dropout" in err


# ---- bench --------------------------------------------------------------------------

@pytest.fixture
def checkpoint(tmp_path, capsys):
    assert run(capsys, "train", *SMALL, "--epochs", 0, "--out", tmp_path)[0] == 0
    return tmp_path / "model.ckpt"


def test_bench_report(checkpoint, tmp_path, capsys):
    code, out, err = run(capsys, "bench", "--checkpoint", checkpoint, "--runs", 10, "--watts", 15,
                         "--report", tmp_path / "r.json", "--out", tmp_path)
    assert code == 0
    rep = json.loads(out)
    assert rep["images_per_sec_per_watt"] == rep["fps"] / 15
    assert rep["runs"] == 10
    assert json.loads((tmp_path / "r.json").read_text()) == rep
    assert "FPS" in err


def test_bench_errors(checkpoint, tmp_path, capsys):
    code, _, err = run(capsys, "bench", "--checkpoint", checkpoint, "--watts", 0, "--out", tmp_path)
    assert code != 0
    code, _, err = run(capsys, "bench", "--checkpoint", checkpoint, "--runs", 5, "--out", tmp_path)
    assert code != 0 and "runs >= 10 required" in err
    code, _, err = run(capsys, "bench", "--checkpoint", tmp_path / "missing.ckpt", "--out", tmp_path)
    assert code == 2
