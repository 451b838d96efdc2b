import json

import numpy as np
import pytest

from rpcnet.cli import main
from rpcnet.dataio import TrialRecord, load_processed, save_trial
from rpcnet.experiments import (ExperimentPlan, actual_streams, choose_test_trial, load_subjects, split_subjects,
                                sweep_conditions)
from rpcnet.kinematics import forward_kinematics_array
from rpcnet.network import RpcNet
from rpcnet.signals import RawEmgRecording

TINY_TRAINING = {"learning_rate": 1e-3, "eps": 1e-8, "batch_size": 64, "epochs": 1, "window_stride": 8}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--out", str(root / "raw"), "synth", "--subjects", "2", "--trials", "3", "--duration", "5"]) == 0
    assert main(["--out", str(root / "proc"), "preprocess", str(root / "raw")]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"training": TINY_TRAINING}))
    return root, cfg


def test_synth_layout(workspace):
    root, _ = workspace
    assert sorted(p.name for p in (root / "raw").iterdir()) == ["S0", "S1"]
    assert len(list((root / "raw" / "S0").glob("*.rpct"))) == 3


def test_preprocess_manifest(workspace):
    root, _ = workspace
    doc = json.loads((root / "proc" / "manifest_preprocess.json").read_text())
    assert len(doc["trials"]) == 6
    # 5 s at 2048 Hz: (10240 - 200) // 25 + 1
    assert {t["length"] for t in doc["trials"]} == {402}
    assert all(t["aligned"] for t in doc["trials"])
    assert doc["config_hash"] and doc["code_version"]
    assert len(doc["artifacts"]) == 6


def test_preprocess_idempotent(workspace, tmp_path):
    root, _ = workspace
    assert main(["--out", str(tmp_path), "preprocess", str(root / "raw" / "S1")]) == 0
    again = tmp_path / "again"
    assert main(["--out", str(again), "preprocess", str(root / "raw" / "S1")]) == 0
    for f in sorted((tmp_path / "S1").glob("*.rpcp")):
        assert f.read_bytes() == (again / "S1" / f.name).read_bytes()


def test_preprocess_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.rpct"
    assert main(["preprocess", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_preprocess_error_names_trial(tmp_path, capsys):
    bad = tmp_path / "bad.rpct"
    bad.write_bytes(b"RPCN garbage")
    assert main(["--out", str(tmp_path / "o"), "preprocess", str(bad)]) == 1
    assert "bad.rpct" in capsys.readouterr().err


@pytest.mark.slow
def test_preprocess_450s_length(tmp_path, model):
    n = 450 * 2048
    markers = np.broadcast_to(forward_kinematics_array(model, model.rest_angles[None])[0], (45000, 23, 3))
    rec = TrialRecord("S9", "long", "train", RawEmgRecording(np.zeros((n, 96), np.int16)), markers)
    save_trial(tmp_path / "long.rpct", rec)
    assert main(["--out", str(tmp_path / "p"), "preprocess", str(tmp_path / "long.rpct")]) == 0
    doc = json.loads((tmp_path / "p" / "manifest_preprocess.json").read_text())
    assert doc["trials"][0]["length"] == 36857


def test_seeded_split_is_recorded_and_stable(workspace):
    root, _ = workspace
    data = load_subjects(root / "proc")
    plan = ExperimentPlan(root / "proc", root / "x", split_seed=3)
    a = {s: t.trial_id for s, (_, t) in split_subjects(plan, data).items()}
    b = {s: t.trial_id for s, (_, t) in split_subjects(plan, data).items()}
    assert a == b
    for sid, (train, test) in split_subjects(plan, data).items():
        assert len(train) == 2 and test.trial_id not in [t.trial_id for t in train]
    assert choose_test_trial("S0", data["S0"], {"S0": "T1"}, 0) == "T1"


def test_train_twice_is_bit_identical(workspace, tmp_path):
    root, cfg = workspace
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["--config", str(cfg), "--seed", "4", "--out", str(out), "train", str(root / "proc"),
                     "--variant", "B", "--subject", "S0"]) == 0
        outs.append(out)
    a, b = outs
    assert (a / "checkpoints" / "S0" / "B_seed4.rpcc").read_bytes() == (b / "checkpoints" / "S0" / "B_seed4.rpcc").read_bytes()
    assert (a / "scores_B_seed4.csv").read_bytes() == (b / "scores_B_seed4.csv").read_bytes()
    manifest = json.loads((a / "manifest_train.json").read_text())
    assert manifest["splits"]["S0"]["test"] in {"T0", "T1", "T2"}
    assert {e["path"] for e in manifest["artifacts"]} >= {"checkpoints/S0/B_seed4.rpcc", "scores_B_seed4.csv"}


def test_b_checkpoint_has_no_angle_branch(workspace, tmp_path):
    root, cfg = workspace
    assert main(["--config", str(cfg), "--out", str(tmp_path), "train", str(root / "proc"), "--variant", "B",
                 "--subject", "S1", "--no-evaluate"]) == 0
    net = RpcNet.load(tmp_path / "checkpoints" / "S1" / "B_seed0.rpcc")
    assert not any(k.startswith("angle.") for k in net.params)
    assert net.n_networks == 24


def test_train_and_evaluate_full(workspace, tmp_path):
    root, cfg = workspace
    assert main(["--config", str(cfg), "--out", str(tmp_path), "train", str(root / "proc"), "--variant", "full",
                 "--subject", "S0", "--no-evaluate"]) == 0
    net = RpcNet.load(tmp_path / "checkpoints" / "S0" / "full_seed0.rpcc")
    assert net.n_networks == 24 and "angle.0.W" in net.params
    assert main(["--config", str(cfg), "--out", str(tmp_path), "evaluate", str(root / "proc"), "--variant", "full",
                 "--subject", "S0"]) == 0
    lines = (tmp_path / "scores_full_seed0.csv").read_text().splitlines()
    assert lines[0] == "Subject,MD,T1,T2,Med,MPCC,T1,T2,Med"
    assert lines[1].startswith("S0,")


def test_evaluate_oracle(workspace, tmp_path):
    root, _ = workspace
    assert main(["--out", str(tmp_path), "evaluate", str(root / "proc"), "--oracle"]) == 0
    data = json.loads((tmp_path / "scores_oracle.json").read_text())
    for sid in ("S0", "S1"):
        assert data[sid]["MD"] == 0.0
        assert data[sid]["MPCC"] == pytest.approx(1.0)


def test_evaluation_skips_initial_history(workspace, model):
    root, _ = workspace
    trial = load_subjects(root / "proc")["S0"]["T0"]
    deg, markers = actual_streams(trial, model)
    assert len(deg) == len(trial.angles.trajectories) - 64 == len(markers)


def test_missing_checkpoint_exit_code(workspace, tmp_path, capsys):
    root, _ = workspace
    assert main(["--out", str(tmp_path), "evaluate", str(root / "proc"), "--variant", "B"]) == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_bad_variant_code(workspace, tmp_path):
    root, cfg = workspace
    assert main(["--config", str(cfg), "--out", str(tmp_path), "train", str(root / "proc"), "--variant", "Q7"]) == 1


def test_bad_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["--config", str(p), "bench", "x.rpcc"]) == 1
    p.write_text(json.dumps({"training": {"learning_rte": 1}}))
    assert main(["--config", str(p), "--out", str(tmp_path), "train", str(tmp_path)]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(workspace, tmp_path, capsys):
    root, _ = workspace
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"training": {"learning_rate": 1e12, "eps": 1e-8, "batch_size": 8, "epochs": 3,
                                            "window_stride": 4}}))
    assert main(["--config", str(cfg), "--out", str(tmp_path), "train", str(root / "proc"), "--variant", "B",
                 "--subject", "S0"]) == 2
    assert "non-finite" in capsys.readouterr().err


def test_sweep_condition_counts():
    length = sweep_conditions("length")
    assert sum(c.label.startswith("full ") for c in length) == 8
    assert sum(c.label.startswith("B ") for c in length) == 8
    assert len(sweep_conditions("electrodes")) == 19
    assert len(sweep_conditions("width")) == 12
    assert [c.label for c in sweep_conditions("monolithic")] == ["full", "I", "W", "B", "I-B", "W-B"]


def test_ablate_monolithic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["--config", str(cfg), "--out", str(tmp_path), "ablate", str(root / "proc"),
                 "--sweep", "monolithic"]) == 0
    rows = (tmp_path / "ablation_monolithic.csv").read_text().splitlines()
    assert rows[0].startswith("subject,seed,condition,variant,x,MD,MPCC")
    assert len(rows) == 1 + 6 * 2
    stats = (tmp_path / "ablation_monolithic_stats.txt").read_text().splitlines()
    assert any("sign test" in s for s in stats)
    for s in stats:
        assert ("p=" in s and "=" in s.split(":")[-1]) or "undefined" in s


def test_bench_report(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["--config", str(cfg), "--out", str(tmp_path), "train", str(root / "proc"), "--variant", "B+B1",
                 "--subject", "S0", "--no-evaluate"]) == 0
    ck = tmp_path / "checkpoints" / "S0" / "B_B1_seed0.rpcc"
    assert main(["--threads", "1", "--out", str(tmp_path), "bench", str(ck), "--iterations", "50"]) == 0
    doc = json.loads((tmp_path / "bench_B_B1_seed0.json").read_text())
    assert doc["iterations"] == 50 and doc["mean_ms"] > 0 and doc["threads"] == 1
    assert "inference time" in capsys.readouterr().out
