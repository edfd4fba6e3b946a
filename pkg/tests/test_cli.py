import csv
import json

import pytest

from kmap.cli import run

SMALL = dict(d_s=6, d_qk=5, d_lk=4, d_r=3, d_z=3, d_qb=4, d_lb=4, n_concepts=3, d_v=5, d_h=4, n_heads=2, attn_dim=4,
             T=6, k_train=2, k_eval=2, batch_size=8, n_clusters=2, lr=0.01, epochs=2)


@pytest.fixture
def synth_dir(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_students": 8, "n_questions": 12, "n_lectures": 8, "events_per_student": 20,
                                "n_archetypes": 2, "seed": 5}), encoding="utf-8")
    assert run(["synth", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
    return tmp_path


@pytest.fixture
def trained(synth_dir):
    cfg = synth_dir / "cfg.json"
    cfg.write_text(json.dumps(SMALL), encoding="utf-8")
    code = run(["train", "--config", str(cfg), "--data", str(synth_dir / "data" / "events.jsonl"),
                "--out", str(synth_dir / "ckpt")])
    assert code == 0
    return synth_dir


def test_synth_writes_files_and_is_byte_identical(synth_dir):
    data = synth_dir / "data"
    first = (data / "events.jsonl").read_bytes(), (data / "labels.csv").read_bytes()
    assert run(["synth", "--spec", str(synth_dir / "spec.json"), "--out", str(synth_dir / "again")]) == 0
    assert (synth_dir / "again" / "events.jsonl").read_bytes() == first[0]
    assert (synth_dir / "again" / "labels.csv").read_bytes() == first[1]
    row = json.loads(first[0].decode().splitlines()[0])
    assert set(row) >= {"student_id", "material_id", "type", "ts"}
    assert first[1].decode().startswith("student_id,archetype\n")


def test_synth_seed_env_override(synth_dir, monkeypatch):
    monkeypatch.setenv("KMAP_SEED", "99")
    assert run(["synth", "--spec", str(synth_dir / "spec.json"), "--out", str(synth_dir / "s99")]) == 0
    assert (synth_dir / "s99" / "events.jsonl").read_bytes() != (synth_dir / "data" / "events.jsonl").read_bytes()


def test_train_outputs(trained):
    ck = trained / "ckpt"
    assert {p.name for p in ck.iterdir()} >= {"checkpoint.json", "metrics.csv", "config.json", "train.log"}
    resolved = json.loads((ck / "config.json").read_text(encoding="utf-8"))
    assert resolved["d_s"] == 6 and resolved["epochs"] == 2
    assert "resolved config" in (ck / "train.log").read_text(encoding="utf-8")
    assert len(list(csv.DictReader(open(ck / "metrics.csv", encoding="utf-8")))) == 2


def test_eval_json(trained, tmp_path):
    out = tmp_path / "m.json"
    assert run(["eval", "--ckpt", str(trained / "ckpt"), "--data", str(trained / "data" / "events.jsonl"),
                "--out", str(out)]) == 0
    res = json.loads(out.read_text(encoding="utf-8"))
    for kind in ("assessed", "non_assessed"):
        assert {"hr@5", "ndcg@5", "mrr"} <= set(res[kind])
    assert "auc_perf" in res and "auc_type" in res


def test_clusters_and_export(trained, tmp_path):
    assert run(["clusters", "--ckpt", str(trained / "ckpt"), "--out", str(tmp_path / "c.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "c.csv", encoding="utf-8")))
    assert rows[0] == ["student_id", "cluster", "d_ic", "d_nc"] and len(rows) == 9
    assert run(["export-embeddings", "--ckpt", str(trained / "ckpt" / "checkpoint.json"),
                "--out", str(tmp_path / "e.csv")]) == 0
    header = next(csv.reader(open(tmp_path / "e.csv", encoding="utf-8")))
    assert header == ["student_id"] + [f"v_{i}" for i in range(1, 7)] + [f"b_{i}" for i in range(1, 5)]


def test_train_with_preset_and_loss_weights(synth_dir, caplog):
    code = run(["train", "--preset", "ednet", "--epochs", "0", "--loss-weights", '{"type": 0}', "--min-events", "5",
                "--data", str(synth_dir / "data" / "events.jsonl"), "--out", str(synth_dir / "p")])
    assert code == 0
    resolved = json.loads((synth_dir / "p" / "config.json").read_text(encoding="utf-8"))
    assert resolved["d_qk"] == 64 and resolved["lr"] == 0.1 and resolved["loss_weights"]["type"] == 0.0
    assert resolved["min_events"] == 5


@pytest.mark.parametrize("argv", [
    ["train", "--out", "x"],
    ["train", "--config", "missing.json", "--out", "x"],
    ["eval", "--ckpt", "nowhere", "--data", "nothing.jsonl"],
    ["frobnicate"],
    ["synth", "--spec"],
    ["clusters", "--ckpt", "x", "--bogus"],
])
def test_config_errors_exit_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 2
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_invalid_config_has_no_side_effects(synth_dir):
    cfg = synth_dir / "bad.json"
    cfg.write_text(json.dumps({"T": 1}), encoding="utf-8")
    out = synth_dir / "never"
    assert run(["train", "--config", str(cfg), "--data", str(synth_dir / "data" / "events.jsonl"),
                "--out", str(out)]) == 2
    assert not out.exists()


def test_runtime_error_exits_1(synth_dir):
    cfg = synth_dir / "cfg.json"
    cfg.write_text(json.dumps({**SMALL, "n_clusters": 50}), encoding="utf-8")
    assert run(["train", "--config", str(cfg), "--data", str(synth_dir / "data" / "events.jsonl"),
                "--out", str(synth_dir / "rt")]) == 1


def test_clusters_without_profiles_exits_1(synth_dir):
    cfg = synth_dir / "cfg.json"
    cfg.write_text(json.dumps({**SMALL, "epochs": 0}), encoding="utf-8")
    assert run(["train", "--config", str(cfg), "--data", str(synth_dir / "data" / "events.jsonl"),
                "--out", str(synth_dir / "e0")]) == 0
    assert run(["clusters", "--ckpt", str(synth_dir / "e0")]) == 1
