import json
import shutil
import subprocess
import sys

import pytest

from odrase.cli import main, read_manifest
from odrase.editing import EchoEditServer


def run(*argv):
    return main([str(a) for a in argv])


def manifest(path, n, prefix="img"):
    path.write_text("".join(f"images/{prefix}{k:03d}.jpg\n" for k in range(n)))
    return path


def summary(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """build -> filter -> synth-embeddings -> train on a 500-record mock dataset."""
    d = tmp_path_factory.mktemp("pipe")
    manifest(d / "m.txt", 500)
    assert run("build-dataset", "--manifest", d / "m.txt", "--backend", "mock:11:0.3", "--out", d / "raw.jsonl") == 0
    assert run("filter", "--in", d / "raw.jsonl", "--out", d / "kept.jsonl", "--report", d / "rep.jsonl") == 0
    assert run("synth-embeddings", "--dataset", d / "kept.jsonl", "--out", d / "emb") == 0
    assert run("train", "--dataset", d / "kept.jsonl", "--emb", d / "emb", "--out", d / "model.odre",
               "--split", "train", "--seed", "0") == 0
    return d


def test_build_clean_mock(tmp_path, capsys):
    manifest(tmp_path / "m.txt", 10)
    code = run("build-dataset", "--manifest", tmp_path / "m.txt", "--backend", "mock:0:0", "--out", tmp_path / "d.jsonl")
    assert code == 0
    s = summary(capsys)
    assert s["records"] == 10 and s["failed"] == 0 and s["would_discard"] == 0
    lines = (tmp_path / "d.jsonl").read_text().splitlines()
    assert len(lines) == 11
    assert (tmp_path / "d.transcripts.jsonl").exists()


def test_build_discard_rate(tmp_path, capsys):
    manifest(tmp_path / "m.txt", 500)
    assert run("build-dataset", "--manifest", tmp_path / "m.txt", "--backend", "mock:5:0.6",
               "--out", tmp_path / "d.jsonl", "--jobs", "4") == 0
    s = summary(capsys)
    assert abs(s["would_discard_fraction"] - 0.6) <= 0.05


def test_backend_env_fallback(tmp_path, monkeypatch, capsys):
    manifest(tmp_path / "m.txt", 3)
    monkeypatch.setenv("ODRASE_BACKEND_URL", "mock:1:0")
    assert run("build-dataset", "--manifest", tmp_path / "m.txt", "--out", tmp_path / "d.jsonl") == 0
    monkeypatch.delenv("ODRASE_BACKEND_URL")
    assert run("build-dataset", "--manifest", tmp_path / "m.txt", "--out", tmp_path / "d.jsonl") == 1


def test_empty_manifest(tmp_path, capsys):
    (tmp_path / "m.txt").write_text("\n# nothing here\n")
    assert run("build-dataset", "--manifest", tmp_path / "m.txt", "--backend", "mock:0:0", "--out", tmp_path / "d") == 2
    assert "empty manifest" in capsys.readouterr().err


def test_manifest_formats(tmp_path):
    (tmp_path / "m.txt").write_text("a/x.jpg\nrid7\tb/y.jpg\n")
    assert read_manifest(tmp_path / "m.txt") == [("x", "a/x.jpg"), ("rid7", "b/y.jpg")]
    (tmp_path / "dup.txt").write_text("a/x.jpg\nb/x.jpg\n")
    with pytest.raises(Exception, match="duplicate"):
        read_manifest(tmp_path / "dup.txt")


def test_all_failed_exits_backend_error(tmp_path, capsys):
    manifest(tmp_path / "m.txt", 1)
    code = run("build-dataset", "--manifest", tmp_path / "m.txt", "--backend", "http://127.0.0.1:9/x",
               "--out", tmp_path / "d.jsonl")
    assert code == 3
    assert summary(capsys)["failed"] == 1


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["filter", "--in", "x"], ["predict", "--dataset", "d", "--emb", "e",
                                  "--model", "m", "--out", "o", "--threshold", "1.5"]])
def test_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_bad_backend_spec_is_usage_error(tmp_path):
    manifest(tmp_path / "m.txt", 1)
    assert run("build-dataset", "--manifest", tmp_path / "m.txt", "--backend", "carrier-pigeon", "--out", tmp_path / "d") == 1


def test_filter_noise_one(tmp_path, capsys):
    manifest(tmp_path / "m.txt", 20)
    run("build-dataset", "--manifest", tmp_path / "m.txt", "--backend", "mock:2:1", "--out", tmp_path / "d.jsonl")
    assert run("filter", "--in", tmp_path / "d.jsonl", "--out", tmp_path / "k.jsonl", "--report", tmp_path / "r.jsonl") == 0
    assert summary(capsys)["discarded_fraction"] == 1.0
    assert len((tmp_path / "k.jsonl").read_text().splitlines()) == 1
    rows = [json.loads(x) for x in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(rows) == 20 and not any(r["kept"] for r in rows)


def test_filter_twice_is_noop_and_jobs_agree(pipeline, tmp_path):
    d = pipeline
    run("filter", "--in", d / "kept.jsonl", "--out", tmp_path / "again.jsonl", "--report", tmp_path / "r.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == (d / "kept.jsonl").read_bytes()
    run("filter", "--in", d / "raw.jsonl", "--out", tmp_path / "par.jsonl", "--report", tmp_path / "rp.jsonl", "--jobs", "3")
    assert (tmp_path / "par.jsonl").read_bytes() == (d / "kept.jsonl").read_bytes()
    assert (tmp_path / "rp.jsonl").read_bytes() == (d / "rep.jsonl").read_bytes()


def test_filter_refuses_other_ontology(pipeline, tmp_path):
    from odrase.ontology import default_ontology_text

    other = tmp_path / "o.ini"
    other.write_text(default_ontology_text().replace("sharp_curve -> ", "sharp_curve_x -> ", 1).replace(
        "sharp_curve\n", "sharp_curve\nsharp_curve_x\n", 1))
    code = run("filter", "--in", pipeline / "kept.jsonl", "--ontology", other,
               "--out", tmp_path / "k", "--report", tmp_path / "r")
    assert code == 2


def test_train_eval_accuracy(pipeline, tmp_path, capsys):
    d = pipeline
    assert run("eval", "--dataset", d / "kept.jsonl", "--emb", d / "emb", "--model", d / "model.odre",
               "--split", "test", "--json", tmp_path / "m.json") == 0
    table = capsys.readouterr().out
    assert table.split("\n")[0].split() == ["Recall", "Precision", "F1", "Acc"]
    report = json.loads((tmp_path / "m.json").read_text())
    assert report["accuracy"] >= 95.0 and report["n_samples"] > 5


def test_predict_threshold_extreme(pipeline, tmp_path):
    d = pipeline
    out = tmp_path / "p.jsonl"
    assert run("predict", "--dataset", d / "kept.jsonl", "--emb", d / "emb", "--model", d / "model.odre",
               "--threshold", 1 - 1e-8, "--out", out) == 0
    rows = [json.loads(x) for x in out.read_text().splitlines()]
    assert rows and all(r["labels"] == [] for r in rows)
    assert all(len(r["probabilities"]) == 10 for r in rows)


def test_predict_edit_prompt_edit(pipeline, tmp_path, capsys):
    d = pipeline
    pred = tmp_path / "p.jsonl"
    run("predict", "--dataset", d / "kept.jsonl", "--emb", d / "emb", "--model", d / "model.odre",
        "--split", "val", "--out", pred)
    rows = [json.loads(x) for x in pred.read_text().splitlines()]
    assert run("edit-prompt", "--pred", pred, "--out", tmp_path / "e.jsonl") == 0
    prompts = [json.loads(x) for x in (tmp_path / "e.jsonl").read_text().splitlines()]
    for r, p in zip(rows, prompts):
        assert p["prompt"].count(" and ") == max(len(r["labels"]) - 1, 0)
    images = tmp_path / "images"
    images.mkdir()
    for r in rows:
        (images / f"{r['record_id']}.jpg").write_bytes(b"\x89PNG" + r["record_id"].encode())
    with EchoEditServer() as server:
        assert run("edit", "--pred", pred, "--images", images, "--service", server.url, "--out", tmp_path / "out") == 0
    s = summary(capsys)
    assert s["edited"] == sum(bool(r["labels"]) for r in rows)
    assert len(list((tmp_path / "out").glob("*.edited.png"))) == s["edited"]


def test_edit_prompt_unknown_label(tmp_path):
    (tmp_path / "p.jsonl").write_text(json.dumps({"record_id": "a", "labels": ["teleporter"]}) + "\n")
    assert run("edit-prompt", "--pred", tmp_path / "p.jsonl", "--out", tmp_path / "o") == 2


def test_missing_embedding_names_record(pipeline, tmp_path, capsys):
    d = pipeline
    emb = tmp_path / "emb"
    shutil.copytree(d / "emb", emb)
    victim = sorted(emb.glob("*.img.odre"))[0]
    victim.unlink()
    code = run("train", "--dataset", d / "kept.jsonl", "--emb", emb, "--out", tmp_path / "m.odre")
    assert code == 2
    assert victim.name.split(".")[0] in capsys.readouterr().err


def test_corrupt_checkpoint(pipeline, tmp_path):
    d = pipeline
    bad = tmp_path / "bad.odre"
    bad.write_bytes(b"ODRE" + (d / "model.odre").read_bytes()[4:20])
    assert run("eval", "--dataset", d / "kept.jsonl", "--emb", d / "emb", "--model", bad) == 2


def test_train_config_file(pipeline, tmp_path):
    d = pipeline
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 2, "d": 8}))
    assert run("train", "--dataset", d / "kept.jsonl", "--emb", d / "emb", "--config", tmp_path / "c.json",
               "--out", tmp_path / "m.odre") == 0
    (tmp_path / "bad.json").write_text(json.dumps({"epochz": 2}))
    assert run("train", "--dataset", d / "kept.jsonl", "--emb", d / "emb", "--config", tmp_path / "bad.json",
               "--out", tmp_path / "m.odre") == 2


def full_run(d):
    manifest(d / "m.txt", 60)
    steps = [
        ("build-dataset", "--manifest", d / "m.txt", "--backend", "mock:4:0.5", "--out", d / "raw.jsonl", "--jobs", "4"),
        ("filter", "--in", d / "raw.jsonl", "--out", d / "kept.jsonl", "--report", d / "rep.jsonl"),
        ("synth-embeddings", "--dataset", d / "kept.jsonl", "--out", d / "emb", "--seed", "3"),
        ("train", "--dataset", d / "kept.jsonl", "--emb", d / "emb", "--out", d / "model.odre", "--seed", "7",
         "--config", d / "cfg.json"),
        ("predict", "--dataset", d / "kept.jsonl", "--emb", d / "emb", "--model", d / "model.odre", "--out", d / "p.jsonl"),
        ("edit-prompt", "--pred", d / "p.jsonl", "--out", d / "e.jsonl"),
    ]
    (d / "cfg.json").write_text(json.dumps({"epochs": 3, "d": 8}))
    for step in steps:
        assert run(*step) == 0, step
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_fixed_seed_runs_are_byte_identical(tmp_path, capsys):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = full_run(tmp_path / "a")
    b = full_run(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) > 10
    assert a == b


def test_console_script_entry_point():
    exe = shutil.which("odrase")
    cmd = [exe] if exe else [sys.executable, "-m", "odrase.cli"]
    proc = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("build-dataset", "filter", "train", "eval", "predict", "edit-prompt", "edit"):
        assert name in proc.stdout
