import csv
import json

import pytest

from e2ekws.cli import run
from e2ekws.synth import read_manifest


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "synth": {"noise_sigma": 0.5, "max_confusers": 0},
        "train": {"batch_utterances": 8},
        "eval": {"operating_fa_per_hour": 50.0},
    }))
    c = ["--config", str(cfg), "-q"]
    assert run(["gen-data", *c, "--out", str(root / "train"), "--n", "16", "--seed", "1"]) == 0
    assert run(["gen-data", *c, "--out", str(root / "test"), "--n", "6", "--seed", "2"]) == 0
    tr, te = str(root / "train" / "manifest.jsonl"), str(root / "test" / "manifest.jsonl")
    assert run(["estimate-hmm", *c, "--manifest", tr, "--out", str(root / "hmm")]) == 0
    hmm = str(root / "hmm" / "hmm.json")
    assert run(["train-ce", *c, "--manifest", tr, "--out", str(root / "ce"), "--epochs", "2"]) == 0
    ce = str(root / "ce" / "ce.kwse")
    assert run(["train-e2e", *c, "--manifest", tr, "--hmm", hmm, "--init", ce,
                "--out", str(root / "e2e"), "--epochs", "1", "--lr", "0.0005"]) == 0
    e2e = str(root / "e2e" / "e2e.kwse")
    for name, ckpt in (("ce_", ce), ("e2e_", e2e)):
        assert run(["eval", *c, "--manifest", te, "--hmm", hmm, "--checkpoint", ckpt,
                    "--out", str(root / "eval"), "--prefix", name]) == 0
    return root, c, tr, te, hmm, ce


def test_pipeline_outputs(pipeline):
    root, *_ = pipeline
    for rel in ("train/manifest.jsonl", "hmm/hmm.json", "ce/ce.kwse", "ce/ce_log.csv",
                "e2e/e2e.kwse", "e2e/e2e_log.csv", "eval/ce_det.csv", "eval/e2e_det.csv",
                "eval/ce_summary.json", "eval/e2e_confusion.csv"):
        assert (root / rel).exists(), rel
    echoed = json.loads((root / "e2e" / "train-e2e_config.json").read_text())
    assert echoed["train"]["learning_rate"] == 0.0005
    assert echoed["train"]["batch_utterances"] == 8
    assert echoed["train"]["epochs"] == 1
    assert len(read_manifest(root / "train" / "manifest.jsonl")) == 16


def test_decode_csv(pipeline):
    root, c, _, te, hmm, ce = pipeline
    assert run(["decode", *c, "--manifest", te, "--hmm", hmm, "--checkpoint", ce,
                "--out", str(root / "dec")]) == 0
    rows = list(csv.DictReader(open(root / "dec" / "detections.csv")))
    assert rows and set(rows[0]) == {"id", "score", "start_frame", "end_frame"}
    assert {r["id"] for r in rows} <= {m["id"] for m in read_manifest(te)}


def test_same_seed_gives_identical_checkpoints(pipeline, tmp_path):
    root, c, tr, *_ = pipeline
    for d in ("a", "b"):
        assert run(["train-ce", *c, "--manifest", tr, "--out", str(tmp_path / d),
                    "--epochs", "1", "--seed", "7", "--threads", "1"]) == 0
    assert (tmp_path / "a" / "ce.kwse").read_bytes() == (tmp_path / "b" / "ce.kwse").read_bytes()


def test_eval_without_keywords_is_a_validation_error(pipeline, tmp_path, capsys):
    root, c, _, te, hmm, ce = pipeline
    rows = read_manifest(te)
    m = tmp_path / "m.jsonl"
    with open(m, "w") as f:
        for r in rows:
            r = {k: v for k, v in r.items() if not k.startswith("kw_")}
            r["features_path"] = str(root / "test" / r["features_path"])
            r.pop("labels_path")
            f.write(json.dumps(r) + "\n")
    code = run(["eval", "--manifest", str(m), "--hmm", hmm, "--checkpoint", ce,
                "--out", str(tmp_path / "o")])
    assert code == 1
    assert "no keyword windows in manifest" in capsys.readouterr().err


def test_missing_and_bad_inputs(tmp_path, capsys):
    assert run(["estimate-hmm", "--manifest", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 1
    (tmp_path / "bad.json").write_text("{not json")
    assert run(["gen-data", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1
    (tmp_path / "keys.json").write_text('{"synth": {"noise": 1}}')
    assert run(["gen-data", "--config", str(tmp_path / "keys.json"), "--out", str(tmp_path)]) == 1
    (tmp_path / "neg.json").write_text('{"synth": {"noise_sigma": -1}}')
    assert run(["gen-data", "--config", str(tmp_path / "neg.json"), "--out", str(tmp_path)]) == 1
    assert "noise_sigma" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        run(["frobnicate"])


def test_toml_config(tmp_path):
    (tmp_path / "c.toml").write_text('[synth]\nnoise_sigma = 0.7\n')
    assert run(["gen-data", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "o"),
                "--n", "2", "-q"]) == 0
    echoed = json.loads((tmp_path / "o" / "gen-data_config.json").read_text())
    assert echoed["synth"]["noise_sigma"] == 0.7


def test_corrupt_checkpoint_rejected(pipeline, tmp_path):
    root, c, _, te, hmm, _ = pipeline
    bad = tmp_path / "bad.kwse"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert run(["eval", "--manifest", te, "--hmm", hmm, "--checkpoint", str(bad),
                "--out", str(tmp_path / "o")]) == 1
