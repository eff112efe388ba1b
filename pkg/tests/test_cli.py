import json
import time

import numpy as np
import pytest

from istpose import cli
from istpose.checkpoint import load_checkpoint
from istpose.synthdata import read_snapshot, snapshot_checksum

SMALL = ["--set", "n_points=32", "--set", "d=8", "--set", "hidden=8", "--set", "k=4",
         "--set", "batch_size=8", "--set", "eval_count=8",
         "--set", 'gen={"count": 16, "n_model_points": 128}']


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _json(out):
    return json.loads(out)


@pytest.fixture
def trained(tmp_path, capsys):
    ck = tmp_path / "m.istc"
    code, _, _ = run(capsys, "train", *SMALL, "--set", "epochs=2", "--out", str(ck))
    assert code == 0
    return ck


def test_gen_data_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.istd", tmp_path / "b.istd"
    args = ["--set", "count=40", "--set", "seed=42", "--set", "n_points=32"]
    code, out, _ = run(capsys, "gen-data", *args, "--out", str(a))
    assert code == 0
    crc = _json(out)["crc32"]
    run(capsys, "gen-data", *args, "--out", str(b))
    assert a.read_bytes() == b.read_bytes()
    assert snapshot_checksum(a) == crc
    assert len(read_snapshot(a)) == 40


def test_gen_data_invalid_category(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--set", 'categories=["box", "teapot"]',
                       "--out", str(tmp_path / "x.istd"))
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["field"] == "categories"


def test_usage_and_config_errors(tmp_path, capsys):
    assert run(capsys, "train")[0] == 1
    assert run(capsys, "train", "--set", "d=-1", "--out", str(tmp_path / "m"))[0] == 1
    code, _, err = run(capsys, "train", "--set", "colour=red", "--out", str(tmp_path / "m"))
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["field"] == "colour"
    assert run(capsys, "eval", "--checkpoint", str(tmp_path / "missing"))[0] == 2


def test_train_smoke_and_log(tmp_path, capsys):
    ck = tmp_path / "m.istc"
    t0 = time.perf_counter()
    code, out, _ = run(capsys, "train", "--set", "epochs=2", "--set", "eval_count=8",
                       "--set", 'gen={"count": 64}', "--out", str(ck))
    assert code == 0
    assert time.perf_counter() - t0 < 60
    assert ck.exists() and (tmp_path / "m.best.istc").exists()
    log = [json.loads(line) for line in (tmp_path / "m.istc.log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1]
    for r in log:
        want = (r["L_main"] + r["L_aux1"] + r["L_aux2"] + r["lambda_f"] * r["L_feat"]
                + r["lambda_r"] * r["L_rec"])
        assert r["total"] == pytest.approx(want, rel=1e-6)
        assert r["config_hash"] == _json(out)["config_hash"]
    assert load_checkpoint(ck).epoch == 2


def test_resume_is_bitwise(tmp_path, capsys):
    full, part = tmp_path / "full.istc", tmp_path / "part.istc"
    assert run(capsys, "train", *SMALL, "--set", "epochs=4", "--out", str(full))[0] == 0
    assert run(capsys, "train", *SMALL, "--set", "epochs=2", "--out", str(part))[0] == 0
    assert run(capsys, "train", *SMALL, "--set", "epochs=4", "--resume", str(part),
               "--out", str(part))[0] == 0
    a, b = load_checkpoint(full), load_checkpoint(part)
    assert a.epoch == b.epoch == 4
    for k in a.state:
        assert np.array_equal(a.state[k], b.state[k])
    la = (tmp_path / "full.istc.log.jsonl").read_text().splitlines()
    lb = (tmp_path / "part.istc.log.jsonl").read_text().splitlines()
    # the first two epochs ran under a config with a different epoch count, hence hash
    skip = ("seconds", "config_hash")
    strip = [{k: v for k, v in json.loads(x).items() if k not in skip} for x in la]
    assert strip == [{k: v for k, v in json.loads(x).items() if k not in skip} for x in lb]


def test_resume_with_other_architecture_fails(trained, tmp_path, capsys):
    code, _, err = run(capsys, "train", *SMALL, "--set", "d=16", "--resume", str(trained),
                       "--out", str(tmp_path / "x.istc"))
    assert code == 2 and "ConfigHashMismatch" in err


def test_eval_modes(trained, tmp_path, capsys):
    out_file = tmp_path / "rep.json"
    code, out, _ = run(capsys, "eval", "--checkpoint", str(trained), "--out", str(out_file))
    assert code == 0
    doc = _json(out)
    assert doc["mode"] == "direct" and doc["count"] == 8
    assert json.loads(out_file.read_text()) == doc
    code, out, _ = run(capsys, "eval", "--checkpoint", str(trained), "--mode", "umeyama")
    assert code == 0 and _json(out)["mode"] == "umeyama"
    assert _json(out)["config_hash"] == load_checkpoint(trained).config.config_hash


def test_eval_umeyama_routes_through_variant(trained, capsys, monkeypatch):
    called = []
    real = cli.umeyama_variant_eval

    def spy(model, data):
        called.append(len(data))
        return real(model, data)

    monkeypatch.setattr(cli, "umeyama_variant_eval", spy)
    run(capsys, "eval", "--checkpoint", str(trained), "--mode", "umeyama")
    assert called == [8]


def test_eval_with_oracle_predictions_scores_full_marks(trained, capsys, monkeypatch):
    monkeypatch.setattr(cli, "predict", lambda model, data: [d.pose for d in data])
    code, out, _ = run(capsys, "eval", "--checkpoint", str(trained))
    assert code == 0
    assert all(v == 100.0 for v in _json(out)["mean"].values())


def test_eval_hash_mismatch(trained, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", str(trained), *SMALL, "--set", "d=16")
    assert code == 2 and "ConfigHashMismatch" in err


def test_corrupt_checkpoint(trained, capsys):
    blob = trained.read_bytes()
    trained.write_bytes(blob[:-5])
    code, _, err = run(capsys, "eval", "--checkpoint", str(trained))
    assert code == 2 and "ChecksumMismatch" in err


def test_ablate_smoke(tmp_path, capsys):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"E1": {"ist": False, "ce": False, "we": False},
                                "E5": {"ist": True, "ce": True, "we": True}}))
    out = tmp_path / "ab.json"
    code, text, _ = run(capsys, "ablate", *SMALL, "--set", "epochs=1", "--grid", str(grid),
                        "--seeds", "0", "--out", str(out))
    assert code == 0
    doc = _json(text)
    assert set(doc["configs"]) == {"E1", "E5"} and "E5-E1" in doc["deltas"]
    assert json.loads(out.read_text())["configs"].keys() == doc["configs"].keys()


def test_ablate_rejects_bad_grid(tmp_path, capsys):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"bad": {"variant": "quantum"}}))
    assert run(capsys, "ablate", *SMALL, "--grid", str(grid))[0] == 1
    assert run(capsys, "ablate", *SMALL, "--seeds", "a,b")[0] == 1


def test_prior_study_smoke(capsys):
    code, text, _ = run(capsys, "prior-study", *SMALL, "--set", "epochs=1", "--seeds", "0")
    assert code == 0
    doc = _json(text)
    assert {"case1", "case2", "case3", "case4"} <= set(doc)
    assert run(capsys, "prior-study", *SMALL, "--cases", "case9")[0] == 1


def test_bench_smoke(capsys):
    code, text, _ = run(capsys, "bench", *SMALL, "--instances", "8", "--warmup", "0",
                        "--iters", "2")
    assert code == 0
    doc = _json(text)
    assert doc["models"]["implicit"]["params"] < doc["models"]["explicit"]["params"]
    assert doc["throughput_ratio"] > 0


def test_log_level_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.LOG_ENV, "DEBUG")
    run(capsys, "gen-data", "--set", "count=4", "--set", "n_points=16",
        "--out", str(tmp_path / "a.istd"))
    import logging
    assert logging.getLogger("istpose").level == logging.DEBUG
