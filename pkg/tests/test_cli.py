import csv
import json
import subprocess
import sys

import jsonschema
import pytest

from ehpe import checkpoint as ck
from ehpe.cli import main
from ehpe.metrics import REPORT_SCHEMA

from conftest import TINY


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def data(work):
    path = work / "d.bin"
    assert main(["gen-data", "--n", "60", "--seed", "2", "--out", str(path)]) == 0
    return path


def _cfg(work, name, **kw):
    path = work / name
    path.write_text(json.dumps({**TINY, "epochs": 1, "batch_size": 16, **kw}))
    return str(path)


@pytest.fixture(scope="module")
def tw_ckpt(work, data):
    out = work / "tw.ckpt"
    rc = main(["train", "--phase", "tw", "--config", _cfg(work, "tw.json", phase="TW"), "--dataset", str(data),
               "--out", str(out), "--log", str(work / "tw.ndjson")])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def pg_ckpt(work, data, tw_ckpt):
    out = work / "pg.ckpt"
    rc = main(["train", "--phase", "pg", "--config", _cfg(work, "pg.json", phase="PG"), "--dataset", str(data),
               "--tw-checkpoint", str(tw_ckpt), "--out", str(out)])
    assert rc == 0
    return out


def test_gen_data_manifest_and_determinism(work, data):
    man = json.loads((work / "d.bin.manifest.json").read_text())
    assert man["dataset_sha256"] == ck.file_sha256(data) and man["seed"] == 2
    again = work / "again.bin"
    assert main(["gen-data", "--n", "60", "--seed", "2", "--out", str(again)]) == 0
    assert ck.file_sha256(again) == ck.file_sha256(data)


def test_gen_data_env_seed(work, monkeypatch):
    monkeypatch.setenv("EHPE_SEED", "2")
    out = work / "env.bin"
    assert main(["gen-data", "--n", "60", "--out", str(out)]) == 0
    assert ck.file_sha256(out) == ck.file_sha256(work / "d.bin")
    monkeypatch.setenv("EHPE_SEED", "two")
    assert main(["gen-data", "--n", "1", "--out", str(out)]) == 2


def test_gen_data_rejects_zero(work):
    assert main(["gen-data", "--n", "0", "--out", str(work / "z.bin")]) == 2


def test_train_manifest(work, tw_ckpt, pg_ckpt):
    man = json.loads((work / "tw.ckpt.manifest.json").read_text())
    assert man["checkpoints"]["output"] == ck.file_sha256(tw_ckpt)
    assert str(work / "tw.ndjson") in man["outputs"]
    pman = json.loads((work / "pg.ckpt.manifest.json").read_text())
    assert pman["checkpoints"]["tw_input"] == ck.file_sha256(tw_ckpt)
    assert pman["tw_param_digest"]["before"] == pman["tw_param_digest"]["after"]


def test_train_verify_reproducible(work, data):
    rc = main(["train", "--phase", "tw", "--config", _cfg(work, "r.json", phase="TW", epochs=0),
               "--dataset", str(data), "--out", str(work / "r.ckpt"), "--verify-reproducible"])
    assert rc == 0
    assert json.loads((work / "r.ckpt.manifest.json").read_text())["reproducible"] is True


def test_pg_needs_tw_checkpoint(work, data, capsys):
    assert main(["train", "--phase", "pg", "--dataset", str(data), "--out", str(work / "x.ckpt")]) == 2
    assert "--tw-checkpoint" in capsys.readouterr().err


def test_unknown_config_key(work, data):
    cfg = work / "bad.json"
    cfg.write_text(json.dumps({"phase": "TW", "lernrate": 1}))
    assert main(["train", "--phase", "tw", "--config", str(cfg), "--dataset", str(data),
                 "--out", str(work / "x.ckpt")]) == 2


def test_phase_mismatch(work, data):
    assert main(["train", "--phase", "pg", "--config", _cfg(work, "m.json", phase="TW"), "--dataset", str(data),
                 "--tw-checkpoint", "x", "--out", str(work / "x.ckpt")]) == 2


def test_non_finite_exit_code(work, data):
    assert main(["train", "--phase", "tw", "--config", _cfg(work, "inf.json", phase="TW", lambda_h=1e308 * 10),
                 "--dataset", str(data), "--out", str(work / "x.ckpt")]) == 4


def test_eval_full_model(work, data, pg_ckpt, tw_ckpt):
    rep = work / "rep.json"
    assert main(["eval", "--checkpoint", str(pg_ckpt), "--tw-checkpoint", str(tw_ckpt), "--dataset", str(data),
                 "--split", "all", "--report", str(rep)]) == 0
    doc = json.loads(rep.read_text())
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert doc["n_samples"] == 60
    assert (work / "rep.csv").read_text().startswith("category,mean_error,ratio_to_tip")
    man = json.loads((work / "rep.json.manifest.json").read_text())
    assert man["checkpoints"]["model"] == ck.file_sha256(pg_ckpt)


def test_eval_oracle_is_zero(work, data):
    rep = work / "oracle.json"
    assert main(["eval", "--oracle", "--dataset", str(data), "--split", "all", "--report", str(rep)]) == 0
    doc = json.loads(rep.read_text())
    assert doc["mpjpe"] == 0.0 and doc["pck_auc"] == 1.0


def test_eval_stage_mismatch(work, data, tw_ckpt, capsys):
    rep = str(work / "x.json")
    assert main(["eval", "--checkpoint", str(tw_ckpt), "--dataset", str(data), "--report", rep]) == 3
    assert "PG checkpoint" in capsys.readouterr().err
    # a W+T TW stage cannot decode all 21 joints on its own
    assert main(["eval", "--checkpoint", str(tw_ckpt), "--dataset", str(data), "--mode", "tw-only",
                 "--report", rep]) == 3


def test_eval_wrong_tw_provenance(work, data, pg_ckpt):
    other = work / "tw_other.ckpt"
    assert main(["train", "--phase", "tw", "--config", _cfg(work, "o.json", phase="TW", seed=9),
                 "--dataset", str(data), "--out", str(other)]) == 0
    assert main(["eval", "--checkpoint", str(pg_ckpt), "--tw-checkpoint", str(other), "--dataset", str(data),
                 "--report", str(work / "x.json")]) == 3


def test_missing_and_corrupt_inputs(work, data):
    assert main(["eval", "--checkpoint", str(work / "nope.ckpt"), "--dataset", str(data),
                 "--report", str(work / "x.json")]) == 3
    bad = work / "bad.bin"
    bad.write_bytes(data.read_bytes()[:100])
    assert main(["eval", "--oracle", "--dataset", str(bad), "--report", str(work / "x.json")]) == 3


def test_ablate_smoke(work, data, capsys):
    out = work / "abl"
    rc = main(["ablate", "--suite", "table5", "--dataset", str(data), "--budget", "0",
               "--config", _cfg(work, "a.json", phase="PG"), "--out", str(out)])
    assert rc == 0
    with open(out / "table5.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 5 and rows[1][1] == "rejected"
    assert (out / "table5.manifest.json").exists()
    assert "SPI v, FEM v" in capsys.readouterr().out


def test_ablate_bad_args(work, data):
    assert main(["ablate", "--suite", "table3", "--dataset", str(data), "--budget", "-1"]) == 2
    assert main(["ablate", "--suite", "table3", "--dataset", str(data), "--parallel", "0"]) == 2


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "ehpe.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("ehpe ")
