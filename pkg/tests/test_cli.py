import json
import subprocess
import sys

import pytest

from vilhub.cli import main
from vilhub.data import load_dataset

SMALL = ["--classes", "4", "--parts", "8", "--materials", "5", "--shapes", "40",
         "--points", "128", "--zipf", "1.0"]
TRAIN = ["--epochs", "2", "--lr", "0.01", "--embed-dim", "16", "--retrieval-epochs", "5"]


def run(*args):
    return subprocess.run([sys.executable, "-m", "vilhub", *map(str, args)],
                          capture_output=True, text=True)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", *SMALL, "--seed", 3, "--out", d / "ds.c3ds").returncode == 0
    r = run("train", "--data", d / "ds.c3ds", *TRAIN, "--seed", 3, "--out", d / "m.c3ck")
    assert r.returncode == 0, r.stderr
    return d


def eval_args(work, *extra):
    return ["--data", work / "ds.c3ds", "--checkpoint", work / "m.c3ck", "--embed-dim", "16",
            *extra]


def test_gen_data_roundtrip_and_histogram(work, tmp_path):
    r = run("gen-data", *SMALL, "--seed", 3, "--out", tmp_path / "a.c3ds",
            "--vocab-dir", tmp_path / "vocab")
    assert r.returncode == 0
    assert "train" in r.stdout and "#" in r.stdout
    assert len(load_dataset(tmp_path / "a.c3ds")) == 40
    assert (tmp_path / "a.c3ds").read_bytes() == (work / "ds.c3ds").read_bytes()
    assert sorted(p.name for p in (tmp_path / "vocab").iterdir())


def test_gen_data_validation(tmp_path):
    r = run("gen-data", "--zipf", "-1", "--out", tmp_path / "x.c3ds")
    assert r.returncode == 2 and "error" in r.stderr
    assert run("gen-data").returncode == 2


def test_train_history_lines(work):
    lines = (work / "m.c3ck.history.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["epoch"] == 1


def test_train_gamma_enters_only_through_hub(work):
    out = {}
    for gamma in (0, 1):
        path = work / f"g{gamma}.c3ck"
        # one batch per epoch, so epoch 1 is evaluated at the initial parameters
        r = run("train", "--data", work / "ds.c3ds", "--epochs", "2", "--lr", "0.5",
                "--embed-dim", "16", "--retrieval-epochs", "0", "--batch-shapes", "64",
                "--gamma", gamma, "--out", path)
        assert r.returncode == 0, r.stderr
        out[gamma] = [json.loads(x) for x in (work / f"g{gamma}.c3ck.history.jsonl").read_text().splitlines()]
    assert out[0][0]["vl_part"] == out[1][0]["vl_part"]
    assert out[0][0]["vl_mat"] == out[1][0]["vl_mat"]
    assert out[0][0]["total"] != out[1][0]["total"]
    assert out[0][1]["total"] != out[1][1]["total"]


def test_missing_dataset_named(tmp_path):
    missing = tmp_path / "nope.c3ds"
    r = run("train", "--data", missing, "--out", tmp_path / "m.c3ck")
    assert r.returncode == 2 and str(missing) in r.stderr


def test_missing_required_flag(tmp_path):
    r = run("train", "--out", tmp_path / "m.c3ck")
    assert r.returncode == 2 and "--data" in r.stderr


def test_nan_exit_code(work, tmp_path):
    r = run("train", "--data", work / "ds.c3ds", "--epochs", "3", "--lr", "1e30",
            "--embed-dim", "16", "--retrieval-epochs", "0", "--out", tmp_path / "m.c3ck")
    assert r.returncode == 3 and "epoch" in r.stderr and "batch" in r.stderr


@pytest.mark.parametrize("split", ["train", "test"])
def test_oracle_seg_and_gcr_exact(work, split):
    seg = json.loads(run("eval-seg", *eval_args(work, "--oracle", "--split", split)).stdout)
    for head in ("part", "material"):
        b = seg[head]
        assert b["instance_acc"] == b["class_avg_acc"] == b["miou"] == 1.0
        assert all(v == 1.0 for v in b["per_class_iou"] if v is not None)
    gcr = json.loads(run("eval-gcr", *eval_args(work, "--oracle", "--split", split)).stdout)
    for k in ("shape_acc", "value", "value_all", "grounded_value", "grounded_value_all"):
        assert gcr[k] == 1.0


def test_eval_retrieval_keys_and_files(work, tmp_path):
    r = run("eval-retrieval", *eval_args(work, "--gallery-out", tmp_path / "g.c3gl",
                                         "--captions-out", tmp_path / "c.jsonl"))
    assert r.returncode == 0, r.stderr
    rep = json.loads(r.stdout)
    keys = {f"r{k}_{p}part" for k in (1, 5) for p in (1, 3, 6)} | {"top1", "top5"}
    assert keys <= set(rep)
    for p in (1, 3, 6):
        assert rep[f"r1_{p}part"] <= rep[f"r5_{p}part"]
    assert (tmp_path / "g.c3gl").read_bytes()[:4] == b"C3GL"
    assert len((tmp_path / "c.jsonl").read_text().splitlines()) == 3 * rep["n_shapes"]
    one = json.loads(run("eval-retrieval", *eval_args(work, "--caption-parts", "3")).stdout)
    assert "r1_3part" in one and "r1_1part" not in one
    orc = json.loads(run("eval-retrieval", *eval_args(work, "--oracle")).stdout)
    assert orc["r1_6part"] == 1.0


def test_eval_validation(work, tmp_path):
    r = run("eval-gcr", *eval_args(work, "--iou-threshold", "1.01"))
    assert r.returncode == 2 and "iou" in r.stderr
    r = run("eval-seg", *eval_args(work, "--embed-dim", "8"))
    assert r.returncode == 2 and "dimension" in r.stderr
    assert run("gen-data", *SMALL, "--parts", "9", "--out", tmp_path / "o.c3ds").returncode == 0
    r = run("eval-seg", "--data", tmp_path / "o.c3ds", "--checkpoint", work / "m.c3ck",
            "--embed-dim", "16")
    assert r.returncode == 2 and "part classes" in r.stderr


def test_config_file_and_override(work, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"classes": 3, "parts": 6, "materials": 4, "shapes": 24,
                               "points": 64, "seed": 9}))
    a = run("--help")
    assert a.returncode == 0
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "a.c3ds").returncode == 0
    ds = load_dataset(tmp_path / "a.c3ds")
    assert len(ds) == 24 and len(ds.shape_vocab) == 3
    assert run("gen-data", "--config", cfg, "--shapes", 30, "--out", tmp_path / "b.c3ds").returncode == 0
    assert len(load_dataset(tmp_path / "b.c3ds")) == 30
    cfg.write_text(json.dumps({"bogus": 1}))
    r = run("gen-data", "--config", cfg, "--out", tmp_path / "c.c3ds")
    assert r.returncode == 2 and "bogus" in r.stderr


def test_pack_mask_examples():
    assert run("pack-mask", 5, 2, 3).stdout.strip() == "3 16 5"
    assert run("pack-mask", 0, 0, 0).stdout.strip() == "0 0 0"
    assert run("pack-mask", "--unpack", 3, 16, 5).stdout.strip() == "5 2 3"
    assert run("pack-mask", 2048, 0, 0).returncode == 2
    assert run("pack-mask", "--unpack", 128, 0, 0).returncode == 2


def test_grad_check_exit_codes(capsys):
    assert main(["grad-check", "--instances", "6"]) == 0
    out = capsys.readouterr().out
    assert "encoder:prior_table" in out and "loss:hub" in out
    assert main(["grad-check", "--instances", "2", "--gamma", "5", "--tau", "0.07"]) == 0
    assert main(["grad-check", "--instances", "6", "--corrupt-gradient"]) == 4
