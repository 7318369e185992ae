import json

import pytest

from dyrank.cli import main
from dyrank.config import ExperimentConfig
from dyrank.workbench import read_csv, write_csv

from conftest import tiny_model_config

FIXTURE = {"columns": ["a", "b", "c"], "rows": [[0.9, 0.5, 0.4], [0.7, 0.9, 0.5], [0.6, 0.8, 0.9]]}


def _small_config(tmp_path):
    d = ExperimentConfig(model=tiny_model_config()).to_dict()
    d["pretrain"]["iterations"] = 10
    d["train"]["iterations_per_task"] = 6
    d["train"]["adapter"]["r_init"] = 3
    d["train"]["adapter"]["kappa_max"] = 0.05
    d["data"]["stream"] = d["data"]["stream"][:2]
    d["analysis"].update(sweep_placements=["attn"], sweep_ranks=[0, 2], sweep_seeds=[0],
                         ablate_selectors=[[], ["vision"], ["text.FC"]])
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return path


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_params_vit_b16(capsys):
    code, out, _ = _run(["params", "--preset", "vit-b16", "--rank", "16"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["total"] == 4_425_984 and doc["low_rank"] == 4_423_680 and doc["importance"] == 2_304


def test_params_desk_and_sites(capsys):
    code, out, _ = _run(["params", "--rank", "2", "--sites", "vision-attn"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["adapters"] == 8 and doc["total"] == 8 * (2 * 128 + 2)


def test_metrics_fixture(tmp_path, capsys):
    path = tmp_path / "m.json"
    path.write_text(json.dumps(FIXTURE))
    code, out, _ = _run(["metrics", "--matrix", path, "--out", tmp_path / "metrics.json"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert abs(doc["transfer_mean"] - 0.475) < 1e-12
    assert doc["transfer"][0] is None
    assert json.loads((tmp_path / "metrics.json").read_text()) == doc


@pytest.mark.parametrize("argv,code", [
    (["frobnicate"], 2),
    ([], 2),
    (["params", "--rank", "x"], 2),
    (["params", "--preset", "vit-h14"], 1),
    (["metrics", "--matrix", "/nonexistent/m.json"], 1),
])
def test_errors_are_json_on_stderr(argv, code, capsys):
    got, out, err = _run(argv, capsys)
    assert got == code and out == ""
    doc = json.loads(err.strip().splitlines()[-1])
    assert set(doc) == {"error", "message"}


def test_invalid_config_rejected(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"batch_size": 1}}))
    code, _, err = _run(["run", "--config", path, "--out", tmp_path / "o"], capsys)
    assert code == 1 and json.loads(err)["error"] == "ValueError"


def test_csv_quoting_and_none(tmp_path):
    path = write_csv(tmp_path / "x.csv", ("a", "b"), [{"a": 'say "hi", ok', "b": None}, {"a": 0.1, "b": 3}])
    raw = path.read_bytes()
    assert raw.count(b"\r\n") == 3 and b'"say ""hi"", ok"' in raw
    assert read_csv(path) == [{"a": 'say "hi", ok', "b": ""}, {"a": "0.1", "b": "3"}]


def test_full_workflow(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    pre = tmp_path / "pre"
    code, out, _ = _run(["pretrain", "--config", cfg, "--out", pre], capsys)
    assert code == 0 and (pre / "pretrained.ckpt").exists() and (pre / "pretrain.json").exists()
    ckpt = pre / "pretrained.ckpt"

    runs = []
    for name in ("r1", "r2"):
        code, out, _ = _run(["run", "--config", cfg, "--out", tmp_path / name, "--pretrained", ckpt], capsys)
        assert code == 0
        runs.append(json.loads((tmp_path / name / "run.json").read_text()))
    for r in runs:
        for s in r["task_stats"]:
            s.pop("seconds")
    assert runs[0] == runs[1]

    r1 = tmp_path / "r1"
    acc = read_csv(r1 / "accuracy.csv")
    assert [row["step"] for row in acc] == ["0", "1", "2"]
    ranks = read_csv(r1 / "ranks.csv")
    assert len(ranks) == 2 * 24 and list(ranks[0]) == ["task", "encoder", "layer", "site", "active_ranks"]
    assert len(runs[0]["checkpoints"]) == 3

    code, out, _ = _run(["analyze", "--run-dir", r1, "--task", "1"], capsys)
    assert code == 0
    summary = json.loads(out)
    assert summary["task"] == 1
    assert summary["allocation"]["total"] == sum(int(r["active_ranks"]) for r in ranks if r["task"] == "1")
    assert len(read_csv(r1 / "amplification.csv")) == 24

    code, _, err = _run(["analyze", "--run-dir", r1, "--task", "5"], capsys)
    assert code == 1 and "task" in json.loads(err)["message"]

    code, out, _ = _run(["metrics", "--matrix", r1 / "run.json"], capsys)
    assert code == 0 and json.loads(out) == runs[0]["metrics"]

    code, out, _ = _run(["sweep", "--config", cfg, "--out", tmp_path / "sw", "--pretrained", ckpt], capsys)
    assert code == 0
    rows = read_csv(tmp_path / "sw" / "sweep.csv")
    assert [(r["placement"], r["rank"]) for r in rows] == [("attn", "0"), ("attn", "2")]

    code, out, _ = _run(["ablate", "--config", cfg, "--out", tmp_path / "ab", "--pretrained", ckpt], capsys)
    assert code == 0
    rows = read_csv(tmp_path / "ab" / "ablate.csv")
    assert [r["zeroed"] for r in rows] == ["none", "vision", "text.FC"]


def test_seed_override_changes_run(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    for seed in (0, 1):
        assert main(["pretrain", "--config", str(cfg), "--seed", str(seed), "--out", str(tmp_path / f"s{seed}")]) == 0
    capsys.readouterr()
    a = (tmp_path / "s0" / "pretrained.ckpt").read_bytes()
    b = (tmp_path / "s1" / "pretrained.ckpt").read_bytes()
    assert a != b
