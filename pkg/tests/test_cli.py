import json
from pathlib import Path

import pytest

from tgprompt.cli import format_table, main, sweep_points
from tgprompt.config import ConfigError, from_dict, load_config

TINY = """
[synthetic]
num_events = 600
num_users = 15
num_items = 20
num_classes = 4

[model]
d = 8
d_T = 8
d_h = 8
max_neighbors = 5
time_scale = 10.0
channel_expansion = 2.0

[pretrain]
epochs = 2
batch_size = 100
learning_rate = 1e-3

[finetune]
k = 30
max_epochs = 3
learning_rate = 1e-2
seeds = [0, 1]
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def _run(*argv):
    return main([str(a) for a in argv])


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_pretrain_twice_is_bit_identical(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("pretrain", "--config", cfg_path, "--seed", 1, "--out", a) == 0
    assert _run("pretrain", "--config", cfg_path, "--seed", 1, "--out", b) == 0
    assert _tree(a) == _tree(b)
    assert set(_tree(a)) == {"metrics.jsonl", "pretrain_seed1.tgp", "report.json", "table.txt"}


def test_finetune_evaluate_round_trip(cfg_path, tmp_path):
    pre, ft, ev = tmp_path / "pre", tmp_path / "ft", tmp_path / "ev"
    assert _run("pretrain", "--config", cfg_path, "--out", pre) == 0
    assert _run("finetune", "--config", cfg_path, "--checkpoint", pre, "--out", ft) == 0
    assert _run("evaluate", "--config", cfg_path, "--checkpoint", ft, "--out", ev) == 0
    rep_ft = json.loads((ft / "report.json").read_text())
    rep_ev = json.loads((ev / "report.json").read_text())
    assert rep_ft["seeds"] == [0, 1]
    assert [r["ap"] for r in rep_ft["per_seed"]] == [r["ap"] for r in rep_ev["per_seed"]]
    assert rep_ft["run_config"]["finetune"]["k"] == 30
    lines = (ft / "metrics.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["stage"] == "finetune"


def test_ablate_table_rows(cfg_path, tmp_path):
    out = tmp_path / "ab"
    assert _run("ablate", "--config", cfg_path, "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert [r["variant"] for r in rep["rows"]] == ["full", "w/o t.b.", "w/o e.w.", "w/o f.m."]
    table = (out / "table.txt").read_text().splitlines()
    assert len(table) == 2 + 4 and table[0].split()[0] == "variant"
    assert (out / "pretrain_seed0.tgp").exists()


def test_parallel_workers_match_sequential(cfg_path, tmp_path, monkeypatch):
    seq, par = tmp_path / "seq", tmp_path / "par"
    assert _run("ablate", "--config", cfg_path, "--out", seq, "--baseline") == 0
    monkeypatch.setenv("TGP_NUM_WORKERS", "3")
    assert _run("ablate", "--config", cfg_path, "--out", par, "--baseline") == 0
    assert _tree(seq) == _tree(par)


def test_sweep_each_and_full(cfg_path, tmp_path):
    out = tmp_path / "sw"
    assert _run("sweep", "--config", cfg_path, "--out", out, "--alpha", "0,1",
                "--beta", "0.5", "--gamma", "0.1", "--seed", 0) == 0
    rep = json.loads((out / "report.json").read_text())
    assert [r["variant"] for r in rep["rows"]] == ["a=0", "a=1", "b=0.5", "g=0.1"]
    cfg = from_dict({"sweep": {"alpha": [1.0, 2.0], "beta": [0.5], "gamma": [0.0, 0.1]}})
    assert len(sweep_points(cfg, "full")) == 4


def test_gen_synthetic_writes_loadable_csv(cfg_path, tmp_path):
    out = tmp_path / "gen"
    assert _run("gen-synthetic", "--config", cfg_path, "--out", out, "--seed", 4) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["events"] == 600 and rep["spec"]["seed"] == 4
    pre = tmp_path / "pre"
    assert _run("pretrain", "--config", cfg_path, "--dataset", out / "synthetic.csv",
                "--seed", 0, "--out", pre) == 0
    assert json.loads((pre / "report.json").read_text())["dataset"] == "synthetic"


def test_flags_override_file(cfg_path, tmp_path):
    out = tmp_path / "o"
    assert _run("pretrain", "--config", cfg_path, "--backbone", "attn", "--k-shot", 20,
                "--sparse-threshold", 1000, "--seed", "0", "--out", out) == 0
    rc = json.loads((out / "report.json").read_text())["run_config"]
    assert rc["model"]["backbone"] == "attn" and rc["finetune"]["k"] == 20
    assert rc["scenario"]["sparse_threshold"] == 1000


@pytest.mark.parametrize("argv, field", [
    (["finetune", "--checkpoint", "missing-dir"], "checkpoint"),
    (["finetune"], "checkpoint"),
    (["pretrain", "--k-shot", "5000"], "finetune.k"),
    (["pretrain", "--dataset", "no/such.csv"], "dataset.path"),
    (["finetune", "--alpha", "0.1,0.2", "--checkpoint", "x"], "finetune.alpha"),
])
def test_config_errors_exit_nonzero(cfg_path, tmp_path, capsys, argv, field):
    assert _run(*argv, "--config", cfg_path, "--out", tmp_path / "e") == 2
    assert field in capsys.readouterr().err


def test_bad_toml_fields(tmp_path, capsys):
    for text, field in (('[model]\nd = "big"\n', "model.d"), ("[modle]\nd = 3\n", "modle"),
                        ("[model]\ndd = 3\n", "model.dd"), ("[finetune]\npatience = 0\n", "finetune"),
                        ("[model]\nd = 2.5\n", "model.d")):
        p = tmp_path / "bad.toml"
        p.write_text(text)
        with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
            load_config(p)
        assert _run("pretrain", "--config", p, "--out", tmp_path / "x") == 2


def test_table_alignment():
    text = format_table(["name", "AP"], [["full", (0.5, 0.01)], ["w/o e.w.", 0.25]])
    lines = text.splitlines()
    assert len({len(line) for line in lines}) == 1
    assert lines[2].endswith("0.5000 ± 0.0100")
