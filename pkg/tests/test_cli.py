import csv
import json
import subprocess
import sys

import pytest

from pgvl.cli import main

TINY = {
    "scene": {"height": 8, "width": 8},
    "model": {"channels": 16},
    "fusion": {"G": [2, 2], "D": [16]},
    "train": {"epochs": 2, "batch_size": 8, "lr": 0.5, "n_train": 16, "n_eval": 8, "seeds": [0, 1]},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY, indent=2))
    return path


def run(*args):
    return subprocess.run([sys.executable, "-m", "pgvl.cli", *map(str, args)], capture_output=True, text=True)


def test_inspect_graph_prints_the_default_tree(capsys):
    assert main(["inspect-graph"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 15


def test_train_twice_is_byte_identical(tiny_config, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(tiny_config), "--seed", "7", "--out", str(out)]) == 0
        outs.append(out)
    for f in ("metrics.jsonl", "checkpoint.pgvl"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    records = [json.loads(x) for x in (outs[0] / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2] and "eval" in records[-1]


def test_eval_reads_the_checkpoint(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(tiny_config), "--out", str(out)])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.pgvl")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert {"pck", "pck_visible", "pck_occluded"} <= set(summary)


def test_missing_checkpoint_fails(tmp_path):
    res = run("eval", "--checkpoint", tmp_path / "nope.pgvl")
    assert res.returncode != 0 and "not found" in res.stderr


def test_invalid_config_reports_line(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "train": {\n    "epocs": 3\n  }\n}')
    res = run("train", "--config", bad, "--out", tmp_path)
    assert res.returncode != 0 and "line 3" in res.stderr


def test_plot_data_writes_one_csv_per_level(tiny_config, tmp_path, capsys):
    assert main(["plot-data", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
    paths = capsys.readouterr().out.split()
    assert len(paths) == 3
    with open(paths[0]) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["level", "joint", "row", "col", "similarity"]
    assert len(rows) == 8 * 8 * 8
    assert all(-1 <= float(r["similarity"]) <= 1 for r in rows)


def test_train_with_trace_emits_alignment(tiny_config, tmp_path):
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path), "--trace"]) == 0
    assert sorted(p.name for p in tmp_path.glob("alignment_level*.csv")) == [
        "alignment_level0.csv", "alignment_level1.csv", "alignment_level2.csv"]


def test_ablate_writes_table_and_resumes(tiny_config, tmp_path, capsys):
    args = ["ablate", "--config", str(tiny_config), "--out", str(tmp_path), "--architectures", "full,no_pgvl"]
    assert main(args) == 0
    first = (tmp_path / "ablation_table.csv").read_text()
    runs = (tmp_path / "ablation_runs.jsonl").read_text().splitlines()
    assert len(runs) == 4
    assert main(args) == 0
    assert (tmp_path / "ablation_table.csv").read_text() == first
    assert len((tmp_path / "ablation_runs.jsonl").read_text().splitlines()) == 4
    assert "full" in first and "no_pgvl" in first


def test_unknown_architecture_in_ablate(tiny_config, tmp_path):
    res = run("ablate", "--config", tiny_config, "--out", tmp_path, "--architectures", "full,mystery")
    assert res.returncode != 0


@pytest.mark.slow
def test_gradcheck_command_passes():
    res = run("gradcheck")
    assert res.returncode == 0, res.stdout[-2000:]
