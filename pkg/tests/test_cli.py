import json
import os

from dhtfed.cli import main

INI = """
[scenario]
name = clidemo
nodes = 16
fanout = 4
tree_count = 2
assignment = single
rounds = 2
seed = 6

[data]
topics = 2
points_per_node = 60
test_points = 80
"""


def write_cfg(tmp_path, text=INI, name="demo.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_run_writes_records_and_summaries(tmp_path, capsys):
    out = str(tmp_path / "results")
    rc = main(["run", write_cfg(tmp_path), "--out", out, "--quiet"])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "clidemo.jsonl"))
    assert os.path.exists(os.path.join(out, "clidemo-summary.csv"))
    assert os.path.exists(os.path.join(out, "clidemo-summary.txt"))
    with open(os.path.join(out, "clidemo.jsonl")) as fh:
        first = json.loads(fh.readline())
    assert first["scenario"] == "clidemo"
    assert 0.0 <= first["accuracy"] <= 1.0


def test_run_flag_overrides(tmp_path):
    out = str(tmp_path / "results")
    rc = main(["run", write_cfg(tmp_path), "--out", out, "--quiet",
               "--rounds", "1", "--seed", "99"])
    assert rc == 0
    with open(os.path.join(out, "clidemo.jsonl")) as fh:
        rounds = {json.loads(line)["round"] for line in fh}
    assert rounds == {0}


def test_run_rejects_bad_config(tmp_path, capsys):
    bad = write_cfg(tmp_path, "[scenario]\nseed = 1\nbogus = 2\n", "bad.ini")
    rc = main(["run", bad, "--out", str(tmp_path / "r"), "--quiet"])
    assert rc == 2
    assert "bogus" in capsys.readouterr().err


def test_route_check_passes(capsys):
    rc = main(["route-check", "--nodes", "128", "--lookups", "300", "--seed", "5"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "misdelivered=0" in out


def test_agg_check_passes(capsys):
    rc = main(["agg-check", "--trials", "25", "--seed", "3"])
    assert rc == 0
    assert "worst_flat_mean_error" in capsys.readouterr().out


def test_report_aggregates_results(tmp_path, capsys):
    out = str(tmp_path / "results")
    main(["run", write_cfg(tmp_path), "--out", out, "--quiet"])
    rc = main(["report", "--out", out])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "report.csv"))
    assert "clidemo" in capsys.readouterr().out


def test_report_with_no_results_fails(tmp_path, capsys):
    rc = main(["report", "--out", str(tmp_path / "nothing")])
    assert rc == 1


def test_sweep_grid(tmp_path):
    out = str(tmp_path / "sweep")
    rc = main(["sweep", "--nodes", "12", "--points", "40,80", "--seeds", "1",
               "--rounds", "1", "--fanout", "4", "--topics", "2",
               "--out", out, "--quiet"])
    assert rc == 0
    files = os.listdir(out)
    assert "sweep-summary.csv" in files
    # 2 sizes x 1 seed x (single + mixed)
    assert sum(1 for f in files if f.endswith(".jsonl")) == 4


def test_sweep_with_dissemination(tmp_path):
    out = str(tmp_path / "sweep2")
    rc = main(["sweep", "--nodes", "16", "--points", "40", "--seeds", "1",
               "--rounds", "1", "--fanout", "4", "--topics", "2",
               "--sizes-mib", "0.25,0.5", "--out", out, "--quiet"])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "dissemination.csv"))
