import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hierfi.cli import EXIT_CONFIG, EXIT_DATA, EXIT_PROTOCOL, main
from hierfi.hierarchy import export_hierarchy, read_hierarchy
from hierfi.model import Dataset, write_dataset
from hierfi.synth import GroundTruth, build_random_hierarchy, generate_instances

ADAPTER = Path(__file__).parent / "fixtures" / "adapter_sum.py"


@pytest.fixture
def workspace(tmp_path):
    gt = GroundTruth(8, {1: 0.5, 6: 0.75}, {(1, 6): 0.5})
    (tmp_path / "gt.json").write_text(gt.dumps())
    write_dataset(generate_instances(gt, 120, seed=3), tmp_path / "data.csv")
    h = build_random_hierarchy(8, seed=2)
    (tmp_path / "h.json").write_text(export_hierarchy(h))
    return tmp_path


def analyze_args(ws, *extra):
    return [
        "analyze",
        "--data", str(ws / "data.csv"),
        "--hierarchy", str(ws / "h.json"),
        "--ground-truth", str(ws / "gt.json"),
        "--sigma", "0.1",
        "--num-permutations", "20",
        "--seed", "5",
        *extra,
    ]


class TestAnalyze:
    def test_missing_hierarchy_is_config_error(self, workspace, capsys):
        missing = workspace / "nope.json"
        code = main(["analyze", "--data", str(workspace / "data.csv"), "--hierarchy", str(missing),
                     "--ground-truth", str(workspace / "gt.json")])
        assert code == EXIT_CONFIG
        assert str(missing) in capsys.readouterr().err

    def test_byte_identical_runs(self, workspace):
        for name in ("a.json", "b.json"):
            assert main(analyze_args(workspace, "--out", str(workspace / name))) == 0
        assert (workspace / "a.json").read_bytes() == (workspace / "b.json").read_bytes()

    def test_workers_identical(self, workspace):
        main(analyze_args(workspace, "--workers", "1", "--out", str(workspace / "w1.json")))
        main(analyze_args(workspace, "--workers", "8", "--out", str(workspace / "w8.json")))
        assert (workspace / "w1.json").read_bytes() == (workspace / "w8.json").read_bytes()

    def test_report_and_dot(self, workspace, capsys):
        code = main(analyze_args(workspace, "--perturbation", "erasure", "--lazy",
                                 "--out", str(workspace / "r.json"), "--dot", str(workspace / "r.dot")))
        assert code == 0
        doc = json.loads((workspace / "r.json").read_text())
        assert doc["config"]["model"]["kind"] == "synthetic"
        assert doc["config"]["perturbation"]["kind"] == "erasure"
        assert set(doc["outer_nodes"]) == {"f1", "f6"}
        assert (workspace / "r.dot").read_text().startswith("digraph")
        out = capsys.readouterr().out
        assert "nodes rejected" in out and "outer nodes" in out

    def test_arity_mismatch_is_data_error(self, workspace):
        (workspace / "h4.json").write_text(export_hierarchy(build_random_hierarchy(12, seed=0)))
        args = analyze_args(workspace)
        args[args.index("--hierarchy") + 1] = str(workspace / "h4.json")
        assert main(args) == EXIT_DATA

    def test_bad_data_is_data_error(self, workspace):
        (workspace / "bad.csv").write_text("a,b,__target__\n1,x,0\n")
        args = analyze_args(workspace)
        args[args.index("--data") + 1] = str(workspace / "bad.csv")
        assert main(args) == EXIT_DATA

    def test_bad_q(self, workspace):
        assert main(analyze_args(workspace, "--q", "1.5")) == EXIT_CONFIG

    def test_no_model(self, workspace):
        code = main(["analyze", "--data", str(workspace / "data.csv"), "--hierarchy", str(workspace / "h.json")])
        assert code == EXIT_CONFIG

    def test_adapter_model(self, workspace):
        cmd = f"{sys.executable} {ADAPTER} identity 8"
        code = main(["analyze", "--data", str(workspace / "data.csv"), "--hierarchy", str(workspace / "h.json"),
                     "--adapter", cmd, "--perturbation", "erasure", "--out", str(workspace / "ad.json")])
        assert code == 0
        assert json.loads((workspace / "ad.json").read_text())["config"]["model"]["kind"] == "adapter"

    def test_adapter_garbage_is_protocol_error(self, workspace):
        cmd = f"{sys.executable} {ADAPTER} garbage 8"
        code = main(["analyze", "--data", str(workspace / "data.csv"), "--hierarchy", str(workspace / "h.json"),
                     "--adapter", cmd, "--perturbation", "erasure"])
        assert code == EXIT_PROTOCOL


class TestInteract:
    def run_report(self, ws, outer):
        doc = {"config": {}, "summary": {}, "outer_nodes": outer, "nodes": []}
        (ws / "rep.json").write_text(json.dumps(doc))
        code = main(["interact", "--data", str(ws / "data.csv"), "--hierarchy", str(ws / "h.json"),
                     "--ground-truth", str(ws / "gt.json"), "--perturbation", "erasure",
                     "--report", str(ws / "rep.json"), "--q", "0.1", "--out", str(ws / "int.json")])
        return code, json.loads((ws / "int.json").read_text()) if code == 0 else None

    def test_zero_outer_nodes(self, workspace):
        code, doc = self.run_report(workspace, [])
        assert code == 0
        assert doc["interactions"] == []

    def test_three_outer_nodes(self, workspace):
        code, doc = self.run_report(workspace, ["f1", "f6", "f3"])
        assert code == 0
        assert len(doc["interactions"]) == 3
        assert doc["config"]["q"] == 0.1
        top = doc["interactions"][0]
        assert {top["node_a"], top["node_b"]} == {"f1", "f6"} and top["rejected"]
        ps = [r["p"] for r in doc["interactions"]]
        assert ps == sorted(ps)

    def test_nodes_flag_and_unknown_node(self, workspace):
        base = ["interact", "--data", str(workspace / "data.csv"), "--hierarchy", str(workspace / "h.json"),
                "--ground-truth", str(workspace / "gt.json"), "--perturbation", "erasure"]
        assert main(base + ["--nodes", "f1,f6", "--out", str(workspace / "n.json")]) == 0
        assert main(base + ["--nodes", "f1,zzz"]) == EXIT_CONFIG
        assert main(base) == EXIT_CONFIG

    def test_logistic_adapter_without_g(self, workspace):
        # the fixture advertises supports_g, so use the loss variant path for a capability-free check
        cmd = f"{sys.executable} {ADAPTER} logistic 8"
        code = main(["interact", "--data", str(workspace / "data.csv"), "--hierarchy", str(workspace / "h.json"),
                     "--adapter", cmd, "--perturbation", "erasure", "--nodes", "f1,f6",
                     "--loss-variant", "squared_error", "--out", str(workspace / "lv.json")])
        assert code == 0
        assert json.loads((workspace / "lv.json").read_text())["interactions"][0]["experimental"] is True


class TestSynth:
    def test_two_row_table(self, tmp_path, capsys):
        out = tmp_path / "t.json"
        code = main(["synth", "--vary", "m", "--grid", "32,128", "--replicates", "5", "--n-features", "16",
                     "--n-linear", "4", "--n-interactions", "2", "--out", str(out), "--text", str(tmp_path / "t.txt")])
        assert code == 0
        doc = json.loads(out.read_text())
        assert [r["value"] for r in doc["rows"]] == [32, 128]
        assert doc["config"]["sigma"] == 0.05 and doc["config"]["replicates"] == 5
        assert len((tmp_path / "t.txt").read_text().strip().splitlines()) == 4

    @pytest.mark.parametrize("grid", ["", "a,b", "0,-1"])
    def test_bad_grid(self, grid):
        assert main(["synth", "--vary", "m", "--grid", grid, "--replicates", "1"]) == EXIT_CONFIG

    def test_infeasible_truth(self):
        assert main(["synth", "--vary", "m", "--grid", "8", "--n-linear", "3", "--n-interactions", "9"]) == EXIT_CONFIG


class TestCluster:
    def test_json_and_csv(self, tmp_path):
        X = np.array([[1, 1, 0, 0], [1, 1, 0, 1], [0, 0, 1, 1]])
        write_dataset(Dataset(X, np.zeros(3), ["a", "b", "c", "d"]), tmp_path / "m.csv")
        (tmp_path / "order.txt").write_text("d\nc\nb\na\n")
        assert main(["cluster", "--data", str(tmp_path / "m.csv"), "--out", str(tmp_path / "h.json")]) == 0
        h = read_hierarchy(tmp_path / "h.json")
        assert len(h) == 7 and sorted(h.leaves()) == ["a", "b", "c", "d"]
        assert main(["cluster", "--data", str(tmp_path / "m.csv"), "--order", str(tmp_path / "order.txt"),
                     "--out", str(tmp_path / "h.csv")]) == 0
        h2 = read_hierarchy(tmp_path / "h.csv")
        assert h2.leaves() == ["d", "c", "b", "a"]

    def test_non_binary(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n0,2\n")
        assert main(["cluster", "--data", str(tmp_path / "m.csv")]) == EXIT_DATA


class TestExportDot:
    def test_matches_in_process_rendering(self, workspace, capsys):
        main(analyze_args(workspace, "--perturbation", "erasure", "--out", str(workspace / "r.json"),
                          "--dot", str(workspace / "direct.dot")))
        assert main(["export-dot", "--report", str(workspace / "r.json"), "--out", str(workspace / "e.dot")]) == 0
        assert (workspace / "e.dot").read_text() == (workspace / "direct.dot").read_text()

    def test_bad_report(self, tmp_path):
        (tmp_path / "x.json").write_text("{}")
        assert main(["export-dot", "--report", str(tmp_path / "x.json")]) == EXIT_CONFIG


def test_make_synthetic_then_analyze(tmp_path):
    assert main(["make-synthetic", "--outdir", str(tmp_path), "--m", "64", "--n-features", "16",
                 "--n-linear", "4", "--n-interactions", "2"]) == 0
    code = main(["analyze", "--data", str(tmp_path / "data.csv"), "--hierarchy", str(tmp_path / "hierarchy.json"),
                 "--ground-truth", str(tmp_path / "ground_truth.json"), "--perturbation", "erasure",
                 "--out", str(tmp_path / "r.json")])
    assert code == 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hierfi.cli", "export-dot", "--report", str(tmp_path / "none.json")],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert "none.json" in proc.stderr
