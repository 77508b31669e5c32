import json

import numpy as np
import pytest

from hypformer.cli import main
from hypformer.data import load_dataset


@pytest.fixture
def tree_dir(tmp_path):
    out = tmp_path / "tree"
    assert main(["gen-tree", "--depth", "3", "--branching", "2", "--dim", "6", "--noise", "0.3", "--out", str(out)]) == 0
    return out


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"d_hidden": 8, "layers": 1, "epochs": 6, "patience": 6, "lr": 0.02}))
    return path


def run_train(tmp_path, tree_dir, config_path, tag="run", extra=()):
    out, ckpt = tmp_path / f"{tag}.jsonl", tmp_path / f"{tag}.ckpt"
    code = main(["train", "--config", str(config_path), "--data", str(tree_dir),
                 "--out", str(out), "--checkpoint", str(ckpt), *extra])
    return code, out, ckpt


class TestGenTree:
    def test_node_count(self, tmp_path):
        out = tmp_path / "small"
        assert main(["gen-tree", "--depth", "2", "--branching", "2", "--dim", "3", "--noise", "0.1", "--out", str(out)]) == 0
        assert (out / "features.bin").exists()
        assert load_dataset(out).features.shape == (7, 3)

    def test_seeds_share_topology(self, tmp_path):
        dirs = []
        for seed in ("1", "2"):
            d = tmp_path / f"s{seed}"
            main(["gen-tree", "--depth", "3", "--branching", "2", "--dim", "4", "--noise", "0.2", "--seed", seed, "--out", str(d)])
            dirs.append(d)
        assert (dirs[0] / "edges.csv").read_bytes() == (dirs[1] / "edges.csv").read_bytes()
        assert (dirs[0] / "features.bin").read_bytes() != (dirs[1] / "features.bin").read_bytes()

    def test_invalid_parameters(self, tmp_path):
        assert main(["gen-tree", "--depth", "1", "--branching", "2", "--dim", "3", "--noise", "0.1", "--out", str(tmp_path / "x")]) == 2

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["gen-tree", "--depth", "2", "--branching", "2", "--dim", "3", "--noise", "0.1", "--out", str(blocker / "sub")]) == 3


class TestTrainEval:
    def test_metrics_stream_and_checkpoint(self, tmp_path, tree_dir, config_path, capsys):
        code, out, ckpt = run_train(tmp_path, tree_dir, config_path)
        assert code == 0 and ckpt.exists()
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert [r["epoch"] for r in records] == list(range(1, 7))
        assert capsys.readouterr().out == ""

    def test_eval_matches_best_epoch(self, tmp_path, tree_dir, config_path, capsys):
        _, out, ckpt = run_train(tmp_path, tree_dir, config_path)
        records = [json.loads(line) for line in out.read_text().splitlines()]
        best = max(records, key=lambda r: (r["val_metric"], -r["epoch"]))
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tree_dir), "--split", "test"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload == {"split": "test", "metric_name": "accuracy", "value": best["test_metric"]}

    def test_same_seed_same_bytes(self, tmp_path, tree_dir, config_path):
        _, a, _ = run_train(tmp_path, tree_dir, config_path, "a")
        _, b, _ = run_train(tmp_path, tree_dir, config_path, "b")
        _, c, _ = run_train(tmp_path, tree_dir, config_path, "c", ["--seed", "9"])
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() != c.read_bytes()

    def test_manifest(self, tmp_path, tree_dir, config_path):
        manifest = tmp_path / "manifest.json"
        run_train(tmp_path, tree_dir, config_path, extra=["--manifest", str(manifest)])
        doc = json.loads(manifest.read_text())
        assert doc["seed"] == 0 and doc["config"]["d_in"] == 6 and len(doc["records"]) == 6

    def test_missing_config(self, tmp_path, tree_dir):
        code, _, _ = run_train(tmp_path, tree_dir, tmp_path / "absent.json")
        assert code == 2

    def test_invalid_config(self, tmp_path, tree_dir):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"attention": "cosine"}))
        assert run_train(tmp_path, tree_dir, bad)[0] == 2

    def test_missing_data(self, tmp_path, config_path):
        assert run_train(tmp_path, tmp_path / "nowhere", config_path)[0] == 3

    def test_dimension_mismatch(self, tmp_path, tree_dir):
        cfg = tmp_path / "wide.json"
        cfg.write_text(json.dumps({"d_in": 7, "epochs": 2}))
        assert run_train(tmp_path, tree_dir, cfg)[0] == 3

    def test_nan_exit_code(self, tmp_path, tree_dir, monkeypatch):
        cfg = tmp_path / "hot.json"
        cfg.write_text(json.dumps({"epochs": 2, "d_hidden": 8, "layers": 1}))
        import hypformer.training as training

        def poisoned(*args, **kwargs):
            raise training.NumericalError("non-finite training loss at epoch 1")

        monkeypatch.setattr(training, "train", poisoned)
        assert run_train(tmp_path, tree_dir, cfg)[0] == 4

    def test_eval_bad_checkpoint(self, tmp_path, tree_dir):
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"garbage")
        assert main(["eval", "--checkpoint", str(junk), "--data", str(tree_dir)]) == 2

    def test_eval_data_mismatch(self, tmp_path, tree_dir, config_path):
        _, _, ckpt = run_train(tmp_path, tree_dir, config_path)
        other = tmp_path / "other"
        main(["gen-tree", "--depth", "2", "--branching", "2", "--dim", "3", "--noise", "0.1", "--out", str(other)])
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(other)]) == 3


class TestCheckgrad:
    def test_geometry_cases(self, capsys):
        assert main(["checkgrad", "--cases", "geometry"]) == 0
        lines = capsys.readouterr().out.splitlines()
        names = [line.split("\t")[0] for line in lines]
        assert {"geometry.exp_map", "geometry.log_map", "geometry.distance"} <= set(names)
        assert lines[-1].startswith("max\t") and lines[-1].endswith("ok")

    def test_report_is_reproducible(self, capsys):
        main(["checkgrad", "--cases", "geometry", "--seed", "3"])
        first = capsys.readouterr().out
        main(["checkgrad", "--cases", "geometry", "--seed", "3"])
        assert capsys.readouterr().out == first

    def test_corrupted_gradient_fails(self, capsys, monkeypatch):
        monkeypatch.setenv("HYPF_CORRUPT_GRAD", "matmul")
        assert main(["checkgrad", "--cases", "geometry"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_unknown_group(self):
        assert main(["checkgrad", "--cases", "optics"]) == 2


class TestBenchCommand:
    def test_csv_to_stdout(self, capsys):
        assert main(["bench", "--attention", "both", "--n-list", "32,64", "--d", "8", "--reps", "1"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "n,attention,median_ms,peak_bytes"
        assert [line.split(",")[:2] for line in lines[1:]] == [["32", "linear"], ["32", "softmax"], ["64", "linear"], ["64", "softmax"]]

    def test_cap_and_file_output(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--attention", "softmax", "--n-list", "32,64", "--d", "8", "--reps", "1",
                     "--mem-cap", "30K", "--out", str(out)]) == 0
        assert out.read_text().splitlines()[2] == "64,softmax,skipped,skipped"

    def test_descending_sizes(self):
        assert main(["bench", "--n-list", "64,32", "--d", "8"]) == 2

    def test_coarse_timer(self, monkeypatch):
        monkeypatch.setattr("hypformer.bench.MIN_RESOLVABLE_S", 1e6)
        assert main(["bench", "--attention", "linear", "--n-list", "16", "--d", "4", "--reps", "1"]) == 5
