import csv
import json
import os
import xml.etree.ElementTree as ET

import pytest

from crossvae import checkpoint, cli
from crossvae import ndgrad as nd

SMALL_MODEL = ["--k", "3", "--k-prime", "6", "--widths", "16", "--max-iterations", "4"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ratings_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    assert cli.main(["synthetic", "--n-users", "50", "--n-items", "60", "--density", "0.3",
                     "--out", str(out)]) == 0
    return out / "ratings.csv"


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestHelp:
    @pytest.mark.parametrize("command", ["train", "evaluate", "ablate", "sparsity", "gradcheck",
                                         "split", "subsample", "synthetic"])
    def test_help_shows_defaults(self, command, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main([command, "--help"])
        assert exc.value.code == 0
        assert "(default:" in capsys.readouterr().out

    def test_top_level_help_lists_commands(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["--help"])
        text = capsys.readouterr().out
        for command in ("train", "ablate", "sparsity", "gradcheck"):
            assert command in text


class TestErrors:
    def test_missing_dataset_file(self, tmp_path, capsys):
        assert run("train", "--dataset", tmp_path / "nope.dat", "--out", tmp_path / "o") == 2
        assert "not found" in capsys.readouterr().err

    def test_train_needs_a_dataset(self, tmp_path):
        assert run("train", "--out", tmp_path) == 2

    def test_invalid_hyperparameters(self, ratings_csv, tmp_path):
        assert run("train", "--dataset", ratings_csv, "--format", "csv", "--k", "20",
                   "--out", tmp_path) == 2

    def test_unknown_config_key(self, ratings_csv, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("no_such_key = 3\n")
        assert run("train", "--dataset", ratings_csv, "--config", cfg, "--out", tmp_path) == 2


class TestTrain:
    def test_one_iteration_outputs(self, ratings_csv, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--dataset", ratings_csv, "--format", "csv", *SMALL_MODEL,
                   "--max-iterations", "1", "--svg", "--out", out) == 0
        log = (out / "train_log.csv").read_text().splitlines()
        assert len(log) == 2
        for name in ("user_ids.csv", "item_ids.csv", "split.csv", "checkpoint.ckpt",
                     "metrics.csv", "metrics.json", "convergence.svg"):
            assert (out / name).exists(), name
        rows = read_csv(out / "metrics.csv")
        assert [r["split"] for r in rows] == ["train", "val", "test"]
        assert json.loads((out / "metrics.json").read_text())[2]["split"] == "test"
        ET.parse(out / "convergence.svg")

    def test_config_file_and_flag_override(self, ratings_csv, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"# small run\ndataset = {ratings_csv}\nformat = csv\nk = 3\nk-prime = 6\n"
                       "widths = 16\nmax_iterations = 5\n")
        assert run("train", "--config", cfg, "--max-iterations", "2", "--out", tmp_path / "o") == 0
        state = checkpoint.load(tmp_path / "o" / "checkpoint.ckpt")
        assert state.model.hp.k == 3
        assert state.iteration == 2

    def test_resume_and_evaluate(self, ratings_csv, tmp_path):
        out = tmp_path / "r"
        assert run("train", "--dataset", ratings_csv, "--format", "csv", *SMALL_MODEL,
                   "--max-iterations", "2", "--out", out) == 0
        assert run("train", "--resume", out / "checkpoint.ckpt", "--max-iterations", "3", "--out", out) == 0
        assert checkpoint.load(out / "checkpoint.ckpt").iteration == 3
        assert len((out / "train_log.csv").read_text().splitlines()) == 4

        assert run("evaluate", "--checkpoint", out / "checkpoint.ckpt", "--weights", "last") == 0
        assert run("evaluate", "--checkpoint", out / "checkpoint.ckpt", "--manifest", out / "split.csv",
                   "--out", tmp_path / "e") == 0
        a = read_csv(out / "eval_metrics.csv")
        b = read_csv(tmp_path / "e" / "eval_metrics.csv")
        assert len(a) == len(b) == 3

    def test_evaluate_best_matches_train_metrics(self, ratings_csv, tmp_path):
        out = tmp_path / "b"
        assert run("train", "--dataset", ratings_csv, "--format", "csv", *SMALL_MODEL, "--out", out) == 0
        assert run("evaluate", "--checkpoint", out / "checkpoint.ckpt") == 0
        assert read_csv(out / "eval_metrics.csv") == read_csv(out / "metrics.csv")

    def test_writes_stay_inside_out(self, ratings_csv, tmp_path, monkeypatch):
        work = tmp_path / "cwd"
        work.mkdir()
        monkeypatch.chdir(work)
        assert run("train", "--dataset", ratings_csv, "--format", "csv", *SMALL_MODEL,
                   "--max-iterations", "1", "--out", "here") == 0
        assert os.listdir(work) == ["here"]


class TestExperiments:
    def test_ablate(self, ratings_csv, tmp_path):
        assert run("ablate", "--dataset", ratings_csv, "--format", "csv", *SMALL_MODEL, "--svg",
                   "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "ablation.csv")
        assert [r["variant"] for r in rows] == [v for v, _ in cli.VARIANTS]
        assert all(float(r["rmse"]) > 0 for r in rows)
        curves = read_csv(tmp_path / "ablation_curves.csv")
        assert {r["variant"] for r in curves} == {r["variant"] for r in rows}
        ET.parse(tmp_path / "ablation_curves.svg")

    def test_sparsity(self, ratings_csv, tmp_path):
        assert run("sparsity", "--dataset", ratings_csv, "--format", "csv", *SMALL_MODEL,
                   "--max-iterations", "2", "--fractions", "0.1", "0.05", "0.3", "0.2", "0.5",
                   "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "sparsity.csv")
        fractions = [float(r["fraction"]) for r in rows]
        assert fractions == sorted(fractions) and len(fractions) == 5
        n_train = [int(r["n_train"]) for r in rows]
        assert n_train == sorted(n_train)


class TestGradcheck:
    def test_passes(self, capsys):
        assert run("gradcheck", "--instances", "10") == 0
        assert "gradient checks passed" in capsys.readouterr().out

    def test_corrupted_backward_is_named(self, monkeypatch, capsys):
        original = nd.Sigmoid.backward
        monkeypatch.setattr(nd.Sigmoid, "backward",
                            staticmethod(lambda ctx, grad: tuple(1.1 * g for g in original(ctx, grad))))
        assert run("gradcheck", "--instances", "5") == 1
        assert "FAILED: sigmoid" in capsys.readouterr().err


class TestDataCommands:
    def test_split(self, ratings_csv, tmp_path):
        assert run("split", "--dataset", ratings_csv, "--format", "csv", "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "split.csv")
        counts = {label: sum(r["split"] == label for r in rows) for label in ("train", "val", "test")}
        total = sum(counts.values())
        assert counts["train"] == round(0.7 * total)
        ids = read_csv(tmp_path / "user_ids.csv")
        assert [int(r["dense_idx"]) for r in ids] == list(range(len(ids)))

    def test_subsample(self, ratings_csv, tmp_path):
        assert run("subsample", "--dataset", ratings_csv, "--format", "csv", "--fraction", "0.1",
                   "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "split_0.1.csv")
        n_train = sum(r["split"] == "train" for r in rows)
        assert n_train == -(-len(rows) // 10)

    def test_subsample_rejects_bad_fraction(self, ratings_csv, tmp_path):
        assert run("subsample", "--dataset", ratings_csv, "--format", "csv", "--fraction", "1.5",
                   "--out", tmp_path) == 2

    def test_synthetic(self, tmp_path):
        assert run("synthetic", "--n-users", "10", "--n-items", "12", "--density", "0.5",
                   "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "ratings.csv")
        assert len(rows) == 60
        assert set(rows[0]) == {"userId", "movieId", "rating", "timestamp"}
        assert run("synthetic", "--n-users", "10", "--n-items", "12", "--density", "0.5",
                   "--out", tmp_path / "again") == 0
        assert (tmp_path / "ratings.csv").read_bytes() == (tmp_path / "again" / "ratings.csv").read_bytes()
