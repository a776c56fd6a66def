"""
Integration tests for the command-line interface.
"""

import os
import tempfile

import pytest

from lightdarts.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from lightdarts.config import load_config_file
from lightdarts.data import load_manifest
from lightdarts.genotype import load_genotype

pytestmark = pytest.mark.integration

TINY = ["--cells", "1", "--channels", "2", "--nodes", "2", "--batch-size", "4", "--frames", "8"]


@pytest.fixture
def workspace():
    with tempfile.TemporaryDirectory() as tmpdir:
        data = os.path.join(tmpdir, "data")
        code = main(["gen-synthetic", "--out", data, "--n-per-split", "8", "--t", "8", "--f", "8"])
        assert code == EXIT_OK
        yield tmpdir, data


def _search(tmpdir, data, *extra):
    out = os.path.join(tmpdir, "search", "genotype.txt")
    argv = [
        "search",
        "--train-manifest", os.path.join(data, "train.tsv"),
        "--val-manifest", os.path.join(data, "val.tsv"),
        "--epochs", "1",
        "--out", out,
        *TINY,
        *extra,
    ]
    return main(argv), out


def test_gen_synthetic_outputs(workspace, capsys):
    """Test manifests, provenance and the printed manifest paths."""
    tmpdir, data = workspace
    for split in ("train", "val", "eval"):
        assert os.path.exists(os.path.join(data, f"{split}.tsv"))
    provenance = load_config_file(os.path.join(data, "gen_synthetic_run.txt"))
    assert provenance["generator_version"] == "1"
    assert provenance["train_size"] == "8"
    assert provenance["seed"] == "0"


def test_gen_synthetic_rejects_tiny_shapes(capsys):
    """Test the T and F minimum as a usage error."""
    with tempfile.TemporaryDirectory() as tmpdir:
        code = main(["gen-synthetic", "--out", tmpdir, "--t", "4"])
    assert code == EXIT_USAGE
    assert "at least 8" in capsys.readouterr().err


def test_gen_synthetic_explicit_split_sizes(capsys):
    """Test that explicit split sizes are honoured and an explicit zero is rejected."""
    with tempfile.TemporaryDirectory() as tmpdir:
        code = main(["gen-synthetic", "--out", tmpdir, "--n-per-split", "4", "--train-size", "0"])
        assert code == EXIT_USAGE
        assert "split sizes must be positive" in capsys.readouterr().err
        assert not os.path.exists(os.path.join(tmpdir, "train.tsv"))

        code = main(["gen-synthetic", "--out", tmpdir, "--n-per-split", "4", "--val-size", "2"])
        assert code == EXIT_OK
        assert len(load_manifest(os.path.join(tmpdir, "val.tsv"))) == 2
        assert len(load_manifest(os.path.join(tmpdir, "train.tsv"))) == 4


def test_search_train_eval_eer_pipeline(workspace, capsys):
    """Test the full command chain on a tiny corpus."""
    tmpdir, data = workspace
    capsys.readouterr()
    code, genotype_path = _search(tmpdir, data)
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert printed.startswith("normal: ")
    genotype = load_genotype(genotype_path)
    assert genotype.nodes == 2
    assert os.path.exists(os.path.join(tmpdir, "search", "genotype_history.csv"))
    assert os.path.exists(os.path.join(tmpdir, "search", "search_run.txt"))

    model_path = os.path.join(tmpdir, "train", "model.bin")
    code = main(
        [
            "train",
            "--genotype", genotype_path,
            "--train-manifest", os.path.join(data, "train.tsv"),
            "--val-manifest", os.path.join(data, "val.tsv"),
            "--epochs", "1",
            "--out", model_path,
            *TINY,
        ]
    )
    assert code == EXIT_OK
    assert "train_acc" in capsys.readouterr().out

    scores = os.path.join(tmpdir, "eval", "scores.txt")
    det = os.path.join(tmpdir, "eval", "det.csv")
    embeddings = os.path.join(tmpdir, "eval", "emb.csv")
    code = main(
        [
            "eval",
            "--model", model_path,
            "--manifest", os.path.join(data, "eval.tsv"),
            "--scores", scores,
            "--det", det,
            "--embeddings", embeddings,
        ]
    )
    assert code == EXIT_OK
    eval_out = capsys.readouterr().out
    assert eval_out.startswith("EER% = ")
    with open(scores, "r", encoding="utf-8") as f:
        assert len(f.read().splitlines()) == 8
    assert os.path.exists(det) and os.path.exists(embeddings)

    code = main(["eer", "--scores", scores, "--labels-manifest", os.path.join(data, "eval.tsv")])
    assert code == EXIT_OK
    assert capsys.readouterr().out == eval_out


def test_provenance_file_is_a_config(workspace, capsys):
    """Test that search_run.txt reruns the same search."""
    tmpdir, data = workspace
    code, first = _search(tmpdir, data)
    assert code == EXIT_OK
    record = os.path.join(tmpdir, "search", "search_run.txt")
    rerun = os.path.join(tmpdir, "rerun", "genotype.txt")
    code = main(["search", "--config", record, "--out", rerun])
    assert code == EXIT_OK
    with open(first, "r", encoding="utf-8") as a, open(rerun, "r", encoding="utf-8") as b:
        assert a.read() == b.read()


def test_environment_and_flag_priority(workspace, monkeypatch):
    """Test that flags beat the environment and the environment beats defaults."""
    tmpdir, data = workspace
    monkeypatch.setenv("LIGHTDARTS_EPOCHS", "2")
    monkeypatch.setenv("LIGHTDARTS_ARCH_LR", "0.002")
    code, _ = _search(tmpdir, data)
    assert code == EXIT_OK
    provenance = load_config_file(os.path.join(tmpdir, "search", "search_run.txt"))
    assert provenance["epochs"] == "1"
    assert provenance["arch_lr"] == "0.002"


def test_usage_errors(workspace, capsys):
    """Test exit code 2 for missing options, invalid values and bad config files."""
    tmpdir, data = workspace
    assert main(["search", "--val-manifest", os.path.join(data, "val.tsv")]) == EXIT_USAGE
    assert "--train-manifest" in capsys.readouterr().err

    code, _ = _search(tmpdir, data, "--channels", "3")
    assert code == EXIT_USAGE

    bad_config = os.path.join(tmpdir, "bad.cfg")
    with open(bad_config, "w", encoding="utf-8") as f:
        f.write("epochs=1\nthis line is wrong\n")
    assert main(["gradcheck", "--config", bad_config]) == EXIT_USAGE
    assert "line 2" in capsys.readouterr().err

    assert main(["search", "--order", "third"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_runtime_errors(workspace, capsys):
    """Test exit code 1 for missing files and unmatched score ids."""
    tmpdir, data = workspace
    code = main(
        [
            "eval",
            "--model", os.path.join(tmpdir, "missing.bin"),
            "--manifest", os.path.join(data, "eval.tsv"),
            "--scores", os.path.join(tmpdir, "s.txt"),
        ]
    )
    assert code == EXIT_FAILURE

    scores = os.path.join(tmpdir, "scores.txt")
    with open(scores, "w", encoding="utf-8") as f:
        f.write("eval_00000 1.0\nnot_there 0.5\n")
    code = main(["eer", "--scores", scores, "--labels-manifest", os.path.join(data, "eval.tsv")])
    assert code == EXIT_FAILURE
    assert "not_there" in capsys.readouterr().err


@pytest.mark.slow
def test_gradcheck_command(capsys):
    """Test the gradient-check suite from the command line."""
    assert main(["gradcheck", "--instances", "1"]) == EXIT_OK
    assert "cases passed" in capsys.readouterr().out
