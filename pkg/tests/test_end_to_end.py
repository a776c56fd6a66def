"""
Slow end-to-end runs: the desk-scale search pipeline and the full-size shape check.
"""

import os
import tempfile

import numpy as np
import pytest

from lightdarts.checkpoint import load_model, save_model
from lightdarts.cli import EXIT_OK, main
from lightdarts.data import Dataset, FeatureMatrix, gen_synthetic, store_feature
from lightdarts.evaluation import compute_eer, score_dataset, score_utterance
from lightdarts.genotype import Genotype
from lightdarts.models import ManifestEntry, SearchConfig
from lightdarts.search import retrain_discrete, run_search
from lightdarts.supernet import instantiate_discrete

pytestmark = pytest.mark.slow


def test_desk_scale_search_reaches_low_eer():
    """Test search, retraining and scoring on the synthetic corpus."""
    with tempfile.TemporaryDirectory() as tmpdir:
        manifests = gen_synthetic(
            tmpdir, {"train": 400, "val": 200, "eval": 200}, frames=40, dims=16
        )
        splits = {name: Dataset.from_manifest(path, frames=40) for name, path in manifests.items()}
        config = SearchConfig(epochs=15, cells=4, init_channels=8, lr=1e-3, arch_lr=1e-3)

        search = run_search(config, splits["train"], splits["val"])
        assert search.history[-1].train_acc >= 0.95

        retrained = retrain_discrete(search.genotype, config, splits["train"], splits["val"])
        eer, _ = compute_eer(score_dataset(retrained.model, splits["eval"]))
        assert eer <= 0.05


def test_cli_pipeline_is_bitwise_deterministic():
    """Test that two identical search, train and eval runs write identical files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        data = os.path.join(tmpdir, "data")
        assert main(["gen-synthetic", "--out", data, "--n-per-split", "16"]) == EXIT_OK
        tiny = ["--cells", "2", "--channels", "4", "--batch-size", "8"]
        outputs = []
        for run in ("a", "b"):
            root = os.path.join(tmpdir, run)
            genotype = os.path.join(root, "genotype.txt")
            model = os.path.join(root, "model.bin")
            scores = os.path.join(root, "scores.txt")
            train = os.path.join(data, "train.tsv")
            val = os.path.join(data, "val.tsv")
            assert main(
                ["search", "--train-manifest", train, "--val-manifest", val,
                 "--epochs", "2", "--out", genotype, *tiny]
            ) == EXIT_OK
            assert main(
                ["train", "--genotype", genotype, "--train-manifest", train,
                 "--epochs", "2", "--out", model, *tiny]
            ) == EXIT_OK
            assert main(
                ["eval", "--model", model, "--manifest", os.path.join(data, "eval.tsv"),
                 "--scores", scores]
            ) == EXIT_OK
            contents = []
            for path in (genotype, model, scores):
                with open(path, "rb") as f:
                    contents.append(f.read())
            outputs.append(contents)
        assert outputs[0] == outputs[1]


def test_full_size_features_forward():
    """Test a 400 x 1024 feature file through the data path and a forward pass."""
    genotype = Genotype(
        normal=[
            ("sep_conv_3x3", 0),
            ("max_feature_map", 1),
            ("dil_conv_3x3", 2),
            ("skip_connect", 0),
        ],
        reduce=[
            ("max_pool_3x3", 0),
            ("skip_connect", 1),
            ("max_feature_map", 2),
            ("avg_pool_3x3", 1),
        ],
        concat=[2, 3],
    )
    rng = np.random.default_rng(0)
    with tempfile.TemporaryDirectory() as tmpdir:
        store_feature(
            FeatureMatrix(values=rng.standard_normal((512, 1024)).astype(np.float32)),
            os.path.join(tmpdir, "u.fafd"),
        )
        dataset = Dataset(
            [ManifestEntry(utt_id="u", path="u.fafd", label="unknown")], tmpdir, frames=400
        )
        features = dataset.features(0)
        assert features.shape == (400, 1024)

        model = instantiate_discrete(genotype, cells=3, channels=4, feature_dim=1024)
        model.freeze_norm_statistics([features[None]])
        score = score_utterance(model, features)
        assert np.isfinite(score)

        path = os.path.join(tmpdir, "model.bin")
        save_model(model, path, frames=400)
        loaded, header = load_model(path)
        assert header.feature_dim == 1024
        assert score_utterance(loaded, features) == score
