"""Shared fixtures: a seeded two-speaker desk corpus and trained PR models.

The expensive pieces (feature extraction, training) are session-scoped and
shared between the end-to-end acceptance criteria.
"""

import numpy as np
import pytest

from revoice import corpus, dsp, features, nnet
from revoice.testsignals import write_desk_corpus

DESK_SPEAKERS = {"spka": (110.0, 160.0), "spkb": (200.0, 280.0)}
DESK_SPLITS = (50, 10, 10)
DESK_SEED = 101


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """70 synthetic vowel utterances (two speakers) + noise files + manifest."""
    root = tmp_path_factory.mktemp("desk")
    clean_dir, noise_dir = write_desk_corpus(
        root, n_clean=sum(DESK_SPLITS), n_noise=6, seed=DESK_SEED,
        speakers=DESK_SPEAKERS,
    )
    manifest = corpus.build_manifest(clean_dir, noise_dir, seed=7, split_counts=DESK_SPLITS)
    path = root / "manifest.jsonl"
    manifest.save(path)
    return {
        "root": root,
        "clean_dir": clean_dir,
        "noise_dir": noise_dir,
        "manifest": manifest,
        "manifest_path": path,
    }


def _train_from_store(store_root, seed=0, max_epochs=14):
    store = corpus.FeatureStore(store_root)
    norm_in, norm_tgt = store.load_normalizers()

    def pairs(split):
        out = []
        for utt in store.utterances(split):
            x, y = store.load_pair(split, utt)
            out.append(
                (norm_in.apply(x).astype(np.float32), norm_tgt.apply(y).astype(np.float32))
            )
        return out

    train_pairs, dev_pairs = pairs("train"), pairs("dev")
    model_cfg = nnet.ModelConfig(
        "feedforward",
        input_dim=train_pairs[0][0].shape[1],
        output_dim=train_pairs[0][1].shape[1],
        hidden_layers=3,
        hidden_width=192,
        seed=seed,
    )
    train_cfg = nnet.TrainConfig(
        learning_rate=1e-3, batch=8, max_epochs=max_epochs, patience=4, seed=seed
    )
    model, history = nnet.train(model_cfg, train_cfg, train_pairs, dev_pairs)
    return model, history, norm_in, norm_tgt


@pytest.fixture(scope="session")
def pr_training(desk_corpus):
    """PR (noisy input) and PR-clean models trained with identical budgets."""
    manifest = desk_corpus["manifest"]
    root = desk_corpus["root"]
    noisy_store = root / "store_noisy"
    clean_store = root / "store_clean"
    summary = corpus.prepare_features(manifest, noisy_store, input_role="noisy")
    assert not summary.failures, summary.failures
    summary = corpus.prepare_features(manifest, clean_store, input_role="clean")
    assert not summary.failures, summary.failures

    pr_model, pr_hist, norm_in_n, norm_tgt_n = _train_from_store(noisy_store)
    prc_model, prc_hist, norm_in_c, norm_tgt_c = _train_from_store(clean_store)
    return {
        "manifest": manifest,
        "root": root,
        "noisy_store": noisy_store,
        "clean_store": clean_store,
        "pr": (pr_model, norm_in_n, norm_tgt_n, pr_hist),
        "pr_clean": (prc_model, norm_in_c, norm_tgt_c, prc_hist),
    }
