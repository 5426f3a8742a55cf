import os

import numpy as np
import pytest
import torch

from symreg.backbone import MODE_AR, MODE_DIFFUSION, BackboneConfig, SequenceModel
from symreg.dataset import DatasetConfig, build_dataset, load_split
from symreg.vocab import Vocabulary

# Small models and strict determinism; two threads buys nothing at these sizes.
torch.set_num_threads(max(1, min(2, os.cpu_count() or 1)))

#: (number, name, ok, detail) rows recorded by the acceptance suite.
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[criterion {num:>2}] {status}: {name} ({detail})")


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.default()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory, vocab):
    """40-sample corpus with short expressions, shared across tests."""
    out = tmp_path_factory.mktemp("corpus")
    cfg = DatasetConfig(n_samples=50, n_points=32, split=(0.8, 0.1, 0.1),
                        max_depth=3, seed=11)
    build_dataset(cfg, out, vocab)
    return out, cfg


@pytest.fixture(scope="session")
def tiny_corpus_train(tiny_corpus, vocab):
    out, _ = tiny_corpus
    return load_split(out, "train", vocab)


def tiny_config(mode: str, **over) -> BackboneConfig:
    base = dict(embed_dim=32, num_heads=4, num_layers=2, ff_dim=64,
                dropout=0.0, max_len=32, vocab_size=13, mode=mode,
                num_steps=40 if mode == MODE_DIFFUSION else None)
    base.update(over)
    return BackboneConfig(**base)


@pytest.fixture()
def tiny_diffusion_model():
    torch.manual_seed(0)
    return SequenceModel(tiny_config(MODE_DIFFUSION))


@pytest.fixture()
def tiny_ar_model():
    torch.manual_seed(0)
    return SequenceModel(tiny_config(MODE_AR))


def rng_from(*entropy) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


@pytest.fixture(scope="session")
def trained_models(tmp_path_factory, vocab):
    """Small AR + diffusion checkpoints memorizing a 24-sample corpus.

    Shared by estimator, CLI, and evaluation tests; sized to train in a few
    seconds on two CPU threads."""
    from symreg import d3pm as D
    from symreg.dataset import DatasetConfig, build_dataset, load_split
    from symreg.training import TrainConfig, train_ar, train_diffusion

    out = tmp_path_factory.mktemp("trained")
    data_dir = out / "data"
    dcfg = DatasetConfig(n_samples=24, n_points=48, split=(1.0, 0.0, 0.0),
                         max_depth=2, seed=5)
    build_dataset(dcfg, data_dir, vocab)
    train = load_split(data_dir, "train", vocab)

    ar_cfg = tiny_config(MODE_AR, embed_dim=32, num_heads=2, num_layers=1, ff_dim=64)
    tcfg = TrainConfig(batch_size=12, learning_rate=3e-3, max_epochs=120, seed=1)
    ar_res = train_ar(train, train, ar_cfg, tcfg, vocab, out, tag="ar")

    diff_cfg = tiny_config(MODE_DIFFUSION, embed_dim=32, num_heads=2,
                           num_layers=1, ff_dim=64, num_steps=40)
    sched = D.NoiseSchedule.cosine(vocab.size, num_steps=40)
    dcfg_t = TrainConfig(batch_size=12, learning_rate=3e-3, max_epochs=160,
                         seed=1, lambda_ce=0.05)
    diff_res = train_diffusion(train, train, diff_cfg, sched, dcfg_t, vocab,
                               out, tag="diff")
    return {
        "data_dir": data_dir,
        "train": train,
        "ar_ckpt": ar_res.checkpoint_path,
        "diff_ckpt": diff_res.checkpoint_path,
    }
