import numpy as np
import pytest
import torch

from efhvae.corpus import CorpusConfig, Recording, build_dataset, generate_corpus
from efhvae.model import Architecture
from efhvae.seqnet import init_params


def random_store(arch: Architecture, seed=0, dtype=torch.float64, scale=0.3):
    """Parameters with every array (biases, tables) non-zero."""
    store = init_params(arch.param_spec(), seed, dtype=dtype)
    gen = torch.Generator().manual_seed(seed + 1)
    for k, v in store.items():
        if v.abs().sum() == 0:
            store[k] = scale * torch.randn(v.shape, generator=gen, dtype=dtype)
    return store


@pytest.fixture
def tiny_arch():
    return Architecture(n_channels=2, n_sequences=2, n_labels=3, hidden_size=4, n_layers=2, latent_dim=4, seg_len=4)


@pytest.fixture
def tiny_params(tiny_arch):
    return random_store(tiny_arch)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = CorpusConfig(n_subjects=3, n_stimuli=2, stimulus_duration_s=10, n_channels=4, seed=3)
    return cfg, generate_corpus(cfg)


@pytest.fixture(scope="session")
def small_dataset(small_corpus):
    return build_dataset(small_corpus[1])


def toy_parallel_recordings(n_labels=10, n_subjects=4, seg_len=32, channels=2, seed=0):
    rng = np.random.default_rng(seed)
    return [Recording(j, j, 0, rng.standard_normal((n_labels * seg_len, channels)).astype(np.float32))
            for j in range(n_subjects)]
