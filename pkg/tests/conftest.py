import numpy as np
import pytest

from sslspk.config import (AugmentConfig, CropConfig, DinoConfig, FeatureConfig,
                           NetworkConfig, ProjectionConfig)
from sslspk.corpus import generate_corpus

# Deliberately tiny shapes so graph/training tests run in seconds.
TINY_NET = NetworkConfig(trunk_channels=(12, 12), embed_dim=16, frame_kernel=3)
TINY_PROJ = ProjectionConfig(hidden_dim=24, bottleneck_dim=8, k=24)
TINY_CROP = CropConfig(n_global=2, n_local=2, global_seconds=3.0, local_seconds=2.0)
TINY_AUG = AugmentConfig(p_noise=0.5, snr_db=(0.0, 15.0), p_rir=0.25)
FEAT = FeatureConfig()


def tiny_dino_cfg(**kw):
    base = dict(epochs=2, batch_size=4, lr=2e-3, lr_warmup_epochs=0,
                seed=11, crop=TINY_CROP, augment=TINY_AUG)
    base.update(kw)
    return DinoConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    """4 speakers x 3 utterances, 3-4 s, small noise/rir banks."""
    return generate_corpus(4, 3, (3.0, 4.0), 16000, seed=0,
                           n_noise=2, n_music=1, n_babble=1, n_rir=2,
                           bank_seconds=4.0)


@pytest.fixture(scope="session")
def corpus20_factory():
    """Cache of (20 x 20, 2-4 s) corpora keyed by seed."""
    cache = {}

    def build(seed: int):
        if seed not in cache:
            cache[seed] = generate_corpus(20, 20, (2.0, 4.0), 16000, seed=seed,
                                          n_noise=2, n_music=1, n_babble=1,
                                          n_rir=2, bank_seconds=4.0)
        return cache[seed]

    return build


def mean_log_spectrum(x: np.ndarray, nfft: int = 512, hop: int = 256) -> np.ndarray:
    """Brute-force utterance spectrum for the separability oracle."""
    frames = np.lib.stride_tricks.sliding_window_view(x, nfft)[::hop]
    frames = frames * np.hanning(nfft)
    p = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    return np.log(np.mean(p, axis=0) + 1e-10)
