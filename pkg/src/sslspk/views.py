"""Multi-crop view construction: random global/local segments, noise and
reverb augmentation, then features. Each view draws its augmentation
decisions from its own seed stream."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .config import AugmentConfig, CropConfig, FeatureConfig
from .corpus import CorpusManifest, Waveform, load_waveform
from .errors import ConfigurationError, LengthError
from .features import FeatureMatrix, logmel, st_mean_normalize
from .utils import rng_for

GLOBAL = "global"
LOCAL = "local"


@dataclass(frozen=True)
class ViewSet:
    global_views: tuple  # FeatureMatrix per global crop
    local_views: tuple
    source_utt: str


def crop(w: Waveform, cfg: CropConfig, rng_seed: int) -> list:
    """Random segments at the configured lengths; globals first."""
    cfg.validate()
    sr = w.sample_rate
    n_global = int(round(cfg.global_seconds * sr))
    n_local = int(round(cfg.local_seconds * sr))
    if len(w) < n_global:
        raise LengthError(
            f"utterance has {len(w)} samples; global crop needs {n_global}")
    rng = rng_for(rng_seed, "crop")
    out = []
    for n, kind, count in ((n_global, GLOBAL, cfg.n_global), (n_local, LOCAL, cfg.n_local)):
        for _ in range(count):
            start = int(rng.integers(0, len(w) - n + 1))
            out.append((Waveform(w.samples[start:start + n], sr), kind))
    return out


def _fit_clip(clip: np.ndarray, n: int, rng) -> np.ndarray:
    if len(clip) >= n:
        start = int(rng.integers(0, len(clip) - n + 1))
        return clip[start:start + n]
    reps = int(np.ceil(n / len(clip)))
    return np.tile(clip, reps)[:n]


def augment(seg: Waveform, manifest: CorpusManifest, cfg: AugmentConfig, rng_seed: int) -> Waveform:
    """Mix a bank clip at a random SNR with prob p_noise; convolve a RIR
    with prob p_rir (truncated to the segment length). Peak is kept <= 1."""
    cfg.validate()
    if cfg.p_noise > 0 and not manifest.noise_bank:
        raise ConfigurationError("p_noise > 0 but the manifest noise bank is empty")
    if cfg.p_rir > 0 and not manifest.rir_bank:
        raise ConfigurationError("p_rir > 0 but the manifest rir bank is empty")
    rng = rng_for(rng_seed, "augment")
    x = np.asarray(seg.samples, dtype=np.float64)
    n = len(x)

    if rng.uniform() < cfg.p_noise:
        bank = manifest.noise_bank
        clip_id = bank[int(rng.integers(0, len(bank)))]
        clip = load_waveform(manifest.record(clip_id).source(), manifest.sample_rate).samples
        clip = _fit_clip(clip, n, rng)
        snr = rng.uniform(cfg.snr_db[0], cfg.snr_db[1])
        p_sig = np.mean(x ** 2)
        p_noi = np.mean(clip ** 2)
        if p_noi > 0 and p_sig > 0:
            x = x + clip * np.sqrt(p_sig / (p_noi * 10.0 ** (snr / 10.0)))

    if rng.uniform() < cfg.p_rir:
        bank = manifest.rir_bank
        rir_id = bank[int(rng.integers(0, len(bank)))]
        h = load_waveform(manifest.record(rir_id).source(), manifest.sample_rate).samples
        x = fftconvolve(x, h)[:n]

    peak = np.max(np.abs(x)) if n else 0.0
    if peak > 1.0:
        x = x / peak
    return Waveform(x, seg.sample_rate)


def make_view_set(w: Waveform, manifest: CorpusManifest, crop_cfg: CropConfig,
                  aug_cfg: AugmentConfig, feat_cfg: FeatureConfig, seed: int,
                  source_utt: str = "") -> ViewSet:
    segments = crop(w, crop_cfg, seed)
    glb, loc = [], []
    for i, (seg, kind) in enumerate(segments):
        view_seed = int(rng_for(seed, "view", str(i)).integers(0, 2 ** 63 - 1))
        seg = augment(seg, manifest, aug_cfg, view_seed)
        feats = st_mean_normalize(logmel(seg, feat_cfg), feat_cfg.norm_window_ms)
        (glb if kind == GLOBAL else loc).append(feats)
    return ViewSet(global_views=tuple(glb), local_views=tuple(loc), source_utt=source_utt)


def view_frames(vs: ViewSet) -> tuple:
    """(globals (n_g, T_g, M), locals (n_l, T_l, M)) stacked float arrays."""
    g = np.stack([v.frames for v in vs.global_views])
    l = np.stack([v.frames for v in vs.local_views]) if vs.local_views else np.zeros((0, 0, g.shape[2]))
    return g, l
