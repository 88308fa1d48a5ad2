"""Log mel-filterbank features with short-time mean normalization.

25 ms Hann window, 10 ms hop, 80 triangular HTK-mel filters from 20 Hz
to Nyquist, natural log with a floor; then per-dimension subtraction of
a centered moving-window mean (truncated at the edges).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import FeatureConfig
from .corpus import Waveform
from .errors import FormatError, LengthError
from .utils import next_pow2


@dataclass(frozen=True)
class FeatureMatrix:
    frames: np.ndarray  # (T, n_mels) float64
    frame_rate: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_freqs(cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    fmax = cfg.fmax or sample_rate / 2
    edges = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(cfg: FeatureConfig, sample_rate: int, nfft: int) -> np.ndarray:
    """(n_mels, nfft//2 + 1) triangular weights evaluated at FFT bin freqs."""
    fmax = cfg.fmax or sample_rate / 2
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    bin_freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    fb = np.zeros((cfg.n_mels, len(bin_freqs)))
    for m in range(cfg.n_mels):
        left, center, right = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def frame_count(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def logmel(w: Waveform, cfg: FeatureConfig) -> FeatureMatrix:
    sr = w.sample_rate
    cfg.validate(sr)
    win = int(round(cfg.win_ms / 1000.0 * sr))
    hop = int(round(cfg.hop_ms / 1000.0 * sr))
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) < win:
        raise LengthError(f"waveform has {len(x)} samples; logmel needs at least {win}")
    nfft = next_pow2(win)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    frames = frames * np.hanning(win)
    power = np.abs(np.fft.rfft(frames, n=nfft, axis=1)) ** 2
    mel = power @ mel_filterbank(cfg, sr, nfft).T
    out = np.log(np.maximum(mel, cfg.log_floor))
    return FeatureMatrix(frames=out, frame_rate=sr / hop)


def st_mean_normalize(f: FeatureMatrix, norm_window_ms: float) -> FeatureMatrix:
    """Subtract the mean over a centered window of frames, truncated at edges."""
    win_frames = max(1, int(round(norm_window_ms / 1000.0 * f.frame_rate)))
    x = f.frames
    t = x.shape[0]
    left = (win_frames - 1) // 2
    right = win_frames // 2
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    lo = np.maximum(np.arange(t) - left, 0)
    hi = np.minimum(np.arange(t) + right, t - 1)
    window_sum = csum[hi + 1] - csum[lo]
    window_len = (hi - lo + 1).astype(np.float64)[:, None]
    return FeatureMatrix(frames=x - window_sum / window_len, frame_rate=f.frame_rate)


def write_feature_dump(f: FeatureMatrix, path):
    """Debug dump: two u32 LE {T, n_mels}, then f32 LE row-major data."""
    t, m = f.frames.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", t, m))
        fh.write(f.frames.astype("<f4").tobytes())


def read_feature_dump(path, frame_rate: float = 100.0) -> FeatureMatrix:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise FormatError("feature dump header truncated")
        t, m = struct.unpack("<II", head)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != t * m:
        raise FormatError(f"feature dump payload has {data.size} values, expected {t * m}")
    return FeatureMatrix(frames=data.reshape(t, m).astype(np.float64), frame_rate=frame_rate)
