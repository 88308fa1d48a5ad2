"""Synthetic-speaker corpus: generation, WAV/manifest I/O, trial lists.

Speech is a jittered harmonic source shaped by three per-speaker formant
resonators plus a -30 dB noise floor; the noise bank holds white/pink
noise, detuned-harmonic "music"/"babble" clips, and exponentially
decaying RIR bursts. Everything is a pure function of (args, seed).
"""

from __future__ import annotations

import io
import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import CapacityError, ConfigurationError, FormatError
from .utils import rng_for

SPEECH = "speech"
BANK_KINDS = ("noise", "music", "babble")
RIR = "rir"

_PCM_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # float64, [-1, 1]
    sample_rate: int

    def __len__(self):
        return len(self.samples)

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0: float
    formants: tuple  # three (center_hz, bandwidth_hz) pairs, centers increasing
    jitter: float
    seed: int

    def validate(self, sample_rate: int):
        if not 80.0 <= self.f0 <= 300.0:
            raise ConfigurationError(f"speaker.f0 out of [80, 300]: {self.f0}")
        if len(self.formants) != 3:
            raise ConfigurationError("speaker.formants must have length 3")
        centers = [c for c, _ in self.formants]
        if sorted(centers) != centers or len(set(centers)) != 3:
            raise ConfigurationError("speaker.formants centers must be strictly increasing")
        if centers[-1] >= sample_rate / 2:
            raise ConfigurationError("speaker.formants must stay below Nyquist")
        if not 0.0 <= self.jitter <= 0.1:
            raise ConfigurationError(f"speaker.jitter out of [0, 0.1]: {self.jitter}")


@dataclass
class UtteranceRecord:
    utt_id: str
    kind: str
    duration: float
    speaker_id: str | None = None
    path: str | None = None
    pcm: np.ndarray | None = None  # int16 buffer when in memory

    def source(self):
        return self.pcm if self.pcm is not None else self.path


@dataclass
class CorpusManifest:
    sample_rate: int
    utterances: list = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {u.utt_id: u for u in self.utterances}
        if len(self._by_id) != len(self.utterances):
            raise ConfigurationError("manifest utt_ids must be unique")

    def record(self, utt_id: str) -> UtteranceRecord:
        return self._by_id[utt_id]

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._by_id

    def speech(self) -> list:
        return [u for u in self.utterances if u.kind == SPEECH]

    @property
    def noise_bank(self) -> list:
        return [u.utt_id for u in self.utterances if u.kind in BANK_KINDS]

    @property
    def rir_bank(self) -> list:
        return [u.utt_id for u in self.utterances if u.kind == RIR]

    def save(self, corpus_dir) -> Path:
        corpus_dir = Path(corpus_dir)
        (corpus_dir / "wav").mkdir(parents=True, exist_ok=True)
        manifest_path = corpus_dir / "manifest.jsonl"
        with open(manifest_path, "w") as fh:
            for rec in self.utterances:
                if rec.pcm is not None:
                    rel = f"wav/{rec.utt_id}.wav"
                    write_wav(corpus_dir / rel, rec.pcm, self.sample_rate)
                    rec.path = rel
                row = {"utt_id": rec.utt_id, "path": rec.path, "kind": rec.kind}
                if rec.speaker_id is not None:
                    row["speaker_id"] = rec.speaker_id
                fh.write(json.dumps(row) + "\n")
        return manifest_path

    @classmethod
    def load(cls, manifest_path) -> "CorpusManifest":
        manifest_path = Path(manifest_path)
        base = manifest_path.parent
        recs = []
        sample_rate = None
        for line in manifest_path.read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            wav_path = base / row["path"]
            with wave.open(str(wav_path), "rb") as wf:
                rate = wf.getframerate()
                n = wf.getnframes()
            if sample_rate is None:
                sample_rate = rate
            elif rate != sample_rate:
                raise FormatError(f"mixed sample rates in corpus: {rate} vs {sample_rate}")
            recs.append(UtteranceRecord(
                utt_id=row["utt_id"], kind=row["kind"], duration=n / rate,
                speaker_id=row.get("speaker_id"), path=str(wav_path)))
        return cls(sample_rate=sample_rate, utterances=recs)


@dataclass(frozen=True)
class TrialList:
    trials: tuple  # (label, utt_id_a, utt_id_b); label 1 target, 0 nontarget

    def save(self, path):
        with open(path, "w") as fh:
            for label, a, b in self.trials:
                fh.write(f"{label} {a} {b}\n")

    @classmethod
    def load(cls, path) -> "TrialList":
        trials = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            label, a, b = line.split()
            trials.append((int(label), a, b))
        return cls(trials=tuple(trials))


def write_wav(path, pcm: np.ndarray, sample_rate: int):
    pcm = np.asarray(pcm, dtype=np.int16)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def quantize(x: np.ndarray) -> np.ndarray:
    """Float [-1, 1] samples to int16 PCM."""
    return np.clip(np.round(x * _PCM_SCALE), -32768, 32767).astype(np.int16)


def load_waveform(source, expect_rate: int | None = None) -> Waveform:
    """Load 16-bit mono PCM from a path, WAV bytes, or an int16 buffer."""
    if isinstance(source, UtteranceRecord):
        source = source.source()
    if isinstance(source, np.ndarray):
        if source.dtype != np.int16:
            raise FormatError(f"in-memory buffer must be int16, got {source.dtype}")
        if expect_rate is None:
            raise FormatError("in-memory buffer requires an explicit sample rate")
        return Waveform(source.astype(np.float64) / _PCM_SCALE, expect_rate)
    if isinstance(source, (bytes, bytearray)):
        fh = io.BytesIO(bytes(source))
    else:
        fh = str(source)
    with wave.open(fh, "rb") as wf:
        if wf.getnchannels() != 1:
            raise FormatError(f"expected mono WAV, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise FormatError(f"expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        rate = wf.getframerate()
        if expect_rate is not None and rate != expect_rate:
            raise FormatError(f"expected sample rate {expect_rate}, got {rate}")
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / _PCM_SCALE, rate)


def _sample_profile(idx: int, seed: int) -> SpeakerProfile:
    rng = rng_for(seed, "profile", str(idx))
    f0 = rng.uniform(80.0, 300.0)
    centers = (rng.uniform(300.0, 900.0), rng.uniform(1000.0, 2200.0), rng.uniform(2400.0, 3800.0))
    bws = rng.uniform(60.0, 140.0, size=3)
    jitter = rng.uniform(0.0, 0.05)
    return SpeakerProfile(
        speaker_id=f"spk{idx:03d}", f0=f0,
        formants=tuple((c, b) for c, b in zip(centers, bws)),
        jitter=float(jitter), seed=seed)


def _harmonic_source(f0: float, n: int, sr: int, rng, max_harmonics: int = 64) -> np.ndarray:
    n_harm = max(1, min(max_harmonics, int((sr / 2 - 1) // f0)))
    t = np.arange(n) / sr
    k = np.arange(1, n_harm + 1)[:, None]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_harm, 1))
    return (np.sin(2.0 * np.pi * f0 * k * t[None, :] + phases) / k).sum(axis=0)


def _formant_filter(x: np.ndarray, formants, sr: int) -> np.ndarray:
    for fc, bw in formants:
        r = np.exp(-np.pi * bw / sr)
        b = [1.0 - r]
        a = [1.0, -2.0 * r * np.cos(2.0 * np.pi * fc / sr), r * r]
        x = lfilter(b, a, x)
    return x


def synth_utterance(profile: SpeakerProfile, n_samples: int, sr: int, rng) -> np.ndarray:
    """One speech utterance as float samples; noise floor at -30 dB."""
    f0 = profile.f0 * (1.0 + profile.jitter * rng.uniform(-1.0, 1.0))
    x = _harmonic_source(f0, n_samples, sr, rng)
    x = _formant_filter(x, profile.formants, sr)
    x = x / (np.max(np.abs(x)) + 1e-12) * 0.5
    noise = rng.standard_normal(n_samples)
    rms = np.sqrt(np.mean(x ** 2))
    noise *= rms * 10.0 ** (-30.0 / 20.0) / (np.sqrt(np.mean(noise ** 2)) + 1e-12)
    x = x + noise
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x = x / peak * 0.99
    return x


def _pink_noise(n: int, rng) -> np.ndarray:
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    spec[1:] /= np.sqrt(freqs[1:])
    x = np.fft.irfft(spec, n)
    return x / (np.max(np.abs(x)) + 1e-12) * 0.9


def _music_clip(n: int, sr: int, rng) -> np.ndarray:
    t = np.arange(n) / sr
    x = np.zeros(n)
    for _ in range(3):
        base = rng.uniform(100.0, 1200.0)
        detune = base * (1.0 + rng.uniform(-0.01, 0.01))
        for f in (base, detune):
            for k in range(1, 5):
                x += np.sin(2.0 * np.pi * f * k * t + rng.uniform(0, 2 * np.pi)) / k
    mod = 0.6 + 0.4 * np.sin(2.0 * np.pi * rng.uniform(0.2, 1.0) * t)
    x = x * mod
    return x / (np.max(np.abs(x)) + 1e-12) * 0.9


def _babble_clip(n: int, sr: int, rng, n_voices: int = 6) -> np.ndarray:
    x = np.zeros(n)
    for _ in range(n_voices):
        f0 = rng.uniform(80.0, 300.0)
        centers = sorted(rng.uniform(300.0, 3500.0, size=3))
        bws = rng.uniform(80.0, 200.0, size=3)
        v = _harmonic_source(f0 * (1.0 + rng.uniform(-0.02, 0.02)), n, sr, rng, max_harmonics=32)
        v = _formant_filter(v, list(zip(centers, bws)), sr)
        x += v / (np.max(np.abs(v)) + 1e-12)
    return x / (np.max(np.abs(x)) + 1e-12) * 0.9


def _rir_clip(sr: int, rng) -> np.ndarray:
    t60 = rng.uniform(0.1, 0.4)
    n = int(t60 * sr)
    t = np.arange(n) / sr
    tail = rng.standard_normal(n) * np.exp(-6.908 * t / t60)
    h = tail * 0.5
    h[0] = 1.0  # direct path
    return h / np.max(np.abs(h))


def generate_corpus(n_speakers: int, utts_per_speaker: int, utt_seconds=(3.0, 5.0),
                    sample_rate: int = 16000, seed: int = 0,
                    n_noise: int = 4, n_music: int = 3, n_babble: int = 3,
                    n_rir: int = 4, bank_seconds: float = 5.0) -> CorpusManifest:
    cfg = ConfigurationError
    if n_speakers < 2:
        raise cfg("n_speakers must be >= 2")
    if utts_per_speaker < 1:
        raise cfg("utts_per_speaker must be >= 1")
    lo, hi = float(utt_seconds[0]), float(utt_seconds[1])
    if lo < 1.0:
        raise cfg("utt_seconds minimum must be >= 1.0 s")
    if hi < lo:
        raise cfg("utt_seconds range must be nondecreasing")
    if sample_rate <= 0:
        raise cfg("sample_rate must be positive")

    recs = []
    for s in range(n_speakers):
        profile = _sample_profile(s, seed)
        profile.validate(sample_rate)
        for u in range(utts_per_speaker):
            rng = rng_for(seed, "utt", str(s), str(u))
            dur = rng.uniform(lo, hi)
            n = int(round(dur * sample_rate))
            x = synth_utterance(profile, n, sample_rate, rng)
            recs.append(UtteranceRecord(
                utt_id=f"{profile.speaker_id}_u{u:03d}", kind=SPEECH,
                duration=n / sample_rate, speaker_id=profile.speaker_id,
                pcm=quantize(x)))

    n_bank = int(round(bank_seconds * sample_rate))
    for i in range(n_noise):
        rng = rng_for(seed, "noise", str(i))
        x = rng.standard_normal(n_bank) * 0.3 if i % 2 == 0 else _pink_noise(n_bank, rng)
        recs.append(UtteranceRecord(utt_id=f"noise{i:03d}", kind="noise",
                                    duration=bank_seconds, pcm=quantize(np.clip(x, -1, 1))))
    for i in range(n_music):
        rng = rng_for(seed, "music", str(i))
        recs.append(UtteranceRecord(utt_id=f"music{i:03d}", kind="music",
                                    duration=bank_seconds, pcm=quantize(_music_clip(n_bank, sample_rate, rng))))
    for i in range(n_babble):
        rng = rng_for(seed, "babble", str(i))
        recs.append(UtteranceRecord(utt_id=f"babble{i:03d}", kind="babble",
                                    duration=bank_seconds, pcm=quantize(_babble_clip(n_bank, sample_rate, rng))))
    for i in range(n_rir):
        rng = rng_for(seed, "rir", str(i))
        h = _rir_clip(sample_rate, rng)
        recs.append(UtteranceRecord(utt_id=f"rir{i:03d}", kind=RIR,
                                    duration=len(h) / sample_rate, pcm=quantize(h)))

    return CorpusManifest(sample_rate=sample_rate, utterances=recs)


def make_trials(manifest: CorpusManifest, n_target: int, n_nontarget: int, seed: int = 0) -> TrialList:
    speech = manifest.speech()
    by_spk = {}
    for rec in speech:
        by_spk.setdefault(rec.speaker_id, []).append(rec.utt_id)

    target_pairs = []
    for ids in by_spk.values():
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                target_pairs.append((ids[i], ids[j]))
    spk_list = sorted(by_spk)
    nontarget_pairs = []
    for si in range(len(spk_list)):
        for sj in range(si + 1, len(spk_list)):
            for a in by_spk[spk_list[si]]:
                for b in by_spk[spk_list[sj]]:
                    nontarget_pairs.append((a, b))

    if n_target > len(target_pairs):
        raise CapacityError(
            f"requested {n_target} target trials but only {len(target_pairs)} same-speaker pairs exist")
    if n_nontarget > len(nontarget_pairs):
        raise CapacityError(
            f"requested {n_nontarget} nontarget trials but only {len(nontarget_pairs)} cross-speaker pairs exist")

    rng = rng_for(seed, "trials")
    t_idx = rng.choice(len(target_pairs), size=n_target, replace=False)
    n_idx = rng.choice(len(nontarget_pairs), size=n_nontarget, replace=False)
    trials = [(1, *target_pairs[i]) for i in t_idx] + [(0, *nontarget_pairs[i]) for i in n_idx]
    order = rng.permutation(len(trials))
    return TrialList(trials=tuple(trials[i] for i in order))
