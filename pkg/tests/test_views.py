import numpy as np
import pytest

from sslspk.config import AugmentConfig, CropConfig, FeatureConfig
from sslspk.corpus import CorpusManifest, UtteranceRecord, Waveform, load_waveform, quantize
from sslspk.errors import ConfigurationError, LengthError
from sslspk.utils import rng_for
from sslspk.views import augment, crop, make_view_set

from conftest import FEAT, TINY_AUG, TINY_CROP

SR = 16000


def wave(x):
    return Waveform(np.asarray(x, dtype=np.float64), SR)


def bare_manifest(extra=()):
    recs = [UtteranceRecord(utt_id="u0", kind="speech", duration=4.0, speaker_id="s0",
                            pcm=quantize(0.3 * np.sin(np.linspace(0, 500, 4 * SR))))]
    recs.extend(extra)
    return CorpusManifest(sample_rate=SR, utterances=recs)


class TestCrop:
    def test_lengths_forced(self):
        w = wave(np.zeros(4 * SR))
        cfg = CropConfig(n_global=2, n_local=4, global_seconds=3.0, local_seconds=2.0)
        segs = crop(w, cfg, rng_seed=0)
        lengths = [len(s) for s, _ in segs]
        kinds = [k for _, k in segs]
        assert lengths == [3 * SR, 3 * SR, 2 * SR, 2 * SR, 2 * SR, 2 * SR]
        assert kinds == ["global"] * 2 + ["local"] * 4

    def test_exact_length_gives_zero_offsets(self):
        w = wave(np.arange(3 * SR, dtype=np.float64))
        segs = crop(w, CropConfig(n_global=2, n_local=0, global_seconds=3.0,
                                  local_seconds=1.0), rng_seed=5)
        for seg, _ in segs:
            assert seg.samples[0] == 0.0  # offset forced to 0

    def test_deterministic(self):
        w = wave(np.random.default_rng(0).uniform(-1, 1, 4 * SR))
        a = crop(w, TINY_CROP, rng_seed=42)
        b = crop(w, TINY_CROP, rng_seed=42)
        for (sa, _), (sb, _) in zip(a, b):
            assert np.array_equal(sa.samples, sb.samples)

    def test_too_short_raises(self):
        with pytest.raises(LengthError):
            crop(wave(np.zeros(SR)), TINY_CROP, rng_seed=0)


class TestAugment:
    def test_identity_when_probabilities_zero(self, tiny_corpus):
        x = wave(np.random.default_rng(1).uniform(-0.5, 0.5, SR))
        out = augment(x, tiny_corpus, AugmentConfig(p_noise=0.0, p_rir=0.0), rng_seed=0)
        assert np.array_equal(out.samples, x.samples)

    def test_snr_zero_db_power_balance(self):
        # quiet signal so the peak-normalization branch stays inactive
        rng = np.random.default_rng(2)
        sig = 0.1 * np.sin(2 * np.pi * 440 * np.arange(SR) / SR)
        clip = quantize(0.2 * rng.uniform(-1, 1, 2 * SR))
        man = bare_manifest([UtteranceRecord(utt_id="n0", kind="noise", duration=2.0, pcm=clip)])
        out = augment(wave(sig), man, AugmentConfig(p_noise=1.0, snr_db=(0.0, 0.0), p_rir=0.0),
                      rng_seed=3)
        added = out.samples - sig
        p_sig = np.mean(sig ** 2)
        p_add = np.mean(added ** 2)
        assert abs(p_add / p_sig - 1.0) < 0.01

    def test_unit_impulse_rir_is_identity(self):
        h = np.zeros(100, dtype=np.int16)
        h[0] = 32767
        man = bare_manifest([UtteranceRecord(utt_id="r0", kind="rir", duration=0.01, pcm=h)])
        x = wave(0.5 * np.sin(np.linspace(0, 300, SR)))
        out = augment(x, man, AugmentConfig(p_noise=0.0, p_rir=1.0), rng_seed=0)
        # impulse quantizes to 32767/32768, a pure gain of ~0.99997
        assert len(out) == len(x)
        assert np.allclose(out.samples, x.samples * (32767 / 32768), atol=1e-9)

    def test_length_preserved_under_rir(self, tiny_corpus):
        x = wave(np.random.default_rng(0).uniform(-0.3, 0.3, SR))
        out = augment(x, tiny_corpus, AugmentConfig(p_noise=0.0, p_rir=1.0), rng_seed=1)
        assert len(out) == len(x)
        assert np.max(np.abs(out.samples)) <= 1.0 + 1e-12

    def test_empty_bank_with_positive_probability(self):
        man = bare_manifest()
        with pytest.raises(ConfigurationError, match="noise"):
            augment(wave(np.zeros(100)), man, AugmentConfig(p_noise=0.5, p_rir=0.0), 0)
        with pytest.raises(ConfigurationError, match="rir"):
            augment(wave(np.zeros(100)), man, AugmentConfig(p_noise=0.0, p_rir=0.5), 0)

    def test_peak_never_exceeds_one(self, tiny_corpus):
        x = wave(0.99 * np.sin(np.linspace(0, 500, SR)))
        for seed in range(5):
            out = augment(x, tiny_corpus, AugmentConfig(p_noise=1.0, snr_db=(-5.0, 0.0), p_rir=1.0), seed)
            assert np.max(np.abs(out.samples)) <= 1.0 + 1e-12


class TestMakeViewSet:
    def test_counts_and_frame_budget(self, tiny_corpus):
        rec = tiny_corpus.speech()[0]
        w = load_waveform(rec.source(), SR)
        vs = make_view_set(w, tiny_corpus, TINY_CROP, TINY_AUG, FEAT, seed=4,
                           source_utt=rec.utt_id)
        assert len(vs.global_views) == TINY_CROP.n_global
        assert len(vs.local_views) == TINY_CROP.n_local
        # 3 s at 16 kHz -> (48000 - 400) // 160 + 1 = 298 frames
        for v in vs.global_views:
            assert v.frames.shape == (298, 80)
        for v in vs.local_views:
            assert v.frames.shape == (198, 80)
        assert all(g.frames.shape[0] > l.frames.shape[0]
                   for g in vs.global_views for l in vs.local_views)

    def test_deterministic(self, tiny_corpus):
        rec = tiny_corpus.speech()[1]
        w = load_waveform(rec.source(), SR)
        a = make_view_set(w, tiny_corpus, TINY_CROP, TINY_AUG, FEAT, seed=9)
        b = make_view_set(w, tiny_corpus, TINY_CROP, TINY_AUG, FEAT, seed=9)
        for va, vb in zip(a.global_views + a.local_views, b.global_views + b.local_views):
            assert np.array_equal(va.frames, vb.frames)

    def test_per_view_streams_are_independent(self, tiny_corpus):
        # each view must be reproducible from (seed, view index) alone
        from sslspk.features import logmel, st_mean_normalize
        rec = tiny_corpus.speech()[2]
        w = load_waveform(rec.source(), SR)
        seed = 13
        vs = make_view_set(w, tiny_corpus, TINY_CROP, TINY_AUG, FEAT, seed=seed)
        segments = crop(w, TINY_CROP, seed)
        all_views = list(vs.global_views) + list(vs.local_views)
        for i, (seg, _) in enumerate(segments):
            vseed = int(rng_for(seed, "view", str(i)).integers(0, 2 ** 63 - 1))
            seg = augment(seg, tiny_corpus, TINY_AUG, vseed)
            fm = st_mean_normalize(logmel(seg, FEAT), FEAT.norm_window_ms)
            assert np.array_equal(fm.frames, all_views[i].frames)
