import numpy as np
import pytest
import scipy.fft
from hypothesis import given, settings
from hypothesis import strategies as st

from sskws.audio import (
    AudioClip,
    IngestionError,
    MfccConfig,
    SpecAugmentParams,
    compute_mfcc,
    dct_matrix,
    load_clip,
    mel_filterbank,
    n_frames,
    spec_augment,
    write_wav,
)
from sskws.seeding import substream

from conftest import write_pcm_wav


class TestLoadClip:
    def test_silence_maps_to_zeros(self, tmp_path):
        path = tmp_path / "zero.wav"
        write_pcm_wav(path, np.zeros(16000, dtype=np.int16))
        clip = load_clip(path)
        assert clip.samples.shape == (16000,)
        assert np.all(clip.samples == 0.0)

    def test_short_clip_zero_padded(self, tmp_path):
        path = tmp_path / "half.wav"
        write_pcm_wav(path, np.full(8000, 8192, dtype=np.int16))
        clip = load_clip(path)
        assert np.all(clip.samples[:8000] == 8192 / 32768.0)
        assert np.all(clip.samples[8000:] == 0.0)

    def test_long_clip_truncated(self, tmp_path):
        path = tmp_path / "long.wav"
        data = np.arange(19200, dtype=np.int16)
        write_pcm_wav(path, data)
        clip = load_clip(path)
        assert clip.samples.shape == (16000,)
        assert np.array_equal(clip.samples, data[:16000] / 32768.0)

    def test_scaled_to_unit_range(self, tmp_path):
        path = tmp_path / "full.wav"
        write_pcm_wav(path, np.array([-32768, 32767], dtype=np.int16))
        clip = load_clip(path, target_len=2)
        assert clip.samples[0] == -1.0
        assert clip.samples[1] == 32767 / 32768.0

    @pytest.mark.parametrize(
        "kwargs", [{"sample_rate": 8000}, {"channels": 2}, {"sampwidth": 1}]
    )
    def test_wrong_format_rejected(self, tmp_path, kwargs):
        path = tmp_path / "bad.wav"
        n = 1600 * (2 if kwargs.get("channels") == 2 else 1)
        write_pcm_wav(path, np.zeros(n, dtype=np.int16), **kwargs)
        with pytest.raises(IngestionError, match="bad.wav"):
            load_clip(path)

    def test_unreadable_file_rejected(self, tmp_path):
        path = tmp_path / "junk.wav"
        path.write_bytes(b"this is not audio")
        with pytest.raises(IngestionError, match="junk.wav"):
            load_clip(path)

    def test_offset_read(self, tmp_path):
        path = tmp_path / "offs.wav"
        data = np.arange(4000, dtype=np.int16)
        write_pcm_wav(path, data)
        clip = load_clip(path, target_len=1000, offset=2000)
        assert np.array_equal(clip.samples, data[2000:3000] / 32768.0)


class TestComputeMfcc:
    def test_frame_count_98(self):
        cfg = MfccConfig()
        assert n_frames(16000, cfg) == 98
        clip = AudioClip(samples=np.random.default_rng(0).uniform(-1, 1, 16000))
        assert compute_mfcc(clip, cfg).shape == (98, 40)

    @pytest.mark.parametrize("n,expected", [(480, 1), (639, 1), (640, 2), (16000, 98), (12345, 75)])
    def test_framing_formula(self, n, expected):
        cfg = MfccConfig()
        assert n_frames(n, cfg) == (n - 480) // 160 + 1 == expected

    @settings(max_examples=20, deadline=None)
    @given(n=st.integers(480, 24000))
    def test_frame_count_property(self, n):
        cfg = MfccConfig()
        clip = AudioClip(samples=np.zeros(n))
        assert compute_mfcc(clip, cfg).shape == ((n - 480) // 160 + 1, 40)

    def test_zero_clip_rows_identical(self):
        frames = compute_mfcc(AudioClip(samples=np.zeros(16000)))
        assert np.all(frames == frames[0])
        assert np.isfinite(frames).all()

    def test_deterministic(self):
        clip = AudioClip(samples=np.random.default_rng(1).uniform(-1, 1, 16000))
        a = compute_mfcc(clip)
        b = compute_mfcc(clip)
        assert np.array_equal(a, b)

    def test_hop_shift_moves_frames_by_one(self):
        # prepending one hop of zeros shifts frame contents down one index
        t = np.arange(16000) / 16000.0
        tone = 0.5 * np.sin(2 * np.pi * 440.0 * t) + 0.2 * np.sin(2 * np.pi * 1330.0 * t)
        shifted = np.concatenate([np.zeros(160), tone])[:16000]
        orig = compute_mfcc(AudioClip(samples=tone))
        shift = compute_mfcc(AudioClip(samples=shifted))
        assert np.array_equal(shift[1:], orig[:-1])

    def test_matches_independent_dsp_oracle(self):
        # same framing, but spectrogram and cepstrum via scipy instead of
        # numpy fft + our handwritten DCT matrix
        cfg = MfccConfig()
        rng = np.random.default_rng(2)
        samples = rng.uniform(-1, 1, 16000)
        window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.window_length) / cfg.window_length)
        frames = np.stack([samples[i * 160 : i * 160 + 480] for i in range(98)]) * window
        power = np.abs(scipy.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
        log_mel = np.log(np.maximum(power @ mel_filterbank(cfg).T, cfg.log_floor))
        expected = scipy.fft.dct(log_mel, type=2, norm="ortho", axis=1)[:, :40]
        got = compute_mfcc(AudioClip(samples=samples), cfg)
        np.testing.assert_allclose(got, expected, rtol=1e-4, atol=1e-4)

    def test_finite_for_extreme_input(self):
        clip = AudioClip(samples=np.where(np.arange(16000) % 2 == 0, 1.0, -1.0))
        assert np.isfinite(compute_mfcc(clip)).all()


class TestFilterbankAndDct:
    def test_filterbank_shape_and_support(self):
        fb = mel_filterbank(MfccConfig())
        assert fb.shape == (64, 257)
        assert (fb >= 0).all()
        assert (fb.max(axis=1) > 0).all()

    def test_dct_rows_orthonormal(self):
        mat = dct_matrix(40, 64)
        gram = mat @ mat.T
        np.testing.assert_allclose(gram, np.eye(40), atol=1e-12)


class _StripeRng:
    """Duck-typed rng returning queued integers draws (width, start, ...)."""

    def __init__(self, values):
        self.values = list(values)

    def integers(self, low, high):
        return self.values.pop(0)


class TestSpecAugment:
    def test_zero_masks_is_identity(self):
        frames = np.random.default_rng(0).normal(size=(98, 40)).astype(np.float32)
        params = SpecAugmentParams(n_time_masks=0, n_freq_masks=0)
        out = spec_augment(frames, params, substream(0, "augment"))
        assert np.array_equal(out, frames)
        assert out is not frames

    def test_full_width_time_mask(self):
        frames = np.ones((98, 40), dtype=np.float32)
        params = SpecAugmentParams(n_time_masks=1, max_time_mask=98, n_freq_masks=0, mask_value=-5.0)
        out = spec_augment(frames, params, _StripeRng([98, 0]))
        assert np.all(out == -5.0)

    def test_input_not_modified(self):
        frames = np.ones((98, 40), dtype=np.float32)
        before = frames.copy()
        spec_augment(frames, SpecAugmentParams(), substream(1, "augment"))
        assert np.array_equal(frames, before)

    def test_reproducible_per_seed(self):
        frames = np.random.default_rng(3).normal(size=(98, 40)).astype(np.float32)
        a = spec_augment(frames, SpecAugmentParams(), substream(9, "augment"))
        b = spec_augment(frames, SpecAugmentParams(), substream(9, "augment"))
        assert np.array_equal(a, b)

    def test_masked_fraction_matches_monte_carlo_oracle(self):
        # oracle: independent simulation of the stripe geometry
        n_t, n_f, n_draws = 98, 40, 10000
        params = SpecAugmentParams(n_time_masks=2, max_time_mask=25, n_freq_masks=2, max_freq_mask=7)

        def oracle_fraction(rng):
            masked = np.zeros((n_t, n_f), dtype=bool)
            for _ in range(params.n_time_masks):
                width = rng.integers(0, params.max_time_mask + 1)
                start = rng.integers(0, n_t - width + 1)
                masked[start : start + width, :] = True
            for _ in range(params.n_freq_masks):
                width = rng.integers(0, params.max_freq_mask + 1)
                start = rng.integers(0, n_f - width + 1)
                masked[:, start : start + width] = True
            return masked.mean()

        oracle_rng = np.random.default_rng(1234)
        oracle = np.array([oracle_fraction(oracle_rng) for _ in range(n_draws)])

        ones = np.ones((n_t, n_f), dtype=np.float32)
        impl_rng = substream(77, "augment")
        impl = np.array([(spec_augment(ones, params, impl_rng) == 0.0).mean() for _ in range(n_draws)])

        tol = 3.0 * np.sqrt(oracle.var() / n_draws + impl.var() / n_draws)
        assert abs(impl.mean() - oracle.mean()) < tol


def test_write_wav_round_trip(tmp_path):
    samples = np.linspace(-0.5, 0.5, 16000)
    path = tmp_path / "rt.wav"
    write_wav(path, samples)
    clip = load_clip(path)
    np.testing.assert_allclose(clip.samples, samples, atol=1.0 / 32768.0)
