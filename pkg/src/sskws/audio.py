"""WAV ingestion, MFCC extraction and SpecAugment.

All functions here are pure: each call owns its inputs and rng, so they are
safe to run concurrently from a prefetching data pipeline.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000


class IngestionError(RuntimeError):
    """An audio file cannot be used as a training clip."""


@dataclass(frozen=True)
class AudioClip:
    """Fixed-length mono clip, samples scaled to [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE


@dataclass(frozen=True)
class MfccConfig:
    """Framing and cepstrum parameters.

    Defaults: 480-sample window, 160-sample hop, first 40 coefficients from a
    64-filter mel bank over 0-8000 Hz, periodic Hann window, no pre-emphasis,
    orthonormal DCT-II. A 16000-sample clip yields 98 frames.
    """

    window_length: int = 480
    hop_length: int = 160
    n_mfcc: int = 40
    n_fft: int = 512
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.window_length > self.n_fft:
            raise ValueError("window_length must be <= n_fft")
        if self.n_mfcc > self.n_mels:
            raise ValueError("n_mfcc must be <= n_mels")
        if self.hop_length <= 0:
            raise ValueError("hop_length must be positive")


@dataclass(frozen=True)
class SpecAugmentParams:
    """Stripe-masking magnitudes for a T x F feature matrix."""

    n_time_masks: int = 2
    max_time_mask: int = 25
    n_freq_masks: int = 2
    max_freq_mask: int = 7
    mask_value: float = 0.0


def load_clip(path: str | Path, target_len: int = CLIP_SAMPLES, offset: int = 0) -> AudioClip:
    """Load a 16 kHz 16-bit PCM mono WAV as a float clip of exactly target_len samples.

    Shorter clips are zero-padded at the end, longer ones truncated. ``offset``
    skips that many samples before reading (used for segmented long audio).
    Raises IngestionError naming the file for anything that is not a readable
    16 kHz mono 16-bit WAV.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getframerate() != SAMPLE_RATE:
                raise IngestionError(f"{path}: sample rate {wf.getframerate()} != {SAMPLE_RATE}")
            if wf.getnchannels() != 1:
                raise IngestionError(f"{path}: expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise IngestionError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            if offset:
                wf.setpos(min(offset, wf.getnframes()))
            raw = wf.readframes(target_len)
    except IngestionError:
        raise
    except Exception as exc:  # wave.Error, EOFError, OSError
        raise IngestionError(f"{path}: unreadable WAV ({exc})") from exc

    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.shape[0] < target_len:
        samples = np.pad(samples, (0, target_len - samples.shape[0]))
    return AudioClip(samples=samples, sample_rate=SAMPLE_RATE)


def wav_duration(path: str | Path) -> float:
    """Duration in seconds of a WAV file, validating rate/channels/width."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getframerate() != SAMPLE_RATE or wf.getnchannels() != 1 or wf.getsampwidth() != 2:
                raise IngestionError(f"{path}: not a 16 kHz mono 16-bit WAV")
            return wf.getnframes() / wf.getframerate()
    except IngestionError:
        raise
    except Exception as exc:
        raise IngestionError(f"{path}: unreadable WAV ({exc})") from exc


def write_wav(path: str | Path, samples: np.ndarray) -> None:
    """Write float samples in [-1, 1] as a 16 kHz 16-bit PCM mono WAV."""
    pcm = np.asarray(samples, dtype=np.float64) * 32768.0
    pcm = np.clip(np.round(pcm), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())


def n_frames(n_samples: int, cfg: MfccConfig) -> int:
    """Frame count of the no-padding framing: floor((N - window) / hop) + 1."""
    if n_samples < cfg.window_length:
        raise ValueError(f"clip of {n_samples} samples is shorter than the window")
    return (n_samples - cfg.window_length) // cfg.hop_length + 1


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft // 2 + 1).

    HTK-style mel scale (2595 log10(1 + f/700)), unit-peak triangles evaluated
    on the continuous FFT bin frequencies.
    """

    def to_mel(hz):
        return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)

    def to_hz(mel):
        return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)

    edges_hz = to_hz(np.linspace(to_mel(cfg.fmin), to_mel(cfg.fmax), cfg.n_mels + 2))
    fft_hz = np.arange(cfg.n_fft // 2 + 1, dtype=np.float64) * SAMPLE_RATE / cfg.n_fft

    left = edges_hz[:-2, None]
    center = edges_hz[1:-1, None]
    right = edges_hz[2:, None]
    up = (fft_hz[None, :] - left) / (center - left)
    down = (right - fft_hz[None, :]) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II matrix of shape (n_out, n_in)."""
    n = np.arange(n_in, dtype=np.float64)
    k = np.arange(n_out, dtype=np.float64)[:, None]
    mat = np.sqrt(2.0 / n_in) * np.cos(np.pi * (2.0 * n[None, :] + 1.0) * k / (2.0 * n_in))
    mat[0] /= np.sqrt(2.0)
    return mat


def _hann(length: int) -> np.ndarray:
    # periodic Hann, the DSP convention for overlapping analysis windows
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length, dtype=np.float64) / length)


def compute_mfcc(clip: AudioClip, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Mel-frequency cepstral coefficients, shape (T, n_mfcc), float32.

    No centering: frame t covers samples [t*hop, t*hop + window). Deterministic
    for fixed input; internally computed in float64.
    """
    samples = np.asarray(clip.samples, dtype=np.float64)
    frames = np.lib.stride_tricks.sliding_window_view(samples, cfg.window_length)[:: cfg.hop_length]
    windowed = frames * _hann(cfg.window_length)
    power = np.abs(np.fft.rfft(windowed, n=cfg.n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(cfg).T
    log_mel = np.log(np.maximum(mel, cfg.log_floor))
    mfcc = log_mel @ dct_matrix(cfg.n_mfcc, cfg.n_mels).T
    return mfcc.astype(np.float32)


def spec_augment(frames: np.ndarray, params: SpecAugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Mask random time and frequency stripes of a (T, F) feature matrix.

    Widths are drawn uniformly in [0, max] (a width of 0 masks nothing), stripe
    starts uniformly over the valid range. Returns a new array; the input is
    never modified. Time masks are drawn before frequency masks, each as a
    (width, start) pair, which pins down the rng consumption order.
    """
    out = np.array(frames, copy=True)
    n_t, n_f = out.shape
    for _ in range(params.n_time_masks):
        width = int(rng.integers(0, min(params.max_time_mask, n_t) + 1))
        start = int(rng.integers(0, n_t - width + 1))
        out[start : start + width, :] = params.mask_value
    for _ in range(params.n_freq_masks):
        width = int(rng.integers(0, min(params.max_freq_mask, n_f) + 1))
        start = int(rng.integers(0, n_f - width + 1))
        out[:, start : start + width] = params.mask_value
    return out
