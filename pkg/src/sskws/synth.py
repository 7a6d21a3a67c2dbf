"""Synthetic keyword corpus in the Speech Commands directory layout.

Each keyword is a fixed sequence of three tone segments drawn from a shared
frequency alphabet; some keyword pairs use the same frequencies in a
different order, so temporal structure matters. Clips vary in pitch, onset,
segment durations, level, and additive noise (the SNR range is the main
hardness knob). The output tree (one folder per keyword plus
validation_list.txt / testing_list.txt) feeds straight into ``sskws ingest``,
giving a fully offline, deterministic stand-in for a real keyword corpus.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .audio import CLIP_SAMPLES, SAMPLE_RATE, write_wav
from .seeding import substream

KEYWORDS = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"]

# three-segment patterns over the tone alphabet; pairs (0,1) and (2,3) share a
# frequency set and differ only in temporal order
PATTERNS = [(0, 2, 4), (4, 2, 0), (1, 3, 5), (5, 3, 1), (2, 4, 6), (6, 4, 2), (0, 3, 6), (6, 3, 0)]

UNIT_FREQS = 350.0 * (3200.0 / 350.0) ** (np.arange(8) / 7.0)


def synth_clip(pattern: tuple[int, int, int], rng: np.random.Generator,
               snr_low: float = 5.0, snr_high: float = 20.0) -> np.ndarray:
    """One 1 s clip of the given segment pattern under random nuisances."""
    n = CLIP_SAMPLES
    t = np.arange(n) / SAMPLE_RATE
    pitch = rng.uniform(0.92, 1.08)
    onset = rng.uniform(0.05, 0.25)
    total = rng.uniform(0.50, 0.70)
    weights = rng.uniform(0.8, 1.2, size=3)
    weights /= weights.sum()

    sig = np.zeros(n)
    seg_start = onset
    for unit, w in zip(pattern, weights):
        seg_len = total * w
        lo = int(seg_start * SAMPLE_RATE)
        hi = min(int((seg_start + seg_len) * SAMPLE_RATE), n)
        seg_start += seg_len
        if hi <= lo:
            continue
        freq = UNIT_FREQS[unit] * pitch
        tt = t[lo:hi]
        tone = np.sin(2.0 * math.pi * freq * tt + rng.uniform(0, 2 * math.pi))
        tone += 0.35 * np.sin(2.0 * math.pi * 2.0 * freq * tt + rng.uniform(0, 2 * math.pi))
        env = np.sin(np.linspace(0.0, math.pi, hi - lo)) ** 0.75
        sig[lo:hi] += tone * env

    peak = np.abs(sig).max()
    if peak > 0:
        sig *= rng.uniform(0.3, 0.9) / peak
    active = sig != 0.0
    sig_power = float((sig[active] ** 2).mean()) if active.any() else 1e-6
    snr_db = rng.uniform(snr_low, snr_high)
    noise_std = math.sqrt(sig_power / (10.0 ** (snr_db / 10.0)))
    out = sig + noise_std * rng.standard_normal(n)
    peak = np.abs(out).max()
    if peak > 0.95:
        out *= 0.95 / peak
    return out


def synth_corpus(
    out_dir: str | Path,
    n_keywords: int = 5,
    train_per_class: int = 1050,
    val_per_class: int = 60,
    test_per_class: int = 60,
    seed: int = 0,
    snr_low: float = 5.0,
    snr_high: float = 20.0,
) -> Path:
    """Generate the corpus tree; returns the root directory.

    Clip (class, index) pairs are seeded individually, so the corpus is
    byte-reproducible and independent of generation order.
    """
    if not 1 <= n_keywords <= len(PATTERNS):
        raise ValueError(f"n_keywords must be in [1, {len(PATTERNS)}]")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    per_class = train_per_class + val_per_class + test_per_class
    val_list, test_list = [], []
    for c in range(n_keywords):
        kw = KEYWORDS[c]
        (root / kw).mkdir(exist_ok=True)
        for i in range(per_class):
            rng = substream(seed, "synth", c, i)
            clip = synth_clip(PATTERNS[c], rng, snr_low, snr_high)
            rel = f"{kw}/{kw}_{i:05d}.wav"
            write_wav(root / rel, clip)
            if i < val_per_class:
                val_list.append(rel)
            elif i < val_per_class + test_per_class:
                test_list.append(rel)
    (root / "validation_list.txt").write_text("\n".join(val_list) + "\n", encoding="utf-8")
    (root / "testing_list.txt").write_text("\n".join(test_list) + "\n", encoding="utf-8")
    return root
