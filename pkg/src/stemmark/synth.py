"""Seeded synthetic audio: music-like fixtures and two-stem training material.

Stem A is a sparse tonal source (a few sinusoids under 3 kHz with slow random
envelopes); stem B is band-passed noise bursts above 1 kHz. Their supports
overlap between 1 and 3 kHz, so a separator has real work to do there.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, sosfilt

from .audio import SAMPLE_RATE, SEGMENT_LENGTH, AudioBuffer, SegmentLocator


def _smooth_envelope(rng, n, sr, rate_hz):
    """Positive envelope from cubic interpolation of random control points."""
    n_ctrl = max(4, int(n / sr * rate_hz) + 4)
    ctrl = rng.uniform(0.05, 1.0, size=n_ctrl)
    t = np.linspace(0, n_ctrl - 3, n)
    i = np.floor(t).astype(int)
    f = t - i
    p0, p1, p2, p3 = ctrl[i], ctrl[i + 1], ctrl[i + 2], ctrl[np.minimum(i + 3, n_ctrl - 1)]
    env = p1 + 0.5 * f * (p2 - p0 + f * (2 * p0 - 5 * p1 + 4 * p2 - p3 + f * (3 * (p1 - p2) + p3 - p0)))
    return np.clip(env, 0.02, None)


def sinusoid_stem(rng: np.random.Generator, n: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    """3-6 sinusoids between 100 Hz and 2.8 kHz, each with its own slow envelope."""
    t = np.arange(n) / sr
    x = np.zeros(n)
    for _ in range(rng.integers(3, 7)):
        f = np.exp(rng.uniform(np.log(100.0), np.log(2800.0)))
        env = _smooth_envelope(rng, n, sr, rng.uniform(0.5, 3.0))
        x += rng.uniform(0.3, 1.0) * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return x / (np.max(np.abs(x)) + 1e-12) * 0.5


def noise_burst_stem(rng: np.random.Generator, n: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Noise bursts band-passed to 1-12 kHz with exponential decays."""
    sos = butter(4, [1000.0, 12000.0], btype="bandpass", fs=sr, output="sos")
    noise = sosfilt(sos, rng.standard_normal(n))
    env = np.zeros(n)
    pos = int(rng.uniform(0, 0.1) * sr)
    while pos < n:
        dur = int(rng.uniform(0.08, 0.5) * sr)
        decay = np.exp(-np.arange(dur) / (rng.uniform(0.05, 0.25) * sr))
        seg = env[pos:pos + dur]
        seg += rng.uniform(0.4, 1.0) * decay[:len(seg)]
        pos += int(rng.uniform(0.12, 0.45) * sr)
    env += 0.03
    x = noise * env
    return x / (np.max(np.abs(x)) + 1e-12) * 0.5


def music_like(rng: np.random.Generator, n: int = SEGMENT_LENGTH, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphonic harmonic notes with ADSR envelopes over a quiet noise bed.

    Used as the fixture set for imperceptibility and codec round-trip checks.
    """
    t = np.arange(n) / sr
    x = np.zeros(n)
    for _ in range(rng.integers(2, 5)):
        pos = 0
        while pos < n:
            dur = int(rng.uniform(0.2, 0.8) * sr)
            f0 = np.exp(rng.uniform(np.log(80.0), np.log(700.0)))
            rolloff = rng.uniform(0.7, 1.5)
            m = min(dur, n - pos)
            tt = t[:m]
            vib = 1.0 + 0.003 * np.sin(2 * np.pi * rng.uniform(4, 6) * tt)
            phase = 2 * np.pi * f0 * np.cumsum(vib) / sr
            note = np.zeros(m)
            for h in range(1, 16):
                if f0 * h > 14000:
                    break
                note += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h**rolloff
            attack = max(1, int(0.01 * sr))
            env = np.minimum(1.0, np.arange(m) / attack) * np.exp(-tt / rng.uniform(0.2, 1.0))
            x[pos:pos + m] += rng.uniform(0.3, 1.0) * env * note
            pos += int(rng.uniform(0.7, 1.0) * dur)
    sos = butter(2, 200.0, btype="highpass", fs=sr, output="sos")
    bed = sosfilt(sos, np.cumsum(rng.standard_normal(n)) * 0.02 + rng.standard_normal(n))
    x = x / (np.max(np.abs(x)) + 1e-12)
    x += 10 ** (-40 / 20) * bed / (np.std(bed) + 1e-12)
    return x / np.max(np.abs(x)) * 0.5


def music_fixture(seed: int, n: int = SEGMENT_LENGTH) -> AudioBuffer:
    return AudioBuffer(music_like(np.random.default_rng(seed), n))


@dataclass(frozen=True)
class SyntheticStemSet:
    """Generator parameters for the two-stem benchmark (6-second carriers)."""

    carrier_seconds: float = 6.0
    segment_length: int = SEGMENT_LENGTH
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.carrier_length < self.segment_length:
            raise ValueError("carriers must be at least one segment long")

    @property
    def carrier_length(self) -> int:
        return int(round(self.carrier_seconds * self.sample_rate))


@dataclass(frozen=True)
class StemItem:
    stem_a: AudioBuffer
    stem_b: AudioBuffer
    locator: SegmentLocator


def synth_item(stems: SyntheticStemSet, seed) -> StemItem:
    rng = np.random.default_rng(seed)
    n = stems.carrier_length
    a = sinusoid_stem(rng, n, stems.sample_rate)
    b = noise_burst_stem(rng, n, stems.sample_rate)
    start = int(rng.integers(0, n - stems.segment_length + 1))
    return StemItem(AudioBuffer(a, stems.sample_rate), AudioBuffer(b, stems.sample_rate),
                    SegmentLocator(start, stems.segment_length))


def synth_two_stem_batch(stems: SyntheticStemSet, batch: int, seed: int) -> list[StemItem]:
    """``batch`` independent items; item ``i`` depends only on ``(seed, i)``."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return [synth_item(stems, (seed, i)) for i in range(batch)]
