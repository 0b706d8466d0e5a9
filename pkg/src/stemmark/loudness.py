"""Integrated loudness (ITU-R BS.1770-4) and loudness normalization."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import lfilter

from .audio import AudioBuffer

DEFAULT_TARGET_LUFS = -16.0
ABSOLUTE_GATE = -70.0
RELATIVE_GATE = -10.0
BLOCK_SECONDS = 0.4
BLOCK_STEP = 0.1  # 75% overlap


class TooShortError(ValueError):
    pass


class SilentAudioError(ValueError):
    pass


@dataclass(frozen=True)
class LoudnessResult:
    """``integrated_lufs`` is None when no block passes the absolute gate."""

    integrated_lufs: float | None
    gated_blocks: int

    @property
    def silent(self) -> bool:
        return self.integrated_lufs is None


@lru_cache(maxsize=8)
def k_weighting_filters(sample_rate: int):
    """(b, a) pairs for the BS.1770 shelf and high-pass at ``sample_rate``.

    Obtained by bilinear transform of the analog prototypes behind the
    tabulated 48 kHz coefficients, so any rate gets the same response.
    """
    f0 = 1681.974450955533
    gain_db = 3.999843853973347
    q = 0.7071752369554196
    k = np.tan(np.pi * f0 / sample_rate)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf_b = np.array([(vh + vb * k / q + k * k), 2.0 * (k * k - vh), (vh - vb * k / q + k * k)]) / a0
    shelf_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])

    f0 = 38.13547087602444
    q = 0.5003270373238773
    k = np.tan(np.pi * f0 / sample_rate)
    a0 = 1.0 + k / q + k * k
    hp_b = np.array([1.0, -2.0, 1.0])
    hp_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])
    return (shelf_b, shelf_a), (hp_b, hp_a)


def k_weight(x: np.ndarray, sample_rate: int) -> np.ndarray:
    for b, a in k_weighting_filters(sample_rate):
        x = lfilter(b, a, x)
    return x


def block_powers(buffer: AudioBuffer) -> np.ndarray:
    """Mean-square power of K-weighted 400 ms blocks stepped by 100 ms."""
    sr = buffer.sample_rate
    size = int(round(BLOCK_SECONDS * sr))
    step = int(round(BLOCK_STEP * sr))
    if len(buffer) < size:
        raise TooShortError(f"need at least {size} samples (400 ms), got {len(buffer)}")
    y2 = k_weight(buffer.samples, sr) ** 2
    csum = np.concatenate([[0.0], np.cumsum(y2)])
    starts = np.arange(0, len(y2) - size + 1, step)
    return (csum[starts + size] - csum[starts]) / size


def _lufs(power):
    return -0.691 + 10.0 * np.log10(power)


def measure_integrated_lufs(buffer: AudioBuffer) -> LoudnessResult:
    z = block_powers(buffer)
    with np.errstate(divide="ignore"):
        levels = _lufs(z)
    passed = z[levels > ABSOLUTE_GATE]
    if passed.size == 0:
        return LoudnessResult(None, 0)
    threshold = _lufs(passed.mean()) + RELATIVE_GATE
    gated = z[(levels > ABSOLUTE_GATE) & (levels > threshold)]
    return LoudnessResult(float(_lufs(gated.mean())), int(gated.size))


def loudness_gain(buffer: AudioBuffer, target: float = DEFAULT_TARGET_LUFS) -> float:
    """Linear gain that brings ``buffer`` to ``target`` LUFS."""
    result = measure_integrated_lufs(buffer)
    if result.silent:
        raise SilentAudioError("cannot normalize silent audio")
    return float(10.0 ** ((target - result.integrated_lufs) / 20.0))


def normalize_to_lufs(buffer: AudioBuffer, target: float = DEFAULT_TARGET_LUFS) -> AudioBuffer:
    return buffer.with_samples(buffer.samples * loudness_gain(buffer, target))
