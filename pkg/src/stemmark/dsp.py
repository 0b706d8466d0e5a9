"""Signal-processing helpers for the attack catalog."""
from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.signal import lfilter, resample, resample_poly

from .audio import istft_frames, stft_frames


def biquad_lowpass(cutoff: float, q: float, sr: int):
    """RBJ cookbook low-pass, returned as normalized ``(b, a)``."""
    w0 = 2 * np.pi * cutoff / sr
    alpha = np.sin(w0) / (2 * q)
    c = np.cos(w0)
    b = np.array([(1 - c) / 2, 1 - c, (1 - c) / 2])
    a = np.array([1 + alpha, -2 * c, 1 - alpha])
    return b / a[0], a / a[0]


def biquad_bandpass(center: float, q: float, sr: int):
    """RBJ cookbook band-pass with 0 dB peak gain."""
    w0 = 2 * np.pi * center / sr
    alpha = np.sin(w0) / (2 * q)
    c = np.cos(w0)
    b = np.array([alpha, 0.0, -alpha])
    a = np.array([1 + alpha, -2 * c, 1 - alpha])
    return b / a[0], a / a[0]


def apply_biquad(x: np.ndarray, ba) -> np.ndarray:
    return lfilter(ba[0], ba[1], x)


def pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """-3 dB/octave noise by shaping white noise in the frequency domain."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    spec /= np.sqrt(f)
    spec[0] = 0.0
    return np.fft.irfft(spec, n=n)


def fix_length(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    return np.pad(x, (0, n - len(x)))


def resample_ratio(x: np.ndarray, n_out: int) -> np.ndarray:
    """Band-limited resampling of ``x`` to exactly ``n_out`` samples."""
    if n_out == len(x):
        return x.copy()
    return resample(x, n_out)


def resample_rate(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    """Polyphase windowed-sinc rate conversion."""
    frac = Fraction(sr_out, sr_in)
    return resample_poly(x, frac.numerator, frac.denominator)


def _nearest_peak(mag: np.ndarray) -> np.ndarray:
    """Index of the closest local magnitude maximum for every bin."""
    inner = (mag[1:-1] > mag[:-2]) & (mag[1:-1] >= mag[2:])
    peaks = np.flatnonzero(inner) + 1
    if peaks.size == 0:
        return np.arange(len(mag))
    mids = (peaks[:-1] + peaks[1:]) / 2.0
    return peaks[np.searchsorted(mids, np.arange(len(mag)))]


def time_stretch(x: np.ndarray, rate: float, fft_size: int = 2048, hop: int = 512) -> np.ndarray:
    """Phase-vocoder time stretch; ``rate > 1`` speeds up. Output length ``round(len/rate)``.

    Uses identity phase locking: bins around a spectral peak keep their input
    phase offset to that peak, which avoids the smeared, phasey sound (and
    energy loss) of a bin-independent vocoder.
    """
    n_out = int(round(len(x) / rate))
    spec = stft_frames(x, fft_size, hop)
    n_frames, n_bins = spec.shape
    steps = np.arange(0, n_frames, rate)
    padded = np.vstack([spec, np.zeros((2, n_bins))])
    advance = 2 * np.pi * hop * np.arange(n_bins) / fft_size
    acc = np.angle(spec[0])
    out = np.empty((len(steps), n_bins), dtype=np.complex128)
    for i, s in enumerate(steps):
        k = int(s)
        frac = s - k
        a, b = padded[k], padded[k + 1]
        mag = (1 - frac) * np.abs(a) + frac * np.abs(b)
        ref = a if frac < 0.5 else b
        peak = _nearest_peak(mag)
        in_phase = np.angle(ref)
        phase = acc[peak] + in_phase - in_phase[peak]
        out[i] = mag * np.exp(1j * phase)
        dphi = np.angle(b) - np.angle(a) - advance
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        acc = phase + advance + dphi
    needed = 1 + n_out // hop
    if len(out) < needed:
        out = np.vstack([out, np.zeros((needed - len(out), n_bins))])
    return istft_frames(out[:needed], n_out, fft_size, hop)


def pitch_shift(x: np.ndarray, semitones: float, fft_size: int = 2048, hop: int = 512) -> np.ndarray:
    """Shift pitch by ``semitones`` keeping the duration."""
    ratio = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(x, 1.0 / ratio, fft_size, hop)
    return resample_ratio(stretched, len(x))
