"""Waveform containers, STFT/ISTFT, mel projection and segment crop/splice.

Everything here is a pure function of its inputs. The array-level helpers
(``stft_frames``, ``istft_frames`` and their adjoints) are what the training
code backpropagates through; the ``AudioBuffer``/``Spectrogram`` wrappers are
the public surface.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SAMPLE_RATE = 44100
SEGMENT_LENGTH = 88200


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono float waveform with its sample rate.

    Samples are stored as a read-only float64 array. Stereo input has to be
    collapsed before construction (``read_wav`` does that).
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"expected 1-D samples, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self) -> int:
        return 1

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, AudioBuffer):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


@dataclass(frozen=True)
class SegmentLocator:
    start: int
    length: int = SEGMENT_LENGTH

    def __post_init__(self):
        if self.start < 0 or self.length <= 0:
            raise ValueError(f"invalid locator {self}")

    @property
    def stop(self) -> int:
        return self.start + self.length

    def check(self, n: int) -> None:
        if self.stop > n:
            raise IndexError(f"locator [{self.start}, {self.stop}) exceeds buffer of length {n}")


@dataclass(frozen=True)
class STFTGeometry:
    fft_size: int = 2048
    hop: int = 512

    def __post_init__(self):
        n = self.fft_size
        if n < 2 or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two, got {n}")
        if not 0 < self.hop <= n:
            raise ValueError(f"hop must be in (0, fft_size], got {self.hop}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def is_cola(self) -> bool:
        # periodic Hann overlap-adds to a constant for hop = fft_size / k, k >= 2
        return self.fft_size % self.hop == 0 and self.fft_size // self.hop >= 2

    def n_frames(self, length: int) -> int:
        return 1 + length // self.hop

    def bin_frequencies(self, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
        return np.arange(self.n_bins) * sample_rate / self.fft_size


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Complex STFT frames, shape ``[n_frames, n_bins]``."""

    frames: np.ndarray
    fft_size: int
    hop: int
    sample_rate: int = SAMPLE_RATE
    window: str = "hann"

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.fft_size // 2 + 1:
            raise ValueError("frames must be [n_frames, fft_size/2 + 1]")

    @property
    def geometry(self) -> STFTGeometry:
        return STFTGeometry(self.fft_size, self.hop)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.frames)


@lru_cache(maxsize=16)
def hann_window(n: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.flags.writeable = False
    return w


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if len(x) > 1:
        return np.pad(x, pad, mode="reflect")
    return np.pad(x, pad, mode="edge")


def _reflect_pad_adjoint(g: np.ndarray, pad: int, n: int) -> np.ndarray:
    """Adjoint of ``_reflect_pad``: fold padded gradients back onto their sources."""
    if n == 1:
        return np.array([g.sum()])
    idx = np.arange(-pad, n + pad)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    idx = np.where(idx >= n, period - idx, idx)
    out = np.zeros(n)
    np.add.at(out, idx, g)
    return out


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, n = frames.shape
    if n % hop:
        out = np.zeros((n_frames - 1) * hop + n)
        for t in range(n_frames):
            out[t * hop:t * hop + n] += frames[t]
        return out
    r = n // hop
    out = np.zeros((n_frames + r - 1) * hop)
    for k in range(r):
        out[k * hop:(k + n_frames) * hop] += frames[:, k * hop:(k + 1) * hop].reshape(-1)
    return out


def _frame(x: np.ndarray, n: int, hop: int, n_frames: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, n)[::hop][:n_frames]


def stft_frames(x: np.ndarray, fft_size: int = 2048, hop: int = 512) -> np.ndarray:
    """Hann-windowed, reflect-center-padded STFT of a 1-D array."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 1:
        raise ValueError("stft needs at least one sample")
    n_frames = 1 + len(x) // hop
    xp = _reflect_pad(x, fft_size // 2)
    need = (n_frames - 1) * hop + fft_size
    if len(xp) < need:
        xp = np.pad(xp, (0, need - len(xp)))
    frames = _frame(xp, fft_size, hop, n_frames) * hann_window(fft_size)
    return np.fft.rfft(frames, axis=1)


def stft_adjoint(grad: np.ndarray, length: int, fft_size: int = 2048, hop: int = 512) -> np.ndarray:
    """Gradient w.r.t. the input of ``stft_frames`` given d(loss)/d(Re + i Im)."""
    n = fft_size
    h = np.array(grad, dtype=np.complex128)
    h[:, 1:-1] *= 0.5
    frames = np.fft.irfft(h, n=n, axis=1) * n * hann_window(n)
    g = _overlap_add(frames, hop)
    padded_len = length + n
    if len(g) < padded_len:
        g = np.pad(g, (0, padded_len - len(g)))
    return _reflect_pad_adjoint(g[:padded_len], n // 2, length)


@lru_cache(maxsize=64)
def _wola_norm(n_frames: int, fft_size: int, hop: int) -> np.ndarray:
    w2 = hann_window(fft_size) ** 2
    norm = _overlap_add(np.broadcast_to(w2, (n_frames, fft_size)), hop)
    norm = np.where(norm > 1e-10, norm, 1.0)
    norm.flags.writeable = False
    return norm


def istft_frames(frames: np.ndarray, length: int, fft_size: int = 2048, hop: int = 512) -> np.ndarray:
    """Weighted overlap-add inverse of ``stft_frames``, trimmed/padded to ``length``."""
    if not STFTGeometry(fft_size, hop).is_cola:
        raise ValueError(f"hop {hop} does not satisfy COLA for a {fft_size}-point Hann window")
    n_frames = frames.shape[0]
    y = _overlap_add(np.fft.irfft(frames, n=fft_size, axis=1) * hann_window(fft_size), hop)
    y /= _wola_norm(n_frames, fft_size, hop)
    y = y[fft_size // 2:fft_size // 2 + length]
    if len(y) < length:
        y = np.pad(y, (0, length - len(y)))
    return y


def istft_adjoint(grad: np.ndarray, n_frames: int, fft_size: int = 2048, hop: int = 512) -> np.ndarray:
    """Gradient w.r.t. the complex frames of ``istft_frames`` (as d/dRe + i d/dIm)."""
    n = fft_size
    total = (n_frames - 1) * hop + n
    g = np.zeros(total)
    seg = np.asarray(grad)[: max(0, min(len(grad), total - n // 2))]
    g[n // 2:n // 2 + len(seg)] = seg
    g /= _wola_norm(n_frames, fft_size, hop)
    fr = _frame(g, n, hop, n_frames) * hann_window(n)
    out = np.fft.rfft(fr, axis=1) / n
    out[:, 1:-1] *= 2.0
    out[:, 0] = out[:, 0].real
    out[:, -1] = out[:, -1].real
    return out


def stft(buffer: AudioBuffer, fft_size: int = 2048, hop: int = 512) -> Spectrogram:
    STFTGeometry(fft_size, hop)
    return Spectrogram(stft_frames(buffer.samples, fft_size, hop), fft_size, hop, buffer.sample_rate)


def istft(spec: Spectrogram, out_len: int) -> AudioBuffer:
    return AudioBuffer(istft_frames(spec.frames, out_len, spec.fft_size, spec.hop), spec.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=32)
def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters spanning 0 Hz to Nyquist, shape ``[n_mels, n_bins]``.

    Unnormalized peaks of 1, so a bin sits in at most two adjacent triangles.
    """
    n_bins = fft_size // 2 + 1
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if n_mels > n_bins:
        raise ValueError(f"n_mels={n_mels} exceeds n_bins={n_bins}")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    f = np.arange(n_bins) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (f - lo) / (mid - lo)
    down = (hi - f) / (hi - mid)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    fb.flags.writeable = False
    return fb


def mel_project(magnitude, n_mels: int, sample_rate: int | None = None) -> np.ndarray:
    """Project magnitudes ``[n_frames, n_bins]`` onto a mel filterbank.

    Accepts a ``Spectrogram`` (its magnitude is used) or a real array, in which
    case ``sample_rate`` defaults to 44.1 kHz.
    """
    if isinstance(magnitude, Spectrogram):
        sample_rate = magnitude.sample_rate
        magnitude = magnitude.magnitude
    magnitude = np.asarray(magnitude, dtype=np.float64)
    fft_size = 2 * (magnitude.shape[-1] - 1)
    fb = mel_filterbank(n_mels, fft_size, sample_rate or SAMPLE_RATE)
    return magnitude @ fb.T


def crop_segment(buffer: AudioBuffer, loc: SegmentLocator) -> AudioBuffer:
    loc.check(len(buffer))
    return buffer.with_samples(buffer.samples[loc.start:loc.stop])


def splice_segment(carrier: AudioBuffer, segment: AudioBuffer, loc: SegmentLocator) -> AudioBuffer:
    if len(segment) != loc.length:
        raise ValueError(f"segment length {len(segment)} != locator length {loc.length}")
    if segment.sample_rate != carrier.sample_rate:
        raise ValueError("sample rates differ")
    loc.check(len(carrier))
    out = carrier.samples.copy()
    out[loc.start:loc.stop] = segment.samples
    return carrier.with_samples(out)
