"""Scalar quality measures and the perceptual training losses.

The loss functions come in two flavours: the public ones take ``AudioBuffer``
pairs and return a float; the ``*_grad`` variants work on arrays and also return
the gradient with respect to the second (watermarked/degraded) argument, which
is what the joint trainer needs.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer, STFTGeometry, mel_filterbank, stft_adjoint, stft_frames

EPS = 1e-8
DB_CAP = 150.0


def _samples(x):
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


def _bits(p):
    return np.asarray(getattr(p, "bits", p), dtype=np.int64)


def bit_error_rate(truth, decoded) -> float:
    a, b = _bits(truth), _bits(decoded)
    if a.shape != b.shape:
        raise ValueError(f"payload lengths differ: {a.size} vs {b.size}")
    return float(np.count_nonzero(a != b)) / a.size


def _db(num: float, den: float) -> float:
    if den <= 0.0:
        return DB_CAP
    if num <= 0.0:
        return -DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def snr_db(reference, test) -> float:
    ref, est = _samples(reference), _samples(test)
    if ref.shape != est.shape:
        raise ValueError("length mismatch")
    energy = float(np.sum(ref**2))
    if energy == 0.0:
        raise ValueError("silent reference")
    return _db(energy, float(np.sum((est - ref) ** 2)))


def si_snr_db(reference, test) -> float:
    """Scale-invariant SNR after mean removal of both signals."""
    ref, est = _samples(reference), _samples(test)
    if ref.shape != est.shape:
        raise ValueError("length mismatch")
    ref = ref - ref.mean()
    est = est - est.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0 or not np.any(est):
        raise ValueError("silent input")
    target = (np.dot(est, ref) / ref_energy) * ref
    return _db(float(np.dot(target, target)), float(np.sum((target - est) ** 2)))


# Table 3 reports separation quality under these names.
sdr_db = snr_db
si_sdr_db = si_snr_db


@dataclass(frozen=True)
class MelConfig:
    """STFT/mel resolutions shared by the spectral losses: ``(fft_size, hop, n_mels)``."""

    resolutions: tuple = ((1024, 256, 64), (2048, 512, 128), (512, 128, 32))
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        for fft, hop, n_mels in self.resolutions:
            if not STFTGeometry(fft, hop).is_cola:
                raise ValueError(f"resolution ({fft}, {hop}) is not COLA")
            if not 1 <= n_mels <= fft // 2 + 1:
                raise ValueError(f"bad n_mels {n_mels} for fft {fft}")


DEFAULT_MEL = MelConfig()


def _phase(z, mag):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(mag > 0, z / mag, 0.0)


def multi_res_stft_loss_grad(x: np.ndarray, xt: np.ndarray, cfg: MelConfig = DEFAULT_MEL):
    """Mean over resolutions of mean |log|X| - log|X~||, and its gradient w.r.t. ``xt``."""
    total = 0.0
    grad = np.zeros(len(xt))
    k = len(cfg.resolutions)
    for fft, hop, _ in cfg.resolutions:
        mx = np.abs(stft_frames(x, fft, hop))
        zt = stft_frames(xt, fft, hop)
        mt = np.abs(zt)
        diff = np.log(mx + EPS) - np.log(mt + EPS)
        total += np.mean(np.abs(diff)) / k
        g_mag = -np.sign(diff) / (mt + EPS) / (diff.size * k)
        grad += stft_adjoint(g_mag * _phase(zt, mt), len(xt), fft, hop)
    return float(total), grad


def mel_l1_loss_grad(x: np.ndarray, xt: np.ndarray, cfg: MelConfig = DEFAULT_MEL):
    """Mean over resolutions of the mean absolute mel-magnitude difference."""
    total = 0.0
    grad = np.zeros(len(xt))
    k = len(cfg.resolutions)
    for fft, hop, n_mels in cfg.resolutions:
        fb = mel_filterbank(n_mels, fft, cfg.sample_rate)
        zt = stft_frames(xt, fft, hop)
        mt = np.abs(zt)
        diff = np.abs(stft_frames(x, fft, hop)) @ fb.T - mt @ fb.T
        total += np.mean(np.abs(diff)) / k
        g_mag = (-np.sign(diff) / (diff.size * k)) @ fb
        grad += stft_adjoint(g_mag * _phase(zt, mt), len(xt), fft, hop)
    return float(total), grad


def _pair(x, xt):
    a, b = _samples(x), _samples(xt)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    return a, b


def multi_res_stft_loss(x, xt, cfg: MelConfig = DEFAULT_MEL) -> float:
    a, b = _pair(x, xt)
    return multi_res_stft_loss_grad(a, b, cfg)[0]


def mel_l1_loss(x, xt, cfg: MelConfig = DEFAULT_MEL) -> float:
    a, b = _pair(x, xt)
    return mel_l1_loss_grad(a, b, cfg)[0]


# Zwicker critical-band edges in Hz; the last band is extended to Nyquist.
BARK_EDGES = (0, 100, 200, 300, 400, 510, 630, 770, 920, 1080, 1270, 1480, 1720, 2000, 2320,
              2700, 3150, 3700, 4400, 5300, 6400, 7700, 9500, 12000, 15500)


@dataclass(frozen=True)
class NmrConfig:
    """Simplified critical-band masking model.

    The masker power in each band is spread to its neighbours with a symmetric
    exponential slope and lowered by ``offset_db``; the result is floored at a
    threshold-in-quiet proxy given in dB relative to a full-scale sine.
    """

    n_bands: int = 24
    spreading_db_per_band: float = 15.0
    offset_db: float = 12.0
    quiet_threshold_db: float = -96.0
    fft_size: int = 2048
    hop: int = 512
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.n_bands < 8 or self.n_bands > len(BARK_EDGES) - 1:
            raise ValueError("n_bands must be between 8 and 24")
        if self.offset_db <= 0:
            raise ValueError("offset_db must be positive")


DEFAULT_NMR = NmrConfig()


@lru_cache(maxsize=8)
def band_matrix(cfg: NmrConfig) -> np.ndarray:
    """0/1 assignment of STFT bins to critical bands, ``[n_bins, n_bands]``."""
    f = STFTGeometry(cfg.fft_size, cfg.hop).bin_frequencies(cfg.sample_rate)
    edges = np.array(BARK_EDGES[: cfg.n_bands + 1], dtype=float)
    edges[-1] = np.inf
    idx = np.searchsorted(edges, f, side="right") - 1
    m = np.zeros((len(f), cfg.n_bands))
    m[np.arange(len(f)), idx] = 1.0
    m.flags.writeable = False
    return m


@lru_cache(maxsize=8)
def _spreading(cfg: NmrConfig) -> np.ndarray:
    c = np.arange(cfg.n_bands)
    return 10.0 ** (-cfg.spreading_db_per_band * np.abs(c[:, None] - c[None, :]) / 10.0)


def masking_threshold(reference: np.ndarray, cfg: NmrConfig = DEFAULT_NMR) -> np.ndarray:
    """Masking power per (frame, band) for ``reference``."""
    bands = band_matrix(cfg)
    power = np.abs(stft_frames(reference, cfg.fft_size, cfg.hop)) ** 2 @ bands
    mask = power @ _spreading(cfg).T * 10.0 ** (-cfg.offset_db / 10.0)
    full_scale = (cfg.fft_size / 4.0) ** 2  # bin power of a full-scale sine under Hann
    floor = full_scale * 10.0 ** (cfg.quiet_threshold_db / 10.0) * bands.sum(axis=0)
    return np.maximum(mask, floor)


def nmr_ratio_grad(reference: np.ndarray, degraded: np.ndarray, cfg: NmrConfig = DEFAULT_NMR,
                   mask: np.ndarray | None = None):
    """Mean noise-to-mask ratio over bands and frames, and its gradient w.r.t. ``degraded``."""
    if mask is None:
        mask = masking_threshold(reference, cfg)
    bands = band_matrix(cfg)
    z = stft_frames(degraded - reference, cfg.fft_size, cfg.hop)
    noise = np.abs(z) ** 2 @ bands
    value = float(np.mean(noise / mask))
    g_power = (1.0 / (mask * mask.size)) @ bands.T
    grad = stft_adjoint(2.0 * g_power * z, len(degraded), cfg.fft_size, cfg.hop)
    return value, grad


def nmr_ratio(reference, degraded, cfg: NmrConfig = DEFAULT_NMR) -> float:
    a, b = _pair(reference, degraded)
    return nmr_ratio_grad(a, b, cfg)[0]
