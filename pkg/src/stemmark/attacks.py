"""The 18-kind distortion catalog applied to mixtures before separation.

Each attack is a pure function of ``(buffer, AttackSpec)``. Parameters are drawn
by :func:`sample_attack_spec` from a Philox stream keyed by the seed and the
kind, and any randomness the transform itself needs (noise realizations, sample
positions) comes from a second stream keyed the same way, so a spec replays
bit-exactly anywhere.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.signal import fftconvolve, hilbert

from . import dsp
from .audio import AudioBuffer, istft_frames, stft_frames

KINDS = ("N", "PK", "SP", "AMP", "BST", "DK", "QT", "PHS",
         "LP", "BF", "SM", "SPAUG",
         "RS", "ECHO", "RV", "SPD", "PCH", "SPCH")

ECHO_DELAY_S = 0.1
ECHO_ALPHA = 0.3
SP_FRACTION = 0.001
AMP_FLOOR = 0.1
LP_Q = 0.707
RS_RATES = (16000, 22050, 24000, 32000)
QT_BITS = (8, 10, 12)
RV_TAIL_ENERGY = 0.5  # reverberant tail energy relative to the direct path
SPAUG_FFT = 2048
SPAUG_HOP = 512
SPAUG_MAX_MS = 50.0
SPAUG_MAX_HZ = 500.0
MAX_SEED = 2**64


class AttackCategory(enum.Enum):
    ORIGIN = "Origin"
    BASIC_NOISE = "BasicNoise"
    FILTER = "Filter"
    TIME_PITCH = "TimePitch"

    @property
    def members(self) -> tuple:
        return _MEMBERS[self]

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, name: str) -> "AttackCategory":
        key = name.replace("/", "").replace("_", "").replace("-", "").lower()
        for c in cls:
            if c.value.lower() == key:
                return c
        raise ValueError(f"unknown attack category {name!r}")


_MEMBERS = {
    AttackCategory.ORIGIN: (),
    AttackCategory.BASIC_NOISE: KINDS[:8],
    AttackCategory.FILTER: KINDS[8:12],
    AttackCategory.TIME_PITCH: KINDS[12:],
}
_LABELS = {
    AttackCategory.ORIGIN: "Origin",
    AttackCategory.BASIC_NOISE: "Basic/Noise",
    AttackCategory.FILTER: "Filter",
    AttackCategory.TIME_PITCH: "Time/Pitch",
}


def category_of(kind: str) -> AttackCategory:
    for c, members in _MEMBERS.items():
        if kind in members:
            return c
    raise ValueError(f"unknown attack kind {kind!r}")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0 <= int(self.seed) < MAX_SEED:
            raise ValueError("seed must fit in 64 bits")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": _jsonable(dict(self.params)), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttackSpec":
        """Accepts ``params: "sample"`` to draw parameters from ``seed``."""
        seed = int(d.get("seed", 0))
        params = d.get("params", "sample")
        if params == "sample":
            return sample_attack_spec(d["kind"], seed)
        spec = cls(d["kind"], dict(params), seed)
        validate_spec(spec)
        return spec


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _stream(seed: int, kind: str, purpose: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32, KINDS.index(kind), purpose])
    return np.random.Generator(np.random.Philox(ss))


def _stripes(rng, max_width):
    return [[float(rng.uniform()), float(rng.uniform(0.0, max_width))] for _ in range(int(rng.integers(1, 4)))]


def sample_attack_spec(kind: str, rng_seed: int) -> AttackSpec:
    """Draw the parameters of ``kind`` from its declared range."""
    if kind not in KINDS:
        raise ValueError(f"unknown attack kind {kind!r}")
    rng = _stream(rng_seed, kind, 0)
    if kind in ("N", "PK"):
        p = {"snr_db": float(rng.uniform(20.0, 40.0))}
    elif kind == "SP":
        p = {"fraction": SP_FRACTION}
    elif kind == "AMP":
        g = float(rng.uniform(-1.0, 1.0))
        if abs(g) < AMP_FLOOR:
            g = AMP_FLOOR if g >= 0 else -AMP_FLOOR
        p = {"gain": g}
    elif kind == "BST":
        p = {"gain": 1.2}
    elif kind == "DK":
        p = {"gain": 0.8}
    elif kind == "QT":
        p = {"bits": int(rng.choice(QT_BITS))}
    elif kind == "PHS":
        p = {"theta": float(rng.uniform(-np.pi, np.pi))}
    elif kind == "LP":
        p = {"cutoff_hz": float(rng.uniform(3000.0, 6000.0)), "q": LP_Q}
    elif kind == "BF":
        p = {"center_hz": float(rng.uniform(300.0, 4000.0)), "q": float(rng.uniform(0.7, 2.0))}
    elif kind == "SM":
        p = {"window": int(rng.integers(2, 11))}
    elif kind == "SPAUG":
        p = {"time_stripes": _stripes(rng, SPAUG_MAX_MS), "freq_stripes": _stripes(rng, SPAUG_MAX_HZ)}
    elif kind == "RS":
        p = {"rate": int(rng.choice(RS_RATES))}
    elif kind == "ECHO":
        p = {"delay_s": ECHO_DELAY_S, "alpha": ECHO_ALPHA}
    elif kind == "RV":
        p = {"rt60_s": float(rng.uniform(0.2, 0.6))}
    elif kind == "SPD":
        p = {"speed": float(rng.uniform(0.9, 1.1))}
    elif kind == "PCH":
        p = {"semitones": float(rng.uniform(-2.0, 2.0))}
    else:
        p = {"speed": float(rng.uniform(0.9, 1.1)), "semitones": float(rng.uniform(-2.0, 2.0))}
    return AttackSpec(kind, p, int(rng_seed))


def _require(cond, msg):
    if not cond:
        raise ValueError(msg)


def _in(p, name, lo, hi):
    try:
        v = float(p[name])
    except KeyError:
        raise ValueError(f"missing parameter {name!r}") from None
    _require(lo <= v <= hi, f"{name}={v} outside [{lo}, {hi}]")
    return v


def _check_stripes(stripes, max_width, name):
    _require(isinstance(stripes, (list, tuple)) and 1 <= len(stripes) <= 3, f"{name}: need 1-3 stripes")
    for s in stripes:
        _require(len(s) == 2 and 0.0 <= s[0] <= 1.0 and 0.0 <= s[1] <= max_width, f"{name}: bad stripe {s}")


def validate_spec(spec: AttackSpec) -> None:
    """Raise ValueError if any parameter lies outside the kind's declared range."""
    p, k = spec.params, spec.kind
    if k in ("N", "PK"):
        _in(p, "snr_db", 20.0, 40.0)
    elif k == "SP":
        _require(p.get("fraction") == SP_FRACTION, "SP fraction is fixed at 0.001")
    elif k == "AMP":
        g = _in(p, "gain", -1.0, 1.0)
        _require(abs(g) >= AMP_FLOOR, f"|gain| below {AMP_FLOOR}")
    elif k == "BST":
        _require(p.get("gain") == 1.2, "BST gain is fixed at 1.2")
    elif k == "DK":
        _require(p.get("gain") == 0.8, "DK gain is fixed at 0.8")
    elif k == "QT":
        _require(p.get("bits") in QT_BITS, f"bits must be one of {QT_BITS}")
    elif k == "PHS":
        _in(p, "theta", -np.pi, np.pi)
    elif k == "LP":
        _in(p, "cutoff_hz", 3000.0, 6000.0)
        _require(p.get("q") == LP_Q, f"LP q is fixed at {LP_Q}")
    elif k == "BF":
        _in(p, "center_hz", 300.0, 4000.0)
        _in(p, "q", 0.7, 2.0)
    elif k == "SM":
        w = p.get("window")
        _require(isinstance(w, (int, np.integer)) and 2 <= w <= 10, "window must be an integer in [2, 10]")
    elif k == "SPAUG":
        _check_stripes(p.get("time_stripes"), SPAUG_MAX_MS, "time_stripes")
        _check_stripes(p.get("freq_stripes"), SPAUG_MAX_HZ, "freq_stripes")
    elif k == "RS":
        _require(p.get("rate") in RS_RATES, f"rate must be one of {RS_RATES}")
    elif k == "ECHO":
        _require(p.get("delay_s") == ECHO_DELAY_S and p.get("alpha") == ECHO_ALPHA, "ECHO parameters are fixed")
    elif k == "RV":
        _in(p, "rt60_s", 0.2, 0.6)
    elif k == "SPD":
        _in(p, "speed", 0.9, 1.1)
    elif k == "PCH":
        _in(p, "semitones", -2.0, 2.0)
    else:
        _in(p, "speed", 0.9, 1.1)
        _in(p, "semitones", -2.0, 2.0)


def _noise_at_snr(x, noise, snr_db):
    px = np.mean(x**2)
    pn = np.mean(noise**2)
    if px == 0.0 or pn == 0.0:
        return x.copy()
    return x + noise * np.sqrt(px / pn * 10.0 ** (-snr_db / 10.0))


def _quantize(x, bits):
    levels = 2 ** (bits - 1) - 1
    return np.round(np.clip(x, -1.0, 1.0) * levels) / levels


def _spec_augment(x, p, sr):
    z = stft_frames(x, SPAUG_FFT, SPAUG_HOP)
    n_frames, n_bins = z.shape
    for start, width_ms in p["time_stripes"]:
        w = max(1, int(width_ms / 1000.0 * sr / SPAUG_HOP))
        s = min(int(start * n_frames), max(n_frames - w, 0))
        z[s:s + w] = 0.0
    bin_hz = sr / SPAUG_FFT
    for start, width_hz in p["freq_stripes"]:
        w = max(1, int(width_hz / bin_hz))
        s = min(int(start * n_bins), max(n_bins - w, 0))
        z[:, s:s + w] = 0.0
    return istft_frames(z, len(x), SPAUG_FFT, SPAUG_HOP)


def _reverb(x, rt60, sr, rng):
    n = int(rt60 * sr)
    t = np.arange(1, n) / sr
    tail = rng.standard_normal(n - 1) * 10.0 ** (-3.0 * t / rt60)  # -60 dB at t = rt60
    tail *= np.sqrt(RV_TAIL_ENERGY / np.sum(tail**2))
    h = np.concatenate([[1.0], tail])
    return fftconvolve(x, h)[: len(x)]


def _resample_round_trip(x, rate, sr):
    down = dsp.resample_rate(x, sr, rate)
    return dsp.fix_length(dsp.resample_rate(down, rate, sr), len(x))


def apply_attack(buffer: AudioBuffer, spec: AttackSpec) -> AudioBuffer:
    validate_spec(spec)
    x = buffer.samples
    sr = buffer.sample_rate
    p = spec.params
    k = spec.kind
    rng = _stream(spec.seed, k, 1)
    if k == "N":
        y = _noise_at_snr(x, rng.standard_normal(len(x)), p["snr_db"])
    elif k == "PK":
        pink = dsp.pink_noise(rng, len(x))
        y = _noise_at_snr(x, pink / (np.max(np.abs(pink)) + 1e-12), p["snr_db"])
    elif k == "SP":
        count = int(round(p["fraction"] * len(x)))
        y = x.copy()
        y[rng.choice(len(x), size=count, replace=False)] = 0.0
    elif k in ("AMP", "BST", "DK"):
        y = x * p["gain"]
    elif k == "QT":
        y = _quantize(x, p["bits"])
    elif k == "PHS":
        analytic = hilbert(x)
        y = np.real(analytic * np.exp(1j * p["theta"]))
    elif k == "LP":
        y = dsp.apply_biquad(x, dsp.biquad_lowpass(p["cutoff_hz"], p["q"], sr))
    elif k == "BF":
        y = dsp.apply_biquad(x, dsp.biquad_bandpass(p["center_hz"], p["q"], sr))
    elif k == "SM":
        w = int(p["window"])
        y = np.convolve(x, np.ones(w) / w, mode="same")
    elif k == "SPAUG":
        y = _spec_augment(x, p, sr)
    elif k == "RS":
        y = _resample_round_trip(x, p["rate"], sr)
    elif k == "ECHO":
        d = int(round(p["delay_s"] * sr))
        y = x.copy()
        y[d:] += p["alpha"] * x[: len(x) - d]
    elif k == "RV":
        y = _reverb(x, p["rt60_s"], sr, rng)
    elif k == "SPD":
        y = dsp.time_stretch(x, p["speed"])
    elif k == "PCH":
        y = dsp.pitch_shift(x, p["semitones"])
    else:
        y = dsp.time_stretch(dsp.pitch_shift(x, p["semitones"]), p["speed"])
    return AudioBuffer(np.nan_to_num(y, nan=0.0, posinf=0.0, neginf=0.0), sr)


def apply_category(buffer: AudioBuffer, category: AttackCategory, rng_seed: int):
    """Apply one uniformly drawn member of ``category``.

    Returns ``(buffer, spec)``; for Origin the buffer is returned as is and the
    spec is None, which reports render as the identity marker.
    """
    if category is AttackCategory.ORIGIN:
        return buffer, None
    members = category.members
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        [int(rng_seed) & 0xFFFFFFFF, int(rng_seed) >> 32, 99])))
    kind = members[int(rng.integers(len(members)))]
    spec = sample_attack_spec(kind, rng_seed)
    return apply_attack(buffer, spec), spec


@dataclass(frozen=True)
class AttackChain:
    """Attacks applied in order."""

    specs: tuple = ()

    def apply(self, buffer: AudioBuffer) -> AudioBuffer:
        for spec in self.specs:
            buffer = apply_attack(buffer, spec)
        return buffer

    @classmethod
    def from_config(cls, items) -> "AttackChain":
        """Build from ``[{"kind": ..., "params": {...} | "sample", "seed": ...}, ...]``."""
        return cls(tuple(AttackSpec.from_dict(d) for d in items))

    def to_config(self) -> list:
        return [s.to_dict() for s in self.specs]
