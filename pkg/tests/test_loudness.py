import numpy as np
import pytest
from scipy.signal import freqz

from stemmark.audio import AudioBuffer
from stemmark.loudness import (SilentAudioError, TooShortError, k_weighting_filters, loudness_gain,
                               measure_integrated_lufs, normalize_to_lufs)

from conftest import sine

# coefficients as tabulated in ITU-R BS.1770-4 for 48 kHz
SHELF_48K = ([1.53512485958697, -2.69169618940638, 1.19839281085285], [1.0, -1.69065929318241, 0.73248077421585])
HP_48K = ([1.0, -2.0, 1.0], [1.0, -1.99004745483398, 0.99007225036621])


def _oracle_sine_lufs(freq, amp=1.0):
    """Steady sine through the tabulated filters: -0.691 + 10 log10(mean square)."""
    gain2 = 1.0
    for b, a in (SHELF_48K, HP_48K):
        _, h = freqz(b, a, worN=[freq], fs=48000)
        gain2 *= abs(h[0]) ** 2
    return -0.691 + 10 * np.log10(0.5 * amp**2 * gain2)


def test_filters_reproduce_tabulated_48k_coefficients():
    (sb, sa), (hb, ha) = k_weighting_filters(48000)
    assert np.allclose(sb, SHELF_48K[0], atol=1e-9) and np.allclose(sa, SHELF_48K[1], atol=1e-9)
    assert np.allclose(hb, HP_48K[0]) and np.allclose(ha, HP_48K[1], atol=1e-9)


def test_full_scale_997hz_sine():
    oracle = _oracle_sine_lufs(997.0)
    assert abs(oracle - (-3.01)) < 0.05
    measured = measure_integrated_lufs(sine(997.0, 3.0)).integrated_lufs
    assert abs(measured - (-3.01)) <= 0.1
    assert abs(measured - oracle) <= 0.05


@pytest.mark.parametrize("freq", [100.0, 2000.0, 8000.0])
def test_sines_match_oracle_at_44k(freq):
    measured = measure_integrated_lufs(sine(freq, 3.0, 0.3)).integrated_lufs
    assert abs(measured - _oracle_sine_lufs(freq, 0.3)) <= 0.05


def test_half_amplitude_is_minus_6db(music):
    a = measure_integrated_lufs(music).integrated_lufs
    b = measure_integrated_lufs(music.with_samples(0.5 * music.samples)).integrated_lufs
    assert abs((a - b) - 6.02) <= 0.05


def test_silence_and_short_inputs():
    res = measure_integrated_lufs(AudioBuffer(np.zeros(44100)))
    assert res.silent and res.integrated_lufs is None
    with pytest.raises(SilentAudioError):
        normalize_to_lufs(AudioBuffer(np.zeros(44100)))
    with pytest.raises(TooShortError):
        measure_integrated_lufs(AudioBuffer(np.ones(1000)))


def test_normalize_default_target_and_gain():
    x = sine(997.0, 3.0)
    assert abs(20 * np.log10(loudness_gain(x)) - (-16.0 + 3.01)) <= 0.1
    y = normalize_to_lufs(x)
    assert abs(measure_integrated_lufs(y).integrated_lufs + 16.0) <= 0.1
    assert abs(loudness_gain(x) - 0.224) < 0.003


def test_idempotent_and_gain_linear(music):
    once = normalize_to_lufs(music, -20.0)
    twice = normalize_to_lufs(once, -20.0)
    assert np.max(np.abs(twice.samples / once.samples - 1)[np.abs(once.samples) > 1e-9]) <= 10 ** (0.1 / 20) - 1
    scaled = normalize_to_lufs(music.with_samples(3.7 * music.samples), -20.0)
    assert np.max(np.abs(scaled.samples - once.samples)) <= 1e-6
