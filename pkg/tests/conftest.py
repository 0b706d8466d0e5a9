import numpy as np
import pytest

from stemmark.audio import AudioBuffer
from stemmark.synth import music_fixture


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def music():
    return music_fixture(7)


def sine(freq, seconds=3.0, amp=1.0, sr=44100):
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), sr)
