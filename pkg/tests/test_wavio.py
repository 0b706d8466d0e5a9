import struct
import warnings

import numpy as np
import pytest

from stemmark.audio import AudioBuffer
from stemmark.wavio import (MalformedHeaderError, TruncatedChunkError, UnsupportedEncodingError, read_wav,
                            write_wav)


def _wav_bytes(tag, channels, rate, bits, payload):
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * block, block, bits)
    body = b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body


def test_pcm16_scaling(tmp_path):
    p = tmp_path / "a.wav"
    p.write_bytes(_wav_bytes(1, 1, 44100, 16, np.array([0, 16384, -16384], "<i2").tobytes()))
    assert np.array_equal(read_wav(p).samples, [0.0, 0.5, -0.5])


def test_float32_round_trip_exact(tmp_path, rng):
    x = rng.uniform(-1, 1, 1000).astype(np.float32).astype(np.float64)
    p = tmp_path / "f.wav"
    write_wav(AudioBuffer(x, 22050), p)
    buf = read_wav(p)
    assert buf.sample_rate == 22050
    assert np.array_equal(buf.samples, x)


def test_pcm16_and_pcm24_storage(tmp_path):
    p = tmp_path / "p.wav"
    write_wav(AudioBuffer([0.5, -0.25]), p, "pcm16")
    raw = p.read_bytes()
    assert np.frombuffer(raw[-4:], "<i2").tolist() == [16384, -8192]
    write_wav(AudioBuffer([0.5, -0.25, 0.1]), p, "pcm24")
    assert np.allclose(read_wav(p).samples, [0.5, -0.25, 0.1], atol=2**-23)


def test_clip_counter(tmp_path):
    p = tmp_path / "c.wav"
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        clipped = write_wav(AudioBuffer([1.7, 0.0]), p, "pcm16")
    assert clipped == 1 and w
    assert np.frombuffer(p.read_bytes()[-4:], "<i2")[0] == 32767


def test_stereo_averaged(tmp_path):
    p = tmp_path / "s.wav"
    frames = np.array([[16384, 0], [-16384, -16384]], "<i2")
    p.write_bytes(_wav_bytes(1, 2, 44100, 16, frames.tobytes()))
    assert np.array_equal(read_wav(p).samples, [0.25, -0.5])


def test_error_variants(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_wav(tmp_path / "missing.wav")
    p = tmp_path / "zero.wav"
    p.write_bytes(_wav_bytes(1, 0, 44100, 16, b""))
    with pytest.raises(MalformedHeaderError):
        read_wav(p)
    p.write_bytes(_wav_bytes(1, 1, 44100, 8, b"\x00\x01"))
    with pytest.raises(UnsupportedEncodingError):
        read_wav(p)
    good = _wav_bytes(1, 1, 44100, 16, np.zeros(100, "<i2").tobytes())
    p.write_bytes(good[:-50])
    with pytest.raises(TruncatedChunkError):
        read_wav(p)
    p.write_bytes(b"RIFX" + good[4:])
    with pytest.raises(MalformedHeaderError):
        read_wav(p)
    with pytest.raises(UnsupportedEncodingError):
        write_wav(AudioBuffer([0.0]), p, "mp3")
