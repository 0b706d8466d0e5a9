"""Minimal RIFF/WAVE reader and writer (PCM16, PCM24, float32)."""
from __future__ import annotations

import struct
import warnings
from pathlib import Path

import numpy as np

from .audio import AudioBuffer

ENCODINGS = ("pcm16", "pcm24", "float32")

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Base class for WAV parsing failures."""


class MalformedHeaderError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class TruncatedChunkError(WavError):
    pass


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise TruncatedChunkError(f"chunk {cid!r} declares {size} bytes, {len(body)} present")
        yield cid, body
        pos += 8 + size + (size & 1)
    if pos < len(data) and data[pos:].strip(b"\x00"):
        raise TruncatedChunkError("trailing bytes shorter than a chunk header")


def read_wav(path) -> AudioBuffer:
    """Read a WAV file as a mono float buffer in [-1, 1].

    Multichannel audio is averaged to mono. Raises ``FileNotFoundError`` for a
    missing file and a ``WavError`` subclass for anything the parser rejects.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeaderError("not a RIFF/WAVE file")
    fmt = None
    pcm = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedHeaderError("fmt chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _EXTENSIBLE and len(body) >= 26:
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            pcm = body
    if fmt is None:
        raise MalformedHeaderError("missing fmt chunk")
    if pcm is None:
        raise TruncatedChunkError("missing data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels == 0:
        raise MalformedHeaderError("header declares 0 channels")
    if rate == 0:
        raise MalformedHeaderError("header declares 0 Hz sample rate")
    if block_align != channels * (bits // 8):
        raise MalformedHeaderError(f"block_align {block_align} inconsistent with {channels}ch/{bits}bit")

    usable = len(pcm) - len(pcm) % block_align
    if tag == _PCM and bits == 16:
        x = np.frombuffer(pcm[:usable], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _PCM and bits == 24:
        raw = np.frombuffer(pcm[:usable], dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    elif tag == _FLOAT and bits == 32:
        x = np.frombuffer(pcm[:usable], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"format tag {tag:#x} with {bits} bits per sample")
    x = x.reshape(-1, channels)
    mono = x[:, 0] if channels == 1 else x.mean(axis=1)
    return AudioBuffer(mono, rate)


def write_wav(buffer: AudioBuffer, path, encoding: str = "float32") -> int:
    """Write ``buffer`` as mono WAV; returns the number of hard-clipped samples.

    Clipping only happens for PCM encodings; a warning is emitted when it does.
    """
    if encoding not in ENCODINGS:
        raise UnsupportedEncodingError(f"unknown encoding {encoding!r}")
    x = buffer.samples
    clipped = 0
    if encoding == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    else:
        clipped = int(np.count_nonzero((x > 1.0) | (x < -1.0)))
        x = np.clip(x, -1.0, 1.0)
        if encoding == "pcm16":
            q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
            payload, bits = q.tobytes(), 16
        else:
            q = np.clip(np.round(x * 8388608.0), -8388608, 8388607).astype(np.int32)
            q = q & 0xFFFFFF
            b = np.stack([q & 0xFF, (q >> 8) & 0xFF, (q >> 16) & 0xFF], axis=1).astype(np.uint8)
            payload, bits = b.tobytes(), 24
        tag = _PCM
        if clipped:
            warnings.warn(f"{clipped} samples clipped to [-1, 1] while writing {path}", stacklevel=2)
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, buffer.sample_rate, buffer.sample_rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        chunks += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)
    return clipped
