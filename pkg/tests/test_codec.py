import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stemmark.audio import AudioBuffer, istft_frames, stft_frames
from stemmark.codec import (DEFAULT_CODEC, N_BITS, Payload, ReferenceCodec, WatermarkKey, decode_segment,
                            derive_pattern_bank, embed_segment, read_key_file, read_payload_file,
                            write_key_file, write_payload_file)
from stemmark.metrics import bit_error_rate, snr_db
from stemmark.synth import music_fixture


def _key(i):
    return WatermarkKey(np.random.default_rng(1000 + i).integers(0, 256, 32, dtype=np.uint8).tobytes())


@pytest.fixture(scope="module")
def carriers():
    return [music_fixture(s) for s in range(4)]


def test_key_and_payload_types(tmp_path):
    with pytest.raises(ValueError):
        WatermarkKey(b"short")
    with pytest.raises(ValueError):
        Payload((0, 1) * 15)
    with pytest.raises(ValueError):
        Payload((2,) * 32)
    key = _key(0)
    payload = Payload.random(np.random.default_rng(0))
    write_key_file(key, tmp_path / "k.txt")
    write_payload_file(payload, tmp_path / "b.txt")
    assert len((tmp_path / "k.txt").read_text().strip()) == 64
    assert read_key_file(tmp_path / "k.txt") == key
    assert read_payload_file(tmp_path / "b.txt") == payload
    assert np.array_equal(payload.signs, 2 * payload.array - 1)


def test_pattern_bank_determinism_and_shape():
    a = derive_pattern_bank(_key(1))
    b = derive_pattern_bank(WatermarkKey(_key(1).key_bytes))
    assert a.patterns.shape == (N_BITS, DEFAULT_CODEC.n_frames, DEFAULT_CODEC.fft_size // 2 + 1)
    assert np.array_equal(a.patterns, b.patterns)
    assert set(np.unique(a.patterns).tolist()) == {-1, 1}


def test_pattern_banks_quasi_orthogonal():
    pa = derive_pattern_bank(_key(2))
    pb = derive_pattern_bank(_key(3))
    band = pa.band_mask.astype(bool)
    rows = np.concatenate([pa.dense[:, :, band], pb.dense[:, :, band]]).reshape(2 * N_BITS, -1)
    assert rows.shape[1] >= 10**4
    rho = rows @ rows.T / rows.shape[1]
    np.fill_diagonal(rho, 0.0)
    assert np.max(np.abs(rho)) < 0.05


def test_band_mask_limits():
    f = DEFAULT_CODEC.geometry.bin_frequencies()
    mask = derive_pattern_bank(_key(0)).band_mask
    assert np.all(mask[(f < 300) | (f > 10000)] == 0)
    assert mask.sum() > 0


def test_zero_gamma_is_round_trip_identity(carriers):
    x = carriers[0]
    out = embed_segment(x, _key(0), Payload((1,) * 32), strength=0.0)
    rt = istft_frames(stft_frames(x.samples), len(x))
    assert np.max(np.abs(out.samples - rt)) <= 1e-12
    assert np.max(np.abs(out.samples - x.samples)) <= 1e-4


def test_embed_decode_round_trip(carriers):
    rng = np.random.default_rng(5)
    for i, x in enumerate(carriers):
        payload = Payload.random(rng)
        wm = embed_segment(x, _key(i), payload)
        assert len(wm) == 88200
        decoded, scores = decode_segment(wm, _key(i))
        assert decoded == payload
        assert snr_db(x, wm) >= 25.0
        wrong, _ = decode_segment(wm, _key(i + 50))
        assert 0.1 <= bit_error_rate(payload, wrong) <= 0.9


def test_wrong_length_rejected():
    with pytest.raises(ValueError):
        embed_segment(AudioBuffer(np.zeros(1000)), _key(0), Payload((0,) * 32))
    with pytest.raises(ValueError):
        decode_segment(AudioBuffer(np.zeros(1000)), _key(0))


def test_perturbation_is_band_limited(carriers):
    x = carriers[1]
    wm = embed_segment(x, _key(1), Payload.random(np.random.default_rng(1)))
    d = np.fft.rfft(wm.samples - x.samples)
    f = np.fft.rfftfreq(len(x), 1 / 44100)
    outside = np.sum(np.abs(d[(f < 300) | (f > 10000)]) ** 2)
    assert outside <= 0.01 * np.sum(np.abs(d) ** 2)


def test_key_isolation_two_stems(carriers):
    a, b = carriers[2], carriers[3]
    pa, pb = Payload.random(np.random.default_rng(2)), Payload.random(np.random.default_rng(3))
    wa, wb = embed_segment(a, _key(10), pa), embed_segment(b, _key(11), pb)
    assert decode_segment(wa, _key(10))[0] == pa
    assert decode_segment(wb, _key(11))[0] == pb
    cross = [bit_error_rate(pa, decode_segment(wa, _key(11))[0]), bit_error_rate(pb, decode_segment(wb, _key(10))[0])]
    assert 0.15 <= np.mean(cross) <= 0.85


def test_ber_non_increasing_in_gamma(carriers):
    x = carriers[0]
    payload = Payload.random(np.random.default_rng(9))
    rng = np.random.default_rng(0)
    noise = rng.standard_normal(len(x))
    for snr in (0.0, 5.0, 10.0):
        scaled = noise * np.sqrt(np.mean(x.samples**2) / np.mean(noise**2) * 10 ** (-snr / 10))
        bers = []
        for gamma in (0.05, 0.2, 0.5):
            wm = embed_segment(x, _key(4), payload, strength=gamma)
            bers.append(bit_error_rate(payload, decode_segment(wm.with_samples(wm.samples + scaled), _key(4))[0]))
        assert bers[0] >= bers[1] >= bers[2], (snr, bers)


def test_reference_codec_interface(carriers):
    codec = ReferenceCodec()
    payload = Payload.random(np.random.default_rng(4))
    wm = codec.embed(carriers[0], _key(5), payload)
    assert codec.decode(wm, _key(5))[0] == payload


@settings(max_examples=8, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=32, max_size=32), st.integers(0, 2**31))
def test_round_trip_property(bits, seed):
    x = music_fixture(seed % 50)
    key = WatermarkKey.random(np.random.default_rng(seed))
    payload = Payload(tuple(bits))
    assert decode_segment(embed_segment(x, key, payload), key)[0] == payload


@pytest.mark.xfail(strict=True, reason="at the strength that keeps SNR >= 25 dB the measured ratio is about 1.6; "
                                       "a target margin reaching 3 drops the worst-case SNR to about 22.5 dB")
def test_unwatermarked_scores_three_times_smaller():
    rng = np.random.default_rng(0)
    marked, unmarked = [], []
    for i in range(20):
        x = music_fixture(100 + i)
        key, payload = WatermarkKey.random(rng), Payload.random(rng)
        marked.append(np.abs(decode_segment(embed_segment(x, key, payload), key)[1]))
        unmarked.append(np.abs(decode_segment(x, key)[1]))
    assert np.mean(marked) >= 3 * np.mean(unmarked)
