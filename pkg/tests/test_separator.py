import numpy as np
import pytest
from scipy.signal import butter, sosfiltfilt

from stemmark.audio import AudioBuffer, istft_frames, stft_frames
from stemmark.metrics import si_snr_db
from stemmark.separator import (AdamState, SeparatorConfig, SeparatorModel, learnable_separate,
                                oracle_mask_separate, separate, separator_backward, separator_forward,
                                update_separator)

SR = 44100
SMALL = SeparatorConfig(fft_size=512, hop=128, hidden=8, context=1)


def _band(rng, n, lo, hi):
    x = rng.standard_normal(n)
    if lo is None:
        sos = butter(8, hi, btype="lowpass", fs=SR, output="sos")
    elif hi is None:
        sos = butter(8, lo, btype="highpass", fs=SR, output="sos")
    else:
        sos = butter(8, [lo, hi], btype="bandpass", fs=SR, output="sos")
    return sosfiltfilt(sos, x)


def test_oracle_band_disjoint_stems(rng):
    a = AudioBuffer(_band(rng, SR, None, 2000.0))
    b = AudioBuffer(_band(rng, SR, 4000.0, None))
    mix = a.with_samples(a.samples + b.samples)
    out = oracle_mask_separate(mix, (a, b))
    assert len(out.stems) == 2
    assert si_snr_db(a, out.stems[0]) > 30 and si_snr_db(b, out.stems[1]) > 30
    total = out.stems[0].samples + out.stems[1].samples
    assert np.sqrt(np.mean((total - mix.samples) ** 2)) <= 1e-3


def test_oracle_single_active_stem(rng):
    a = AudioBuffer(rng.standard_normal(SR))
    silent = AudioBuffer(np.zeros(SR))
    out = oracle_mask_separate(a, (a, silent))
    assert si_snr_db(a, out.stems[0]) > 30
    assert np.sqrt(np.mean(out.stems[1].samples ** 2)) < 1e-3


def test_oracle_identical_references_give_half_masks(rng):
    a = AudioBuffer(rng.standard_normal(8192))
    out = oracle_mask_separate(a, (a, a))
    assert np.array_equal(out.masks[0], out.masks[1])
    power = np.abs(stft_frames(a.samples)) ** 2
    # p / (2p + eps) falls short of 0.5 by at most eps / (4p)
    assert np.all(np.abs(out.masks[0] - 0.5) <= 1e-8 / (4 * power) + 1e-15)
    assert np.all(out.masks[0] + out.masks[1] <= 1.0)


def test_oracle_errors(rng):
    a = AudioBuffer(rng.standard_normal(1000))
    with pytest.raises(ValueError):
        oracle_mask_separate(a, (a, AudioBuffer(np.zeros(999))))
    with pytest.raises(ValueError):
        oracle_mask_separate(a, (a, AudioBuffer(np.zeros(1000), 22050)))
    with pytest.raises(ValueError):
        separate(SeparatorModel.oracle(), a)


def test_learnable_output_contract(rng):
    model = SeparatorModel.init_learnable(seed=3)
    mix = AudioBuffer(rng.standard_normal(20000))
    out = learnable_separate(model, mix)
    assert len(out.stems) == 2 and all(len(s) == len(mix) for s in out.stems)
    assert np.all(np.isfinite(out.stems[0].samples))
    assert out.masks[0].min() >= 0 and out.masks[0].max() <= 1
    assert np.array_equal(out.masks[0] + out.masks[1], np.ones_like(out.masks[0]))
    z = stft_frames(mix.samples)
    assert np.allclose(out.stems[0].samples, istft_frames(out.masks[0] * z, len(mix)))
    again = learnable_separate(model, mix)
    assert np.array_equal(again.stems[1].samples, out.stems[1].samples)
    with pytest.raises(ValueError):
        learnable_separate(model, AudioBuffer(np.zeros(4000), 22050))
    with pytest.raises(ValueError):
        learnable_separate(SeparatorModel.oracle(), mix)


def _l1_sep(model, x, t1, t2):
    s1, s2, cache = separator_forward(model, x)
    loss = np.mean(np.abs(s1 - t1)) + np.mean(np.abs(s2 - t2))
    g1, g2 = np.sign(s1 - t1) / len(x), np.sign(s2 - t2) / len(x)
    return loss, cache, g1, g2


def test_gradients_match_finite_differences(rng):
    model = SeparatorModel.init_learnable(SMALL, seed=1)
    n = 3000
    x = rng.standard_normal(n)
    t1, t2 = 0.5 * x + 0.1 * rng.standard_normal(n), 0.5 * x
    # smooth quadratic loss so the check is not dominated by L1 kinks
    s1, s2, cache = separator_forward(model, x)
    grad_w, grad_x = separator_backward(model, cache, s1 - t1, s2 - t2)

    def loss(m, xx):
        a, b, _ = separator_forward(m, xx)
        return 0.5 * np.sum((a - t1) ** 2) + 0.5 * np.sum((b - t2) ** 2)

    for i in rng.choice(model.weights.size, 20, replace=False):
        h = 1e-5
        wp, wm = model.weights.copy(), model.weights.copy()
        wp[i] += h
        wm[i] -= h
        fd = (loss(model.with_weights(wp), x) - loss(model.with_weights(wm), x)) / (2 * h)
        assert abs(fd - grad_w[i]) <= 1e-3 * abs(fd) + 1e-6
    for i in rng.choice(n, 5, replace=False):
        h = 1e-6
        e = np.zeros(n)
        e[i] = h
        fd = (loss(model, x + e) - loss(model, x - e)) / (2 * h)
        assert abs(fd - grad_x[i]) <= 1e-3 * abs(fd) + 1e-6


def test_adam_zero_gradient_and_rejections():
    state = AdamState(4, lr=0.1)
    w = np.arange(4.0)
    assert np.array_equal(state.update(w, np.zeros(4)), w)
    with pytest.raises(FloatingPointError):
        state.update(w, np.array([0, np.nan, 0, 0]))
    with pytest.raises(ValueError):
        state.update(w, np.zeros(3))
    model = SeparatorModel.init_learnable(SMALL, seed=0)
    with pytest.raises(FloatingPointError):
        update_separator(model, np.full(model.weights.size, np.inf), AdamState(model.weights.size))


def test_updates_decrease_separator_loss(rng):
    model = SeparatorModel.init_learnable(SMALL, seed=2)
    n = 4000
    a = _band(rng, n, None, 1500.0)
    b = _band(rng, n, 3000.0, None)
    x = a + b
    state = AdamState(model.weights.size, lr=1e-3)
    losses = []
    for _ in range(100):
        loss, cache, g1, g2 = _l1_sep(model, x, a, b)
        losses.append(loss)
        grad_w, _ = separator_backward(model, cache, g1, g2, need_input_grad=False)
        model = update_separator(model, grad_w, state)
    assert losses[-1] < losses[0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_checkpoint_round_trip(tmp_path):
    model = SeparatorModel.init_learnable(SMALL, seed=4)
    model.save(tmp_path / "s.ckpt")
    back = SeparatorModel.load(tmp_path / "s.ckpt")
    assert back.config == model.config and np.array_equal(back.weights, model.weights)
    with pytest.raises(ValueError):
        SeparatorModel.oracle().save(tmp_path / "o.ckpt")
    with pytest.raises(ValueError):
        SeparatorModel("learnable", SMALL, np.zeros(3))
