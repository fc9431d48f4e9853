#!/usr/bin/env python3
"""
Unit tests for signal_core.py

Covers framing, reconstruction, masks, compression, the training loss and its
gradient, sorted reductions and WAV I/O.
"""

import logging
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest
import soundfile as sf

from signal_core import (
    ComplexMask,
    ComplexSpectrogram,
    FrameConfig,
    WavFormatError,
    apply_mask,
    istft,
    loss_plcpa,
    ordered_mean,
    ordered_sum,
    power_law_compress,
    read_wav,
    stft,
    write_wav,
)

logging.basicConfig(level=logging.WARNING)

CFG = FrameConfig()


@pytest.fixture
def temp_dir():
    """Create a temporary directory for WAV files."""
    d = Path(tempfile.mkdtemp(prefix='test_signal_core_'))
    yield d
    shutil.rmtree(d, ignore_errors=True)


def _interior(cfg: FrameConfig, length: int) -> slice:
    return slice(cfg.warmup_samples, length - cfg.warmup_samples)


# FrameConfig

def test_default_frame_config_has_257_bins():
    assert CFG.n_bins == 257
    assert CFG.overlap_factor == 2
    assert CFG.warmup_samples == 256


@pytest.mark.parametrize("kwargs", [
    {'hop_len': 300},
    {'fft_len': 256},
    {'window': 'boxcar'},
    {'hop_len': 0},
])
def test_frame_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        FrameConfig(**kwargs)


def test_frame_config_dict_round_trip():
    cfg = FrameConfig(window_len=256, hop_len=128, fft_len=256)
    assert FrameConfig.from_dict(cfg.to_dict()) == cfg


def test_squared_taper_overlap_adds_to_constant():
    squared = CFG.taper() ** 2
    folded = squared.reshape(CFG.overlap_factor, CFG.hop_len).sum(axis=0)
    np.testing.assert_allclose(folded, CFG.ola_gain(), rtol=1e-12)


# stft / istft

def test_stft_frame_count_and_causal_framing():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(4000)
    spec = stft(x, CFG)
    assert spec.n_frames == (4000 - 512) // 256 + 1
    assert spec.n_bins == 257
    t = 5
    expected = np.fft.rfft(x[t * 256:t * 256 + 512] * CFG.taper(), n=512)
    np.testing.assert_allclose(spec.data[0, :, t], expected, rtol=1e-12, atol=1e-12)


def test_stft_rejects_short_input():
    with pytest.raises(ValueError, match="input too short"):
        stft(np.zeros(100), CFG)


def test_stft_of_zeros_is_zero():
    spec = stft(np.zeros(2048), CFG)
    assert not np.any(spec.data)


def test_stft_concentrates_bin_center_cosine():
    k = 20
    n = np.arange(8000)
    x = np.cos(2 * np.pi * k * n / CFG.fft_len)
    power = np.abs(stft(x, CFG).data[0]) ** 2
    near = power[k - 2:k + 3].sum(axis=0)
    assert np.all(near / power.sum(axis=0) >= 0.99)


def test_stft_float32_input_gives_complex64():
    spec = stft(np.zeros(1024, dtype=np.float32), CFG)
    assert spec.data.dtype == np.complex64


def test_multichannel_stft_shares_dimensions():
    x = np.random.default_rng(1).standard_normal((3, 3000))
    spec = stft(x, CFG)
    assert spec.n_streams == 3
    np.testing.assert_allclose(spec.stream(2).data[0], stft(x[2], CFG).data[0])


def test_istft_output_length():
    spec = stft(np.random.default_rng(2).standard_normal(5000), CFG)
    y = istft(spec)
    assert len(y) == (spec.n_frames - 1) * CFG.hop_len + CFG.window_len


@pytest.mark.parametrize("seconds", [0.5, 1.0])
def test_round_trip_reconstructs_interior(seconds):
    x = np.random.default_rng(3).standard_normal(int(seconds * 16000))
    y = istft(stft(x, CFG))
    inner = _interior(CFG, len(y))
    error = np.max(np.abs(y[inner] - x[:len(y)][inner])) / np.max(np.abs(x))
    assert error < 1e-6


def test_round_trip_with_small_frames():
    cfg = FrameConfig(window_len=32, hop_len=16, fft_len=32)
    x = np.random.default_rng(4).standard_normal(1000)
    y = istft(stft(x, cfg))
    inner = _interior(cfg, len(y))
    np.testing.assert_allclose(y[inner], x[:len(y)][inner], atol=1e-10)


def test_istft_is_linear():
    rng = np.random.default_rng(5)
    x1, x2 = rng.standard_normal(16000), rng.standard_normal(16000)
    combined = ComplexSpectrogram(stft(x1, CFG).data + stft(x2, CFG).data, CFG)
    y = istft(combined)
    inner = _interior(CFG, len(y))
    np.testing.assert_allclose(y[inner], (x1 + x2)[:len(y)][inner], atol=1e-9)


def test_istft_of_zeros_is_zero():
    spec = ComplexSpectrogram(np.zeros((1, 257, 10), dtype=np.complex128), CFG)
    assert not np.any(istft(spec))


def test_istft_rejects_bin_mismatch():
    other = FrameConfig(window_len=256, hop_len=128, fft_len=256)
    with pytest.raises(ValueError):
        istft(np.zeros((1, 257, 4), dtype=np.complex128), other)


# masks

def _random_spec(shape=(1, 257, 12), seed=6):
    rng = np.random.default_rng(seed)
    return ComplexSpectrogram(rng.standard_normal(shape) + 1j * rng.standard_normal(shape), CFG)


def _random_complex(shape, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_identity_mask_returns_input():
    spec = _random_spec()
    out = apply_mask(spec, ComplexMask(np.ones((257, 12), dtype=np.complex128)))
    np.testing.assert_array_equal(out.data, spec.data)


def test_quarter_turn_mask_rotates_phase():
    spec = _random_spec()
    out = apply_mask(spec, ComplexMask(np.full((257, 12), 1j)))
    np.testing.assert_allclose(np.abs(out.data), np.abs(spec.data))
    np.testing.assert_allclose(out.data, spec.data * 1j)


def test_ideal_complex_mask_recovers_target():
    rng = np.random.default_rng(7)
    s = rng.standard_normal((257, 12)) + 1j * rng.standard_normal((257, 12))
    n = rng.standard_normal((257, 12)) + 1j * rng.standard_normal((257, 12))
    y = s + n
    mask = ComplexMask(s / y)
    out = apply_mask(ComplexSpectrogram(y, CFG), mask)
    np.testing.assert_allclose(out.data[0], s, rtol=1e-10)


def test_apply_mask_is_bilinear():
    spec = _random_spec()
    mask = ComplexMask(_random_spec(seed=8).data[0])
    a = 0.7 - 1.3j
    left = apply_mask(ComplexSpectrogram(a * spec.data, CFG), mask).data
    right = a * apply_mask(spec, mask).data
    np.testing.assert_allclose(left, right, rtol=1e-12)


def test_apply_mask_shape_mismatch():
    with pytest.raises(ValueError):
        apply_mask(_random_spec(), ComplexMask(np.ones((257, 11))))


def test_mask_rejects_non_finite():
    data = np.ones((4, 4), dtype=np.complex128)
    data[1, 2] = np.nan
    with pytest.raises(ValueError):
        ComplexMask(data)


# compression and loss

def test_compression_examples():
    z = np.array([4 + 0j, 0j, -9 + 0j])
    np.testing.assert_allclose(power_law_compress(z, 0.5), [2 + 0j, 0j, -3 + 0j])
    np.testing.assert_allclose(power_law_compress(z, 1.0), z)
    assert power_law_compress(np.array([0j]), 0.3)[0] == 0


def test_compression_rejects_bad_exponent():
    with pytest.raises(ValueError):
        power_law_compress(np.ones(3, dtype=complex), 1.5)


def test_loss_zero_for_identical():
    spec = _random_complex((4, 8), 16)
    loss, grad = loss_plcpa(spec, spec)
    assert loss == pytest.approx(0.0, abs=1e-20)
    assert np.allclose(grad, 0)


def test_magnitude_term_ignores_phase():
    rng = np.random.default_rng(9)
    mag = rng.uniform(0.1, 2.0, (4, 8))
    est = mag * np.exp(1j * rng.uniform(-np.pi, np.pi, (4, 8)))
    ref = mag * np.exp(1j * rng.uniform(-np.pi, np.pi, (4, 8)))
    loss, _ = loss_plcpa(est, ref, weight=0.0)
    assert loss < 1e-20


def test_loss_positive_when_compressed_differ():
    est, ref = _random_complex((4, 8), 10), _random_complex((4, 8), 11)
    loss, _ = loss_plcpa(est, ref, weight=0.5)
    assert loss > 0


@pytest.mark.parametrize("exponent,weight", [(0.3, 0.5), (0.5, 0.0), (1.0, 1.0), (0.3, 1.0)])
def test_loss_gradient_matches_finite_differences(exponent, weight):
    rng = np.random.default_rng(12)
    est = rng.standard_normal((4, 8)) + 1j * rng.standard_normal((4, 8))
    est[np.abs(est) < 0.1] += 0.5
    ref = rng.standard_normal((4, 8)) + 1j * rng.standard_normal((4, 8))
    _, grad = loss_plcpa(est, ref, exponent, weight)

    h = 1e-6
    numeric = np.zeros_like(est)
    for idx in np.ndindex(est.shape):
        for unit in (1.0, 1j):
            plus, minus = est.copy(), est.copy()
            plus[idx] += h * unit
            minus[idx] -= h * unit
            diff = (loss_plcpa(plus, ref, exponent, weight)[0] - loss_plcpa(minus, ref, exponent, weight)[0]) / (2 * h)
            numeric[idx] += diff * unit
    rel = np.linalg.norm(grad - numeric) / np.linalg.norm(numeric)
    assert rel < 1e-4


def test_loss_gradient_zero_at_zero_bins():
    est = np.zeros((2, 3), dtype=np.complex128)
    ref = np.ones((2, 3), dtype=np.complex128)
    loss, grad = loss_plcpa(est, ref)
    assert np.isfinite(loss)
    assert np.all(grad == 0)


def test_loss_rejects_mismatch_and_bad_weight():
    with pytest.raises(ValueError):
        loss_plcpa(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        loss_plcpa(np.ones((2, 2)), np.ones((2, 2)), weight=1.5)


# sorted reductions

def test_ordered_sum_is_permutation_exact():
    rng = np.random.default_rng(13)
    values = (rng.standard_normal((7, 50)) + 1j * rng.standard_normal((7, 50))) * 10.0 ** rng.integers(-6, 6, (7, 1))
    order = rng.permutation(7)
    np.testing.assert_array_equal(ordered_sum(values, 0), ordered_sum(values[order], 0))
    np.testing.assert_array_equal(ordered_mean(values, 0), ordered_mean(values[order], 0))


def test_ordered_mean_matches_mean():
    values = np.random.default_rng(14).standard_normal((5, 9)).astype(np.float32)
    np.testing.assert_allclose(ordered_mean(values, 0), values.mean(axis=0), rtol=1e-5)
    assert ordered_mean(values, 0).dtype == np.float32


# WAV I/O

@pytest.mark.parametrize("subtype,atol", [('FLOAT', 0.0), ('PCM_16', 2.0 / 32768)])
def test_wav_round_trip(temp_dir, subtype, atol):
    x = (np.random.default_rng(15).uniform(-0.5, 0.5, (3, 1600))).astype(np.float32)
    path = temp_dir / f"{subtype}.wav"
    write_wav(path, x, subtype=subtype)
    wave = read_wav(path)
    assert wave.n_channels == 3
    assert wave.n_samples == 1600
    np.testing.assert_allclose(wave.samples, x, atol=atol)


def test_read_wav_rejects_other_rate(temp_dir):
    path = temp_dir / "8k.wav"
    sf.write(str(path), np.zeros(800, dtype=np.float32), 8000)
    with pytest.raises(WavFormatError, match="8000"):
        read_wav(path)


def test_read_wav_rejects_garbage(temp_dir):
    path = temp_dir / "broken.wav"
    path.write_bytes(b"RIFF\x00\x00not really a wave file")
    with pytest.raises(WavFormatError):
        read_wav(path)


def test_read_wav_missing_file(temp_dir):
    with pytest.raises(FileNotFoundError):
        read_wav(temp_dir / "nope.wav")


def test_write_wav_rejects_subtype(temp_dir):
    with pytest.raises(WavFormatError):
        write_wav(temp_dir / "x.wav", np.zeros(10), subtype='PCM_24')


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
