#!/usr/bin/env python3
"""
Unit tests for source_store.py synthetic sources and WAV directories.
"""

import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from signal_core import write_wav
from source_store import NOISE_KINDS, SourceStore, fit_length, synth_noise, synth_utterance


@pytest.fixture
def temp_dirs():
    """Create speech and noise directories with a few short WAV files."""
    speech_dir = Path(tempfile.mkdtemp(prefix='test_speech_'))
    noise_dir = Path(tempfile.mkdtemp(prefix='test_noise_'))
    rng = np.random.default_rng(0)
    for speaker in ('alice', 'bob'):
        for i in range(2):
            write_wav(speech_dir / speaker / f"utt{i}.wav", 0.1 * rng.standard_normal(8000))
    write_wav(noise_dir / 'hum.wav', 0.1 * rng.standard_normal(4000))
    yield speech_dir, noise_dir
    shutil.rmtree(speech_dir, ignore_errors=True)
    shutil.rmtree(noise_dir, ignore_errors=True)


def test_synthetic_catalog():
    store = SourceStore(n_synthetic_speakers=5, utterances_per_speaker=3, n_synthetic_noises=4)
    assert len(store.speakers()) == 5
    assert len(store.utterances(store.speakers()[0])) == 3
    assert len(store.noises()) == 4


def test_synthetic_speech_is_deterministic():
    a = synth_utterance(3, 1, 1.0)
    b = synth_utterance(3, 1, 1.0)
    c = synth_utterance(3, 2, 1.0)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    assert np.sqrt(np.mean(a ** 2)) == pytest.approx(0.05, rel=1e-6)


def test_synthetic_speech_has_pauses():
    x = synth_utterance(0, 0, 3.0)
    frames = x[:len(x) // 160 * 160].reshape(-1, 160)
    energy = np.mean(frames ** 2, axis=1)
    assert np.mean(energy < 1e-3 * energy.max()) > 0.05


@pytest.mark.parametrize("kind", NOISE_KINDS)
def test_synthetic_noise_kinds(kind):
    x = synth_noise(kind, 1, 0.5)
    assert len(x) == 8000
    assert np.all(np.isfinite(x))
    assert np.sqrt(np.mean(x ** 2)) == pytest.approx(0.05, rel=1e-6)


def test_unknown_noise_kind():
    with pytest.raises(ValueError):
        synth_noise('thunder', 0, 0.1)


def test_load_fits_length():
    store = SourceStore()
    assert len(store.load('synth:0:0', 20000)) == 20000
    assert len(store.load('synth-noise:pink:2', 100000)) == 100000


def test_fit_length_tiles_and_crops():
    x = np.arange(1, 11, dtype=float)
    assert len(fit_length(x, 5)) == 5
    tiled = fit_length(x, 25)
    assert len(tiled) == 25
    np.testing.assert_array_equal(tiled[:10], x)
    assert tiled[10] == 0.0
    assert not np.any(fit_length(np.array([]), 4))


def test_wav_directories(temp_dirs):
    speech_dir, noise_dir = temp_dirs
    store = SourceStore(speech_dir=speech_dir, noise_dir=noise_dir)
    assert store.speakers() == ['alice', 'bob']
    assert store.utterances('bob') == ['wav:bob/utt0.wav', 'wav:bob/utt1.wav']
    assert store.noises() == ['noise:hum.wav']
    assert len(store.load('wav:alice/utt1.wav')) == 8000
    assert len(store.load('noise:hum.wav', 10000)) == 10000


def test_missing_directory_raises(temp_dirs):
    speech_dir, _ = temp_dirs
    with pytest.raises(FileNotFoundError):
        SourceStore(speech_dir=speech_dir / 'nowhere')


def test_unknown_ids_raise():
    store = SourceStore()
    with pytest.raises(ValueError):
        store.load('mystery:1')
    with pytest.raises(ValueError):
        store.load('wav:alice/utt0.wav')
    with pytest.raises(ValueError):
        store.utterances('nobody')


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
