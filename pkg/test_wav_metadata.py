#!/usr/bin/env python3
"""
Unit tests for wav_metadata.py header probing and validation.
"""

import shutil
import tempfile
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest
import soundfile as sf

from signal_core import WavFormatError
from wav_metadata import read_wav_info, validate_wav


@pytest.fixture
def temp_dir():
    """Create a temporary directory with a few WAV files."""
    d = Path(tempfile.mkdtemp(prefix='test_wav_metadata_'))
    sf.write(str(d / 'float4.wav'), np.zeros((1600, 4), dtype=np.float32), 16000, subtype='FLOAT')
    sf.write(str(d / 'pcm16_mono.wav'), np.zeros(3200, dtype=np.float32), 16000, subtype='PCM_16')
    sf.write(str(d / 'pcm24.wav'), np.zeros(1600, dtype=np.float32), 16000, subtype='PCM_24')
    sf.write(str(d / 'rate44k.wav'), np.zeros(4410, dtype=np.float32), 44100, subtype='PCM_16')
    yield d
    shutil.rmtree(d, ignore_errors=True)


def test_read_info_float_multichannel(temp_dir):
    info = read_wav_info(temp_dir / 'float4.wav')
    assert info['channels'] == 4
    assert info['sample_rate'] == 16000
    assert info['bits_per_sample'] == 32
    assert info['duration'] == pytest.approx(0.1, abs=1e-3)


def test_read_info_pcm16_mono(temp_dir):
    info = read_wav_info(temp_dir / 'pcm16_mono.wav')
    assert info['channels'] == 1
    assert info['bits_per_sample'] == 16
    assert info['duration'] == pytest.approx(0.2, abs=1e-3)


def test_read_info_falls_back_to_soundfile(temp_dir):
    with patch("wav_metadata.MUTAGEN_AVAILABLE", False):
        info = read_wav_info(temp_dir / 'float4.wav')
    assert info['source'] == 'soundfile'
    assert info['channels'] == 4
    assert info['bits_per_sample'] == 32


def test_read_info_missing_file(temp_dir):
    with pytest.raises(FileNotFoundError):
        read_wav_info(temp_dir / 'missing.wav')


def test_read_info_garbage_raises_wav_error(temp_dir):
    path = temp_dir / 'garbage.wav'
    path.write_bytes(b'\x00' * 64)
    with pytest.raises(WavFormatError):
        read_wav_info(path)


def test_validate_accepts_supported(temp_dir):
    assert validate_wav(temp_dir / 'float4.wav', channels=4)['channels'] == 4
    assert validate_wav(temp_dir / 'pcm16_mono.wav')['bits_per_sample'] == 16


@pytest.mark.parametrize("name,kwargs,message", [
    ('rate44k.wav', {}, '44100'),
    ('pcm24.wav', {}, '24 bit'),
    ('float4.wav', {'channels': 7}, 'expected 7'),
])
def test_validate_rejects(temp_dir, name, kwargs, message):
    with pytest.raises(WavFormatError, match=message):
        validate_wav(temp_dir / name, **kwargs)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
