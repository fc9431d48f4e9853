"""
Read WAV headers before decoding.

Used by the CLI and the corpus loader to reject files with the wrong sample rate,
sample format, or channel count with a clear message, without reading the audio.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Union

import soundfile as sf

try:
    from mutagen.wave import WAVE
    MUTAGEN_AVAILABLE = True
except ImportError:
    MUTAGEN_AVAILABLE = False

from signal_core import CANONICAL_RATE, WavFormatError

SUPPORTED_BITS = {16, 32}


def read_wav_info(path: Path) -> Dict[str, Union[int, float, str]]:
    """
    Read channel count, sample rate, bit depth and duration from a WAV header.

    Args:
        path: Path to the WAV file.

    Returns:
        Dictionary with 'channels', 'sample_rate', 'bits_per_sample', 'duration' and
        'source' (which library answered).

    Raises:
        FileNotFoundError: The file does not exist.
        WavFormatError: The header cannot be parsed.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"WAV file not found: {path}")

    if MUTAGEN_AVAILABLE:
        try:
            info = WAVE(str(path)).info
            return {
                'channels': int(info.channels),
                'sample_rate': int(info.sample_rate),
                'bits_per_sample': int(info.bits_per_sample),
                'duration': float(info.length),
                'source': 'mutagen',
            }
        except Exception as exc:
            logging.debug(f"  mutagen could not parse {path.name}: {exc}")

    try:
        info = sf.info(str(path))
    except RuntimeError as exc:
        raise WavFormatError(f"Malformed WAV file {path}: {exc}") from exc
    bits = {'PCM_16': 16, 'FLOAT': 32, 'PCM_32': 32, 'PCM_24': 24, 'PCM_U8': 8}.get(info.subtype, 0)
    return {
        'channels': int(info.channels),
        'sample_rate': int(info.samplerate),
        'bits_per_sample': bits,
        'duration': float(info.duration),
        'source': 'soundfile',
    }


def validate_wav(path: Path, channels: Optional[int] = None,
                 sample_rate: int = CANONICAL_RATE) -> Dict[str, Union[int, float, str]]:
    """Read a WAV header and check rate, sample format and (optionally) channel count."""
    info = read_wav_info(path)
    if info['sample_rate'] != sample_rate:
        raise WavFormatError(
            f"Unsupported sample rate {info['sample_rate']} Hz in {Path(path).name}; "
            f"only {sample_rate} Hz is accepted"
        )
    if info['bits_per_sample'] not in SUPPORTED_BITS:
        raise WavFormatError(
            f"Unsupported sample format ({info['bits_per_sample']} bit) in {Path(path).name}; "
            "expected 16-bit PCM or 32-bit float"
        )
    if channels is not None and info['channels'] != channels:
        raise WavFormatError(
            f"{Path(path).name} has {info['channels']} channels, expected {channels}"
        )
    return info
