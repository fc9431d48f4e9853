"""
Read-only store of dry source audio for scene rendering.

Sources are addressed by string ids:
  wav:<speaker>/<file>.wav       utterance from a user speech directory (<dir>/<speaker>/<file>.wav)
  noise:<file>.wav               clip from a user noise directory
  synth:<speaker>:<utterance>    deterministic speech-like talker
  synth-noise:<kind>:<index>     deterministic synthetic noise (white, pink, speech_shaped, bursts)

The synthetic fallback lets the whole pipeline run with no external data. Every
synthetic signal is a pure function of its id.
"""

import hashlib
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import scipy.signal

from signal_core import CANONICAL_RATE, read_wav

NOISE_KINDS = ('white', 'pink', 'speech_shaped', 'bursts')

# (F1, F2, F3) in Hz for a handful of vowels
VOWEL_FORMANTS = [
    (730, 1090, 2440),
    (270, 2290, 3010),
    (530, 1840, 2480),
    (570, 840, 2410),
    (300, 870, 2240),
    (660, 1720, 2410),
    (490, 1350, 1690),
]


def id_seed(source_id: str) -> int:
    """Stable 64-bit seed derived from a source id."""
    digest = hashlib.sha256(source_id.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


def fit_length(signal: np.ndarray, n_samples: int) -> np.ndarray:
    """Crop or tile (with a short gap) a mono signal to exactly n_samples."""
    signal = np.asarray(signal, dtype=np.float64)
    if len(signal) == 0:
        return np.zeros(n_samples)
    if len(signal) >= n_samples:
        return signal[:n_samples].copy()
    gap = np.zeros(len(signal) // 10)
    unit = np.concatenate([signal, gap])
    reps = int(np.ceil(n_samples / len(unit)))
    return np.tile(unit, reps)[:n_samples]


def _resonator(freq: float, bandwidth: float, fs: int):
    r = np.exp(-np.pi * bandwidth / fs)
    a = [1.0, -2.0 * r * np.cos(2.0 * np.pi * freq / fs), r * r]
    b = [1.0 - r]
    return b, a


def synth_utterance(speaker: int, utterance: int, seconds: float,
                    fs: int = CANONICAL_RATE) -> np.ndarray:
    """Speech-like signal: formant-filtered harmonic syllables, fricatives and pauses.

    Speaker identity fixes the pitch range, vocal-tract scale and spectral tilt;
    the utterance index drives the syllable sequence.
    """
    spk_rng = np.random.default_rng(id_seed(f"speaker:{speaker}"))
    base_f0 = spk_rng.uniform(95.0, 240.0)
    tract_scale = spk_rng.uniform(0.85, 1.18)
    tilt = spk_rng.uniform(0.6, 1.4)

    rng = np.random.default_rng(id_seed(f"utterance:{speaker}:{utterance}"))
    n_total = int(round(seconds * fs))
    out = np.zeros(n_total)
    pos = int(rng.uniform(0.05, 0.2) * fs)
    while pos < n_total:
        if rng.random() < 0.2:
            n_fric = int(rng.uniform(0.05, 0.12) * fs)
            noise = rng.standard_normal(n_fric)
            sos = scipy.signal.butter(4, rng.uniform(2500, 4500), 'highpass', fs=fs, output='sos')
            seg = scipy.signal.sosfilt(sos, noise) * 0.3 * np.hanning(n_fric)
        else:
            n_syl = int(rng.uniform(0.12, 0.3) * fs)
            t = np.arange(n_syl) / fs
            f0 = base_f0 * (1.0 + 0.12 * np.sin(2 * np.pi * rng.uniform(1.0, 4.0) * t + rng.uniform(0, 2 * np.pi)))
            phase = 2 * np.pi * np.cumsum(f0) / fs
            n_harm = int(4000 // base_f0)
            source = np.zeros(n_syl)
            for k in range(1, n_harm + 1):
                source += np.sin(k * phase) / k ** tilt
            formants = VOWEL_FORMANTS[rng.integers(len(VOWEL_FORMANTS))]
            seg = source
            for freq in formants:
                b, a = _resonator(freq * tract_scale, 80.0 + 0.05 * freq, fs)
                seg = scipy.signal.lfilter(b, a, seg)
            envelope = np.minimum(1.0, np.minimum(t / 0.02, (t[-1] - t + 1.0 / fs) / 0.04))
            seg = seg * envelope
        end = min(pos + len(seg), n_total)
        out[pos:end] += seg[:end - pos]
        pos = end + int(rng.uniform(0.03, 0.2) * fs)

    rms = np.sqrt(np.mean(out ** 2))
    return out * (0.05 / rms) if rms > 0 else out


def synth_noise(kind: str, index: int, seconds: float, fs: int = CANONICAL_RATE) -> np.ndarray:
    """Deterministic synthetic noise of the given kind, normalized to RMS 0.05."""
    if kind not in NOISE_KINDS:
        raise ValueError(f"Unknown noise kind '{kind}'. Available: {', '.join(NOISE_KINDS)}")
    rng = np.random.default_rng(id_seed(f"noise:{kind}:{index}"))
    n = int(round(seconds * fs))
    white = rng.standard_normal(n)
    if kind == 'white':
        out = white
    elif kind == 'pink':
        # Voss-McCartney style 1/f approximation via a fixed IIR
        b = [0.049922035, -0.095993537, 0.050612699, -0.004408786]
        a = [1.0, -2.494956002, 2.017265875, -0.522189400]
        out = scipy.signal.lfilter(b, a, white)
    elif kind == 'speech_shaped':
        sos = scipy.signal.butter(2, [100.0, 1200.0], 'bandpass', fs=fs, output='sos')
        out = scipy.signal.sosfilt(sos, white) + 0.2 * white
    else:
        out = np.zeros(n)
        pos = 0
        while pos < n:
            length = int(rng.uniform(0.05, 0.4) * fs)
            low = rng.uniform(200.0, 3000.0)
            sos = scipy.signal.butter(2, [low, min(low * 2.5, fs / 2 - 100)], 'bandpass', fs=fs, output='sos')
            burst = scipy.signal.sosfilt(sos, rng.standard_normal(length)) * np.hanning(length)
            end = min(pos + length, n)
            out[pos:end] += burst[:end - pos] * rng.uniform(0.3, 1.0)
            pos = end + int(rng.uniform(0.0, 0.3) * fs)
        out += 0.05 * white
    rms = np.sqrt(np.mean(out ** 2))
    return out * (0.05 / rms) if rms > 0 else out


class SourceStore:
    """Catalog and loader for dry speech and noise sources."""

    def __init__(self, speech_dir: Optional[Path] = None, noise_dir: Optional[Path] = None,
                 n_synthetic_speakers: int = 20, utterances_per_speaker: int = 10,
                 n_synthetic_noises: int = 8, utterance_seconds: float = 6.0,
                 sample_rate: int = CANONICAL_RATE):
        self.speech_dir = Path(speech_dir) if speech_dir else None
        self.noise_dir = Path(noise_dir) if noise_dir else None
        self.utterance_seconds = utterance_seconds
        self.sample_rate = sample_rate
        self._speakers: Dict[str, List[str]] = {}
        self._noises: List[str] = []

        if self.speech_dir is not None:
            if not self.speech_dir.is_dir():
                raise FileNotFoundError(f"Speech directory does not exist: {self.speech_dir}")
            for speaker_dir in sorted(p for p in self.speech_dir.iterdir() if p.is_dir()):
                files = sorted(speaker_dir.glob('*.wav'))
                if files:
                    self._speakers[speaker_dir.name] = [
                        f"wav:{speaker_dir.name}/{f.name}" for f in files
                    ]
            logging.info(f"Speech store: {len(self._speakers)} speakers from {self.speech_dir}")
        if len(self._speakers) < 2:
            if self.speech_dir is not None:
                logging.warning("Fewer than 2 speakers found; using synthetic talkers")
            self._speakers = {
                f"synth{s:03d}": [f"synth:{s}:{u}" for u in range(utterances_per_speaker)]
                for s in range(n_synthetic_speakers)
            }

        if self.noise_dir is not None:
            if not self.noise_dir.is_dir():
                raise FileNotFoundError(f"Noise directory does not exist: {self.noise_dir}")
            self._noises = [f"noise:{f.name}" for f in sorted(self.noise_dir.glob('*.wav'))]
            logging.info(f"Noise store: {len(self._noises)} clips from {self.noise_dir}")
        if not self._noises:
            self._noises = [
                f"synth-noise:{NOISE_KINDS[i % len(NOISE_KINDS)]}:{i}" for i in range(n_synthetic_noises)
            ]

    def speakers(self) -> List[str]:
        return list(self._speakers)

    def utterances(self, speaker: str) -> List[str]:
        if speaker not in self._speakers:
            raise ValueError(f"Unknown speaker '{speaker}'")
        return list(self._speakers[speaker])

    def noises(self) -> List[str]:
        return list(self._noises)

    def load(self, source_id: str, n_samples: Optional[int] = None) -> np.ndarray:
        """Return the mono float64 signal for an id, optionally fitted to n_samples."""
        kind, _, rest = source_id.partition(':')
        if kind == 'synth':
            speaker, utterance = (int(v) for v in rest.split(':'))
            seconds = max(self.utterance_seconds, (n_samples or 0) / self.sample_rate)
            signal = synth_utterance(speaker, utterance, seconds, self.sample_rate)
        elif kind == 'synth-noise':
            noise_kind, index = rest.split(':')
            seconds = max(self.utterance_seconds, (n_samples or 0) / self.sample_rate)
            signal = synth_noise(noise_kind, int(index), seconds, self.sample_rate)
        elif kind == 'wav':
            if self.speech_dir is None:
                raise ValueError(f"No speech directory configured for source '{source_id}'")
            signal = read_wav(self.speech_dir / rest, self.sample_rate).samples[0].astype(np.float64)
        elif kind == 'noise':
            if self.noise_dir is None:
                raise ValueError(f"No noise directory configured for source '{source_id}'")
            signal = read_wav(self.noise_dir / rest, self.sample_rate).samples[0].astype(np.float64)
        else:
            raise ValueError(f"Unrecognized source id '{source_id}'")
        if n_samples is not None:
            signal = fit_length(signal, n_samples)
        return signal
