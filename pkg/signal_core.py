"""
STFT analysis/synthesis, complex masks, power-law compression and the training loss.

All framing is strictly causal: frame t covers samples [t*hop, t*hop + window_len),
with no look-ahead padding. Square-root tapers are used on both sides so that the
overlap-added squared window is constant and istft(stft(x)) reconstructs x on the
fully overlapped interior.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import scipy.signal
import soundfile as sf

CANONICAL_RATE = 16000

# Magnitude floor inside compression; gradients are defined as zero below it.
MAG_FLOOR = 1e-12

SUPPORTED_WINDOWS = {
    'sqrt_hann': 'hann',
    'sqrt_hamming': 'hamming',
}


class WavFormatError(ValueError):
    """Raised for WAV files that cannot be used (bad header, rate, or sample format)."""


@dataclass(frozen=True)
class FrameConfig:
    """Frame geometry of the STFT front-end (defaults: 32 ms / 16 ms at 16 kHz)."""
    sample_rate_hz: int = CANONICAL_RATE
    window_len: int = 512
    hop_len: int = 256
    fft_len: int = 512
    window: str = 'sqrt_hann'

    def __post_init__(self):
        if self.window not in SUPPORTED_WINDOWS:
            raise ValueError(
                f"Unsupported window '{self.window}'. Available: {', '.join(sorted(SUPPORTED_WINDOWS))}"
            )
        if self.hop_len <= 0 or self.window_len <= 0:
            raise ValueError("window_len and hop_len must be positive")
        if self.window_len % self.hop_len != 0:
            raise ValueError(f"hop_len {self.hop_len} must divide window_len {self.window_len}")
        if self.fft_len < self.window_len:
            raise ValueError(f"fft_len {self.fft_len} must be >= window_len {self.window_len}")
        taper = scipy.signal.get_window(SUPPORTED_WINDOWS[self.window], self.window_len, fftbins=True)
        if not scipy.signal.check_COLA(taper, self.window_len, self.window_len - self.hop_len):
            raise ValueError(
                f"Window '{self.window}' with hop {self.hop_len} does not satisfy constant overlap-add"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def overlap_factor(self) -> int:
        return self.window_len // self.hop_len

    @property
    def warmup_samples(self) -> int:
        """Samples of latency before the first fully reconstructed output sample."""
        return self.window_len - self.hop_len

    def taper(self) -> np.ndarray:
        """Analysis/synthesis taper (square root of a periodic COLA window)."""
        base = scipy.signal.get_window(SUPPORTED_WINDOWS[self.window], self.window_len, fftbins=True)
        return np.sqrt(base)

    def ola_gain(self) -> float:
        """Constant value of the overlap-added squared taper."""
        squared = self.taper() ** 2
        return float(squared.reshape(self.overlap_factor, self.hop_len).sum(axis=0).mean())

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_len:
            return 0
        return (n_samples - self.window_len) // self.hop_len + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'FrameConfig':
        return cls(**data)


@dataclass
class MultiChannelWave:
    """M synchronized PCM streams, shape (M, N), at sample_rate."""
    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ValueError(f"Expected (M, N) samples, got shape {samples.shape}")
        self.samples = samples

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """Complex STFT values indexed [stream, bin, frame]."""
    data: np.ndarray
    frame_config: FrameConfig

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"Spectrogram data must be (M, F, T), got shape {data.shape}")
        if data.shape[1] != self.frame_config.n_bins:
            raise ValueError(
                f"Spectrogram has {data.shape[1]} bins, frame config implies {self.frame_config.n_bins}"
            )
        self.data = data

    @property
    def n_streams(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]

    def stream(self, index: int) -> 'ComplexSpectrogram':
        return ComplexSpectrogram(self.data[index:index + 1], self.frame_config)

    def select(self, order) -> 'ComplexSpectrogram':
        """Return the streams reordered (or subset) by index list."""
        return ComplexSpectrogram(self.data[list(order)], self.frame_config)


@dataclass
class ComplexMask:
    """Complex ratio mask indexed [bin, frame]."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"Mask data must be (F, T), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Mask contains non-finite values")
        self.data = data


SpecLike = Union[ComplexSpectrogram, np.ndarray]


def _values(spec: SpecLike) -> np.ndarray:
    return spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)


def ordered_sum(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along an axis after sorting the values on that axis.

    Sorting makes the result independent of the order of the inputs bit-for-bit.
    Real and imaginary parts are sorted separately.
    """
    values = np.asarray(values)
    if np.iscomplexobj(values):
        real = np.sort(values.real, axis=axis).sum(axis=axis)
        imag = np.sort(values.imag, axis=axis).sum(axis=axis)
        return real + 1j * imag
    return np.sort(values, axis=axis).sum(axis=axis)


def ordered_mean(values: np.ndarray, axis: int = 0, exact: bool = True) -> np.ndarray:
    """Mean along an axis; permutation-exact when `exact` is set."""
    values = np.asarray(values)
    count = values.shape[axis]
    if not exact:
        return values.mean(axis=axis)
    total = ordered_sum(values, axis=axis)
    return (total / count).astype(values.dtype, copy=False)


def stft(wave: np.ndarray, cfg: FrameConfig) -> ComplexSpectrogram:
    """Causal STFT of a (N,) or (M, N) wave.

    Returns a spectrogram with T = floor((N - window_len) / hop_len) + 1 frames.
    """
    wave = np.asarray(wave)
    if wave.ndim == 1:
        wave = wave[None, :]
    if wave.ndim != 2:
        raise ValueError(f"Expected (N,) or (M, N) wave, got shape {wave.shape}")
    if wave.shape[1] < cfg.window_len:
        raise ValueError(
            f"input too short: {wave.shape[1]} samples, need at least one window ({cfg.window_len})"
        )
    frames = np.lib.stride_tricks.sliding_window_view(wave, cfg.window_len, axis=1)[:, ::cfg.hop_len]
    windowed = frames * cfg.taper()
    spectrum = np.fft.rfft(windowed, n=cfg.fft_len, axis=-1)
    dtype = np.complex64 if wave.dtype == np.float32 else np.complex128
    return ComplexSpectrogram(np.ascontiguousarray(spectrum.transpose(0, 2, 1)).astype(dtype), cfg)


def istft(spec: ComplexSpectrogram, cfg: Optional[FrameConfig] = None) -> np.ndarray:
    """Overlap-add synthesis with the synthesis taper.

    Output length is (T - 1) * hop_len + window_len. One-stream spectrograms
    yield a 1-D array, otherwise (M, L).
    """
    cfg = cfg or spec.frame_config
    data = _values(spec)
    if data.ndim == 2:
        data = data[None]
    if data.shape[1] != cfg.n_bins:
        raise ValueError(f"Spectrogram has {data.shape[1]} bins, config expects {cfg.n_bins}")
    n_streams, _, n_frames = data.shape
    frames = np.fft.irfft(data.transpose(0, 2, 1), n=cfg.fft_len, axis=-1)[..., :cfg.window_len]
    frames = frames * cfg.taper()
    length = (n_frames - 1) * cfg.hop_len + cfg.window_len
    out = np.zeros((n_streams, length), dtype=frames.dtype)
    for t in range(n_frames):
        start = t * cfg.hop_len
        out[:, start:start + cfg.window_len] += frames[:, t]
    out /= cfg.ola_gain()
    return out[0] if n_streams == 1 else out


def apply_mask(spec: SpecLike, mask: Union[ComplexMask, np.ndarray]) -> ComplexSpectrogram:
    """Point-wise complex product of a single-stream spectrogram and a mask."""
    mask_values = mask.data if isinstance(mask, ComplexMask) else np.asarray(mask)
    values = _values(spec)
    if values.ndim == 3:
        if values.shape[0] != 1:
            raise ValueError(f"apply_mask expects a single stream, got {values.shape[0]}")
        values = values[0]
    if values.shape != mask_values.shape:
        raise ValueError(f"Shape mismatch: spectrogram {values.shape} vs mask {mask_values.shape}")
    out = values * mask_values
    if isinstance(spec, ComplexSpectrogram):
        return ComplexSpectrogram(out[None], spec.frame_config)
    return out


def power_law_compress(spec: SpecLike, exponent: float) -> np.ndarray:
    """|z|^c * exp(j*angle(z)); zero maps to zero."""
    if not 0 < exponent <= 1:
        raise ValueError(f"Compression exponent must be in (0, 1], got {exponent}")
    z = _values(spec)
    magnitude = np.maximum(np.abs(z), MAG_FLOOR)
    return z * magnitude ** (exponent - 1.0)


def loss_plcpa(est: SpecLike, ref: SpecLike, exponent: float = 0.3,
               weight: float = 0.5) -> Tuple[float, np.ndarray]:
    """Power-law compressed phase-aware MSE and its gradient w.r.t. est.

    L = (1 - w) * mean((|est|^c - |ref|^c)^2) + w * mean(|comp(est) - comp(ref)|^2)

    Args:
        est: Estimated spectrogram (any shape).
        ref: Reference spectrogram, same shape as est.
        exponent: Compression exponent c in (0, 1].
        weight: Mixing weight w (lambda) in [0, 1].

    Returns:
        Tuple of (loss, gradient) where gradient = dL/dRe(est) + 1j * dL/dIm(est).
    """
    z = _values(est)
    q = _values(ref)
    if z.shape != q.shape:
        raise ValueError(f"Shape mismatch: est {z.shape} vs ref {q.shape}")
    if not 0 < exponent <= 1:
        raise ValueError(f"Compression exponent must be in (0, 1], got {exponent}")
    if not 0 <= weight <= 1:
        raise ValueError(f"Loss weight must be in [0, 1], got {weight}")
    count = z.size
    c = exponent

    r = np.abs(z)
    active = r > MAG_FLOOR
    r_safe = np.maximum(r, MAG_FLOOR)
    mag_est = r_safe ** c
    mag_ref = np.maximum(np.abs(q), MAG_FLOOR) ** c
    comp_est = z * r_safe ** (c - 1.0)
    comp_ref = power_law_compress(q, c)

    mag_diff = np.where(active, mag_est, 0.0) - np.where(np.abs(q) > MAG_FLOOR, mag_ref, 0.0)
    err = comp_est - comp_ref
    loss = (1.0 - weight) * np.mean(mag_diff ** 2) + weight * np.mean(np.abs(err) ** 2)

    # d|z|^c = c r^(c-1) z/r ; d(r^(c-1) z) -> r^(c-1) e + (c-1) r^(c-3) Re(conj(e) z) z
    grad_mag = 2.0 * mag_diff * c * r_safe ** (c - 2.0) * z
    projection = np.real(np.conj(err) * z)
    grad_comp = 2.0 * (r_safe ** (c - 1.0) * err + (c - 1.0) * r_safe ** (c - 3.0) * projection * z)
    grad = ((1.0 - weight) * grad_mag + weight * grad_comp) / count
    grad = np.where(active, grad, 0.0).astype(z.dtype if np.iscomplexobj(z) else np.complex128)
    return float(loss), grad


def read_wav(path: Path, expected_rate: int = CANONICAL_RATE) -> MultiChannelWave:
    """Read a PCM16 or float32 WAV file as (M, N) float32 samples."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"WAV file not found: {path}")
    try:
        data, rate = sf.read(str(path), dtype='float32', always_2d=True)
    except RuntimeError as exc:
        raise WavFormatError(f"Malformed WAV file {path}: {exc}") from exc
    if rate != expected_rate:
        raise WavFormatError(
            f"Unsupported sample rate {rate} Hz in {path}; only {expected_rate} Hz is accepted"
        )
    logging.debug(f"Read {path.name}: {data.shape[1]} ch, {data.shape[0]} samples")
    return MultiChannelWave(np.ascontiguousarray(data.T), rate)


def write_wav(path: Path, samples: np.ndarray, sample_rate: int = CANONICAL_RATE,
              subtype: str = 'FLOAT') -> None:
    """Write (N,) or (M, N) samples as a WAV file (subtype 'FLOAT' or 'PCM_16')."""
    if subtype not in ('FLOAT', 'PCM_16'):
        raise WavFormatError(f"Unsupported WAV subtype: {subtype}")
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim == 2:
        samples = samples.T
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), samples, sample_rate, subtype=subtype)
