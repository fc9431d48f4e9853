"""
Network input features.

Builds the virtual microphone, inter-channel phase differences, the two fixed-geometry
input layouts, the geometry-agnostic stream-major layout with causal EWMA
normalization of the phase channel, and the enrollment embedding stub.

External layout: every channel is a (2F, T) real map with the real part (or cosine)
in rows [0, F) and the imaginary part (or sine) in rows [F, 2F).
"""

import functools
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import librosa
import numpy as np

from signal_core import ComplexSpectrogram, FrameConfig, ordered_mean, stft

EWMA_BETA = 0.99
EWMA_EPSILON = 1e-5

DVECTOR_DIM = 128
DVECTOR_MAGIC = b'DVEC'
DVECTOR_SEED = 1234
N_MELS = 40
FRAME_FLOOR_DB = 40.0


@dataclass
class FeatureTensor:
    """Real network input: fixed (C, 2F, T) or stream_major (M, C, 2F, T)."""
    layout: str
    data: np.ndarray
    channels: List[str] = field(default_factory=list)
    virtual: Optional[ComplexSpectrogram] = None

    def __post_init__(self):
        expected = {'fixed': 3, 'stream_major': 4}
        if self.layout not in expected:
            raise ValueError(f"Unknown feature layout '{self.layout}'")
        if self.data.ndim != expected[self.layout]:
            raise ValueError(f"{self.layout} layout needs {expected[self.layout]} dims, got {self.data.shape}")
        if self.data.shape[-2] % 2:
            raise ValueError(f"Frequency rows must be 2F, got {self.data.shape[-2]}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Feature tensor contains non-finite values")

    @property
    def n_channels(self) -> int:
        return self.data.shape[-3]

    @property
    def n_frames(self) -> int:
        return self.data.shape[-1]

    def as_complex(self) -> np.ndarray:
        """Pair rows [0, F) and [F, 2F) into complex values, shape (..., C, F, T)."""
        return unstack_re_im(self.data)


def stack_re_im(values: np.ndarray) -> np.ndarray:
    """Complex (..., F, T) -> real (..., 2F, T) with real rows first."""
    return np.concatenate([values.real, values.imag], axis=-2)


def unstack_re_im(rows: np.ndarray) -> np.ndarray:
    n_bins = rows.shape[-2] // 2
    return rows[..., :n_bins, :] + 1j * rows[..., n_bins:, :]


def _spec_values(multispec) -> np.ndarray:
    values = multispec.data if isinstance(multispec, ComplexSpectrogram) else np.asarray(multispec)
    if values.ndim == 2:
        values = values[None]
    if values.ndim != 3 or values.shape[0] < 1:
        raise ValueError(f"Expected (M, F, T) spectrogram with M >= 1, got {values.shape}")
    return values


def virtual_mic(multispec: ComplexSpectrogram, exact: bool = True) -> ComplexSpectrogram:
    """Average of all streams; sorted summation makes it invariant to stream order."""
    values = _spec_values(multispec)
    mean = ordered_mean(values, axis=0, exact=exact)
    return ComplexSpectrogram(mean[None], multispec.frame_config)


def ipd(spec_i, spec_j) -> np.ndarray:
    """Phase of Y_i relative to Y_j in (-pi, pi]; zero where either bin is zero."""
    yi = spec_i.data if isinstance(spec_i, ComplexSpectrogram) else np.asarray(spec_i)
    yj = spec_j.data if isinstance(spec_j, ComplexSpectrogram) else np.asarray(spec_j)
    if yi.shape != yj.shape:
        raise ValueError(f"Shape mismatch: {yi.shape} vs {yj.shape}")
    phase = np.angle(yi * np.conj(yj))
    return np.where(phase <= -np.pi, np.pi, phase)


def phase_rows(phase: np.ndarray) -> np.ndarray:
    """cos(phase) in rows [0, F), sin(phase) in rows [F, 2F)."""
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=-2)


def assemble_fixed_stft(multispec: ComplexSpectrogram) -> FeatureTensor:
    """Stacked STFT layout: channel i carries re||im of stream i."""
    values = _spec_values(multispec)
    return FeatureTensor('fixed', stack_re_im(values),
                         [f"stft:{i + 1}" for i in range(values.shape[0])])


def assemble_fixed_ipd(multispec: ComplexSpectrogram, normalize: bool = False,
                       state: Optional['EwmaState'] = None) -> Tuple[FeatureTensor, Optional['EwmaState']]:
    """
    Reference-microphone IPD layout.

    Channel 0 carries re||im of the first stream; channel k (k >= 1) carries
    cos||sin of the phase of stream 1 relative to stream k + 1. With normalize set
    the phase channels pass through EWMA normalization (pooled across pairs).

    Returns:
        Tuple of (tensor of shape (M, 2F, T), updated EWMA state or the state passed in).
    """
    values = _spec_values(multispec)
    n_streams = values.shape[0]
    if n_streams < 2:
        raise ValueError(f"Reference IPD features need at least 2 microphones, got {n_streams}")
    ipd_rows = np.stack([phase_rows(ipd(values[0], values[k])) for k in range(1, n_streams)])
    if normalize:
        state = state or EwmaState.initial(ipd_rows.shape[1])
        ipd_rows, state = ewma_normalize(ipd_rows, state)
    data = np.concatenate([stack_re_im(values[:1]), ipd_rows], axis=0)
    channels = ['stft:1'] + [f"ipd:1-{k + 1}" for k in range(1, n_streams)]
    return FeatureTensor('fixed', data, channels), state


@dataclass(frozen=True)
class EwmaState:
    """
    Bias-corrected running statistics for causal normalization.

    mean and var hold the already bias-corrected estimates, one per frequency row.
    The recursion m_t = m_{t-1} + g_t (x_t - m_{t-1}) with g_t = (1 - b) / (1 - b^t)
    equals the textbook EWMA divided by (1 - b^t).
    """
    mean: np.ndarray
    var: np.ndarray
    step_count: int = 0
    beta: float = EWMA_BETA
    epsilon: float = EWMA_EPSILON

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"EWMA beta must lie in (0, 1), got {self.beta}")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")
        if self.mean.shape != self.var.shape:
            raise ValueError(f"mean {self.mean.shape} and var {self.var.shape} shapes differ")

    @classmethod
    def initial(cls, n_rows: int, beta: float = EWMA_BETA, epsilon: float = EWMA_EPSILON) -> 'EwmaState':
        return cls(np.zeros(n_rows), np.zeros(n_rows), 0, beta, epsilon)

    def to_dict(self) -> dict:
        return {
            'mean': self.mean.tolist(),
            'var': self.var.tolist(),
            'step_count': self.step_count,
            'beta': self.beta,
            'epsilon': self.epsilon,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'EwmaState':
        return cls(np.asarray(data['mean'], dtype=np.float64), np.asarray(data['var'], dtype=np.float64),
                   int(data['step_count']), float(data['beta']), float(data['epsilon']))


def ewma_step(frame: np.ndarray, state: EwmaState) -> Tuple[np.ndarray, EwmaState]:
    """Normalize one frame of rows, shape (S, R): statistics pooled over the S streams."""
    frame = np.asarray(frame, dtype=np.float64)
    t = state.step_count + 1
    gain = (1.0 - state.beta) / (1.0 - state.beta ** t)
    mean = state.mean + gain * (ordered_mean(frame, axis=0) - state.mean)
    deviation = frame - mean
    var = state.var + gain * (ordered_mean(deviation ** 2, axis=0) - state.var)
    out = deviation / np.sqrt(var + state.epsilon)
    return out, replace(state, mean=mean, var=var, step_count=t)


def ewma_normalize(x: np.ndarray, state: EwmaState) -> Tuple[np.ndarray, EwmaState]:
    """
    Causal, unbiased EWMA normalization of per-frame rows.

    Args:
        x: Rows of shape (R, T) or (S, R, T); with S streams the statistics are
            pooled across streams so the result does not depend on their order.
        state: Running state; its row count must be R.

    Returns:
        Tuple of (normalized rows with the shape of x, updated state).
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.shape[1] != state.mean.shape[0]:
        raise ValueError(f"EWMA state has {state.mean.shape[0]} rows, input has {x.shape[1]}")
    out = np.empty_like(x)
    for t in range(x.shape[2]):
        out[:, :, t], state = ewma_step(x[:, :, t], state)
    return (out[0] if squeeze else out), state


def assemble_agnostic(multispec: ComplexSpectrogram, state: Optional[EwmaState] = None,
                      normalize: bool = True, beta: float = EWMA_BETA, epsilon: float = EWMA_EPSILON,
                      exact: bool = True) -> Tuple[FeatureTensor, Optional[EwmaState]]:
    """
    Stream-major layout with two channels per stream.

    Channel 0 carries re||im of the stream, channel 1 the cos||sin of its phase
    relative to the virtual microphone, EWMA-normalized with statistics shared by
    all streams. The virtual microphone is kept on the tensor for mask application.

    Returns:
        Tuple of (tensor of shape (M, 2, 2F, T), updated EWMA state or None).
    """
    values = _spec_values(multispec)
    frame_config = multispec.frame_config
    virtual = virtual_mic(ComplexSpectrogram(values, frame_config), exact=exact)
    phase = np.stack([phase_rows(ipd(values[i], virtual.data[0])) for i in range(values.shape[0])])
    if normalize:
        state = state or EwmaState.initial(phase.shape[1], beta, epsilon)
        phase, state = ewma_normalize(phase, state)
    data = np.stack([stack_re_im(values), phase], axis=1)
    return FeatureTensor('stream_major', data, ['stft', 'ipd_virtual'], virtual), state


def dump_features(path: Path, tensor: FeatureTensor) -> None:
    """Write a feature tensor to an .npz file for cross-checking."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, data=tensor.data, layout=tensor.layout, channels=np.array(tensor.channels))
    logging.debug(f"Dumped {tensor.layout} features {tensor.data.shape} to {path}")


def load_features(path: Path) -> FeatureTensor:
    with np.load(path) as archive:
        return FeatureTensor(str(archive['layout']), archive['data'], [str(c) for c in archive['channels']])


@dataclass
class DVector:
    """Unit-norm speaker embedding."""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 1 or values.size == 0:
            raise ValueError(f"d-vector must be a non-empty 1-D vector, got shape {values.shape}")
        norm = float(np.linalg.norm(values.astype(np.float64)))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"d-vector must have unit norm, got {norm:.6f}")
        self.values = values

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @classmethod
    def normalized(cls, values: np.ndarray) -> 'DVector':
        values = np.asarray(values, dtype=np.float64)
        norm = np.linalg.norm(values)
        if norm == 0:
            raise ValueError("cannot normalize an all-zero embedding")
        return cls((values / norm).astype(np.float32))

    def cosine(self, other: 'DVector') -> float:
        return float(np.dot(self.values.astype(np.float64), other.values.astype(np.float64)))


@functools.lru_cache(maxsize=8)
def _mel_basis(sample_rate: int, fft_len: int) -> np.ndarray:
    basis = librosa.filters.mel(sr=sample_rate, n_fft=fft_len, n_mels=N_MELS)
    basis.setflags(write=False)
    return basis


@functools.lru_cache(maxsize=8)
def _projection(dim: int) -> np.ndarray:
    matrix = np.random.default_rng(DVECTOR_SEED).standard_normal((dim, 2 * N_MELS)) / np.sqrt(2 * N_MELS)
    matrix.setflags(write=False)
    return matrix


def dvector_stub(enrollment: np.ndarray, dim: int = DVECTOR_DIM,
                 cfg: Optional[FrameConfig] = None) -> DVector:
    """
    Deterministic enrollment embedding from log-mel statistics.

    Frames more than 40 dB below the loudest are dropped; per-band mean and standard
    deviation of the log-mel energies (the mean centered across bands, so overall gain
    cancels) are projected by a fixed seeded matrix and L2-normalized.

    Raises:
        ValueError: Enrollment shorter than 1 s or silent.
    """
    cfg = cfg or FrameConfig()
    wave = np.asarray(enrollment, dtype=np.float64)
    if wave.ndim == 2:
        wave = wave[0]
    if len(wave) < cfg.sample_rate_hz:
        raise ValueError(
            f"Enrollment too short: {len(wave) / cfg.sample_rate_hz:.2f} s, need at least 1 s"
        )
    power = np.abs(stft(wave, cfg).data[0]) ** 2
    frame_energy = power.sum(axis=0)
    if frame_energy.max() <= 0:
        raise ValueError("Enrollment is silent")
    floor = frame_energy.max() * 10.0 ** (-FRAME_FLOOR_DB / 10.0)
    active = frame_energy >= floor
    log_mel = np.log(_mel_basis(cfg.sample_rate_hz, cfg.fft_len) @ power[:, active] + 1e-10)
    band_mean = log_mel.mean(axis=1)
    band_std = log_mel.std(axis=1)
    stats = np.concatenate([band_mean - band_mean.mean(), band_std])
    return DVector.normalized(_projection(dim) @ stats)


def write_dvector(path: Path, dvec: DVector) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(DVECTOR_MAGIC + struct.pack('<I', dvec.dim))
        f.write(dvec.values.astype('<f4').tobytes())


def read_dvector(path: Path) -> DVector:
    """Read an embedding file; vectors that are not unit-norm are normalized."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Embedding file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 8 or blob[:4] != DVECTOR_MAGIC:
        raise ValueError(f"{path} is not an embedding file (missing DVEC header)")
    (dim,) = struct.unpack('<I', blob[4:8])
    if len(blob) != 8 + 4 * dim:
        raise ValueError(f"{path} is truncated: header says {dim} values, found {(len(blob) - 8) // 4}")
    values = np.frombuffer(blob[8:], dtype='<f4').astype(np.float32)
    norm = float(np.linalg.norm(values.astype(np.float64)))
    if abs(norm - 1.0) > 1e-6:
        logging.debug(f"Normalizing embedding from {path.name} (norm {norm:.4f})")
        return DVector.normalized(values)
    return DVector(values)
