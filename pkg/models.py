"""
Mask-estimating enhancement networks.

One encoder / recurrent bottleneck / decoder network (MaskNetwork) covers all four
variants. It always runs on stream-major complex input (B, M, C, F, T):

    sc_pse        M=1, C=1   the first microphone's STFT
    mc_stft       M=1, C=n   all microphone STFTs stacked as channels
    mc_ipd        M=1, C=n   first microphone STFT plus phase differences to it
    geo_agnostic  M=any, C=2 per-microphone STFT plus normalized phase difference
                             to the virtual microphone

The geometry-agnostic variant shares every weight across streams, exchanges
information through stream pooling after each block, and averages the per-stream
outputs into one mask (global pooling). The fixed variants apply their mask to the
first microphone, the geometry-agnostic variant to the virtual microphone.
"""

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from cnet import (ComplexBatchNorm, ComplexConv2d, ComplexLSTM, ComplexTransposedConv2d, Dense,
                  LeakyReLU, Module, load_checkpoint, save_checkpoint, CheckpointFormatError)
from features import (DVector, EwmaState, FeatureTensor, assemble_agnostic, assemble_fixed_ipd,
                      assemble_fixed_stft, dvector_stub)
from signal_core import (ComplexMask, ComplexSpectrogram, FrameConfig, MultiChannelWave, apply_mask,
                         istft, ordered_mean, stft)

VARIANTS = ('sc_pse', 'mc_stft', 'mc_ipd', 'geo_agnostic')
BOTTLENECKS = ('per_stream', 'pooled')


class ChannelMismatchError(ValueError):
    """Raised when the input channel count does not fit the model variant."""


@dataclass
class ModelConfig:
    """Architecture and input options of a MaskNetwork."""
    variant: str = 'geo_agnostic'
    encoder_channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128, 128, 128])
    kernel: Tuple[int, int] = (5, 2)
    stride: Tuple[int, int] = (2, 1)
    lstm_hidden: int = 128
    lstm_layers: int = 2
    dvector_dim: int = 128
    n_mics: int = 1
    stream_pool_split: float = 0.5
    frame: FrameConfig = field(default_factory=FrameConfig)
    use_dvector: bool = True
    normalize_ipd: Optional[bool] = None
    bottleneck: str = 'per_stream'
    mask_channels: int = 2
    mask_limit: float = 2.0
    exact_reductions: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown model variant '{self.variant}'. Available: {', '.join(VARIANTS)}")
        if self.bottleneck not in BOTTLENECKS:
            raise ValueError(f"Unknown bottleneck '{self.bottleneck}'. Available: {', '.join(BOTTLENECKS)}")
        if not self.encoder_channels or any(c < 2 for c in self.encoder_channels):
            raise ValueError(f"encoder_channels must be a non-empty list of values >= 2, got {self.encoder_channels}")
        if not 0.0 <= self.stream_pool_split <= 1.0:
            raise ValueError(f"stream_pool_split must lie in [0, 1], got {self.stream_pool_split}")
        if self.variant in ('mc_stft', 'mc_ipd') and self.n_mics < 2:
            raise ValueError(f"{self.variant} needs n_mics >= 2, got {self.n_mics}")
        if self.lstm_layers < 1:
            raise ValueError("lstm_layers must be >= 1")
        if self.mask_channels < 2 or self.mask_channels % 2:
            raise ValueError(f"mask_channels must be a positive even number, got {self.mask_channels}")
        if isinstance(self.frame, dict):
            self.frame = FrameConfig.from_dict(self.frame)
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.kernel = tuple(self.kernel)
        self.stride = tuple(self.stride)
        if self.normalize_ipd is None:
            self.normalize_ipd = self.variant == 'geo_agnostic'

    @property
    def in_channels(self) -> int:
        return {'sc_pse': 1, 'mc_stft': self.n_mics, 'mc_ipd': self.n_mics, 'geo_agnostic': 2}[self.variant]

    @property
    def is_agnostic(self) -> bool:
        return self.variant == 'geo_agnostic'

    def to_dict(self) -> dict:
        data = asdict(self)
        data['kernel'] = list(self.kernel)
        data['stride'] = list(self.stride)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ModelConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(**data)


MODEL_PRESETS: Dict[str, dict] = {
    'full': {},
    'toy': {
        'encoder_channels': [8, 16, 32, 32],
        'lstm_hidden': 64,
        'frame': {'window_len': 256, 'hop_len': 128, 'fft_len': 256},
    },
    'micro': {
        'encoder_channels': [4, 8],
        'lstm_hidden': 8,
        'dvector_dim': 8,
        'frame': {'window_len': 32, 'hop_len': 16, 'fft_len': 32},
    },
}


def model_preset(name: str, **overrides) -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise ValueError(f"Unknown model preset '{name}'. Available: {', '.join(MODEL_PRESETS)}")
    data = dict(MODEL_PRESETS[name])
    data.update(overrides)
    return ModelConfig.from_dict(data)


def shared_channel_count(channels: int, split: float) -> int:
    return int(np.floor(split * channels + 0.5))


def stream_pool(x: np.ndarray, split: float = 0.5, exact: bool = True) -> np.ndarray:
    """
    Share the last round(split * C) channels across streams.

    Args:
        x: Stream-major tensor (M, C, F, T) or (B, M, C, F, T).
        split: Fraction of channels replaced by their mean over streams.

    Returns:
        Tensor of the same shape: unique channels untouched, shared channels equal
        to the (sorted) mean over streams in every stream.
    """
    x = np.asarray(x)
    batched = x.ndim == 5
    if not batched:
        x = x[None]
    channels = x.shape[2]
    if channels < 2:
        raise ValueError(f"Stream pooling needs at least 2 channels, got {channels}")
    unique = channels - shared_channel_count(channels, split)
    out = x.copy()
    if unique < channels:
        mean = ordered_mean(x[:, :, unique:], axis=1, exact=exact)
        out[:, :, unique:] = mean[:, None]
    return out if batched else out[0]


def global_pool(x: np.ndarray, exact: bool = True) -> np.ndarray:
    """Average a (M, C, F, T) or (B, M, C, F, T) complex tensor over streams and channels."""
    x = np.asarray(x)
    batched = x.ndim == 5
    if not batched:
        x = x[None]
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ValueError(f"Global pooling needs at least one stream and channel, got {x.shape}")
    if x.shape[2] % 2:
        raise ValueError(f"Global pooling needs an even channel count, got {x.shape[2]}")
    pooled = ordered_mean(ordered_mean(x, axis=1, exact=exact), axis=1, exact=exact)
    return pooled if batched else pooled[0]


def bound_mask(mask: np.ndarray, limit: float) -> np.ndarray:
    """Compress mask magnitude to limit * tanh(|m|), keeping the phase."""
    r = np.abs(mask)
    scale = np.where(r > 1e-12, limit * np.tanh(r) / np.maximum(r, 1e-12), limit)
    return mask * scale


def _bound_mask_backward(mask: np.ndarray, grad: np.ndarray, limit: float) -> np.ndarray:
    r = np.abs(mask)
    safe = np.maximum(r, 1e-4)
    scale = np.where(r > 1e-12, limit * np.tanh(r) / np.maximum(r, 1e-12), limit)
    # d(scale)/dr divided by r; tends to -2/3 * limit at the origin
    slope = np.where(r > 1e-4, limit * (r / np.cosh(safe) ** 2 - np.tanh(safe)) / safe ** 3, -2.0 * limit / 3.0)
    return scale * grad + slope * np.real(np.conj(grad) * mask) * mask


class StreamPool(Module):
    """stream_pool over a flattened (B*M, C, F, T) activation, with its gradient."""

    def __init__(self, channels: int, split: float, exact: bool = True):
        super().__init__()
        self.channels = channels
        self.unique = channels - shared_channel_count(channels, split)
        self.split = split
        self.exact = exact
        self._cache = None

    def forward(self, x: np.ndarray, n_streams: int) -> np.ndarray:
        n, c, f, t = x.shape
        self._cache = n_streams
        pooled = stream_pool(x.reshape(n // n_streams, n_streams, c, f, t), self.split, self.exact)
        return pooled.reshape(x.shape)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("StreamPool: backward called before forward")
        m = self._cache
        n, c, f, t = grad.shape
        g = grad.reshape(n // m, m, c, f, t).copy()
        g[:, :, self.unique:] = g[:, :, self.unique:].sum(axis=1, keepdims=True) / m
        return g.reshape(grad.shape)


@dataclass
class NetworkState:
    """Per-layer streaming context: conv past frames and LSTM states."""
    encoder_past: List[Optional[np.ndarray]]
    decoder_past: List[Optional[np.ndarray]]
    lstm: List[Optional[list]]


class MaskNetwork(Module):
    """Causal complex encoder / LSTM bottleneck / decoder producing one complex mask."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        channels = [config.in_channels] + list(config.encoder_channels)
        self.bins = [config.frame.n_bins]
        self.encoders = []
        for l in range(len(config.encoder_channels)):
            conv = ComplexConv2d(channels[l], channels[l + 1], config.kernel, config.stride, rng=rng)
            self.bins.append(conv.output_bins(self.bins[-1]))
            block = {
                'conv': self.add_child(f"enc{l}_conv", conv),
                'bn': self.add_child(f"enc{l}_bn", ComplexBatchNorm(channels[l + 1])),
                'act': LeakyReLU(),
            }
            if config.is_agnostic:
                block['pool'] = StreamPool(channels[l + 1], config.stream_pool_split, config.exact_reductions)
            self.encoders.append(block)

        self.flat_size = channels[-1] * self.bins[-1]
        lstm_in = self.flat_size + (config.dvector_dim if config.use_dvector else 0)
        self.lstms = []
        for k in range(config.lstm_layers):
            size_in = lstm_in if k == 0 else config.lstm_hidden
            self.lstms.append(self.add_child(f"lstm{k}", ComplexLSTM(size_in, config.lstm_hidden, rng)))
        self.dense = self.add_child('dense', Dense(config.lstm_hidden, self.flat_size, True, rng))

        self.decoders = []
        for l in reversed(range(len(config.encoder_channels))):
            last = l == 0
            out_ch = config.mask_channels if last else channels[l]
            block = {
                'conv': self.add_child(f"dec{l}_conv", ComplexTransposedConv2d(
                    2 * channels[l + 1], out_ch, config.kernel, config.stride, rng=rng)),
                'out_bins': self.bins[l],
                'skip': l,
            }
            if not last:
                block['bn'] = self.add_child(f"dec{l}_bn", ComplexBatchNorm(out_ch))
                block['act'] = LeakyReLU()
                if config.is_agnostic:
                    block['pool'] = StreamPool(out_ch, config.stream_pool_split, config.exact_reductions)
            self.decoders.append(block)
        self._cache = None

    def initial_state(self) -> NetworkState:
        n = len(self.encoders)
        return NetworkState([None] * n, [None] * n, [None] * len(self.lstms))

    def _check(self, x: np.ndarray, dvec: Optional[np.ndarray]) -> np.ndarray:
        cfg = self.config
        if x.ndim != 5:
            raise ValueError(f"MaskNetwork expects (B, M, C, F, T) input, got {x.shape}")
        if x.shape[2] != cfg.in_channels:
            raise ChannelMismatchError(
                f"{cfg.variant} expects {cfg.in_channels} input channels per stream, got {x.shape[2]}"
            )
        if not cfg.is_agnostic and x.shape[1] != 1:
            raise ChannelMismatchError(f"{cfg.variant} runs on a single pseudo-stream, got {x.shape[1]}")
        if x.shape[3] != cfg.frame.n_bins:
            raise ValueError(f"Input has {x.shape[3]} bins, model expects {cfg.frame.n_bins}")
        if not cfg.use_dvector:
            return None
        if dvec is None:
            raise ValueError("This model needs a d-vector")
        dvec = np.atleast_2d(np.asarray(dvec))
        if dvec.shape != (x.shape[0], cfg.dvector_dim):
            raise ValueError(f"d-vector batch must be ({x.shape[0]}, {cfg.dvector_dim}), got {dvec.shape}")
        return dvec

    def _bottleneck_input(self, h: np.ndarray, dvec: Optional[np.ndarray], batch: int, n_streams: int) -> np.ndarray:
        n, c, f, t = h.shape
        seq = h.transpose(0, 3, 1, 2).reshape(n, t, c * f)
        if dvec is not None:
            d = np.repeat(dvec, n_streams, axis=0)
            d = np.broadcast_to((d + 1j * d)[:, None, :], (n, t, d.shape[1]))
            seq = np.concatenate([seq, d.astype(seq.dtype)], axis=2)
        if self.config.bottleneck == 'pooled' and self.config.is_agnostic:
            seq = ordered_mean(seq.reshape(batch, n_streams, t, -1), axis=1, exact=self.config.exact_reductions)
        return seq

    def _bottleneck_output(self, seq: np.ndarray, shape: Tuple[int, ...], n_streams: int) -> np.ndarray:
        n, c, f, t = shape
        if self.config.bottleneck == 'pooled' and self.config.is_agnostic:
            seq = np.repeat(seq, n_streams, axis=0)
        return seq.reshape(n, t, c, f).transpose(0, 2, 3, 1)

    def forward(self, x: np.ndarray, dvec: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Batch forward over whole sequences.

        Args:
            x: Complex input (B, M, C, F, T).
            dvec: Embeddings (B, D); required when the model uses d-vectors.

        Returns:
            Bounded complex mask (B, F, T).
        """
        dvec = self._check(x, dvec)
        batch, streams, c_in, n_bins, frames = x.shape
        h = x.reshape(batch * streams, c_in, n_bins, frames)
        skips = []
        for block in self.encoders:
            h = block['act'].forward(block['bn'].forward(block['conv'].forward(h)))
            if 'pool' in block:
                h = block['pool'].forward(h, streams)
            skips.append(h)

        enc_shape = h.shape
        seq = self._bottleneck_input(h, dvec, batch, streams)
        for lstm in self.lstms:
            seq, _ = lstm.forward(seq)
        h = self._bottleneck_output(self.dense.forward(seq), enc_shape, streams)

        for block in self.decoders:
            h = block['conv'].forward(np.concatenate([h, skips[block['skip']]], axis=1), block['out_bins'])
            if 'bn' in block:
                h = block['act'].forward(block['bn'].forward(h))
                if 'pool' in block:
                    h = block['pool'].forward(h, streams)

        raw = global_pool(h.reshape(batch, streams, -1, n_bins, frames), self.config.exact_reductions)
        self._cache = (x.shape, enc_shape, raw, dvec is not None)
        return bound_mask(raw, self.config.mask_limit)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Back-propagate dL/dmask (B, F, T); accumulates parameter gradients, returns dL/dx."""
        if self._cache is None:
            raise RuntimeError("MaskNetwork: backward called before forward")
        x_shape, enc_shape, raw, has_dvec = self._cache
        batch, streams, c_in, n_bins, frames = x_shape
        g = _bound_mask_backward(raw, grad, self.config.mask_limit)
        mc = self.config.mask_channels
        g = np.broadcast_to(g[:, None, None] / (streams * mc), (batch, streams, mc, n_bins, frames))
        g = np.ascontiguousarray(g).reshape(batch * streams, mc, n_bins, frames)

        skip_grads: Dict[int, np.ndarray] = {}
        for block in reversed(self.decoders):
            if 'bn' in block:
                if 'pool' in block:
                    g = block['pool'].backward(g)
                g = block['bn'].backward(block['act'].backward(g))
            g_in = block['conv'].backward(g)
            half = g_in.shape[1] // 2
            g, skip_grads[block['skip']] = g_in[:, :half], g_in[:, half:]

        n, c, f, t = enc_shape
        g_seq = g.transpose(0, 3, 1, 2).reshape(n, t, c * f)
        if self.config.bottleneck == 'pooled' and self.config.is_agnostic:
            g_seq = g_seq.reshape(batch, streams, t, -1).sum(axis=1)
        g_seq = self.dense.backward(g_seq)
        for lstm in reversed(self.lstms):
            g_seq = lstm.backward(g_seq)
        if self.config.bottleneck == 'pooled' and self.config.is_agnostic:
            g_seq = np.repeat(g_seq / streams, streams, axis=0)
        g = g_seq[:, :, :c * f].reshape(n, t, c, f).transpose(0, 2, 3, 1)

        for l in reversed(range(len(self.encoders))):
            block = self.encoders[l]
            g = g + skip_grads[l]
            if 'pool' in block:
                g = block['pool'].backward(g)
            g = block['conv'].backward(block['bn'].backward(block['act'].backward(g)))
        return g.reshape(x_shape)

    def step(self, x: np.ndarray, dvec: Optional[np.ndarray], state: NetworkState) -> Tuple[np.ndarray, NetworkState]:
        """Frame-at-a-time forward (eval mode) carrying conv and LSTM context in state."""
        if self.training:
            raise RuntimeError("Streaming requires the model in eval mode")
        dvec = self._check(x, dvec)
        batch, streams, c_in, n_bins, frames = x.shape
        h = x.reshape(batch * streams, c_in, n_bins, frames)
        encoder_past, decoder_past, lstm_states = [], [], []
        skips = []
        for block, past in zip(self.encoders, state.encoder_past):
            h, new_past = block['conv'].forward_step(h, past)
            encoder_past.append(new_past)
            h = block['act'].forward(block['bn'].forward(h))
            if 'pool' in block:
                h = block['pool'].forward(h, streams)
            skips.append(h)

        enc_shape = h.shape
        seq = self._bottleneck_input(h, dvec, batch, streams)
        for lstm, lstm_state in zip(self.lstms, state.lstm):
            outputs = []
            for t in range(frames):
                y, lstm_state, _ = lstm.step(seq[:, t], lstm_state)
                outputs.append(y)
            seq = np.stack(outputs, axis=1)
            lstm_states.append(lstm_state)
        h = self._bottleneck_output(self.dense.forward(seq), enc_shape, streams)

        for block, past in zip(self.decoders, state.decoder_past):
            joined = np.concatenate([h, skips[block['skip']]], axis=1)
            h, new_past = block['conv'].forward_step(joined, block['out_bins'], past)
            decoder_past.append(new_past)
            if 'bn' in block:
                h = block['act'].forward(block['bn'].forward(h))
                if 'pool' in block:
                    h = block['pool'].forward(h, streams)

        raw = global_pool(h.reshape(batch, streams, -1, n_bins, frames), self.config.exact_reductions)
        return bound_mask(raw, self.config.mask_limit), NetworkState(encoder_past, decoder_past, lstm_states)

    def layer_table(self) -> List[Tuple[str, dict, int]]:
        rows = []
        for name, child in self._children.items():
            rows.append((name, child.spec().to_dict(), child.n_parameters()))
        return rows


def describe(model: MaskNetwork) -> str:
    """Human-readable layer table with parameter counts."""
    cfg = model.config
    lines = [
        f"Model variant: {cfg.variant}",
        f"Frame: {cfg.frame.window_len}/{cfg.frame.hop_len}/{cfg.frame.fft_len} ({cfg.frame.n_bins} bins)",
        f"Input channels per stream: {cfg.in_channels}; bottleneck: {cfg.bottleneck}; "
        f"d-vector: {cfg.dvector_dim if cfg.use_dvector else 'off'}",
        "",
        f"{'layer':<12} {'kind':<11} {'in':>5} {'out':>5} {'kernel':>7} {'stride':>7} {'params':>9}",
        "-" * 62,
    ]
    for name, spec, count in model.layer_table():
        kernel = 'x'.join(str(k) for k in spec['kernel'])
        stride = 'x'.join(str(s) for s in spec['stride'])
        lines.append(f"{name:<12} {spec['kind']:<11} {spec['in_channels']:>5} {spec['out_channels']:>5} "
                     f"{kernel:>7} {stride:>7} {count:>9,}")
    lines.append("-" * 62)
    lines.append(f"Total real parameters: {model.n_parameters():,}")
    return "\n".join(lines)


def save_model(path: Path, model: MaskNetwork) -> None:
    save_checkpoint(path, model.config.variant, model.config.to_dict(), model.state_dict())
    logging.info(f"Saved {model.config.variant} checkpoint to {path}")


def load_model(path: Path) -> MaskNetwork:
    """Rebuild a MaskNetwork from a checkpoint; the model comes back in eval mode."""
    variant, config, tensors = load_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(config)
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"Checkpoint {path} has an invalid model config: {exc}") from exc
    if cfg.variant != variant:
        raise CheckpointFormatError(f"Checkpoint {path} variant tag '{variant}' disagrees with config '{cfg.variant}'")
    model = MaskNetwork(cfg)
    model.load_state_dict(tensors)
    return model.eval()


def model_inputs(spec: ComplexSpectrogram, config: ModelConfig,
                 state: Optional[EwmaState] = None) -> Tuple[np.ndarray, np.ndarray, Optional[EwmaState]]:
    """
    Network input and mask reference for a multichannel spectrogram.

    Returns:
        Tuple of (complex input (1, M', C, F, T), reference spectrogram (F, T) the mask
        applies to, updated EWMA state).
    """
    n_streams = spec.n_streams
    if config.variant == 'sc_pse':
        return spec.data[None, :1], spec.data[0], state
    if config.variant in ('mc_stft', 'mc_ipd'):
        if n_streams != config.n_mics:
            raise ChannelMismatchError(f"{config.variant} model expects {config.n_mics} channels, got {n_streams}")
        if config.variant == 'mc_stft':
            tensor = assemble_fixed_stft(spec)
        else:
            tensor, state = assemble_fixed_ipd(spec, normalize=config.normalize_ipd, state=state)
        return tensor.as_complex()[None, None], spec.data[0], state
    tensor, state = assemble_agnostic(spec, state, normalize=config.normalize_ipd, exact=config.exact_reductions)
    return tensor.as_complex()[None], tensor.virtual.data[0], state


def pdccrn_forward(features: FeatureTensor, dvec: Optional[DVector], model: MaskNetwork) -> ComplexMask:
    """Fixed-geometry forward: (C, 2F, T) real features -> complex mask (F, T)."""
    if features.layout != 'fixed':
        raise ValueError(f"pdccrn_forward needs fixed-layout features, got {features.layout}")
    embedding = None if dvec is None else dvec.values[None]
    mask = model.forward(features.as_complex()[None, None], embedding if model.config.use_dvector else None)
    return ComplexMask(mask[0])


def geo_agnostic_forward(features: FeatureTensor, virtual: ComplexSpectrogram, dvec: Optional[DVector],
                         model: MaskNetwork) -> ComplexSpectrogram:
    """Geometry-agnostic forward: mask from stream-major features applied to the virtual microphone."""
    if features.layout != 'stream_major':
        raise ValueError(f"geo_agnostic_forward needs stream-major features, got {features.layout}")
    if not model.config.is_agnostic:
        raise ChannelMismatchError(f"{model.config.variant} model cannot run stream-major features")
    embedding = None if dvec is None else dvec.values[None]
    mask = model.forward(features.as_complex()[None], embedding if model.config.use_dvector else None)
    return apply_mask(virtual, ComplexMask(mask[0]))


def resolve_embedding(enrollment: Union[DVector, np.ndarray, None], config: ModelConfig) -> Optional[np.ndarray]:
    """(1, D) embedding array from a DVector or an enrollment waveform; None without d-vectors."""
    if not config.use_dvector:
        return None
    if enrollment is None:
        raise ValueError("An enrollment utterance or embedding is required for this model")
    if not isinstance(enrollment, DVector):
        enrollment = dvector_stub(enrollment, dim=config.dvector_dim)
    if enrollment.dim != config.dvector_dim:
        raise ValueError(f"Embedding has {enrollment.dim} dims, model expects {config.dvector_dim}")
    return enrollment.values[None]


def enhance_offline(wave: Union[MultiChannelWave, np.ndarray], enrollment, model: MaskNetwork) -> np.ndarray:
    """
    Enhance a whole recording in eval mode; the model's previous mode is restored.

    Returns:
        T * hop_len enhanced samples aligned with the input, where T is the number
        of STFT frames. The first window_len - hop_len samples are only partially
        overlap-added.
    """
    if not isinstance(wave, MultiChannelWave):
        wave = MultiChannelWave(np.asarray(wave, dtype=np.float32))
    cfg = model.config
    embedding = resolve_embedding(enrollment, cfg)
    spec = stft(wave.samples.astype(np.float32), cfg.frame)
    x, reference, _ = model_inputs(spec, cfg)
    was_training = model.training
    model.eval()
    try:
        mask = model.forward(x, embedding)[0]
    finally:
        model.train(was_training)
    enhanced = istft(ComplexSpectrogram(reference * mask, cfg.frame))
    return enhanced[:spec.n_frames * cfg.frame.hop_len].astype(np.float32)


class StreamingSession:
    """
    Frame-by-frame enhancement state.

    push() accepts hop_len new samples per microphone, either (M, hop) or M-interleaved
    (hop * M,), and returns hop_len enhanced samples once a full window is buffered
    (an empty array during the first window_len / hop_len - 1 pushes).
    """

    def __init__(self, model: MaskNetwork, enrollment, n_mics: int):
        cfg = model.config
        if not cfg.is_agnostic and cfg.variant != 'sc_pse' and n_mics != cfg.n_mics:
            raise ChannelMismatchError(f"{cfg.variant} model expects {cfg.n_mics} channels, got {n_mics}")
        if n_mics < 1:
            raise ValueError("n_mics must be >= 1")
        self.model = model.eval()
        self.frame = cfg.frame
        self.n_mics = n_mics
        self.embedding = resolve_embedding(enrollment, cfg)
        self.buffer = np.zeros((n_mics, self.frame.window_len), dtype=np.float32)
        self.ola = np.zeros(self.frame.window_len)
        self.net_state = model.initial_state()
        self.ewma: Optional[EwmaState] = None
        self.pushed = 0
        self.frame_seconds: List[float] = []

    def _as_block(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame, dtype=np.float32)
        hop = self.frame.hop_len
        if frame.shape == (self.n_mics, hop):
            return frame
        if frame.shape == (self.n_mics * hop,):
            return frame.reshape(hop, self.n_mics).T
        raise ValueError(f"Frame must hold {self.n_mics} x {hop} samples, got shape {frame.shape}")

    def push(self, frame: np.ndarray) -> np.ndarray:
        block = self._as_block(frame)
        start = time.perf_counter()
        hop = self.frame.hop_len
        self.buffer = np.concatenate([self.buffer[:, hop:], block], axis=1)
        self.pushed += 1
        if self.pushed < self.frame.overlap_factor:
            return np.zeros(0, dtype=np.float32)
        spec = stft(self.buffer, self.frame)
        x, reference, self.ewma = model_inputs(spec, self.model.config, self.ewma)
        mask, self.net_state = self.model.step(x, self.embedding, self.net_state)
        enhanced = reference[:, 0] * mask[0, :, 0]
        samples = np.fft.irfft(enhanced, n=self.frame.fft_len)[:self.frame.window_len] * self.frame.taper()
        self.ola += samples
        out = self.ola[:hop] / self.frame.ola_gain()
        self.ola = np.concatenate([self.ola[hop:], np.zeros(hop)])
        self.frame_seconds.append(time.perf_counter() - start)
        return out.astype(np.float32)

    def latency_report(self) -> dict:
        """Per-frame processing time statistics and the real-time factor."""
        if not self.frame_seconds:
            return {'frames': 0}
        times = np.asarray(self.frame_seconds)
        hop_seconds = self.frame.hop_len / self.frame.sample_rate_hz
        return {
            'frames': int(times.size),
            'mean_ms': float(times.mean() * 1000),
            'p95_ms': float(np.percentile(times, 95) * 1000),
            'max_ms': float(times.max() * 1000),
            'real_time_factor': float(times.mean() / hop_seconds),
        }


def enhance_stream(session: StreamingSession, frame: np.ndarray) -> np.ndarray:
    return session.push(frame)
