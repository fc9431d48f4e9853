"""
Complex-valued network layers with hand-written gradients.

Activations are complex arrays laid out (N, C, F, T): batch, channel, frequency, frame.
Gradients follow the real-composite convention: for a real loss L and complex z the
stored gradient is dL/dRe(z) + 1j * dL/dIm(z). Under that convention a complex product
z = W x back-propagates as dW = G conj(x)^T and dx = conj(W)^T G.

Every layer caches what its backward pass needs during forward(); calling backward()
without a preceding forward() raises RuntimeError. Streaming counterparts
(forward_step) share the per-frame arithmetic of the batch path, so frame-at-a-time
execution reproduces batch execution bit-for-bit.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

CHECKPOINT_MAGIC = b'GPSE'
CHECKPOINT_VERSION = 1
DTYPE_FLOAT32 = 0
DTYPE_COMPLEX64 = 1

LEAKY_SLOPE = 0.01
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


class CheckpointFormatError(ValueError):
    """Raised for checkpoint files with a bad magic, unknown version, or truncated data."""


def complex_dtype(real_dtype) -> np.dtype:
    return np.dtype(np.complex128 if np.dtype(real_dtype) == np.float64 else np.complex64)


class ComplexParamTensor:
    """Learnable tensor with paired gradient storage (complex or real valued)."""

    def __init__(self, value: np.ndarray):
        self.value = np.array(value)
        self.grad = np.zeros_like(self.value)

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def real_part(self) -> np.ndarray:
        return self.value.real

    @property
    def imag_part(self) -> np.ndarray:
        return self.value.imag

    @property
    def grad_real(self) -> np.ndarray:
        return self.grad.real

    @property
    def grad_imag(self) -> np.ndarray:
        return self.grad.imag

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, real_dtype) -> None:
        dtype = complex_dtype(real_dtype) if self.is_complex else np.dtype(real_dtype)
        self.value = np.ascontiguousarray(self.value.astype(dtype))
        self.grad = np.zeros_like(self.value)

    def real_view(self) -> np.ndarray:
        """Value as a real array (complex entries become interleaved re/im pairs)."""
        if self.is_complex:
            return self.value.view(self.value.real.dtype)
        return self.value

    def grad_view(self) -> np.ndarray:
        if self.is_complex:
            return self.grad.view(self.grad.real.dtype)
        return self.grad


@dataclass
class LayerSpec:
    """Static description of one layer for tables and checkpoints."""
    kind: str
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    causal_time_pad: int = 0

    def to_dict(self) -> dict:
        data = asdict(self)
        data['kernel'] = list(self.kernel)
        data['stride'] = list(self.stride)
        return data


def glorot_complex(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(3.0 / (fan_in + fan_out))
    return (rng.uniform(-limit, limit, shape) + 1j * rng.uniform(-limit, limit, shape)).astype(np.complex64)


class Module:
    """Container of parameters, buffers and child modules."""

    def __init__(self):
        self._params: Dict[str, ComplexParamTensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, 'Module'] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> ComplexParamTensor:
        param = ComplexParamTensor(value)
        self._params[name] = param
        return param

    def add_child(self, name: str, module: 'Module') -> 'Module':
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = '') -> List[Tuple[str, ComplexParamTensor]]:
        items = [(f"{prefix}{name}", p) for name, p in self._params.items()]
        for name, child in self._children.items():
            items.extend(child.named_parameters(f"{prefix}{name}."))
        return items

    def parameters(self) -> List[ComplexParamTensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = '') -> List[Tuple[str, np.ndarray]]:
        items = [(f"{prefix}{name}", b) for name, b in self._buffers.items()]
        for name, child in self._children.items():
            items.extend(child.named_buffers(f"{prefix}{name}."))
        return items

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> 'Module':
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def astype(self, real_dtype) -> 'Module':
        """Convert parameters and buffers to float32/complex64 or float64/complex128."""
        for p in self._params.values():
            p.astype(real_dtype)
        for name, buf in self._buffers.items():
            dtype = complex_dtype(real_dtype) if np.iscomplexobj(buf) else np.dtype(real_dtype)
            self._buffers[name] = buf.astype(dtype)
        for child in self._children.values():
            child.astype(real_dtype)
        return self

    def n_parameters(self) -> int:
        """Real-valued parameter count (complex entries count twice)."""
        return sum(p.value.size * (2 if p.is_complex else 1) for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.value.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = {name for name, _ in self.named_parameters()} | {name for name, _ in self.named_buffers()}
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise CheckpointFormatError(
                f"Checkpoint tensors do not match the model (missing: {sorted(missing)[:5]}, "
                f"unexpected: {sorted(unexpected)[:5]})"
            )
        self._load(state, '')

    def _load(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        for name, p in self._params.items():
            value = state[f"{prefix}{name}"]
            if value.shape != p.shape:
                raise CheckpointFormatError(f"Tensor {prefix}{name} has shape {value.shape}, model expects {p.shape}")
            p.value = np.ascontiguousarray(value.astype(p.value.dtype))
            p.grad = np.zeros_like(p.value)
        for name in list(self._buffers):
            self._buffers[name] = state[f"{prefix}{name}"].astype(self._buffers[name].dtype)
        for name, child in self._children.items():
            child._load(state, f"{prefix}{name}.")


def _require_cache(cache, layer: str):
    if cache is None:
        raise RuntimeError(f"{layer}: backward called before forward")
    return cache


def _frame_columns(window: np.ndarray, kernel_f: int, stride_f: int, out_f: int) -> np.ndarray:
    """(N, C, Fp, KT) window -> contiguous (N, C*KF*KT, Fo) patch matrix."""
    n, c, _, kt = window.shape
    views = np.lib.stride_tricks.sliding_window_view(window, kernel_f, axis=2)[:, :, ::stride_f][:, :, :out_f]
    cols = np.ascontiguousarray(views.transpose(0, 1, 4, 3, 2))
    return cols.reshape(n, c * kernel_f * kt, out_f)


class _CausalConvCore(Module):
    """Shared forward/backward of a causal complex convolution (kernel KF x KT)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: Tuple[int, int],
                 stride_f: int, rng: np.random.Generator):
        super().__init__()
        kf, kt = kernel
        if kf < 1 or kt < 1:
            raise ValueError(f"Kernel must be positive, got {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kf, kt)
        self.stride_f = stride_f
        fan_in, fan_out = in_channels * kf * kt, out_channels * kf * kt
        self.weight = self.add_param('weight', glorot_complex(rng, (out_channels, in_channels, kf, kt), fan_in, fan_out))
        self.bias = self.add_param('bias', np.zeros(out_channels, dtype=np.complex64))
        self._cache = None

    @property
    def past_frames(self) -> int:
        return self.kernel[1] - 1

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"{type(self).__name__} expects (N, {self.in_channels}, F, T) input, got {x.shape}"
            )

    def _padded(self, x: np.ndarray, past: Optional[np.ndarray], pad: Tuple[int, int]) -> np.ndarray:
        n, c, f, _ = x.shape
        if past is None:
            past = np.zeros((n, c, f, self.past_frames), dtype=x.dtype)
        elif past.shape != (n, c, f, self.past_frames):
            raise ValueError(f"Past context shape {past.shape} does not match {(n, c, f, self.past_frames)}")
        joined = np.concatenate([past.astype(x.dtype, copy=False), x], axis=3)
        return np.pad(joined, ((0, 0), (0, 0), (pad[0], pad[1]), (0, 0)))

    def _out_bins(self, padded_bins: int) -> int:
        out = (padded_bins - self.kernel[0]) // self.stride_f + 1
        if out < 1:
            raise ValueError(f"Input too small in frequency for kernel {self.kernel}")
        return out

    def _run(self, x: np.ndarray, past: Optional[np.ndarray], pad: Tuple[int, int], keep: bool) -> np.ndarray:
        xp = self._padded(x, past, pad)
        kf, kt = self.kernel
        out_f = self._out_bins(xp.shape[2])
        w2d = self.weight.value.reshape(self.out_channels, -1)
        bias = self.bias.value[:, None]
        outs, cols_all = [], []
        for t in range(x.shape[3]):
            cols = _frame_columns(xp[:, :, :, t:t + kt], kf, self.stride_f, out_f)
            outs.append(w2d @ cols + bias)
            if keep:
                cols_all.append(cols)
        if keep:
            self._cache = (np.stack(cols_all), x.shape, xp.shape, pad)
        return np.stack(outs, axis=-1)

    def _backward(self, grad: np.ndarray) -> np.ndarray:
        cols_all, x_shape, xp_shape, pad = _require_cache(self._cache, type(self).__name__)
        n, c, f, t_len = x_shape
        kf, kt = self.kernel
        out_f = grad.shape[2]
        grad_t = np.ascontiguousarray(grad.transpose(3, 0, 1, 2))

        self.bias.grad += grad.sum(axis=(0, 2, 3))
        g2 = grad_t.transpose(2, 0, 1, 3).reshape(self.out_channels, -1)
        c2 = cols_all.transpose(2, 0, 1, 3).reshape(cols_all.shape[2], -1)
        self.weight.grad += (g2 @ c2.conj().T).reshape(self.weight.shape)

        w2d = self.weight.value.reshape(self.out_channels, -1)
        grad_cols = (w2d.conj().T @ grad_t).reshape(t_len, n, c, kf, kt, out_f)
        grad_xp = np.zeros(xp_shape, dtype=np.result_type(grad.dtype, w2d.dtype))
        span = self.stride_f * (out_f - 1) + 1
        for i in range(kf):
            for j in range(kt):
                grad_xp[:, :, i:i + span:self.stride_f, j:j + t_len] += grad_cols[:, :, :, i, j, :].transpose(1, 2, 3, 0)
        return grad_xp[:, :, pad[0]:pad[0] + f, self.past_frames:]

    @staticmethod
    def next_past(x: np.ndarray, past: Optional[np.ndarray], frames: int) -> np.ndarray:
        """Last `frames` input frames after appending x to the past context."""
        if frames == 0:
            return x[..., :0]
        if past is None:
            past = np.zeros(x.shape[:3] + (frames,), dtype=x.dtype)
        return np.concatenate([past, x], axis=3)[..., -frames:]


class ComplexConv2d(_CausalConvCore):
    """
    Causal complex 2-D convolution (frequency x time).

    Time padding covers only past frames (KT - 1 of them); frequency is padded by
    freq_pad and strided by stride[0].
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: Tuple[int, int] = (5, 2),
                 stride: Tuple[int, int] = (2, 1), freq_pad: Optional[Tuple[int, int]] = None,
                 rng: Optional[np.random.Generator] = None):
        if stride[1] != 1:
            raise ValueError("Only time stride 1 is supported")
        super().__init__(in_channels, out_channels, kernel, stride[0], rng or np.random.default_rng(0))
        half = (kernel[0] - 1) // 2
        self.freq_pad = tuple(freq_pad) if freq_pad is not None else (half, kernel[0] - 1 - half)

    def output_bins(self, in_bins: int) -> int:
        return self._out_bins(in_bins + sum(self.freq_pad))

    def forward(self, x: np.ndarray, past: Optional[np.ndarray] = None) -> np.ndarray:
        self._check_input(x)
        return self._run(x, past, self.freq_pad, keep=True)

    def forward_step(self, x: np.ndarray, past: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        """One or more new frames with explicit past context; returns (output, new past)."""
        self._check_input(x)
        y = self._run(x, past, self.freq_pad, keep=False)
        return y, self.next_past(x, past, self.past_frames)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self._backward(grad)

    def spec(self) -> LayerSpec:
        return LayerSpec('cconv2d', self.in_channels, self.out_channels, self.kernel,
                         (self.stride_f, 1), self.past_frames)


class ComplexTransposedConv2d(_CausalConvCore):
    """
    Causal complex transposed convolution upsampling frequency by stride[0].

    Implemented as zero insertion along frequency followed by a stride-1 causal
    convolution; output_bins() selects the extra trailing padding that restores the
    paired encoder's input size.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: Tuple[int, int] = (5, 2),
                 stride: Tuple[int, int] = (2, 1), freq_pad: Tuple[int, int] = (2, 2),
                 rng: Optional[np.random.Generator] = None):
        if stride[1] != 1:
            raise ValueError("Only time stride 1 is supported")
        super().__init__(in_channels, out_channels, kernel, 1, rng or np.random.default_rng(0))
        self.upsample = stride[0]
        self.freq_pad = tuple(freq_pad)
        self._in_bins = None

    def _dilated_bins(self, in_bins: int) -> int:
        return (in_bins - 1) * self.upsample + 1

    def output_padding(self, in_bins: int, out_bins: int) -> int:
        natural = self._dilated_bins(in_bins) + sum(self.freq_pad) - self.kernel[0] + 1
        extra = out_bins - natural
        if not 0 <= extra < self.upsample:
            raise ValueError(f"Cannot upsample {in_bins} bins to {out_bins} with stride {self.upsample}")
        return extra

    def _dilate(self, x: np.ndarray) -> np.ndarray:
        n, c, f, t = x.shape
        out = np.zeros((n, c, self._dilated_bins(f), t), dtype=x.dtype)
        out[:, :, ::self.upsample] = x
        return out

    def forward(self, x: np.ndarray, out_bins: int, past: Optional[np.ndarray] = None) -> np.ndarray:
        """past, when given, is dilated context of shape (N, C, dilated F, KT - 1)."""
        self._check_input(x)
        pad = (self.freq_pad[0], self.freq_pad[1] + self.output_padding(x.shape[2], out_bins))
        self._in_bins = x.shape[2]
        return self._run(self._dilate(x), past, pad, keep=True)

    def forward_step(self, x: np.ndarray, out_bins: int,
                     past: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        self._check_input(x)
        pad = (self.freq_pad[0], self.freq_pad[1] + self.output_padding(x.shape[2], out_bins))
        dilated = self._dilate(x)
        y = self._run(dilated, past, pad, keep=False)
        return y, self.next_past(dilated, past, self.past_frames)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad_dilated = self._backward(grad)
        return grad_dilated[:, :, ::self.upsample]

    def spec(self) -> LayerSpec:
        return LayerSpec('ctconv2d', self.in_channels, self.out_channels, self.kernel,
                         (self.upsample, 1), self.past_frames)


def _whitening(cov: np.ndarray) -> np.ndarray:
    """Closed-form inverse square root of (C, 2, 2) SPD matrices."""
    vrr, vri, vii = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    s = np.sqrt(vrr * vii - vri * vri)
    t = np.sqrt(vrr + vii + 2.0 * s)
    inv = 1.0 / (s * t)
    out = np.empty_like(cov)
    out[:, 0, 0] = (vii + s) * inv
    out[:, 1, 1] = (vrr + s) * inv
    out[:, 0, 1] = out[:, 1, 0] = -vri * inv
    return out


class ComplexBatchNorm(Module):
    """
    Complex batch normalization.

    Each channel's (re, im) pair is centered and whitened by the inverse square root
    of its 2x2 covariance (ridge epsilon on the diagonal), then mapped by a learnable
    symmetric 2x2 scale and a complex shift. Training uses batch statistics and
    updates running estimates; evaluation uses only the running estimates.
    """

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        gamma = np.zeros((channels, 3), dtype=np.float32)
        gamma[:, 0] = gamma[:, 1] = 1.0
        self.gamma = self.add_param('gamma', gamma)  # columns: rr, ii, ri
        self.beta = self.add_param('beta', np.zeros(channels, dtype=np.complex64))
        self._buffers['running_mean'] = np.zeros(channels, dtype=np.complex64)
        cov = np.zeros((channels, 2, 2), dtype=np.float32)
        cov[:, 0, 0] = cov[:, 1, 1] = 1.0
        self._buffers['running_cov'] = cov
        self._cache = None

    def _affine(self, zr: np.ndarray, zi: np.ndarray) -> np.ndarray:
        g = self.gamma.value
        rr, ii, ri = (g[:, k][None, :, None, None] for k in range(3))
        beta = self.beta.value[None, :, None, None]
        return (rr * zr + ri * zi) + 1j * (ri * zr + ii * zi) + beta

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"ComplexBatchNorm expects (N, {self.channels}, F, T), got {x.shape}")
        real_dtype = x.real.dtype
        if self.training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            if count < 2:
                raise ValueError("ComplexBatchNorm in training mode needs more than one value per channel")
            mean = x.mean(axis=(0, 2, 3))
            centered = x - mean[None, :, None, None]
            a, b = centered.real, centered.imag
            cov = np.empty((self.channels, 2, 2), dtype=np.float64)
            cov[:, 0, 0] = (a * a).mean(axis=(0, 2, 3))
            cov[:, 1, 1] = (b * b).mean(axis=(0, 2, 3))
            cov[:, 0, 1] = cov[:, 1, 0] = (a * b).mean(axis=(0, 2, 3))
            m = self.momentum
            self._buffers['running_mean'] = (m * self._buffers['running_mean'] + (1 - m) * mean).astype(
                self._buffers['running_mean'].dtype)
            self._buffers['running_cov'] = (m * self._buffers['running_cov'] + (1 - m) * cov).astype(
                self._buffers['running_cov'].dtype)
        else:
            mean = self._buffers['running_mean']
            cov = self._buffers['running_cov'].astype(np.float64)
            centered = x - mean[None, :, None, None].astype(x.dtype)
            a, b = centered.real, centered.imag
        ridge = cov + self.epsilon * np.eye(2)[None]
        w = _whitening(ridge)
        wrr, wri, wii = (w[:, i, j][None, :, None, None].astype(real_dtype) for i, j in ((0, 0), (0, 1), (1, 1)))
        zr = wrr * a + wri * b
        zi = wri * a + wii * b
        self._cache = (a, b, zr, zi, ridge, w, self.training)
        return self._affine(zr, zi).astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        a, b, zr, zi, ridge, w, trained = _require_cache(self._cache, 'ComplexBatchNorm')
        gr, gi = grad.real, grad.imag
        axes = (0, 2, 3)
        self.beta.grad += grad.sum(axis=axes).astype(self.beta.grad.dtype)
        self.gamma.grad[:, 0] += (gr * zr).sum(axis=axes)
        self.gamma.grad[:, 1] += (gi * zi).sum(axis=axes)
        self.gamma.grad[:, 2] += (gr * zi + gi * zr).sum(axis=axes)

        g = self.gamma.value
        rr, ii, ri = (g[:, k][None, :, None, None] for k in range(3))
        gzr = rr * gr + ri * gi
        gzi = ri * gr + ii * gi
        wb = w[:, :, :, None, None, None]
        gar = wb[:, 0, 0].transpose(1, 0, 2, 3) * gzr + wb[:, 0, 1].transpose(1, 0, 2, 3) * gzi
        gai = wb[:, 1, 0].transpose(1, 0, 2, 3) * gzr + wb[:, 1, 1].transpose(1, 0, 2, 3) * gzi
        if not trained:
            return gar + 1j * gai

        count = a.shape[0] * a.shape[2] * a.shape[3]
        # A = sum_k x_k gz_k^T per channel
        big_a = np.empty_like(w)
        big_a[:, 0, 0] = (a * gzr).sum(axis=axes)
        big_a[:, 0, 1] = (a * gzi).sum(axis=axes)
        big_a[:, 1, 0] = (b * gzr).sum(axis=axes)
        big_a[:, 1, 1] = (b * gzi).sum(axis=axes)
        big_b = -w @ big_a @ w
        lam, q = np.linalg.eigh(ridge)
        root = np.sqrt(lam)
        rotated = np.swapaxes(q, 1, 2) @ big_b @ q
        rotated = rotated / (root[:, :, None] + root[:, None, :])
        big_c = q @ rotated @ np.swapaxes(q, 1, 2)
        sym = (big_c + np.swapaxes(big_c, 1, 2)) / count
        sb = sym[:, :, :, None, None, None]
        gxr = gar + sb[:, 0, 0].transpose(1, 0, 2, 3) * a + sb[:, 0, 1].transpose(1, 0, 2, 3) * b
        gxi = gai + sb[:, 1, 0].transpose(1, 0, 2, 3) * a + sb[:, 1, 1].transpose(1, 0, 2, 3) * b
        gxr = gxr - gxr.mean(axis=axes, keepdims=True)
        gxi = gxi - gxi.mean(axis=axes, keepdims=True)
        return gxr + 1j * gxi

    def spec(self) -> LayerSpec:
        return LayerSpec('cbatchnorm', self.channels, self.channels)


class LeakyReLU(Module):
    """Leaky ReLU applied separately to real and imaginary parts."""

    def __init__(self, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.slope = slope
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        pos_r, pos_i = x.real > 0, x.imag > 0
        self._cache = (pos_r, pos_i)
        real = np.where(pos_r, x.real, self.slope * x.real)
        imag = np.where(pos_i, x.imag, self.slope * x.imag)
        return (real + 1j * imag).astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        pos_r, pos_i = _require_cache(self._cache, 'LeakyReLU')
        return np.where(pos_r, grad.real, self.slope * grad.real) + 1j * np.where(pos_i, grad.imag, self.slope * grad.imag)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LSTM(Module):
    """Real-valued LSTM cell (gate order: input, forget, cell, output)."""

    def __init__(self, input_size: int, hidden_size: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        limit = 1.0 / np.sqrt(hidden_size)
        self.w_input = self.add_param('w_input', rng.uniform(-limit, limit, (4 * hidden_size, input_size)).astype(np.float32))
        self.w_hidden = self.add_param('w_hidden', rng.uniform(-limit, limit, (4 * hidden_size, hidden_size)).astype(np.float32))
        bias = np.zeros(4 * hidden_size, dtype=np.float32)
        bias[hidden_size:2 * hidden_size] = 1.0
        self.bias = self.add_param('bias', bias)

    def initial_state(self, batch: int, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
        return np.zeros((batch, self.hidden_size), dtype=dtype), np.zeros((batch, self.hidden_size), dtype=dtype)

    def step(self, x: np.ndarray, state: Tuple[np.ndarray, np.ndarray]):
        """One time step; returns (h, (h, c), cache)."""
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ValueError(f"LSTM expects (N, {self.input_size}) input, got {x.shape}")
        h_prev, c_prev = state
        hs = self.hidden_size
        z = x @ self.w_input.value.T + h_prev @ self.w_hidden.value.T + self.bias.value
        i = _sigmoid(z[:, :hs])
        f = _sigmoid(z[:, hs:2 * hs])
        g = np.tanh(z[:, 2 * hs:3 * hs])
        o = _sigmoid(z[:, 3 * hs:])
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        return h, (h, c), (x, h_prev, c_prev, i, f, g, o, tanh_c)

    def step_backward(self, cache, grad_h: np.ndarray, grad_c: np.ndarray):
        """Back-propagate one step; returns (grad_x, grad_h_prev, grad_c_prev)."""
        x, h_prev, c_prev, i, f, g, o, tanh_c = cache
        grad_o = grad_h * tanh_c
        grad_c = grad_c + grad_h * o * (1.0 - tanh_c ** 2)
        dz = np.concatenate([
            grad_c * g * i * (1.0 - i),
            grad_c * c_prev * f * (1.0 - f),
            grad_c * i * (1.0 - g ** 2),
            grad_o * o * (1.0 - o),
        ], axis=1)
        self.w_input.grad += dz.T @ x
        self.w_hidden.grad += dz.T @ h_prev
        self.bias.grad += dz.sum(axis=0)
        return dz @ self.w_input.value, dz @ self.w_hidden.value, grad_c * f


# (LSTM, input part) pairs of a complex LSTM: y = (Fr(xr) - Fi(xi)) + j (Fr(xi) + Fi(xr))
_TRACKS = (('real', 'real'), ('imag', 'imag'), ('real', 'imag'), ('imag', 'real'))


class ComplexLSTM(Module):
    """Complex LSTM built from two real LSTMs applied to the real and imaginary inputs."""

    def __init__(self, input_size: int, hidden_size: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.lstm_real = self.add_child('lstm_real', LSTM(input_size, hidden_size, rng))
        self.lstm_imag = self.add_child('lstm_imag', LSTM(input_size, hidden_size, rng))
        self._cache = None

    def initial_state(self, batch: int, dtype=np.float32) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [self.lstm_real.initial_state(batch, dtype) for _ in _TRACKS]

    def _cell(self, which: str) -> LSTM:
        return self.lstm_real if which == 'real' else self.lstm_imag

    def step(self, x: np.ndarray, state=None):
        """One complex step on (N, I) input; returns (y, state, cache)."""
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ValueError(f"ComplexLSTM expects (N, {self.input_size}) input, got {x.shape}")
        state = state or self.initial_state(x.shape[0], x.real.dtype)
        parts = {'real': x.real, 'imag': x.imag}
        outputs, new_state, caches = [], [], []
        for (cell, part), track_state in zip(_TRACKS, state):
            h, s, cache = self._cell(cell).step(parts[part], track_state)
            outputs.append(h)
            new_state.append(s)
            caches.append(cache)
        rr, ii, ri, ir = outputs
        y = (rr - ii) + 1j * (ri + ir)
        return y, new_state, caches

    def forward(self, x: np.ndarray, state=None) -> Tuple[np.ndarray, list]:
        """Sequence forward on (N, T, I) input; returns (y of shape (N, T, H), final state)."""
        if x.ndim != 3:
            raise ValueError(f"ComplexLSTM expects (N, T, {self.input_size}) input, got {x.shape}")
        outputs, step_caches = [], []
        for t in range(x.shape[1]):
            y, state, caches = self.step(x[:, t], state)
            outputs.append(y)
            step_caches.append(caches)
        self._cache = step_caches
        return np.stack(outputs, axis=1), state

    def backward(self, grad: np.ndarray) -> np.ndarray:
        step_caches = _require_cache(self._cache, 'ComplexLSTM')
        n, t_len, _ = grad.shape
        signs = {0: grad.real, 1: -grad.real, 2: grad.imag, 3: grad.imag}
        grad_parts = {'real': np.zeros((n, t_len, self.input_size)), 'imag': np.zeros((n, t_len, self.input_size))}
        for k, (cell, part) in enumerate(_TRACKS):
            lstm = self._cell(cell)
            grad_h_next = np.zeros((n, self.hidden_size))
            grad_c_next = np.zeros((n, self.hidden_size))
            for t in reversed(range(t_len)):
                gx, grad_h_next, grad_c_next = lstm.step_backward(
                    step_caches[t][k], signs[k][:, t] + grad_h_next, grad_c_next)
                grad_parts[part][:, t] += gx
        return grad_parts['real'] + 1j * grad_parts['imag']

    def spec(self) -> LayerSpec:
        return LayerSpec('clstm', self.input_size, self.hidden_size)


class Dense(Module):
    """Fully connected layer over the last axis (complex or real weights)."""

    def __init__(self, in_features: int, out_features: int, complex_valued: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.complex_valued = complex_valued
        if complex_valued:
            weight = glorot_complex(rng, (out_features, in_features), in_features, out_features)
            bias = np.zeros(out_features, dtype=np.complex64)
        else:
            limit = np.sqrt(6.0 / (in_features + out_features))
            weight = rng.uniform(-limit, limit, (out_features, in_features)).astype(np.float32)
            bias = np.zeros(out_features, dtype=np.float32)
        self.weight = self.add_param('weight', weight)
        self.bias = self.add_param('bias', bias)
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"Dense expects last dimension {self.in_features}, got {x.shape}")
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = _require_cache(self._cache, 'Dense')
        flat_g = grad.reshape(-1, self.out_features)
        flat_x = x.reshape(-1, self.in_features)
        weight_grad = flat_g.T @ flat_x.conj()
        bias_grad = flat_g.sum(axis=0)
        if not self.complex_valued:
            weight_grad, bias_grad = weight_grad.real, bias_grad.real
        self.weight.grad += weight_grad
        self.bias.grad += bias_grad
        return grad @ self.weight.value.conj()

    def spec(self) -> LayerSpec:
        return LayerSpec('dense', self.in_features, self.out_features)


def clip_grad_norm(params: List[ComplexParamTensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm; returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(np.abs(p.grad.astype(np.complex128)) ** 2)) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


class Adam:
    """Adam with bias correction over the real views of the parameters."""

    def __init__(self, params: List[ComplexParamTensor], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.real_view()) for p in self.params]
        self.v = [np.zeros_like(p.real_view()) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        corr1 = 1.0 - self.beta1 ** self.step_count
        corr2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad_view()
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            w = p.real_view()
            w -= (self.lr * update).astype(w.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def save_checkpoint(path: Path, variant: str, config: dict, tensors: Dict[str, np.ndarray]) -> None:
    """
    Write a binary checkpoint.

    Layout (little-endian): b"GPSE", u32 version, u32 + UTF-8 variant tag, u32 + UTF-8
    JSON layer table, u32 tensor count, then per tensor u32 + UTF-8 name, u8 dtype tag
    (0 float32, 1 complex64 as interleaved float32), u32 ndim, u32 dims, raw data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = {
        'config': config,
        'tensors': [{'name': name, 'shape': list(t.shape), 'complex': bool(np.iscomplexobj(t))}
                    for name, t in tensors.items()],
    }
    variant_bytes = variant.encode('utf-8')
    table_bytes = json.dumps(table, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<I', CHECKPOINT_VERSION))
        f.write(struct.pack('<I', len(variant_bytes)) + variant_bytes)
        f.write(struct.pack('<I', len(table_bytes)) + table_bytes)
        f.write(struct.pack('<I', len(tensors)))
        for name, tensor in tensors.items():
            name_bytes = name.encode('utf-8')
            is_complex = np.iscomplexobj(tensor)
            data = np.ascontiguousarray(tensor.astype(np.complex64 if is_complex else np.float32))
            f.write(struct.pack('<I', len(name_bytes)) + name_bytes)
            f.write(struct.pack('<B', DTYPE_COMPLEX64 if is_complex else DTYPE_FLOAT32))
            f.write(struct.pack('<I', data.ndim))
            f.write(struct.pack(f'<{data.ndim}I', *data.shape))
            f.write(data.view(np.float32).astype('<f4').tobytes())
    logging.debug(f"Saved checkpoint {path} ({len(tensors)} tensors)")


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise CheckpointFormatError(f"Checkpoint {self.path} is truncated")
        chunk = self.blob[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u32(self) -> int:
        return struct.unpack('<I', self.take(4))[0]

    def text(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"Checkpoint {self.path} has an invalid string: {exc}") from exc


def load_checkpoint(path: Path) -> Tuple[str, dict, Dict[str, np.ndarray]]:
    """Read a checkpoint written by save_checkpoint; returns (variant, config, tensors)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version} in {path}")
    variant = reader.text()
    try:
        table = json.loads(reader.text())
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"Checkpoint {path} has a corrupt layer table: {exc}") from exc
    tensors = {}
    for _ in range(reader.u32()):
        name = reader.text()
        tag = struct.unpack('<B', reader.take(1))[0]
        if tag not in (DTYPE_FLOAT32, DTYPE_COMPLEX64):
            raise CheckpointFormatError(f"Unknown dtype tag {tag} for tensor {name}")
        ndim = reader.u32()
        shape = struct.unpack(f'<{ndim}I', reader.take(4 * ndim))
        count = int(np.prod(shape)) * (2 if tag == DTYPE_COMPLEX64 else 1)
        data = np.frombuffer(reader.take(4 * count), dtype='<f4').astype(np.float32)
        tensors[name] = data.view(np.complex64).reshape(shape) if tag == DTYPE_COMPLEX64 else data.reshape(shape)
    if reader.pos != len(reader.blob):
        raise CheckpointFormatError(f"Checkpoint {path} has trailing bytes")
    return variant, table.get('config', {}), tensors
