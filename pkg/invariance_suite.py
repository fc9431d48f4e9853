#!/usr/bin/env python3
"""
Property suites behind `geopse.py selftest`.

Each suite runs a family of checks against a model (a fresh micro-config one
unless a checkpoint is supplied) and returns a SuiteResult with the largest
deviation it measured:

    permutation   reordering microphones leaves the enhanced waveform unchanged
    agnostic      one geometry-agnostic model runs every builtin array geometry
    causality     zeroing future input never changes past mask frames
    streaming     frame-by-frame enhancement equals offline enhancement
    gradient      backward() of every layer and the full model match central differences
    ewma          bias-corrected running normalization behaves as specified
"""

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from cnet import ComplexBatchNorm, ComplexConv2d, ComplexLSTM, ComplexTransposedConv2d, Dense, LeakyReLU
from features import DVector, EwmaState, ewma_normalize
from models import (
    MaskNetwork,
    StreamingSession,
    enhance_offline,
    model_inputs,
    model_preset,
)
from room_sim import BUILTIN_GEOMETRIES, ArrayGeometry, RoomSpec, image_method_rir, resolve_geometry
from signal_core import CANONICAL_RATE, loss_plcpa, stft
from source_store import fit_length, synth_noise, synth_utterance


STREAM_TOLERANCE = 1e-5
LAYER_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
FINITE_DIFFERENCE_STEP = 1e-4
ROOM = RoomSpec((6.0, 5.0, 3.0), 0.3, max_image_order=1)
ARRAY_CENTER = np.array([3.0, 2.5, 1.2])
SOURCE_POSITION = np.array([4.4, 3.1, 1.5])


@dataclass
class SuiteResult:
    """Outcome of one property suite."""
    name: str
    passed: bool = True
    max_deviation: float = 0.0
    tolerance: float = 0.0
    checks: int = 0
    seconds: float = 0.0
    failures: List[str] = field(default_factory=list)

    def record(self, label: str, deviation: float, tolerance: Optional[float] = None) -> None:
        tolerance = self.tolerance if tolerance is None else tolerance
        self.checks += 1
        self.max_deviation = max(self.max_deviation, float(deviation))
        if not deviation <= tolerance:
            self.passed = False
            self.failures.append(f"{label}: deviation {deviation:.3g} exceeds {tolerance:.3g}")

    def fail(self, label: str, reason: str) -> None:
        self.checks += 1
        self.passed = False
        self.failures.append(f"{label}: {reason}")

    def summary(self) -> str:
        status = 'PASS' if self.passed else 'FAIL'
        return (f"{self.name:<12} {status}  checks={self.checks:<5} max deviation={self.max_deviation:.3g} "
                f"(tolerance {self.tolerance:.0e})  {self.seconds:.1f} s")


def default_model(variant: str = 'geo_agnostic', n_mics: int = 3, seed: int = 0) -> MaskNetwork:
    fixed = {} if variant in ('geo_agnostic', 'sc_pse') else {'n_mics': n_mics}
    return MaskNetwork(model_preset('micro', variant=variant, seed=seed, **fixed)).eval()


def enrollment_for(model: MaskNetwork, seed: int = 0) -> DVector:
    return DVector.normalized(np.random.default_rng(seed).standard_normal(model.config.dvector_dim))


def array_recording(geometry: ArrayGeometry, n_samples: int, seed: int = 0) -> np.ndarray:
    """Speech-like source plus diffuse-ish noise captured by a geometry in a small reverberant room."""
    seconds = n_samples / CANONICAL_RATE
    speech = synth_utterance(seed % 4, seed, seconds)
    noise = fit_length(synth_noise('pink' if seed % 2 else 'white', seed, seconds), n_samples)
    rng = np.random.default_rng(seed)
    channels = []
    for position in geometry.mic_positions + ARRAY_CENTER:
        rir = image_method_rir(ROOM, SOURCE_POSITION, position)
        wet = np.convolve(speech, rir)[:n_samples]
        channels.append(wet + 0.1 * noise[:n_samples] + 0.01 * rng.standard_normal(n_samples))
    return np.asarray(channels, dtype=np.float32)


def _timed(suite: Callable[..., SuiteResult]) -> Callable[..., SuiteResult]:
    def wrapper(*args, **kwargs) -> SuiteResult:
        started = time.perf_counter()
        result = suite(*args, **kwargs)
        result.seconds = time.perf_counter() - started
        logging.info(result.summary())
        for failure in result.failures:
            logging.error(f"  {failure}")
        return result
    wrapper.__name__ = suite.__name__
    wrapper.__doc__ = suite.__doc__
    return wrapper


@_timed
def permutation_suite(model: Optional[MaskNetwork] = None, n_mics: int = 7, n_frames: int = 48,
                      exhaustive: Optional[bool] = None, n_random: int = 50, seed: int = 0) -> SuiteResult:
    """
    Enhance one recording under microphone reorderings.

    All n_mics! orders are tried when `exhaustive` (default: n_mics <= 7),
    otherwise `n_random` random ones.
    """
    result = SuiteResult('permutation', tolerance=STREAM_TOLERANCE)
    model = model or default_model()
    if not model.config.is_agnostic:
        result.fail('model', f"{model.config.variant} is not permutation invariant by construction")
        return result
    frame = model.config.frame
    wave = array_recording(resolve_geometry('circ8').subset(range(n_mics), name=f"perm{n_mics}")
                           if n_mics <= 8 else _ring(n_mics),
                           frame.window_len + (n_frames - 1) * frame.hop_len, seed)
    dvec = enrollment_for(model, seed)
    base = enhance_offline(wave, dvec, model)
    exhaustive = n_mics <= 7 if exhaustive is None else exhaustive
    if exhaustive:
        orders = itertools.permutations(range(n_mics))
    else:
        rng = np.random.default_rng(seed)
        orders = (rng.permutation(n_mics) for _ in range(n_random))
    exact = True
    for order in orders:
        out = enhance_offline(wave[list(order)], dvec, model)
        deviation = float(np.max(np.abs(out - base)))
        exact = exact and deviation == 0.0
        result.record(f"order {tuple(int(i) for i in order)}", deviation)
    logging.info(f"Permutation suite: {result.checks} orders, bit-exact: {exact}")
    return result


def _ring(n_mics: int) -> ArrayGeometry:
    angles = 2 * np.pi * np.arange(n_mics) / n_mics
    return ArrayGeometry(f"ring{n_mics}", 0.05 * np.stack([np.cos(angles), np.sin(angles), 0 * angles], axis=1))


@_timed
def agnostic_suite(model: Optional[MaskNetwork] = None, geometries: Optional[Sequence[str]] = None,
                   n_frames: int = 32, seed: int = 0) -> SuiteResult:
    """Run one checkpoint on every geometry (plus the single-mic case); shapes and reruns must agree."""
    result = SuiteResult('agnostic', tolerance=0.0)
    model = model or default_model()
    if not model.config.is_agnostic:
        result.fail('model', f"{model.config.variant} is tied to {model.config.n_mics} microphones")
        return result
    frame = model.config.frame
    n_samples = frame.window_len + (n_frames - 1) * frame.hop_len
    dvec = enrollment_for(model, seed)
    cases = [resolve_geometry(name) for name in (geometries or list(BUILTIN_GEOMETRIES))]
    cases.append(ArrayGeometry('single', np.zeros((1, 3))))
    for geometry in cases:
        wave = array_recording(geometry, n_samples, seed)
        try:
            first = enhance_offline(wave, dvec, model)
            second = enhance_offline(wave, dvec, model)
        except ValueError as exc:
            result.fail(geometry.name, str(exc))
            continue
        if first.shape != (n_frames * frame.hop_len,):
            result.fail(geometry.name, f"output shape {first.shape}, expected {(n_frames * frame.hop_len,)}")
            continue
        if not np.all(np.isfinite(first)):
            result.fail(geometry.name, "non-finite output")
            continue
        result.record(f"{geometry.name} ({geometry.n_mics} mics) rerun", float(np.max(np.abs(first - second))))
    return result


@_timed
def causality_suite(variants: Sequence[str] = ('sc_pse', 'mc_stft', 'mc_ipd', 'geo_agnostic'),
                    n_mics: int = 3, n_frames: int = 24, n_cuts: int = 5, seed: int = 0,
                    model: Optional[MaskNetwork] = None) -> SuiteResult:
    """Zero every input sample after frame t; mask frames up to t must not change."""
    result = SuiteResult('causality', tolerance=0.0)
    models = [model] if model is not None else [default_model(v, n_mics, seed) for v in variants]
    rng = np.random.default_rng(seed)
    for net in models:
        cfg = net.config
        frame = cfg.frame
        channels = n_mics if cfg.variant != 'mc_stft' and cfg.variant != 'mc_ipd' else cfg.n_mics
        wave = rng.standard_normal((channels, frame.window_len + (n_frames - 1) * frame.hop_len)).astype(np.float32)
        dvec = None if not cfg.use_dvector else enrollment_for(net, seed).values[None]
        x, _, _ = model_inputs(stft(wave, frame), cfg)
        full = net.forward(x, dvec)
        for t in sorted(rng.choice(n_frames - 1, size=min(n_cuts, n_frames - 1), replace=False)):
            cut = wave.copy()
            cut[:, t * frame.hop_len + frame.window_len:] = 0.0
            x_cut, _, _ = model_inputs(stft(cut, frame), cfg)
            out = net.forward(x_cut, dvec)
            result.record(f"{cfg.variant} t={t}", float(np.max(np.abs(out[..., :t + 1] - full[..., :t + 1]))))
    return result


@_timed
def streaming_suite(model: Optional[MaskNetwork] = None, mic_counts: Sequence[int] = (2, 7),
                    seconds: float = 3.0, seed: int = 0) -> SuiteResult:
    """Push hop-sized frames through a StreamingSession and compare with enhance_offline."""
    result = SuiteResult('streaming', tolerance=STREAM_TOLERANCE)
    model = model or default_model()
    frame = model.config.frame
    if not model.config.is_agnostic:
        mic_counts = [1 if model.config.variant == 'sc_pse' else model.config.n_mics]
    for n_mics in mic_counts:
        geometry = _ring(n_mics) if n_mics > 1 else ArrayGeometry('single', np.zeros((1, 3)))
        n_hops = int(seconds * frame.sample_rate_hz) // frame.hop_len
        wave = array_recording(geometry, n_hops * frame.hop_len, seed + n_mics)
        dvec = enrollment_for(model, seed)
        offline = enhance_offline(wave, dvec, model)
        session = StreamingSession(model, dvec, n_mics)
        pieces = [session.push(wave[:, i:i + frame.hop_len]) for i in range(0, wave.shape[1], frame.hop_len)]
        streamed = np.concatenate(pieces)
        if streamed.shape != offline.shape:
            result.fail(f"{n_mics} mics", f"streamed {streamed.shape} vs offline {offline.shape} samples")
            continue
        result.record(f"{n_mics} mics", float(np.max(np.abs(streamed - offline))))
        report = session.latency_report()
        logging.info(f"  {n_mics} mics: {report['frames']} frames, mean {report['mean_ms']:.2f} ms, "
                     f"p95 {report['p95_ms']:.2f} ms, real-time factor {report['real_time_factor']:.2f}")
    return result


def _complex(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(module, run: Callable[[np.ndarray], np.ndarray], x: np.ndarray, seed: int = 0,
                   n_checks: int = 6, eps: float = FINITE_DIFFERENCE_STEP, floor: float = 1e-4) -> float:
    """
    Largest relative error between module.backward() and central differences.

    The scalar under test is sum(Re(conj(p) * run(x))) for random weights p, whose
    gradient with respect to run(x) is p itself. Sampled entries of the input and
    of every parameter are perturbed along their real and imaginary parts.
    """
    rng = np.random.default_rng(seed)
    y = run(x)
    weights = _complex(rng, y.shape) if np.iscomplexobj(y) else rng.standard_normal(y.shape)

    def scalar() -> float:
        return float(np.sum(np.real(np.conj(weights) * run(x))))

    module.zero_grad()
    run(x)
    grad_x = module.backward(weights)
    targets = [(x, grad_x, np.iscomplexobj(x))]
    targets += [(p.value, p.grad.copy(), p.is_complex) for p in module.parameters()]

    worst = 0.0
    for tensor, grad, is_complex in targets:
        steps = [(eps, 'real'), (1j * eps, 'imag')] if is_complex else [(eps, 'real')]
        for flat in rng.choice(tensor.size, size=min(n_checks, tensor.size), replace=False):
            index = np.unravel_index(flat, tensor.shape)
            for step, part in steps:
                original = tensor[index]
                tensor[index] = original + step
                up = scalar()
                tensor[index] = original - step
                down = scalar()
                tensor[index] = original
                analytic = float(grad[index].real if part == 'real' else grad[index].imag)
                worst = max(worst, _relative_error(analytic, (up - down) / (2 * eps), floor))
    return worst


def model_gradient_error(model: MaskNetwork, n_streams: int = 2, n_frames: int = 6, seed: int = 0,
                         n_checks: int = 3, eps: float = 1e-6) -> float:
    """End-to-end check of the compressed loss through mask application and the whole network."""
    rng = np.random.default_rng(seed)
    cfg = model.config
    streams = n_streams if cfg.is_agnostic else 1
    x = _complex(rng, (1, streams, cfg.in_channels, cfg.frame.n_bins, n_frames))
    reference = _complex(rng, (cfg.frame.n_bins, n_frames))
    target = _complex(rng, (cfg.frame.n_bins, n_frames))
    dvec = enrollment_for(model, seed).values[None].astype(np.float64) if cfg.use_dvector else None

    def loss():
        return loss_plcpa(reference * model.forward(x, dvec)[0], target)

    model.zero_grad()
    _, grad_est = loss()
    model.backward((np.conj(reference) * grad_est)[None])
    worst = 0.0
    for name, param in model.named_parameters():
        grad = param.grad.copy()
        steps = [(eps, 'real'), (1j * eps, 'imag')] if param.is_complex else [(eps, 'real')]
        for flat in rng.choice(param.value.size, size=min(n_checks, param.value.size), replace=False):
            index = np.unravel_index(flat, param.value.shape)
            for step, part in steps:
                original = param.value[index]
                param.value[index] = original + step
                up = loss()[0]
                param.value[index] = original - step
                down = loss()[0]
                param.value[index] = original
                analytic = float(grad[index].real if part == 'real' else grad[index].imag)
                worst = max(worst, _relative_error(analytic, (up - down) / (2 * eps), 1e-5))
    return worst


@_timed
def gradient_suite(seed: int = 0, variants: Sequence[str] = ('geo_agnostic', 'sc_pse')) -> SuiteResult:
    """Finite-difference checks of each layer (float64) and of micro-config models end to end."""
    result = SuiteResult('gradient', tolerance=LAYER_TOLERANCE)
    rng = np.random.default_rng(seed)

    conv = ComplexConv2d(2, 3, rng=rng).astype(np.float64)
    result.record('conv', gradient_check(conv, conv.forward, _complex(rng, (2, 2, 9, 5)), seed))
    tconv = ComplexTransposedConv2d(4, 2, rng=rng).astype(np.float64)
    result.record('transposed conv', gradient_check(tconv, lambda v: tconv.forward(v, 9),
                                                    _complex(rng, (2, 4, 5, 4)), seed))
    bn = ComplexBatchNorm(3).astype(np.float64)
    bn.gamma.value[:] = rng.uniform(0.5, 1.5, bn.gamma.shape)
    bn.gamma.value[:, 2] = 0.2
    bn.beta.value[:] = _complex(rng, 3)
    result.record('batch norm', gradient_check(bn, bn.forward, _complex(rng, (2, 3, 4, 3)), seed))
    act = LeakyReLU()
    result.record('leaky relu', gradient_check(act, act.forward, _complex(rng, (2, 3, 4, 2)), seed))
    lstm = ComplexLSTM(5, 4, rng).astype(np.float64)
    result.record('complex lstm', gradient_check(lstm, lambda v: lstm.forward(v)[0], _complex(rng, (2, 6, 5)), seed))
    dense = Dense(6, 3, True, rng).astype(np.float64)
    result.record('dense', gradient_check(dense, dense.forward, _complex(rng, (2, 4, 6)), seed))

    for variant in variants:
        model = MaskNetwork(model_preset('micro', variant=variant, seed=seed)).astype(np.float64).train()
        result.record(f"{variant} end to end", model_gradient_error(model, seed=seed), MODEL_TOLERANCE)
    return result


@_timed
def ewma_suite(n_steps: int = 10000, seed: int = 0) -> SuiteResult:
    """Unbiased first step, zero output for constant input, unit statistics on white noise."""
    result = SuiteResult('ewma', tolerance=0.0)
    rng = np.random.default_rng(seed)

    first = rng.standard_normal(4)
    _, state = ewma_normalize(first[:, None], EwmaState.initial(4))
    result.record('first-step mean', float(np.max(np.abs(state.mean - first))))

    constant, _ = ewma_normalize(np.full((3, 200), 1.7), EwmaState.initial(3))
    result.record('constant input', float(np.max(np.abs(constant))))

    out, _ = ewma_normalize(rng.standard_normal((1, n_steps)), EwmaState.initial(1))
    mean = float(out.mean())
    var = float(out.var())
    result.record('white-noise mean', abs(mean), 0.05)
    result.record('white-noise variance', abs(var - 1.0), 0.2)
    logging.info(f"EWMA on {n_steps} white-noise steps: mean {mean:+.4f}, variance {var:.4f}")
    return result


SUITES: Dict[str, Callable[..., SuiteResult]] = {
    'permutation': permutation_suite,
    'agnostic': agnostic_suite,
    'causality': causality_suite,
    'streaming': streaming_suite,
    'gradient': gradient_suite,
    'ewma': ewma_suite,
}


def run_suites(names: Sequence[str], model: Optional[MaskNetwork] = None, n_mics: int = 7,
               seed: int = 0) -> List[SuiteResult]:
    """Run the named suites ('all' expands to every suite) and return their results in order."""
    names = list(SUITES) if 'all' in names else list(names)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        raise ValueError(f"Unknown suite(s): {', '.join(unknown)}. Available: {', '.join(SUITES)}")
    results = []
    for name in names:
        if name == 'permutation':
            results.append(permutation_suite(model, n_mics=n_mics, seed=seed))
        elif name == 'streaming':
            counts = (2, n_mics) if n_mics != 2 else (2,)
            results.append(streaming_suite(model, mic_counts=counts, seed=seed))
        elif name in ('agnostic', 'causality'):
            results.append(SUITES[name](model=model, seed=seed))
        else:
            results.append(SUITES[name](seed=seed))
    return results


def all_passed(results: Sequence[SuiteResult]) -> bool:
    return all(r.passed for r in results) and not any(math.isnan(r.max_deviation) for r in results)
