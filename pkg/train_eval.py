#!/usr/bin/env python3
"""
Training loop, objective metrics and the evaluation harness.

Training reads a rendered corpus (manifest.jsonl written by room_sim), builds
network inputs with the models module and fits a MaskNetwork with the
power-law compressed phase-aware loss. Evaluation scores a set of systems
(noisy mixture, trained models, the per-channel signal-averaging baseline and
an oracle complex mask) with scale-invariant SDR and STOI, per condition.

Outputs:
    train: loss.csv, epoch_XXX.gpse, final.gpse (and nan_batch.npz on divergence)
    evaluate: report.json, report.txt, bars.csv (optionally enhanced WAVs)
"""

import copy
import csv
import json
import logging
import math
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pystoi import stoi as pystoi_stoi

from cnet import Adam, clip_grad_norm
from features import virtual_mic
from models import (
    ChannelMismatchError,
    MaskNetwork,
    ModelConfig,
    enhance_offline,
    load_model,
    model_inputs,
    resolve_embedding,
    save_model,
)
from room_sim import MixtureExample, worker_count
from signal_core import (
    CANONICAL_RATE,
    MAG_FLOOR,
    ComplexSpectrogram,
    istft,
    loss_plcpa,
    ordered_mean,
    stft,
    write_wav,
)


SDR_CAP_DB = 60.0
SDR_MIN_SECONDS = 0.1
STOI_MIN_SECONDS = 0.5
TARGETS = ('reverberant', 'early')
FIXED_VARIANTS = ('sc_pse', 'mc_stft', 'mc_ipd')
LOSS_COLUMNS = ['epoch', 'step', 'loss', 'grad_norm', 'wall_ms']
REQUIRED_PATHS = ('mixture', 'target', 'enrollment')


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

def read_manifest(manifest: Path) -> List[dict]:
    """Load manifest.jsonl entries; paths inside are relative to the manifest's directory."""
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"Corpus manifest not found: {manifest}")
    entries = []
    with open(manifest, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{manifest}:{line_no}: invalid JSON ({exc})") from exc
    if not entries:
        raise ValueError(f"Corpus manifest {manifest} has no entries")
    return entries


def check_references(entries: Sequence[dict], root: Path) -> None:
    """Raise unless every entry points at an existing mixture, target and enrollment."""
    root = Path(root)
    for entry in entries:
        paths = entry.get('paths') or {}
        for key in REQUIRED_PATHS:
            if key not in paths:
                raise ValueError(f"Manifest entry {entry.get('id')} has no '{key}' path")
            if not (root / paths[key]).exists():
                raise FileNotFoundError(f"Missing {key} for {entry.get('id')}: {root / paths[key]}")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Training run settings; `model` is the architecture being fitted."""
    model: ModelConfig = field(default_factory=ModelConfig)
    geometry_list: List[str] = field(default_factory=lambda: ['circ7'])
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    loss_exponent: float = 0.3
    loss_weight: float = 0.5
    grad_clip: float = 5.0
    target: str = 'reverberant'
    manifest: Optional[str] = None
    checkpoint_every: int = 1

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.geometry_list = list(self.geometry_list)
        if not self.geometry_list:
            raise ValueError("geometry_list must name at least one geometry")
        if self.model.variant in FIXED_VARIANTS and len(self.geometry_list) != 1:
            raise ValueError(
                f"{self.model.variant} trains on exactly one geometry, got {len(self.geometry_list)}"
            )
        if self.target not in TARGETS:
            raise ValueError(f"Unknown training target '{self.target}'. Available: {', '.join(TARGETS)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data['model'] = self.model.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown train config keys: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class TrainItem:
    """One scene prepared for the network."""
    scene_id: str
    geometry: str
    inputs: np.ndarray
    reference: np.ndarray
    target: np.ndarray
    embedding: Optional[np.ndarray]

    @property
    def group(self) -> Tuple[str, Tuple[int, ...]]:
        return self.geometry, self.inputs.shape


@dataclass
class TrainResult:
    model: MaskNetwork
    epoch_losses: List[float]
    step_losses: List[float]
    checkpoint: Optional[Path]
    loss_log: Optional[Path]


def target_spectrogram(example: MixtureExample, config: ModelConfig, target: str = 'reverberant') -> np.ndarray:
    """
    Clean training target (F, T) at the model's reference signal.

    Fixed-geometry variants estimate microphone 1; the geometry-agnostic model
    estimates the virtual microphone (average of the per-mic targets).
    """
    wave = example.target_ref if target == 'reverberant' else example.target_early
    spec = stft(np.asarray(wave, dtype=np.float32), config.frame)
    if config.is_agnostic:
        return virtual_mic(spec, exact=config.exact_reductions).data[0]
    return spec.data[0]


def prepare_item(example: MixtureExample, scene_id: str, config: ModelConfig,
                 target: str = 'reverberant') -> TrainItem:
    spec = stft(example.mixture.samples.astype(np.float32), config.frame)
    inputs, reference, _ = model_inputs(spec, config)
    embedding = resolve_embedding(example.enrollment, config)
    geometry = example.scene.geometry.name if example.scene else 'unknown'
    return TrainItem(scene_id, geometry, inputs, reference, target_spectrogram(example, config, target),
                     None if embedding is None else embedding[0])


def load_training_items(cfg: TrainConfig, manifest: Optional[Path] = None) -> List[TrainItem]:
    """Read and featurize every manifest scene whose geometry is in cfg.geometry_list."""
    if not (manifest or cfg.manifest):
        raise ValueError("No corpus manifest given")
    manifest = Path(manifest or cfg.manifest)
    entries = read_manifest(manifest)
    root = manifest.parent
    check_references(entries, root)
    wanted = set(cfg.geometry_list)
    items = []
    for entry in entries:
        if entry.get('geometry') not in wanted:
            continue
        example = MixtureExample.load(entry, root)
        items.append(prepare_item(example, entry['id'], cfg.model, cfg.target))
    found = {item.geometry for item in items}
    missing = wanted - found
    if missing:
        raise ValueError(f"Corpus {manifest} has no scenes for geometries: {', '.join(sorted(missing))}")
    logging.info(f"Loaded {len(items)} training scenes over {len(found)} geometries from {manifest}")
    return items


def make_batches(items: Sequence[TrainItem], batch_size: int, rng: np.random.Generator) -> List[List[int]]:
    """
    One epoch of batches. Each batch holds scenes of a single geometry (and
    frame count); batch order is shuffled across geometries.
    """
    groups: Dict[Tuple[str, Tuple[int, ...]], List[int]] = {}
    for index, item in enumerate(items):
        groups.setdefault(item.group, []).append(index)
    batches = []
    for key in sorted(groups, key=str):
        members = [groups[key][i] for i in rng.permutation(len(groups[key]))]
        batches.extend(members[i:i + batch_size] for i in range(0, len(members), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def stack_batch(items: Sequence[TrainItem]) -> Tuple[np.ndarray, Optional[np.ndarray], np.ndarray, np.ndarray]:
    inputs = np.concatenate([item.inputs for item in items], axis=0)
    embeddings = None if items[0].embedding is None else np.stack([item.embedding for item in items])
    reference = np.stack([item.reference for item in items])
    target = np.stack([item.target for item in items])
    return inputs, embeddings, reference, target


def batch_loss(model: MaskNetwork, batch: Tuple[np.ndarray, ...], exponent: float,
               weight: float) -> Tuple[float, np.ndarray]:
    """Forward a batch; returns the compressed loss and its gradient w.r.t. the mask."""
    inputs, embeddings, reference, target = batch
    mask = model.forward(inputs, embeddings)
    loss, grad_est = loss_plcpa(reference * mask, target, exponent, weight)
    return loss, grad_est * np.conj(reference)


def zero_mask_loss(items: Sequence[TrainItem], exponent: float = 0.3) -> float:
    """Loss of the all-zero mask: mean(|target|^(2c)) over every bin of every scene."""
    total = math.fsum(float(np.sum(np.abs(item.target.astype(np.complex128)) ** (2 * exponent))) for item in items)
    return total / sum(item.target.size for item in items)


def dump_nan_batch(out_dir: Path, batch: Tuple[np.ndarray, ...], ids: Sequence[str], epoch: int, step: int) -> Path:
    inputs, embeddings, reference, target = batch
    path = Path(out_dir) / 'nan_batch.npz'
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {'inputs': inputs, 'reference': reference, 'target': target,
              'ids': np.array(list(ids)), 'epoch': np.array(epoch), 'step': np.array(step)}
    if embeddings is not None:
        arrays['embeddings'] = embeddings
    np.savez(path, **arrays)
    return path


def train(cfg: TrainConfig, corpus: Union[Path, Sequence[TrainItem], None] = None,
          out_dir: Optional[Path] = None, model: Optional[MaskNetwork] = None) -> TrainResult:
    """
    Fit a MaskNetwork on a corpus.

    Args:
        cfg: Training configuration.
        corpus: Manifest path or already prepared items (defaults to cfg.manifest).
        out_dir: Where loss.csv and checkpoints go; nothing is written when None.
        model: Optional model to continue from; a fresh one is built from cfg.model otherwise.

    Returns:
        TrainResult with per-epoch mean losses and per-step losses.

    Raises:
        FloatingPointError: A batch produced a non-finite loss (batch dumped to nan_batch.npz).
    """
    if corpus is None or isinstance(corpus, (str, Path)):
        items = load_training_items(cfg, corpus)
    else:
        items = list(corpus)
    if not items:
        raise ValueError("Training corpus is empty")

    model = model or MaskNetwork(cfg.model)
    model.train()
    optimizer = Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    out_dir = Path(out_dir) if out_dir else None
    log_file = writer = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / 'loss.csv', 'w', newline='', encoding='utf-8')
        writer = csv.DictWriter(log_file, fieldnames=LOSS_COLUMNS, lineterminator='\n')
        writer.writeheader()

    logging.info(f"Training {cfg.model.variant}: {len(items)} scenes, {cfg.epochs} epochs, "
                 f"batch {cfg.batch_size}, lr {cfg.learning_rate}, {model.n_parameters():,} parameters")
    logging.info(f"Zero-mask baseline loss: {zero_mask_loss(items, cfg.loss_exponent):.6f}")

    epoch_losses: List[float] = []
    step_losses: List[float] = []
    checkpoint = None
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            losses = []
            for indices in make_batches(items, cfg.batch_size, rng):
                started = time.perf_counter()
                members = [items[i] for i in indices]
                batch = stack_batch(members)
                model.zero_grad()
                loss, grad_mask = batch_loss(model, batch, cfg.loss_exponent, cfg.loss_weight)
                step += 1
                if not math.isfinite(loss):
                    dump = dump_nan_batch(out_dir or Path('.'), batch, [m.scene_id for m in members], epoch, step)
                    logging.error(f"Non-finite loss at epoch {epoch}, step {step}; batch written to {dump}")
                    raise FloatingPointError(f"Non-finite loss at epoch {epoch}, step {step} (batch dump: {dump})")
                model.backward(grad_mask)
                grad_norm = clip_grad_norm(model.parameters(), cfg.grad_clip)
                optimizer.step()
                wall_ms = (time.perf_counter() - started) * 1000.0
                losses.append(loss)
                step_losses.append(loss)
                if writer:
                    writer.writerow({'epoch': epoch, 'step': step, 'loss': repr(loss),
                                     'grad_norm': repr(grad_norm), 'wall_ms': f"{wall_ms:.1f}"})
                logging.debug(f"  epoch {epoch} step {step}: loss={loss:.6f} grad_norm={grad_norm:.4f}")

            epoch_losses.append(math.fsum(losses) / len(losses))
            logging.info(f"Epoch {epoch}/{cfg.epochs}: mean loss {epoch_losses[-1]:.6f}")
            if out_dir and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
                save_model(out_dir / f"epoch_{epoch:03d}.gpse", model)
    finally:
        if log_file:
            log_file.close()

    if out_dir:
        checkpoint = out_dir / 'final.gpse'
        save_model(checkpoint, model)
    model.eval()
    return TrainResult(model, epoch_losses, step_losses, checkpoint, out_dir / 'loss.csv' if out_dir else None)


def read_loss_log(path: Path) -> List[dict]:
    with open(path, 'r', encoding='utf-8') as f:
        return [{'epoch': int(row['epoch']), 'step': int(row['step']), 'loss': float(row['loss']),
                 'grad_norm': float(row['grad_norm']), 'wall_ms': float(row['wall_ms'])}
                for row in csv.DictReader(f)]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _pair(ref: np.ndarray, est: np.ndarray, fs: int, min_seconds: float) -> Tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64).ravel()
    est = np.asarray(est, dtype=np.float64).ravel()
    if ref.shape != est.shape:
        raise ValueError(f"Reference and estimate lengths differ: {ref.size} vs {est.size}")
    if ref.size < min_seconds * fs:
        raise ValueError(f"Signals too short: {ref.size} samples, need at least {min_seconds} s")
    return ref, est


def sdr(ref: np.ndarray, est: np.ndarray, fs: int = CANONICAL_RATE) -> float:
    """
    Scale-invariant signal-to-distortion ratio in dB.

    The estimate is projected onto the reference; the ratio of the projected
    power to the residual power is clipped to +/-60 dB.
    """
    ref, est = _pair(ref, est, fs, SDR_MIN_SECONDS)
    ref_power = float(np.dot(ref, ref))
    if ref_power == 0.0:
        raise ValueError("Reference signal is silent")
    scale = float(np.dot(est, ref)) / ref_power
    projected = scale * ref
    residual = est - projected
    residual_power = float(np.dot(residual, residual))
    target_power = float(np.dot(projected, projected))
    if residual_power == 0.0:
        return SDR_CAP_DB
    if target_power == 0.0:
        return -SDR_CAP_DB
    return float(np.clip(10.0 * np.log10(target_power / residual_power), -SDR_CAP_DB, SDR_CAP_DB))


def stoi(ref: np.ndarray, est: np.ndarray, fs: int = CANONICAL_RATE) -> float:
    """Short-time objective intelligibility (classic, non-extended) as a fraction."""
    ref, est = _pair(ref, est, fs, STOI_MIN_SECONDS)
    if not np.any(ref):
        raise ValueError("Reference signal is silent")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always')
        score = pystoi_stoi(ref, est, fs, extended=False)
    for warning in caught:
        if 'Not enough STFT frames' in str(warning.message):
            raise ValueError("Not enough speech-active signal for STOI (need at least 0.5 s after silence removal)")
    return float(score)


# ---------------------------------------------------------------------------
# Systems under evaluation
# ---------------------------------------------------------------------------

class EvalSystem:
    """
    Something that turns a scene into one enhanced waveform.

    `reference` names the clean signal it estimates: 'mic' (microphone 1) or
    'virtual' (average of all microphones).
    """
    reference = 'mic'

    def __init__(self, name: str):
        self.name = name

    def enhance(self, example: MixtureExample, frame_len: int) -> np.ndarray:
        raise NotImplementedError


class NoisySystem(EvalSystem):
    """The unprocessed reference-channel mixture."""

    def enhance(self, example, frame_len):
        return example.mixture.samples[0, :frame_len]


class OracleMaskSystem(EvalSystem):
    """Ideal complex ratio mask on microphone 1 (an upper bound, not a model)."""

    def __init__(self, name: str = 'oracle_mask', frame=None):
        super().__init__(name)
        self.frame = frame

    def enhance(self, example, frame_len):
        mixture = stft(example.mixture.samples[0].astype(np.float64), self.frame)
        clean = stft(example.target_ref[0].astype(np.float64), self.frame)
        magnitude = np.abs(mixture.data[0])
        mask = clean.data[0] * np.conj(mixture.data[0]) / np.maximum(magnitude, MAG_FLOOR) ** 2
        enhanced = istft(ComplexSpectrogram(mixture.data[0] * mask, self.frame))
        return enhanced[:frame_len]


class ModelSystem(EvalSystem):
    """A trained MaskNetwork; each worker thread runs its own copy."""

    def __init__(self, name: str, model: MaskNetwork):
        super().__init__(name)
        self.model = model.eval()
        self.reference = 'virtual' if model.config.is_agnostic else 'mic'
        self._local = threading.local()

    def _thread_model(self) -> MaskNetwork:
        if not hasattr(self._local, 'model'):
            self._local.model = copy.deepcopy(self.model)
        return self._local.model

    def enhance(self, example, frame_len):
        return enhance_offline(example.mixture, example.enrollment, self._thread_model())[:frame_len]


class SignalAveragingSystem(ModelSystem):
    """Single-channel model applied to every microphone, enhanced waves averaged."""

    def __init__(self, name: str, model: MaskNetwork):
        if model.config.variant != 'sc_pse':
            raise ChannelMismatchError(f"Signal averaging needs an sc_pse model, got {model.config.variant}")
        super().__init__(name, model)
        self.reference = 'virtual'

    def enhance(self, example, frame_len):
        model = self._thread_model()
        waves = [enhance_offline(channel[None], example.enrollment, model)[:frame_len]
                 for channel in example.mixture.samples]
        return ordered_mean(np.stack(waves), axis=0)


def build_systems(checkpoints: Dict[str, Union[Path, MaskNetwork]], include_noisy: bool = True,
                  include_oracle: bool = False, frame=None) -> Dict[str, EvalSystem]:
    """
    Map system names to evaluators.

    `checkpoints` maps a system name to a checkpoint path or a loaded model.
    The name 'signal_averaging' wraps an sc_pse model in the averaging baseline.
    """
    systems: Dict[str, EvalSystem] = {}
    if include_noisy:
        systems['noisy'] = NoisySystem('noisy')
    for name, source in checkpoints.items():
        model = source if isinstance(source, MaskNetwork) else load_model(Path(source))
        frame = frame or model.config.frame
        if name == 'signal_averaging':
            systems[name] = SignalAveragingSystem(name, model)
        else:
            systems[name] = ModelSystem(name, model)
    if include_oracle:
        systems['oracle_mask'] = OracleMaskSystem('oracle_mask', frame or ModelConfig().frame)
    return systems


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else float('nan')


@dataclass
class EvalReport:
    """Per-utterance scores plus aggregates per system and condition."""
    rows: List[dict] = field(default_factory=list)
    systems: List[str] = field(default_factory=list)
    conditions: List[str] = field(default_factory=list)

    def select(self, system: str, condition: Optional[str] = None) -> List[dict]:
        return [row for row in self.rows if row['system'] == system
                and (condition in (None, 'all') or row['condition'] == condition)]

    def aggregate(self) -> Dict[str, Dict[str, Dict[str, float]]]:
        """{system: {condition | 'all': {'sdr', 'stoi', 'count'}}}; means of the rows."""
        table = {}
        for system in self.systems:
            table[system] = {}
            for condition in self.conditions + ['all']:
                rows = self.select(system, condition)
                table[system][condition] = {
                    'sdr': _mean([row['sdr'] for row in rows]),
                    'stoi': _mean([row['stoi'] for row in rows]),
                    'count': len(rows),
                }
        return table

    def deltas(self, baseline: str = 'noisy') -> Dict[str, Dict[str, Dict[str, float]]]:
        """Mean per-utterance improvement of each system over the baseline system."""
        if baseline not in self.systems:
            return {}
        base = {(row['id'], row['condition']): row for row in self.select(baseline)}
        table = {}
        for system in self.systems:
            if system == baseline:
                continue
            table[system] = {}
            for condition in self.conditions + ['all']:
                pairs = [(row, base[(row['id'], row['condition'])]) for row in self.select(system, condition)
                         if (row['id'], row['condition']) in base]
                table[system][condition] = {
                    'sdr': _mean([row['sdr'] - ref['sdr'] for row, ref in pairs]),
                    'stoi': _mean([row['stoi'] - ref['stoi'] for row, ref in pairs]),
                }
        return table

    def to_dict(self) -> dict:
        return {'systems': self.systems, 'conditions': self.conditions, 'rows': self.rows,
                'aggregate': self.aggregate(), 'deltas': self.deltas()}

    @classmethod
    def from_dict(cls, data: dict) -> 'EvalReport':
        return cls(rows=list(data['rows']), systems=list(data['systems']), conditions=list(data['conditions']))

    def render(self) -> str:
        """Text grid: one row per system, SDR (dB) and STOI (%) per condition."""
        aggregate = self.aggregate()
        columns = self.conditions + ['all']
        header = f"{'system':<18}" + "".join(f"{c + ' SDR':>16}{c + ' STOI':>16}" for c in columns)
        lines = [header, "-" * len(header)]
        for system in self.systems:
            cells = []
            for condition in columns:
                cell = aggregate[system][condition]
                cells.append(f"{cell['sdr']:>16.2f}{cell['stoi'] * 100:>16.2f}")
            lines.append(f"{system:<18}" + "".join(cells))
        deltas = self.deltas()
        if deltas:
            lines.append("")
            lines.append("Improvement over the noisy mixture (SDR dB / STOI points):")
            for system, per_condition in deltas.items():
                cell = per_condition['all']
                lines.append(f"  {system:<18} {cell['sdr']:+.2f} dB / {cell['stoi'] * 100:+.2f}")
        return "\n".join(lines)

    def bar_rows(self) -> List[dict]:
        aggregate = self.aggregate()
        rows = []
        for condition in self.conditions + ['all']:
            for system in self.systems:
                for metric in ('sdr', 'stoi'):
                    rows.append({'condition': condition, 'system': system, 'metric': metric,
                                 'value': aggregate[system][condition][metric]})
        return rows

    def write(self, out_dir: Path) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {'json': out_dir / 'report.json', 'text': out_dir / 'report.txt', 'bars': out_dir / 'bars.csv'}
        with open(paths['json'], 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        with open(paths['text'], 'w', encoding='utf-8') as f:
            f.write(self.render() + "\n")
        with open(paths['bars'], 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=['condition', 'system', 'metric', 'value'], lineterminator='\n')
            writer.writeheader()
            writer.writerows(self.bar_rows())
        return paths


def scoring_span(frame, n_samples: int) -> Tuple[int, int]:
    """Sample range scored: fully overlap-added output, after the synthesis warm-up."""
    n_frames = frame.n_frames(n_samples)
    return frame.warmup_samples, n_frames * frame.hop_len


def reference_wave(example: MixtureExample, kind: str) -> np.ndarray:
    if kind == 'virtual':
        return ordered_mean(example.target_ref.astype(np.float64), axis=0)
    return example.target_ref[0].astype(np.float64)


def evaluate(systems: Dict[str, EvalSystem], manifests: Union[Path, Sequence[Path]],
             conditions: Optional[Sequence[str]] = None, out_dir: Optional[Path] = None,
             workers: Optional[int] = None, write_audio: bool = False,
             frame=None) -> Tuple[EvalReport, Dict[str, object]]:
    """
    Score every system on every scene of one or more rendered corpora.

    Args:
        systems: Name -> EvalSystem (see build_systems).
        manifests: One or more manifest.jsonl paths.
        conditions: Keep only scenes with these condition tags (all when None).
        out_dir: Report files (and enhanced WAVs with write_audio) go here.
        workers: Thread pool size, capped by GEOPSE_THREADS.
        frame: Frame geometry that sets the scored span (defaults to the first model's).

    Returns:
        Tuple of (EvalReport, statistics dictionary with 'processed', 'failed', 'errors').
    """
    if isinstance(manifests, (str, Path)):
        manifests = [manifests]
    if not systems:
        raise ValueError("No systems to evaluate")
    if frame is None:
        models = [s.model for s in systems.values() if isinstance(s, ModelSystem)]
        frame = models[0].config.frame if models else ModelConfig().frame

    jobs = []
    for manifest in manifests:
        manifest = Path(manifest)
        entries = read_manifest(manifest)
        if conditions:
            entries = [e for e in entries if e.get('condition') in conditions]
        check_references(entries, manifest.parent)
        jobs.extend((entry, manifest.parent) for entry in entries)
    stats: Dict[str, object] = {'processed': 0, 'failed': 0, 'errors': []}
    if not jobs:
        raise ValueError("No scenes match the requested conditions")
    logging.info(f"Evaluating {len(systems)} systems on {len(jobs)} scenes")

    audio_dir = Path(out_dir) / 'enhanced' if (out_dir and write_audio) else None

    def score_one(job: Tuple[dict, Path]) -> List[dict]:
        entry, root = job
        example = MixtureExample.load(entry, root)
        start, stop = scoring_span(frame, example.mixture.n_samples)
        results = []
        for name, system in systems.items():
            try:
                enhanced = np.asarray(system.enhance(example, stop), dtype=np.float64)
                clean = reference_wave(example, system.reference)[:stop]
                if audio_dir:
                    write_wav(audio_dir / name / f"{entry['id']}.wav", enhanced.astype(np.float32))
                results.append({
                    'id': entry['id'], 'condition': entry.get('condition') or 'unknown',
                    'geometry': entry.get('geometry'), 'system': name,
                    'sdr': sdr(clean[start:], enhanced[start:stop]),
                    'stoi': stoi(clean[start:], enhanced[start:stop]),
                })
            except (ChannelMismatchError, ValueError) as exc:
                results.append({'id': entry['id'], 'system': name, 'error': str(exc)})
        return results

    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        scored = list(pool.map(score_one, jobs))

    report = EvalReport(systems=list(systems))
    for i, results in enumerate(scored, 1):
        for row in results:
            if 'error' in row:
                stats['failed'] += 1
                stats['errors'].append(f"{row['id']} [{row['system']}]: {row['error']}")
                logging.error(f"  {row['id']} [{row['system']}]: {row['error']}")
                continue
            report.rows.append(row)
            stats['processed'] += 1
            if row['condition'] not in report.conditions:
                report.conditions.append(row['condition'])
        if i % 50 == 0:
            logging.info(f"Progress: {i}/{len(jobs)} scenes")

    if out_dir:
        for kind, path in report.write(out_dir).items():
            logging.info(f"Wrote {kind} report: {path}")
    return report, stats
