#!/usr/bin/env python3
"""
Geometry-agnostic personalized speech enhancement: command-line entry point.

Subcommands:
    simulate   render a simulated corpus (WAVs + manifest.jsonl)
    train      fit a model on a corpus (loss.csv + checkpoints)
    enhance    enhance one multichannel WAV with a checkpoint
    stream     frame-by-frame enhancement of raw PCM on stdin -> stdout
    evaluate   score systems on one or more corpora (report.json/.txt, bars.csv)
    selftest   run the invariance suites
    describe   print a model's layer table

Configuration for every subcommand is a JSON document: built-in defaults, then
--config FILE, then explicit flags, then --set key.sub=value overrides. Unknown
keys are rejected. The resolved configuration is logged and written as
resolved_config.json next to the outputs.

Exit codes:
    0 success, 1 failure, 2 usage/configuration error, 3 malformed WAV,
    4 channel mismatch, 5 bad checkpoint, 6 self-test property failure
"""

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from cnet import CheckpointFormatError
from features import read_dvector
from invariance_suite import SUITES, all_passed, run_suites
from models import (
    ChannelMismatchError,
    MaskNetwork,
    StreamingSession,
    describe,
    enhance_offline,
    load_model,
    model_preset,
)
from room_sim import DatasetConfig, SceneSpec, dataset_preset, scene_satisfies, simulate_corpus
from signal_core import WavFormatError, read_wav, write_wav
from source_store import SourceStore
from train_eval import TrainConfig, build_systems, evaluate, read_manifest, train
from wav_metadata import validate_wav


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_WAV = 3
EXIT_CHANNELS = 4
EXIT_CHECKPOINT = 5
EXIT_SELFTEST = 6

PCM_FORMATS = ('s16le', 'f32le')

DEFAULTS: Dict[str, dict] = {
    'simulate': {'out': None, 'dataset_preset': None, 'dataset': {}, 'seed': 0, 'workers': None,
                 'dry_run': False, 'speech_dir': None, 'noise_dir': None},
    'train': {'out': None, 'manifest': None, 'model_preset': 'toy', 'model': {}, 'train': {}},
    'enhance': {'input': None, 'enrollment': None, 'checkpoint': None, 'output': None},
    'stream': {'checkpoint': None, 'enrollment': None, 'n_mics': 1, 'format': 's16le'},
    'evaluate': {'manifests': [], 'checkpoints': {}, 'conditions': [], 'out': None, 'noisy': True,
                 'oracle': False, 'workers': None, 'write_audio': False},
    'selftest': {'suite': ['all'], 'mics': 7, 'checkpoint': None, 'seed': 0},
    'describe': {'checkpoint': None, 'model_preset': 'full', 'model': {}},
}

# Sections whose inner keys are validated by the dataclass they build
OPEN_SECTIONS = {'dataset', 'model', 'train', 'checkpoints'}


class ConfigError(ValueError):
    """Invalid configuration file, override, or flag combination."""


def setup_logging(log_file: Optional[Path] = None, verbose: bool = False, stream=None) -> None:
    """Configure logging to file and console."""
    level = logging.DEBUG if verbose else logging.INFO
    handlers = [logging.StreamHandler(stream or sys.stdout)]

    if log_file:
        handlers.append(logging.FileHandler(log_file, mode='w', encoding='utf-8'))

    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers
    )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def parse_value(text: str):
    """JSON value if it parses, the raw string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def merge_config(base: dict, update: dict, prefix: str = '') -> dict:
    """Deep-merge update into a copy of base; keys outside OPEN_SECTIONS must already exist."""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        top = dotted.split('.')[0]
        if key not in merged and top not in OPEN_SECTIONS:
            raise ConfigError(f"Unknown config key '{dotted}'")
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value, f"{dotted}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_override(config: dict, assignment: str) -> dict:
    """Apply one 'a.b.c=value' override."""
    if '=' not in assignment:
        raise ConfigError(f"Override '{assignment}' must look like key.sub=value")
    dotted, raw = assignment.split('=', 1)
    keys = [k for k in dotted.strip().split('.') if k]
    if not keys:
        raise ConfigError(f"Override '{assignment}' has an empty key")
    update = parse_value(raw)
    for key in reversed(keys):
        update = {key: update}
    return merge_config(config, update)


def load_config_file(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return data


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults <- --config file <- explicit flags <- --set overrides."""
    config = copy.deepcopy(DEFAULTS[command])
    if args.config:
        config = merge_config(config, load_config_file(args.config))
    for dotted, value in flag_values(command, args).items():
        update = value
        for key in reversed(dotted.split('.')):
            update = {key: update}
        config = merge_config(config, update)
    for assignment in args.set or []:
        config = apply_override(config, assignment)
    return config


def write_resolved(config: dict, out_dir: Optional[Path]) -> None:
    logging.info(f"Resolved configuration: {json.dumps(config, sort_keys=True, default=str)}")
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / 'resolved_config.json', 'w', encoding='utf-8') as f:
            json.dump(config, f, indent=2, sort_keys=True, default=str)


def require(config: dict, *keys: str) -> None:
    missing = [k for k in keys if not config.get(k)]
    if missing:
        raise ConfigError(f"Missing required setting(s): {', '.join(missing)}")


def build_model_config(config: dict):
    try:
        return model_preset(config['model_preset'], **config['model'])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid model configuration: {exc}") from exc


def build_dataset_config(config: dict) -> DatasetConfig:
    try:
        if config['dataset_preset']:
            return dataset_preset(config['dataset_preset'], **config['dataset'])
        return DatasetConfig.from_dict(config['dataset'])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid dataset configuration: {exc}") from exc


def print_summary(title: str, lines: List[str], errors: Optional[List[str]] = None) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    for line in lines:
        print(line)
    if errors:
        print(f"\nErrors ({len(errors)}):")
        for error in errors[:10]:
            print(f"  - {error}")
        if len(errors) > 10:
            print(f"  ... and {len(errors) - 10} more")
    print("=" * 60)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(config: dict) -> int:
    require(config, 'out')
    dataset = build_dataset_config(config)
    config['dataset'] = dataset.to_dict()
    out_dir = Path(config['out'])
    write_resolved(config, None if config['dry_run'] else out_dir)

    sources = SourceStore(speech_dir=Path(config['speech_dir']) if config['speech_dir'] else None,
                          noise_dir=Path(config['noise_dir']) if config['noise_dir'] else None)
    stats = simulate_corpus(out_dir, dataset, seed=config['seed'], sources=sources,
                            workers=config['workers'], dry_run=config['dry_run'])

    violations = 0
    if dataset.constraint != 'none' and not config['dry_run']:
        for entry in read_manifest(stats['manifest']):
            if not scene_satisfies(SceneSpec.from_dict(entry['scene']), dataset.constraint):
                violations += 1
                logging.error(f"  {entry['id']} violates constraint {dataset.constraint}")
        logging.info(f"Constraint check ({dataset.constraint}): {violations} violations")

    print_summary("SIMULATION SUMMARY", [
        f"Scenes rendered:    {stats['processed']}",
        f"Failed:             {stats['failed']}",
        f"Constraint:         {dataset.constraint} ({violations} violations)",
        f"Manifest:           {stats['manifest']}{' (dry run)' if config['dry_run'] else ''}",
    ], stats['errors'])
    return EXIT_OK if stats['failed'] == 0 and violations == 0 else EXIT_FAILURE


def cmd_train(config: dict) -> int:
    require(config, 'out', 'manifest')
    model_cfg = build_model_config(config)
    overrides = dict(config['train'])
    if 'geometry_list' not in overrides:
        overrides['geometry_list'] = sorted({e.get('geometry') for e in read_manifest(Path(config['manifest']))})
    try:
        train_cfg = TrainConfig(model=model_cfg, manifest=str(config['manifest']), **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid training configuration: {exc}") from exc
    config['model'] = model_cfg.to_dict()
    config['train'] = {k: v for k, v in train_cfg.to_dict().items() if k not in ('model', 'manifest')}
    out_dir = Path(config['out'])
    write_resolved(config, out_dir)

    result = train(train_cfg, out_dir=out_dir)
    print_summary("TRAINING SUMMARY", [
        f"Variant:            {model_cfg.variant}",
        f"Geometries:         {', '.join(train_cfg.geometry_list)}",
        f"Epochs:             {len(result.epoch_losses)}",
        f"Initial loss:       {result.epoch_losses[0]:.6f}",
        f"Final loss:         {result.epoch_losses[-1]:.6f}",
        f"Checkpoint:         {result.checkpoint}",
        f"Loss log:           {result.loss_log}",
    ])
    return EXIT_OK


def load_enrollment(path: Path, model: MaskNetwork):
    """A d-vector file (.dvec) or an enrollment WAV (first channel)."""
    if not model.config.use_dvector:
        return None
    path = Path(path)
    if path.suffix == '.dvec':
        return read_dvector(path)
    validate_wav(path)
    return read_wav(path).samples[0]


def cmd_enhance(config: dict) -> int:
    require(config, 'input', 'checkpoint', 'output')
    output = Path(config['output'])
    write_resolved(config, output.parent)
    model = load_model(Path(config['checkpoint']))
    validate_wav(Path(config['input']))
    wave = read_wav(Path(config['input']))
    enrollment = load_enrollment(Path(config['enrollment']), model) if config['enrollment'] else None
    if model.config.use_dvector and enrollment is None:
        raise ConfigError(f"{model.config.variant} checkpoint needs an enrollment (WAV or .dvec)")
    logging.info(f"Enhancing {config['input']}: {wave.n_channels} ch, {wave.duration:.2f} s "
                 f"with {model.config.variant}")
    enhanced = enhance_offline(wave, enrollment, model)
    write_wav(output, enhanced, wave.sample_rate, subtype='FLOAT')
    logging.info(f"Wrote {output} ({enhanced.size} samples)")
    return EXIT_OK


def cmd_stream(config: dict, stdin=None, stdout=None) -> int:
    """Raw PCM loop: M-interleaved hop-sized frames in, hop enhanced samples out per frame."""
    require(config, 'checkpoint')
    if config['format'] not in PCM_FORMATS:
        raise ConfigError(f"Unknown PCM format '{config['format']}'. Available: {', '.join(PCM_FORMATS)}")
    write_resolved(config, None)
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    model = load_model(Path(config['checkpoint']))
    enrollment = load_enrollment(Path(config['enrollment']), model) if config['enrollment'] else None
    n_mics = int(config['n_mics'])
    session = StreamingSession(model, enrollment, n_mics)
    hop = model.config.frame.hop_len
    dtype = np.dtype('<i2') if config['format'] == 's16le' else np.dtype('<f4')
    frame_bytes = hop * n_mics * dtype.itemsize

    frames = 0
    while True:
        chunk = stdin.read(frame_bytes)
        if not chunk:
            break
        if len(chunk) < frame_bytes:
            logging.warning(f"Dropping trailing partial frame ({len(chunk)} of {frame_bytes} bytes)")
            break
        samples = np.frombuffer(chunk, dtype=dtype).astype(np.float32)
        if dtype.kind == 'i':
            samples /= 32768.0
        out = session.push(samples)
        frames += 1
        if out.size:
            if dtype.kind == 'i':
                out = np.clip(np.round(out * 32767.0), -32768, 32767).astype('<i2')
            stdout.write(out.astype(dtype).tobytes())
            stdout.flush()

    report = session.latency_report()
    if report['frames']:
        logging.info(f"Streamed {frames} frames: mean {report['mean_ms']:.3f} ms, p95 {report['p95_ms']:.3f} ms, "
                     f"max {report['max_ms']:.3f} ms per frame, real-time factor {report['real_time_factor']:.3f}")
    else:
        logging.info(f"Streamed {frames} frames (no output yet)")
    return EXIT_OK


def cmd_evaluate(config: dict) -> int:
    if not config['manifests']:
        raise ConfigError("Missing required setting(s): manifests")
    checkpoints = {name: Path(path) for name, path in config['checkpoints'].items()}
    systems = build_systems(checkpoints, include_noisy=config['noisy'], include_oracle=config['oracle'])
    out_dir = Path(config['out']) if config['out'] else None
    write_resolved(config, out_dir)
    report, stats = evaluate(systems, [Path(m) for m in config['manifests']],
                             conditions=config['conditions'] or None, out_dir=out_dir,
                             workers=config['workers'], write_audio=config['write_audio'])
    print("\n" + report.render())
    print_summary("EVALUATION SUMMARY", [
        f"Systems:            {', '.join(report.systems)}",
        f"Conditions:         {', '.join(report.conditions)}",
        f"Scores computed:    {stats['processed']}",
        f"Failed:             {stats['failed']}",
        f"Report:             {out_dir or '(not written)'}",
    ], stats['errors'])
    return EXIT_OK if stats['processed'] else EXIT_FAILURE


def cmd_selftest(config: dict) -> int:
    write_resolved(config, None)
    suites = config['suite'] if isinstance(config['suite'], list) else [config['suite']]
    unknown = [name for name in suites if name != 'all' and name not in SUITES]
    if unknown:
        raise ConfigError(f"Unknown suite(s): {', '.join(unknown)}. Available: all, {', '.join(SUITES)}")
    model = load_model(Path(config['checkpoint'])) if config['checkpoint'] else None
    results = run_suites(suites, model=model, n_mics=int(config['mics']), seed=int(config['seed']))
    print_summary("SELF-TEST SUMMARY", [r.summary() for r in results],
                  [failure for r in results for failure in r.failures])
    if all_passed(results):
        print("PASS")
        return EXIT_OK
    print("FAIL")
    return EXIT_SELFTEST


def cmd_describe(config: dict) -> int:
    write_resolved(config, None)
    if config['checkpoint']:
        model = load_model(Path(config['checkpoint']))
    else:
        model = MaskNetwork(build_model_config(config))
    print(describe(model))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[dict], int]] = {
    'simulate': cmd_simulate,
    'train': cmd_train,
    'enhance': cmd_enhance,
    'stream': cmd_stream,
    'evaluate': cmd_evaluate,
    'selftest': cmd_selftest,
    'describe': cmd_describe,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

FLAG_KEYS: Dict[str, Dict[str, str]] = {
    'simulate': {'out': 'out', 'preset': 'dataset_preset', 'geometry': 'dataset.geometries',
                 'hours': 'dataset.hours', 'n_scenes': 'dataset.n_scenes', 'duration': 'dataset.duration_s',
                 'constraint': 'dataset.constraint', 'condition': 'dataset.condition', 'seed': 'seed',
                 'workers': 'workers', 'dry_run': 'dry_run', 'speech_dir': 'speech_dir', 'noise_dir': 'noise_dir'},
    'train': {'out': 'out', 'manifest': 'manifest', 'model_preset': 'model_preset', 'variant': 'model.variant',
              'n_mics': 'model.n_mics', 'geometries': 'train.geometry_list', 'epochs': 'train.epochs',
              'batch_size': 'train.batch_size', 'lr': 'train.learning_rate', 'seed': 'train.seed',
              'target': 'train.target'},
    'enhance': {'input': 'input', 'enrollment': 'enrollment', 'checkpoint': 'checkpoint', 'output': 'output'},
    'stream': {'checkpoint': 'checkpoint', 'enrollment': 'enrollment', 'mics': 'n_mics', 'format': 'format'},
    'evaluate': {'manifest': 'manifests', 'condition': 'conditions', 'out': 'out', 'oracle': 'oracle',
                 'workers': 'workers', 'write_audio': 'write_audio'},
    'selftest': {'suite': 'suite', 'mics': 'mics', 'checkpoint': 'checkpoint', 'seed': 'seed'},
    'describe': {'checkpoint': 'checkpoint', 'model_preset': 'model_preset', 'variant': 'model.variant',
                 'n_mics': 'model.n_mics'},
}


def parse_named_checkpoints(values: List[str]) -> Dict[str, str]:
    named = {}
    for value in values:
        if '=' not in value:
            raise ConfigError(f"--checkpoint expects NAME=PATH, got '{value}'")
        name, path = value.split('=', 1)
        named[name] = path
    return named


def flag_values(command: str, args: argparse.Namespace) -> dict:
    """Explicitly given flags as dotted config keys (flags left at None are skipped)."""
    values = {}
    for attr, dotted in FLAG_KEYS[command].items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        values[dotted] = str(value) if isinstance(value, Path) else value
    if command == 'evaluate' and args.checkpoint:
        values['checkpoints'] = parse_named_checkpoints(args.checkpoint)
    if command == 'simulate' and 'dataset.geometries' in values:
        values['dataset.geometries'] = list(values['dataset.geometries'])
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='JSON configuration file')
    common.add_argument('--set', action='append', metavar='KEY=VALUE',
                        help='Override a configuration value (dotted key, JSON value); repeatable')
    common.add_argument('--log', type=Path, help='Path to log file (optional)')
    common.add_argument('--verbose', action='store_true', help='Enable verbose logging')

    parser = argparse.ArgumentParser(
        description='Geometry-agnostic personalized speech enhancement',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Render a 6-minute corpus for the 7-mic circular array
  python geopse.py simulate --out corpus/train --geometry circ7 --hours 0.1 --seed 7

  # Train the geometry-agnostic toy model on it
  python geopse.py train --manifest corpus/train/manifest.jsonl --out runs/geo --epochs 20

  # Enhance a recording
  python geopse.py enhance --input mix.wav --enrollment enroll.wav --checkpoint runs/geo/final.gpse --output out.wav

  # Stream 7-channel 16-bit PCM through the model
  sox mix.wav -t raw - | python geopse.py stream --checkpoint runs/geo/final.gpse --enrollment enroll.wav --mics 7 > out.raw

  # Compare systems on a dataset-B style test set
  python geopse.py evaluate --manifest corpus/testB/manifest.jsonl --checkpoint geo_agnostic=runs/geo/final.gpse --out eval

  # Check permutation invariance on 7 microphones
  python geopse.py selftest --suite permutation --mics 7

Exit codes: 0 success, 1 failure, 2 usage, 3 malformed WAV, 4 channel mismatch, 5 bad checkpoint, 6 self-test failure
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', parents=[common], help='Render a simulated corpus')
    p.add_argument('--out', type=Path, help='Output directory')
    p.add_argument('--preset', help='Dataset preset (overfit8, small2h, testA, testB, testB_angle, testB_distance)')
    p.add_argument('--geometry', action='append', help='Geometry name or JSON file; repeatable')
    p.add_argument('--hours', type=float, help='Total audio duration in hours')
    p.add_argument('--n-scenes', type=int, help='Number of scenes (overrides --hours)')
    p.add_argument('--duration', type=float, help='Seconds per scene')
    p.add_argument('--constraint', choices=['none', 'similar_angle', 'similar_distance'],
                   help='Speaker placement constraint')
    p.add_argument('--condition', help='Condition tag stored in the manifest')
    p.add_argument('--seed', type=int, help='Random seed')
    p.add_argument('--workers', type=int, help='Rendering threads (capped by GEOPSE_THREADS)')
    p.add_argument('--speech-dir', type=Path, help='Directory of dry speech WAVs (speaker subfolders)')
    p.add_argument('--noise-dir', type=Path, help='Directory of noise WAVs')
    p.add_argument('--dry-run', action='store_true', default=None, help='Sample scenes without rendering')

    p = sub.add_parser('train', parents=[common], help='Train a model on a corpus')
    p.add_argument('--manifest', type=Path, help='Corpus manifest.jsonl')
    p.add_argument('--out', type=Path, help='Run directory for loss.csv and checkpoints')
    p.add_argument('--model-preset', choices=['full', 'toy', 'micro'], help='Architecture preset')
    p.add_argument('--variant', choices=['sc_pse', 'mc_stft', 'mc_ipd', 'geo_agnostic'], help='Model variant')
    p.add_argument('--n-mics', type=int, help='Microphones for fixed-geometry variants')
    p.add_argument('--geometries', nargs='+', help='Geometries to train on (default: all in the corpus)')
    p.add_argument('--epochs', type=int, help='Training epochs')
    p.add_argument('--batch-size', type=int, help='Scenes per batch')
    p.add_argument('--lr', type=float, help='Adam learning rate')
    p.add_argument('--seed', type=int, help='Data-order seed')
    p.add_argument('--target', choices=['reverberant', 'early'], help='Clean training target')

    p = sub.add_parser('enhance', parents=[common], help='Enhance a WAV file')
    p.add_argument('--input', type=Path, help='Multichannel input WAV (16 kHz)')
    p.add_argument('--enrollment', type=Path, help='Enrollment WAV or .dvec embedding')
    p.add_argument('--checkpoint', type=Path, help='Model checkpoint (.gpse)')
    p.add_argument('--output', type=Path, help='Enhanced output WAV')

    p = sub.add_parser('stream', parents=[common], help='Enhance raw PCM frames from stdin to stdout')
    p.add_argument('--checkpoint', type=Path, help='Model checkpoint (.gpse)')
    p.add_argument('--enrollment', type=Path, help='Enrollment WAV or .dvec embedding')
    p.add_argument('--mics', type=int, help='Interleaved input channels')
    p.add_argument('--format', choices=list(PCM_FORMATS), help='Sample format on stdin/stdout (default s16le)')

    p = sub.add_parser('evaluate', parents=[common], help='Score systems on test corpora')
    p.add_argument('--manifest', action='append', help='Test corpus manifest.jsonl; repeatable')
    p.add_argument('--checkpoint', action='append', metavar='NAME=PATH',
                   help="System checkpoint; NAME 'signal_averaging' wraps an sc_pse model; repeatable")
    p.add_argument('--condition', action='append', help='Keep only these condition tags; repeatable')
    p.add_argument('--out', type=Path, help='Report directory')
    p.add_argument('--oracle', action='store_true', default=None, help='Include the oracle complex mask')
    p.add_argument('--workers', type=int, help='Scoring threads (capped by GEOPSE_THREADS)')
    p.add_argument('--write-audio', action='store_true', default=None,
                   help='Also write enhanced WAVs (for external ASR scoring)')

    p = sub.add_parser('selftest', parents=[common], help='Run invariance property suites')
    p.add_argument('--suite', action='append',
                   help='permutation, agnostic, causality, streaming, gradient, ewma or all; repeatable')
    p.add_argument('--mics', type=int, help='Microphones for the permutation and streaming suites')
    p.add_argument('--checkpoint', type=Path, help='Test a trained checkpoint instead of a fresh model')
    p.add_argument('--seed', type=int, help='Random seed')

    p = sub.add_parser('describe', parents=[common], help='Print a model layer table')
    p.add_argument('--checkpoint', type=Path, help='Describe a checkpoint')
    p.add_argument('--model-preset', choices=['full', 'toy', 'micro'], help='Architecture preset')
    p.add_argument('--variant', choices=['sc_pse', 'mc_stft', 'mc_ipd', 'geo_agnostic'], help='Model variant')
    p.add_argument('--n-mics', type=int, help='Microphones for fixed-geometry variants')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log, args.verbose, sys.stderr if args.command == 'stream' else sys.stdout)

    try:
        config = resolve_config(args.command, args)
        return COMMANDS[args.command](config)
    except WavFormatError as e:
        logging.error(f"Malformed WAV: {e}")
        return EXIT_WAV
    except ChannelMismatchError as e:
        logging.error(f"Channel mismatch: {e}")
        return EXIT_CHANNELS
    except CheckpointFormatError as e:
        logging.error(f"Bad checkpoint: {e}")
        return EXIT_CHECKPOINT
    except ConfigError as e:
        logging.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except FileNotFoundError as e:
        logging.error(str(e))
        return EXIT_FAILURE
    except Exception as e:
        logging.error(f"Error during {args.command}: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
