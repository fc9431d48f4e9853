#!/usr/bin/env python3
"""
Tests for geopse.py: configuration layering, exit codes, and each subcommand
run end to end on a tiny simulated corpus.
"""

import argparse
import io
import json
import logging
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

import geopse
from features import dvector_stub, write_dvector
from models import enhance_offline, load_model
from signal_core import read_wav, write_wav
from train_eval import read_manifest

logging.basicConfig(level=logging.WARNING)

TINY_SCENES = ['--set', 'dataset.duration_s=1.0', '--set', 'dataset.enrollment_s=1.0',
               '--set', 'dataset.isotropic_sources=2', '--set', 'dataset.max_image_order=1',
               '--set', 'dataset.t60_range=[0.15, 0.2]']


@pytest.fixture(scope='module')
def workspace():
    """A rendered three-scene corpus and a one-epoch micro checkpoint."""
    d = Path(tempfile.mkdtemp(prefix='test_geopse_'))
    code = geopse.main(['simulate', '--out', str(d / 'corpus'), '--geometry', 'tri3', '--n-scenes', '3',
                        '--condition', 'B', '--seed', '5', '--workers', '2',
                        '--set', 'dataset.interferer_prob=1.0'] + TINY_SCENES)
    assert code == geopse.EXIT_OK
    code = geopse.main(['train', '--manifest', str(d / 'corpus' / 'manifest.jsonl'), '--out', str(d / 'run'),
                        '--model-preset', 'micro', '--epochs', '1', '--batch-size', '2'])
    assert code == geopse.EXIT_OK
    yield d
    shutil.rmtree(d, ignore_errors=True)


def _args(**kwargs) -> argparse.Namespace:
    values = {'config': None, 'set': None}
    values.update(kwargs)
    return argparse.Namespace(**values)


class TestConfig:
    def test_defaults_only(self):
        config = geopse.resolve_config('selftest', _args(suite=None, mics=None, checkpoint=None, seed=None))
        assert config == geopse.DEFAULTS['selftest']
        assert config is not geopse.DEFAULTS['selftest']

    def test_precedence(self, tmp_path):
        config_file = tmp_path / 'cfg.json'
        config_file.write_text(json.dumps({'mics': 4, 'seed': 9}))
        config = geopse.resolve_config('selftest', _args(config=config_file, set=['seed=12'],
                                                         suite=None, mics=5, checkpoint=None, seed=None))
        assert config['mics'] == 5
        assert config['seed'] == 12

    def test_nested_override(self):
        config = geopse.apply_override(geopse.DEFAULTS['train'], 'model.frame.hop_len=64')
        assert config['model'] == {'frame': {'hop_len': 64}}

    def test_string_values_pass_through(self):
        config = geopse.apply_override(geopse.DEFAULTS['describe'], 'model_preset=micro')
        assert config['model_preset'] == 'micro'

    @pytest.mark.parametrize("assignment", ['bogus=1', 'seed', '=3'])
    def test_bad_override(self, assignment):
        with pytest.raises(geopse.ConfigError):
            geopse.apply_override(geopse.DEFAULTS['selftest'], assignment)

    def test_unknown_key_in_file(self, tmp_path):
        config_file = tmp_path / 'cfg.json'
        config_file.write_text(json.dumps({'speed': 'fast'}))
        with pytest.raises(geopse.ConfigError, match="Unknown config key 'speed'"):
            geopse.resolve_config('selftest', _args(config=config_file, suite=None, mics=None,
                                                    checkpoint=None, seed=None))

    def test_invalid_json_file(self, tmp_path):
        config_file = tmp_path / 'cfg.json'
        config_file.write_text('{not json')
        with pytest.raises(geopse.ConfigError, match="not valid JSON"):
            geopse.load_config_file(config_file)

    def test_unknown_model_key_exits_usage(self):
        code = geopse.main(['describe', '--model-preset', 'micro', '--set', 'model.depth=3'])
        assert code == geopse.EXIT_USAGE

    def test_missing_required_setting(self, tmp_path):
        assert geopse.main(['simulate']) == geopse.EXIT_USAGE


class TestSimulate:
    def test_corpus_written(self, workspace):
        corpus = workspace / 'corpus'
        entries = read_manifest(corpus / 'manifest.jsonl')
        assert len(entries) == 3
        assert {e['geometry'] for e in entries} == {'tri3'}
        assert {e['condition'] for e in entries} == {'B'}
        resolved = json.loads((corpus / 'resolved_config.json').read_text())
        assert resolved['dataset']['n_scenes'] == 3
        assert resolved['dataset']['geometries'] == ['tri3']

    def test_dry_run_writes_nothing(self, tmp_path):
        out = tmp_path / 'dry'
        code = geopse.main(['simulate', '--out', str(out), '--preset', 'testA', '--n-scenes', '2', '--dry-run'])
        assert code == geopse.EXIT_OK
        assert not out.exists()

    def test_constraint_holds_for_every_scene(self, tmp_path):
        code = geopse.main(['simulate', '--out', str(tmp_path / 'angle'), '--preset', 'testB_angle',
                            '--geometry', 'circ7', '--n-scenes', '2'] + TINY_SCENES)
        assert code == geopse.EXIT_OK

    def test_unknown_preset(self, tmp_path):
        code = geopse.main(['simulate', '--out', str(tmp_path), '--preset', 'huge'])
        assert code == geopse.EXIT_USAGE


class TestTrain:
    def test_outputs(self, workspace):
        run = workspace / 'run'
        assert (run / 'loss.csv').exists()
        assert (run / 'final.gpse').exists()
        resolved = json.loads((run / 'resolved_config.json').read_text())
        assert resolved['train']['geometry_list'] == ['tri3']
        assert resolved['model']['variant'] == 'geo_agnostic'
        assert resolved['model']['lstm_hidden'] == 8

    def test_fixed_variant_on_two_geometries_is_rejected(self, workspace, tmp_path):
        code = geopse.main(['train', '--manifest', str(workspace / 'corpus' / 'manifest.jsonl'),
                            '--out', str(tmp_path), '--model-preset', 'micro', '--variant', 'mc_stft',
                            '--n-mics', '3', '--geometries', 'tri3', 'circ7'])
        assert code == geopse.EXIT_USAGE

    def test_missing_manifest(self, tmp_path):
        code = geopse.main(['train', '--manifest', str(tmp_path / 'none.jsonl'), '--out', str(tmp_path),
                            '--model-preset', 'micro'])
        assert code == geopse.EXIT_FAILURE


class TestEnhance:
    def _scene(self, workspace):
        corpus = workspace / 'corpus'
        entry = read_manifest(corpus / 'manifest.jsonl')[0]
        return corpus / entry['paths']['mixture'], corpus / entry['paths']['enrollment']

    def test_enhance_matches_library(self, workspace, tmp_path):
        mixture, enrollment = self._scene(workspace)
        checkpoint = workspace / 'run' / 'final.gpse'
        output = tmp_path / 'out.wav'
        code = geopse.main(['enhance', '--input', str(mixture), '--enrollment', str(enrollment),
                            '--checkpoint', str(checkpoint), '--output', str(output)])
        assert code == geopse.EXIT_OK
        written = read_wav(output).samples[0]
        expected = enhance_offline(read_wav(mixture), read_wav(enrollment).samples[0], load_model(checkpoint))
        np.testing.assert_allclose(written, expected, atol=1e-6)

    def test_enhance_with_dvector_file(self, workspace, tmp_path):
        mixture, enrollment = self._scene(workspace)
        model = load_model(workspace / 'run' / 'final.gpse')
        write_dvector(tmp_path / 'spk.dvec', dvector_stub(read_wav(enrollment).samples[0],
                                                          dim=model.config.dvector_dim))
        code = geopse.main(['enhance', '--input', str(mixture), '--enrollment', str(tmp_path / 'spk.dvec'),
                            '--checkpoint', str(workspace / 'run' / 'final.gpse'),
                            '--output', str(tmp_path / 'out.wav')])
        assert code == geopse.EXIT_OK

    def test_missing_enrollment(self, workspace, tmp_path):
        mixture, _ = self._scene(workspace)
        code = geopse.main(['enhance', '--input', str(mixture), '--checkpoint', str(workspace / 'run' / 'final.gpse'),
                            '--output', str(tmp_path / 'out.wav')])
        assert code == geopse.EXIT_USAGE

    def test_wrong_sample_rate(self, workspace, tmp_path):
        _, enrollment = self._scene(workspace)
        bad = tmp_path / 'bad.wav'
        write_wav(bad, np.zeros((3, 8000), dtype=np.float32), sample_rate=8000)
        code = geopse.main(['enhance', '--input', str(bad), '--enrollment', str(enrollment),
                            '--checkpoint', str(workspace / 'run' / 'final.gpse'),
                            '--output', str(tmp_path / 'out.wav')])
        assert code == geopse.EXIT_WAV

    def test_garbage_checkpoint(self, workspace, tmp_path):
        mixture, enrollment = self._scene(workspace)
        bogus = tmp_path / 'bogus.gpse'
        bogus.write_bytes(b'not a checkpoint at all')
        code = geopse.main(['enhance', '--input', str(mixture), '--enrollment', str(enrollment),
                            '--checkpoint', str(bogus), '--output', str(tmp_path / 'out.wav')])
        assert code == geopse.EXIT_CHECKPOINT


class TestStream:
    def _config(self, workspace, **overrides):
        corpus = workspace / 'corpus'
        entry = read_manifest(corpus / 'manifest.jsonl')[0]
        config = dict(geopse.DEFAULTS['stream'], checkpoint=str(workspace / 'run' / 'final.gpse'),
                      enrollment=str(corpus / entry['paths']['enrollment']), n_mics=3)
        config.update(overrides)
        return config, corpus / entry['paths']['mixture']

    def test_float_stream_matches_offline(self, workspace):
        config, mixture = self._config(workspace, format='f32le')
        wave = read_wav(mixture)
        model = load_model(Path(config['checkpoint']))
        hop = model.config.frame.hop_len
        n_frames = wave.n_samples // hop
        interleaved = wave.samples[:, :n_frames * hop].T.astype('<f4').tobytes()
        stdout = io.BytesIO()

        assert geopse.cmd_stream(config, io.BytesIO(interleaved), stdout) == geopse.EXIT_OK

        streamed = np.frombuffer(stdout.getvalue(), dtype='<f4')
        enrollment = read_wav(Path(config['enrollment'])).samples[0]
        offline = enhance_offline(wave.samples[:, :n_frames * hop], enrollment, model)
        n = min(streamed.size, offline.size)
        assert n > 0
        np.testing.assert_allclose(streamed[:n], offline[:n], atol=1e-5)

    def test_pcm16_stream_and_partial_frame(self, workspace):
        config, _ = self._config(workspace)
        hop = load_model(Path(config['checkpoint'])).config.frame.hop_len
        n_frames = 10
        pcm = (np.random.default_rng(0).standard_normal(n_frames * hop * 3) * 1000).astype('<i2').tobytes()
        stdout = io.BytesIO()
        assert geopse.cmd_stream(config, io.BytesIO(pcm + b'\x00\x00'), stdout) == geopse.EXIT_OK
        overlap = load_model(Path(config['checkpoint'])).config.frame.overlap_factor
        assert len(stdout.getvalue()) == (n_frames - overlap + 1) * hop * 2

    def test_unknown_format(self, workspace):
        config, _ = self._config(workspace, format='mp3')
        with pytest.raises(geopse.ConfigError):
            geopse.cmd_stream(config, io.BytesIO(), io.BytesIO())


class TestEvaluate:
    def test_report_written(self, workspace, tmp_path):
        out = tmp_path / 'eval'
        code = geopse.main(['evaluate', '--manifest', str(workspace / 'corpus' / 'manifest.jsonl'),
                            '--checkpoint', f"geo_agnostic={workspace / 'run' / 'final.gpse'}",
                            '--oracle', '--out', str(out)])
        assert code == geopse.EXIT_OK
        report = json.loads((out / 'report.json').read_text())
        assert set(report['systems']) == {'noisy', 'geo_agnostic', 'oracle_mask'}
        assert (out / 'report.txt').exists()
        assert (out / 'bars.csv').exists()
        assert (out / 'resolved_config.json').exists()

    def test_bad_checkpoint_spec(self, workspace):
        code = geopse.main(['evaluate', '--manifest', str(workspace / 'corpus' / 'manifest.jsonl'),
                            '--checkpoint', 'no_equals_sign'])
        assert code == geopse.EXIT_USAGE

    def test_unmatched_condition(self, workspace):
        code = geopse.main(['evaluate', '--manifest', str(workspace / 'corpus' / 'manifest.jsonl'),
                            '--condition', 'A'])
        assert code == geopse.EXIT_FAILURE


class TestSelftestAndDescribe:
    def test_selftest_passes(self, capsys):
        code = geopse.main(['selftest', '--suite', 'ewma', '--suite', 'causality'])
        assert code == geopse.EXIT_OK
        out = capsys.readouterr().out
        assert 'max deviation' in out
        assert out.rstrip().endswith('PASS')

    def test_selftest_fixed_checkpoint_fails_permutation(self, tmp_path):
        from models import MaskNetwork, model_preset, save_model
        save_model(tmp_path / 'fixed.gpse', MaskNetwork(model_preset('micro', variant='mc_stft', n_mics=3)))
        code = geopse.main(['selftest', '--suite', 'permutation', '--mics', '3',
                            '--checkpoint', str(tmp_path / 'fixed.gpse')])
        assert code == geopse.EXIT_SELFTEST

    def test_unknown_suite(self):
        assert geopse.main(['selftest', '--suite', 'speed']) == geopse.EXIT_USAGE

    def test_describe_preset(self, capsys):
        code = geopse.main(['describe', '--model-preset', 'micro', '--variant', 'mc_ipd', '--n-mics', '4'])
        assert code == geopse.EXIT_OK
        out = capsys.readouterr().out
        assert 'Model variant: mc_ipd' in out
        assert 'Total real parameters' in out

    def test_describe_checkpoint(self, workspace, capsys):
        assert geopse.main(['describe', '--checkpoint', str(workspace / 'run' / 'final.gpse')]) == geopse.EXIT_OK
        assert 'geo_agnostic' in capsys.readouterr().out


class TestExitCodes:
    def test_channel_mismatch(self, workspace, tmp_path):
        from models import MaskNetwork, model_preset, save_model
        save_model(tmp_path / 'fixed.gpse', MaskNetwork(model_preset('micro', variant='mc_stft', n_mics=4,
                                                                     use_dvector=False)))
        entry = read_manifest(workspace / 'corpus' / 'manifest.jsonl')[0]
        code = geopse.main(['enhance', '--input', str(workspace / 'corpus' / entry['paths']['mixture']),
                            '--checkpoint', str(tmp_path / 'fixed.gpse'), '--output', str(tmp_path / 'o.wav')])
        assert code == geopse.EXIT_CHANNELS

    def test_usage_error_from_argparse(self):
        with pytest.raises(SystemExit) as exc:
            geopse.main(['train', '--variant', 'transformer'])
        assert exc.value.code == 2


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
