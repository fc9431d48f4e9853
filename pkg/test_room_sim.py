#!/usr/bin/env python3
"""
Tests for room_sim.py: geometries, absorption, impulse responses, scene sampling,
rendering and corpus writing.
"""

import json
import logging
import math
import os
import shutil
import tempfile
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from room_sim import (
    BUILTIN_GEOMETRIES,
    ArrayGeometry,
    DatasetConfig,
    MixtureExample,
    RoomSpec,
    SceneSpec,
    aliasing_distance,
    aliasing_frequency,
    dataset_preset,
    image_method_rir,
    isotropic_positions,
    load_geometry_file,
    make_geometry,
    measure_t60,
    render_scene,
    resolve_geometry,
    sample_scene,
    save_geometry_file,
    scene_satisfies,
    simulate_corpus,
    t60_to_absorption,
    worker_count,
)
from source_store import SourceStore

logging.basicConfig(level=logging.WARNING)

STORE = SourceStore(n_synthetic_speakers=4, utterances_per_speaker=3, n_synthetic_noises=4,
                    utterance_seconds=1.0)


@pytest.fixture
def temp_dir():
    """Create a temporary output directory."""
    d = Path(tempfile.mkdtemp(prefix='test_room_sim_'))
    yield d
    shutil.rmtree(d, ignore_errors=True)


def _scene(**overrides) -> SceneSpec:
    fields = dict(
        room=RoomSpec((6.0, 6.0, 3.0), 0.3, max_image_order=2),
        geometry=BUILTIN_GEOMETRIES['circ7'](),
        array_center=(3.0, 3.0, 1.2),
        target_pos=(4.0, 3.0, 1.2),
        interferer_pos=(3.0, 5.0, 1.2),
        noise_positions=[(5.0, 1.5, 1.8)],
        sir_db=0.0,
        snr_db=10.0,
        source_ids={
            'target': 'synth:0:0',
            'enrollment': 'synth:0:1',
            'interferer': 'synth:1:0',
            'noise': ['synth-noise:white:0'],
            'isotropic': ['synth-noise:pink:1'],
        },
        seed=7,
        isotropic_sources=4,
        duration_s=0.5,
        enrollment_s=0.5,
    )
    fields.update(overrides)
    return SceneSpec(**fields)


# geometry

def test_linear_geometry_positions():
    geom = make_geometry('linear', 3, 0.06)
    np.testing.assert_allclose(geom.mic_positions[:, 0], [-0.03, 0.0, 0.03], atol=1e-15)
    assert not np.any(geom.mic_positions[:, 1:])


def test_circular_six_spacing():
    geom = make_geometry('circular', 6, 0.0425)
    np.testing.assert_allclose(np.linalg.norm(geom.mic_positions, axis=1), 0.0425)
    angles = np.degrees(np.arctan2(geom.mic_positions[:, 1], geom.mic_positions[:, 0])) % 360
    np.testing.assert_allclose(np.diff(angles), 60.0, atol=1e-9)
    assert angles[0] == pytest.approx(0.0, abs=1e-9)


def test_circular_five_max_spacing():
    geom = make_geometry('circular', 5, 0.03)
    assert geom.max_spacing() == pytest.approx(2 * 0.03 * math.sin(math.radians(72)), abs=1e-12)
    assert geom.max_spacing() == pytest.approx(0.0570, abs=1e-4)


@pytest.mark.parametrize("kind,n_mics", [
    ('triangular', 5),
    ('rectangular', 3),
    ('linear', 1),
    ('hexagonal', 6),
])
def test_unsupported_geometry(kind, n_mics):
    with pytest.raises(ValueError):
        make_geometry(kind, n_mics, 0.05)


@pytest.mark.parametrize("name,count", [
    ('circ7', 7), ('tri4', 4), ('rect4', 4), ('circ6', 6),
    ('tri3', 3), ('circ5', 5), ('lin3', 3), ('circ8', 8),
])
def test_builtin_geometries(name, count):
    geom = resolve_geometry(name)
    assert geom.n_mics == count
    assert np.max(np.abs(geom.mic_positions.mean(axis=0))) <= 1e-9


@pytest.mark.parametrize("name", ['tri4', 'rect4', 'circ6'])
def test_seen_geometries_are_circ7_subsets(name):
    circ7 = resolve_geometry('circ7').mic_positions
    for pos in resolve_geometry(name).mic_positions:
        assert np.min(np.linalg.norm(circ7 - pos, axis=1)) < 1e-12


def test_geometry_invariants():
    with pytest.raises(ValueError, match="centroid"):
        ArrayGeometry('off', [[0.1, 0.0, 0.0], [0.2, 0.0, 0.0]])
    with pytest.raises(ValueError, match="1 mm"):
        ArrayGeometry('dup', [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


def test_geometry_file_round_trip(temp_dir):
    path = temp_dir / 'custom.json'
    save_geometry_file(resolve_geometry('lin3'), path)
    data = json.loads(path.read_text(encoding='utf-8'))
    assert data['name'] == 'lin3'
    assert len(data['mics_m']) == 3
    geom = resolve_geometry(str(path))
    np.testing.assert_allclose(geom.mic_positions, resolve_geometry('lin3').mic_positions)


def test_geometry_file_missing_or_unknown(temp_dir):
    with pytest.raises(FileNotFoundError):
        load_geometry_file(temp_dir / 'missing.json')
    with pytest.raises(ValueError, match="Unknown geometry"):
        resolve_geometry('circ99')


def test_aliasing_helpers():
    assert aliasing_distance(16000) == pytest.approx(0.042875)
    assert aliasing_frequency(0.0425) == pytest.approx(343.0 / 0.085)
    assert resolve_geometry('circ7').min_spacing() < aliasing_distance()
    assert resolve_geometry('circ8').min_spacing() > aliasing_distance()


# absorption

def test_sabine_worked_example():
    alpha, clamped = t60_to_absorption((5.0, 4.0, 3.0), 0.3)
    assert alpha == pytest.approx(0.161 * 60 / (94 * 0.3), rel=1e-12)
    assert alpha == pytest.approx(0.3426, abs=1e-4)
    assert not clamped


def test_eyring_absorption():
    alpha, _ = t60_to_absorption((5.0, 4.0, 3.0), 0.3, method='eyring')
    assert alpha == pytest.approx(1 - math.exp(-0.161 * 60 / (94 * 0.3)))


def test_absorption_limits():
    alpha, clamped = t60_to_absorption((5.0, 4.0, 3.0), 1e6)
    assert 0 < alpha < 1e-6
    assert not clamped
    alpha, clamped = t60_to_absorption((5.0, 4.0, 3.0), 0.05)
    assert alpha == 0.99
    assert clamped
    with pytest.raises(ValueError):
        t60_to_absorption((5.0, 4.0, 3.0), 0.0)


@pytest.mark.parametrize("kwargs", [
    {'dimensions': (1.0, 4.0, 3.0), 't60': 0.3},
    {'dimensions': (5.0, 4.0, 3.0), 't60': 3.0},
    {'dimensions': (5.0, 4.0, 3.0), 't60': 0.3, 'max_image_order': -1},
    {'dimensions': (5.0, 4.0, 3.0), 't60': 0.3, 'absorption_model': 'millington'},
])
def test_room_spec_validation(kwargs):
    with pytest.raises(ValueError):
        RoomSpec(**kwargs)


# impulse responses

def test_free_field_direct_path():
    room = RoomSpec((6.0, 5.0, 3.0), 0.3, max_image_order=0)
    d = 343.0 * 50 / 16000
    rir = image_method_rir(room, (2.0 + d, 2.5, 1.5), (2.0, 2.5, 1.5))
    assert len(rir) >= 0.3 * 16000
    assert int(np.argmax(np.abs(rir))) == 50
    assert rir[50] == pytest.approx(1.0 / (4 * math.pi * d), rel=1e-6)
    rest = np.delete(rir, 50)
    assert np.max(np.abs(rest)) < 1e-6 * rir[50]


@pytest.mark.parametrize("distance", [0.37, 1.234, 2.01])
def test_direct_path_delay_within_one_sample(distance):
    room = RoomSpec((6.0, 5.0, 3.0), 0.2, max_image_order=3)
    src, mic = np.array([1.5, 2.0, 1.4]), np.array([1.5 + distance, 2.0, 1.4])
    rir = image_method_rir(room, src, mic)
    expected = distance / 343.0 * 16000
    first = int(np.argmax(np.abs(rir[:int(expected) + 6])))
    assert abs(first - expected) <= 1.0


def test_mirrored_mics_in_cubic_room():
    room = RoomSpec((4.0, 4.0, 4.0), 0.3, max_image_order=6)
    src = (2.0, 2.0, 2.0)
    left = image_method_rir(room, src, (1.0, 2.0, 2.0))
    right = image_method_rir(room, src, (3.0, 2.0, 2.0))
    np.testing.assert_allclose(left, right, atol=1e-9)


@pytest.mark.parametrize("t60", [0.15, 0.3, 0.6])
def test_measured_t60_close_to_requested(t60):
    room = RoomSpec((5.0, 4.0, 3.0), t60, max_image_order=None)
    rir = image_method_rir(room, (1.5, 1.2, 1.4), (3.2, 2.5, 1.6))
    measured = measure_t60(rir)
    assert abs(measured - t60) <= 0.3 * t60


def test_measure_t60_on_exponential_decay():
    rng = np.random.default_rng(0)
    t = np.arange(16000) / 16000
    rir = rng.standard_normal(16000) * 10 ** (-3 * t / 0.5)
    assert measure_t60(rir) == pytest.approx(0.5, rel=0.05)


def test_rir_errors():
    room = RoomSpec((5.0, 4.0, 3.0), 0.3)
    with pytest.raises(ValueError, match="coincident"):
        image_method_rir(room, (1.0, 1.0, 1.0), (1.0, 1.0, 1.005))
    with pytest.raises(ValueError, match="inside"):
        image_method_rir(room, (6.0, 1.0, 1.0), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        measure_t60(np.zeros(100))


def test_isotropic_positions_inside_room():
    room = RoomSpec((6.0, 7.0, 3.0), 0.3)
    center = np.array([3.0, 3.5, 1.2])
    pos = isotropic_positions(room, center, 8)
    assert pos.shape == (8, 3)
    radii = np.linalg.norm(pos - center, axis=1)
    np.testing.assert_allclose(radii, radii[0])
    assert all(room.contains(p, 0.1 - 1e-9) for p in pos)


# rendering

def test_mixture_is_target_without_interferer_or_noise():
    spec = _scene(interferer_pos=None, sir_db=None, snr_db=None,
                  source_ids={'target': 'synth:0:0', 'enrollment': 'synth:0:1'})
    example = render_scene(spec, STORE)
    np.testing.assert_array_equal(example.mixture.samples, example.target_ref)
    assert example.realized == {'sir_db': None, 'snr_db': None}


def test_rendered_levels_and_decomposition():
    example = render_scene(_scene(), STORE)
    assert example.mixture.samples.shape == (7, 8000)
    assert example.realized['sir_db'] == pytest.approx(0.0, abs=0.01)
    assert example.realized['snr_db'] == pytest.approx(10.0, abs=0.01)
    np.testing.assert_allclose(example.components_sum(), example.mixture.samples, atol=1e-6)
    assert np.max(np.abs(example.mixture.samples)) <= 0.95 + 1e-6

    t = example.target_ref[0].astype(np.float64)
    i = example.interferer[0].astype(np.float64)
    n = example.noise[0].astype(np.float64)
    assert 10 * np.log10(np.sum(t ** 2) / np.sum(i ** 2)) == pytest.approx(example.realized['sir_db'], abs=0.02)
    assert 10 * np.log10(np.sum(t ** 2) / np.sum(n ** 2)) == pytest.approx(example.realized['snr_db'], abs=0.02)


def test_early_target_is_truncated_reverb():
    example = render_scene(_scene(room=RoomSpec((6.0, 6.0, 3.0), 0.5, max_image_order=4)), STORE)
    assert np.sum(example.target_early ** 2) < np.sum(example.target_ref ** 2)
    assert len(example.enrollment) == 8000


def test_silent_source_raises():
    with patch.object(SourceStore, 'load', return_value=np.zeros(8000)):
        with pytest.raises(ValueError, match="silent"):
            render_scene(_scene(), STORE)


def test_rotation_permutes_channels():
    room = RoomSpec((6.0, 6.0, 3.0), 0.2, max_image_order=3)
    center = np.array([3.0, 3.0, 1.2])
    target, interferer = np.array([1.0, 0.3, 0.0]), np.array([-0.4, -1.7, 0.0])

    def rotate(v):
        return np.array([-v[1], v[0], v[2]])

    common = dict(room=room, geometry=resolve_geometry('circ8'), array_center=center,
                  noise_positions=[], sir_db=None, snr_db=None,
                  source_ids={'target': 'synth:0:0', 'enrollment': 'synth:0:1', 'interferer': 'synth:1:0'})
    base = render_scene(_scene(target_pos=center + target, interferer_pos=center + interferer, **common), STORE)
    turned = render_scene(_scene(target_pos=center + rotate(target),
                                 interferer_pos=center + rotate(interferer), **common), STORE)
    # a quarter turn moves mic i onto mic i + 2 of the 8-mic ring
    np.testing.assert_allclose(turned.mixture.samples, np.roll(base.mixture.samples, 2, axis=0), atol=1e-6)


def test_scene_spec_invariants():
    with pytest.raises(ValueError, match="closer"):
        _scene(target_pos=(3.0, 5.0, 1.2), interferer_pos=(4.0, 3.0, 1.2))
    with pytest.raises(ValueError, match="wall margin"):
        _scene(noise_positions=[(5.95, 1.5, 1.8)])
    with pytest.raises(ValueError, match="outside"):
        _scene(target_pos=(3.2, 3.0, 1.2))


def test_scene_spec_dict_round_trip():
    spec = _scene()
    again = SceneSpec.from_dict(json.loads(spec.to_json()))
    assert again.to_json() == spec.to_json()


# sampling

def test_sample_scene_is_deterministic():
    cfg = DatasetConfig()
    a = sample_scene(np.random.default_rng(42), cfg, sources=STORE)
    b = sample_scene(np.random.default_rng(42), cfg, sources=STORE)
    assert a.to_json() == b.to_json()


@pytest.mark.parametrize("seed", range(5))
def test_similar_angle_constraint(seed):
    spec = sample_scene(np.random.default_rng(seed), DatasetConfig(), 'similar_angle', sources=STORE)
    center = np.array(spec.array_center)
    vt, vi = np.subtract(spec.target_pos, center), np.subtract(spec.interferer_pos, center)
    gap = abs(math.atan2(vt[1], vt[0]) - math.atan2(vi[1], vi[0])) % (2 * math.pi)
    gap = min(gap, 2 * math.pi - gap)
    assert math.degrees(gap) < 5.0
    assert np.linalg.norm(vi) - np.linalg.norm(vt) > 1.0


@pytest.mark.parametrize("seed", range(5))
def test_similar_distance_constraint(seed):
    spec = sample_scene(np.random.default_rng(seed), DatasetConfig(), 'similar_distance', sources=STORE)
    center = np.array(spec.array_center)
    vt, vi = np.subtract(spec.target_pos, center), np.subtract(spec.interferer_pos, center)
    gap = abs(math.atan2(vt[1], vt[0]) - math.atan2(vi[1], vi[0])) % (2 * math.pi)
    gap = min(gap, 2 * math.pi - gap)
    assert math.degrees(gap) > 45.0
    assert abs(np.linalg.norm(vi) - np.linalg.norm(vt)) < 0.1
    assert np.linalg.norm(vt) <= np.linalg.norm(vi)


@pytest.mark.parametrize('constraint', ['similar_angle', 'similar_distance'])
def test_scene_satisfies(constraint):
    spec = sample_scene(np.random.default_rng(9), DatasetConfig(), constraint, sources=STORE)
    assert scene_satisfies(spec, constraint)
    assert scene_satisfies(spec, 'none')
    other = 'similar_distance' if constraint == 'similar_angle' else 'similar_angle'
    assert not scene_satisfies(spec, other)
    lone = sample_scene(np.random.default_rng(9), DatasetConfig(interferer_prob=0.0), sources=STORE)
    assert not scene_satisfies(lone, constraint)


def test_interferer_probability():
    no_interf = DatasetConfig(interferer_prob=0.0)
    always = DatasetConfig(interferer_prob=1.0)
    rng = np.random.default_rng(3)
    assert all(sample_scene(rng, no_interf, sources=STORE).interferer_pos is None for _ in range(5))
    assert all(sample_scene(rng, always, sources=STORE).interferer_pos is not None for _ in range(5))


def test_unsatisfiable_constraint():
    cfg = DatasetConfig(distance_range=(0.5, 0.6))
    with pytest.raises(ValueError, match="10000"):
        sample_scene(np.random.default_rng(0), cfg, 'similar_angle', sources=STORE)


def test_dataset_presets():
    assert dataset_preset('testA').interferer_prob == 0.0
    assert dataset_preset('testB_angle').constraint == 'similar_angle'
    assert dataset_preset('overfit8').scene_count() == 8
    assert DatasetConfig(hours=0.01, duration_s=4.0).scene_count() == 9
    with pytest.raises(ValueError):
        dataset_preset('testC')
    with pytest.raises(ValueError, match="Unknown dataset config keys"):
        DatasetConfig.from_dict({'colour': 'blue'})


# corpus

def test_simulate_corpus_writes_manifest(temp_dir):
    cfg = DatasetConfig(n_scenes=2, duration_s=0.5, enrollment_s=0.5, isotropic_sources=2,
                        max_image_order=1, t60_range=(0.15, 0.2), geometries=['tri3'])
    stats = simulate_corpus(temp_dir, cfg, seed=1, sources=STORE, workers=2)
    assert stats['processed'] == 2
    assert stats['failed'] == 0
    lines = (temp_dir / 'manifest.jsonl').read_text(encoding='utf-8').strip().splitlines()
    assert len(lines) == 2
    entry = json.loads(lines[0])
    assert entry['id'] == 'scene_00000'
    assert entry['geometry'] == 'tri3'
    example = MixtureExample.load(entry, temp_dir)
    assert example.mixture.n_channels == 3
    np.testing.assert_allclose(example.components_sum(), example.mixture.samples, atol=1e-6)


def test_simulate_corpus_is_reproducible(temp_dir):
    cfg = DatasetConfig(n_scenes=1, duration_s=0.5, enrollment_s=0.5, isotropic_sources=2,
                        max_image_order=1, t60_range=(0.15, 0.2), geometries=['lin3'])
    simulate_corpus(temp_dir / 'a', cfg, seed=5, sources=STORE)
    simulate_corpus(temp_dir / 'b', cfg, seed=5, sources=STORE)
    a = (temp_dir / 'a' / 'scene_00000' / 'mixture.wav').read_bytes()
    b = (temp_dir / 'b' / 'scene_00000' / 'mixture.wav').read_bytes()
    assert a == b


def test_simulate_dry_run_writes_nothing(temp_dir):
    cfg = DatasetConfig(n_scenes=3)
    stats = simulate_corpus(temp_dir / 'out', cfg, seed=0, sources=STORE, dry_run=True)
    assert stats['processed'] == 3
    assert not (temp_dir / 'out').exists()


def test_worker_count_respects_env():
    with patch.dict(os.environ, {'GEOPSE_THREADS': '2'}):
        assert worker_count() == 2
        assert worker_count(8) == 2
        assert worker_count(1) == 1


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
