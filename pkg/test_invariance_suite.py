#!/usr/bin/env python3
"""
Tests for invariance_suite.py: every property suite passes on fresh models and
reports failures in a structured way.
"""

import inspect
import logging

import numpy as np
import pytest

from invariance_suite import (
    SUITES,
    SuiteResult,
    agnostic_suite,
    all_passed,
    array_recording,
    causality_suite,
    default_model,
    ewma_suite,
    FINITE_DIFFERENCE_STEP,
    gradient_check,
    gradient_suite,
    permutation_suite,
    run_suites,
    streaming_suite,
)
from cnet import Dense
from room_sim import resolve_geometry

logging.basicConfig(level=logging.WARNING)


class TestSuiteResult:
    def test_record_tracks_worst_deviation(self):
        result = SuiteResult('demo', tolerance=1e-3)
        result.record('a', 1e-4)
        result.record('b', 5e-4)
        assert result.passed
        assert result.checks == 2
        assert result.max_deviation == 5e-4

    def test_failure(self):
        result = SuiteResult('demo', tolerance=0.0)
        result.record('exact', 1e-12)
        assert not result.passed
        assert 'exact' in result.failures[0]
        assert 'FAIL' in result.summary()

    def test_nan_deviation_fails(self):
        result = SuiteResult('demo', tolerance=1.0)
        result.record('nan', float('nan'))
        assert not result.passed


def test_array_recording_shape():
    wave = array_recording(resolve_geometry('circ7'), 800, seed=1)
    assert wave.shape == (7, 800)
    assert wave.dtype == np.float32
    assert np.all(np.isfinite(wave))


def test_permutation_suite_passes():
    result = permutation_suite(n_mics=4, n_frames=20)
    assert result.passed, result.failures
    assert result.checks == 24
    assert result.max_deviation < 1e-5


def test_permutation_suite_random_orders():
    result = permutation_suite(n_mics=7, n_frames=12, exhaustive=False, n_random=5)
    assert result.passed, result.failures
    assert result.checks == 5


def test_permutation_suite_rejects_fixed_model():
    result = permutation_suite(default_model('mc_stft', 3), n_mics=3)
    assert not result.passed


def test_agnostic_suite_covers_every_geometry():
    result = agnostic_suite(n_frames=10)
    assert result.passed, result.failures
    assert result.checks == 9


def test_causality_suite_passes_for_all_variants():
    result = causality_suite(n_frames=12, n_cuts=3)
    assert result.passed, result.failures
    assert result.checks == 4 * 3
    assert result.max_deviation == 0.0


@pytest.mark.parametrize("variant", ['geo_agnostic', 'sc_pse'])
def test_streaming_suite_passes(variant):
    result = streaming_suite(default_model(variant), mic_counts=(2,), seconds=0.25)
    assert result.passed, result.failures
    assert result.max_deviation < 1e-5


def test_gradient_check_on_dense():
    rng = np.random.default_rng(0)
    dense = Dense(4, 3, True, rng).astype(np.float64)
    x = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
    assert gradient_check(dense, dense.forward, x) < 1e-4


def test_gradient_check_step_defaults_to_layer_step():
    assert FINITE_DIFFERENCE_STEP == 1e-4
    assert inspect.signature(gradient_check).parameters['eps'].default == FINITE_DIFFERENCE_STEP
    rng = np.random.default_rng(1)
    dense = Dense(3, 2, False, rng).astype(np.float64)
    x = rng.standard_normal((4, 3))
    assert gradient_check(dense, dense.forward, x, eps=1e-6) < 1e-4
    assert gradient_check(dense, dense.forward, x) < 1e-4


def test_gradient_suite_passes():
    result = gradient_suite(variants=('geo_agnostic',))
    assert result.passed, result.failures
    assert result.checks == 7


def test_ewma_suite_passes():
    result = ewma_suite(n_steps=10000)
    assert result.passed, result.failures
    assert result.checks == 4


def test_run_suites():
    results = run_suites(['ewma', 'causality'])
    assert [r.name for r in results] == ['ewma', 'causality']
    assert all_passed(results)
    with pytest.raises(ValueError, match="Unknown suite"):
        run_suites(['speed'])


def test_suite_registry():
    assert set(SUITES) == {'permutation', 'agnostic', 'causality', 'streaming', 'gradient', 'ewma'}


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
