import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose

SCRIPTS_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "scripts"))
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

from errors import InvalidParams, MissingDerivatives
from localized_waves import (
    SeparableQuadrature,
    build_cutoff,
    build_localized_wave,
    build_mollifier,
    build_staircase,
    lambda_hat_for_deviation,
    plateau_value,
    potential_R_delta2,
    replicate_tiling,
    staircase_values,
    two_phase_regions,
)
from spectral_oracles import SpectralField, fd_divergence, grid_points, spectral_divergence, wave_spectral_residual
from states_geometry import FlowState, SymTraceFreeMatrix
from wave_cone_segments import LambdaDirection


def axis_direction():
    """n_bar = e1, V_bar = e1 (x) e2 + e2 (x) e1, xi = e3."""
    V = np.zeros((3, 3))
    V[0, 1] = V[1, 0] = 1.0
    return LambdaDirection(np.array([1.0, 0.0, 0.0]), SymTraceFreeMatrix(V), np.array([0.0, 0.0, 1.0]))


def unit_cell_wave(lam, B=None, phase=0.0):
    cutoff = build_cutoff(np.full(3, 0.5), 1.0, 0.125)
    profile = build_staircase(0.5, 1.0 / 64.0)
    return build_localized_wave(axis_direction(), lam, cutoff, profile, B=B, phase=phase)


class TestStaircase(unittest.TestCase):
    def test_levels_have_zero_mean(self):
        profile = build_staircase(0.3, 0.01)
        for k in range(0, 4):
            self.assertAlmostEqual(profile.levels[k].integral(), 0.0, places=12)

    def test_plateau_values(self):
        profile = build_staircase(0.3, 0.01)
        assert_allclose(profile.evaluate(0, np.array([0.15, 0.65])), [-0.7, 0.3], atol=1e-12)

    def test_closed_form_matches_hierarchy(self):
        profile = build_staircase(0.3, 0.01)
        s = np.linspace(0.0, 1.0, 997, endpoint=False)
        h0, h1, branch, _ = staircase_values(0.3, 0.01, s)
        assert_allclose(h0, profile.evaluate(0, s), atol=1e-10)
        assert_allclose(h1, profile.evaluate(1, s), atol=1e-9)
        self.assertTrue(np.all(branch[(s > 0.02) & (s < 0.28)] == 1))
        self.assertTrue(np.all(branch[(s > 0.32) & (s < 0.98)] == 2))

    def test_parameter_ranges(self):
        with self.assertRaises(InvalidParams):
            build_staircase(1.0, 0.01)
        with self.assertRaises(InvalidParams):
            build_staircase(0.3, 0.1)

    def test_missing_level(self):
        with self.assertRaises(MissingDerivatives):
            build_staircase(0.5, 0.01).evaluate(40, 0.1)


class TestCutoff(unittest.TestCase):
    def test_plateau_and_support(self):
        cutoff = build_cutoff(np.full(3, 0.5), 1.0, 0.125)
        self.assertAlmostEqual(float(cutoff.value(np.full((1, 3), 0.5))[0]), 1.0)
        self.assertLess(float(cutoff.value(np.array([[0.999, 0.5, 0.5]]))[0]), 1e-6)
        self.assertAlmostEqual(cutoff.plateau_half_width, 0.4375)
        self.assertFalse(bool(cutoff.contains(np.array([[1.2, 0.5, 0.5]]))[0]))

    def test_invalid_margin(self):
        with self.assertRaises(InvalidParams):
            build_cutoff(np.zeros(3), 1.0, 1.5)
        with self.assertRaises(InvalidParams):
            build_cutoff(np.zeros(3), 0.0)


class TestLocalizedWave(unittest.TestCase):
    def test_symbolic_constraints(self):
        self.assertLess(unit_cell_wave(16.0).constraint_certificate(), 1e-12)
        B = np.diag([1.0, 2.0, 0.5])
        self.assertLess(unit_cell_wave(16.0, B=B).constraint_certificate(), 1e-12)

    def test_leading_term_is_the_direction(self):
        wave = unit_cell_wave(16.0)
        m, U = wave.leading_coefficients()
        assert_allclose(m, wave.direction.n_bar)
        assert_allclose(U, wave.direction.V_bar.entries)

    def test_finite_difference_divergence(self):
        rng = np.random.Generator(np.random.Philox(2))
        points = 0.25 + 0.5 * rng.random((32, 3))
        residual = fd_divergence(unit_cell_wave(8.0, B=np.eye(3)), points, 1e-5)
        self.assertLess(residual["div_n"], 1e-6)
        self.assertLess(residual["div_V_minus_Bn"], 1e-6)

    def test_spectral_divergence_on_resolved_wave(self):
        cutoff = build_cutoff(np.full(3, 0.5), 1.0, 0.5)
        profile = build_staircase(0.5, 0.12)
        wave = build_localized_wave(axis_direction(), 1.0, cutoff, profile, B=np.eye(3))
        coarse = wave_spectral_residual(wave, 32)
        fine = wave_spectral_residual(wave, 64)
        self.assertLess(fine["div_n"], 1e-2)
        self.assertLess(fine["div_V_minus_Bn"], 1e-2)
        self.assertLessEqual(fine["div_V_minus_Bn"], coarse["div_V_minus_Bn"] + 1e-12)

    def test_vanishes_outside_cell(self):
        m, U = unit_cell_wave(16.0).evaluate(np.array([[1.1, 0.5, 0.5], [0.5, -0.2, 0.5]]))
        self.assertEqual(float(np.abs(m).max()), 0.0)
        self.assertEqual(float(np.abs(U).max()), 0.0)

    def test_zero_mean(self):
        mean_m, mean_U = SeparableQuadrature(unit_cell_wave(16.0, phase=0.3)).mean()
        self.assertLess(float(np.abs(mean_m).max()), 1e-9)
        self.assertLess(float(np.abs(mean_U).max()), 1e-9)

    def test_deviation_below_majorant_and_decaying(self):
        rng = np.random.Generator(np.random.Philox(9))
        points = rng.random((2048, 3))
        deviations = []
        for lam in (8.0, 64.0):
            wave = unit_cell_wave(lam)
            deviation = wave.sup_deviation(points)
            self.assertLessEqual(deviation, wave.deviation_majorant())
            deviations.append(deviation)
        self.assertLess(deviations[1], deviations[0])

    def test_frequency_floor(self):
        with self.assertRaises(InvalidParams):
            unit_cell_wave(0.5)

    def test_lambda_hat_for_deviation_meets_tolerance(self):
        profile = build_staircase(0.5, 1.0 / 64.0)
        lam = lambda_hat_for_deviation(3, 0.125, profile.sup_norms, 1.0, 0.0, 1e-2)
        wave = unit_cell_wave(lam)
        self.assertLessEqual(wave.deviation_majorant(), 1e-2 * (1.0 + 1e-12))
        self.assertEqual(np.log2(lam / 8.0) % 1.0, 0.0)

    def test_plateau_value_matches_evaluation(self):
        wave = unit_cell_wave(16.0, B=np.eye(3), phase=0.1)
        x = np.array([[0.5, 0.5, 0.5], [0.4, 0.6, 0.45]])
        m, U = wave.evaluate(x)
        h0, h1, _, _ = staircase_values(0.5, 1.0 / 64.0, wave.phase_at(x))
        d = wave.direction
        pm, pU = plateau_value(
            np.tile(d.n_bar, (2, 1)), np.tile(d.V_bar.entries, (2, 1, 1)), np.tile(d.xi, (2, 1)),
            np.tile(wave.B_hat, (2, 1, 1)), np.full(2, wave.lambda_hat), h0, h1,
        )
        assert_allclose(m, pm, atol=1e-9)
        assert_allclose(U, pU, atol=1e-9)

    def test_two_phase_regions(self):
        wave = unit_cell_wave(32.0)
        d = wave.direction
        endpoints = (
            FlowState(d.n_bar * 0.5, SymTraceFreeMatrix(d.V_bar.entries * 0.5)),
            FlowState(-d.n_bar * 0.5, SymTraceFreeMatrix(-d.V_bar.entries * 0.5)),
        )
        regions = two_phase_regions(wave, FlowState.zero(3), endpoints, eps=0.1, resolution=40)
        self.assertEqual(regions.overlap, 0.0)
        self.assertGreater(regions.measure_first, 0.25)
        self.assertGreater(regions.measure_second, 0.25)


class TestPotentialOperator(unittest.TestCase):
    def test_divergence_of_potential(self):
        n = 3
        resolution = 16
        spacing = 1.0 / resolution
        x = grid_points((resolution,) * n, spacing, np.zeros(n))
        f = [np.sin(2 * np.pi * x[..., 0]) * np.cos(2 * np.pi * x[..., 1]),
             np.cos(2 * np.pi * x[..., 2]),
             np.sin(4 * np.pi * x[..., 1])]
        fields = [SpectralField(component, spacing) for component in f]
        T = potential_R_delta2(fields)
        trace = sum(T[i][i].values for i in range(n))
        self.assertLess(float(np.abs(trace).max()), 1e-8)
        bilaplacian = [fields[i] for i in range(n)]
        for _ in range(2):
            bilaplacian = [sum(b.derivative(k).derivative(k) for k in range(n)) for b in bilaplacian]
        for i in range(n):
            div = spectral_divergence([T[i][j].values for j in range(n)], spacing)
            assert_allclose(div, bilaplacian[i].values, atol=1e-6 * np.abs(bilaplacian[i].values).max())

    def test_requires_derivatives(self):
        with self.assertRaises(MissingDerivatives):
            potential_R_delta2([np.zeros(4)])


class TestTilingAndMollifier(unittest.TestCase):
    def test_tiling_energy_positive(self):
        tiling = replicate_tiling(axis_direction().scaled(0.25), 1)
        self.assertEqual(tiling.cells, 8)
        self.assertGreater(tiling.momentum_energy(), 0.0)
        self.assertGreaterEqual(tiling.energy(), tiling.momentum_energy())

    def test_pairings_shrink_with_level(self):
        direction = axis_direction().scaled(0.25)
        linear = [np.ones_like, np.ones_like, lambda y: y]
        first = float(np.abs(replicate_tiling(direction, 1).pairing(linear)).max())
        second = float(np.abs(replicate_tiling(direction, 2).pairing(linear)).max())
        self.assertGreater(first, 0.0)
        self.assertLess(second, first)
        constant = replicate_tiling(direction, 1).pairing([np.ones_like] * 3)
        self.assertLess(float(np.abs(constant).max()), 1e-9)

    def test_mollifier_unit_mass(self):
        mollifier = build_mollifier(0.1, 3)
        self.assertAlmostEqual(mollifier.mass(), 1.0, places=10)
        self.assertAlmostEqual(float(mollifier.fourier(np.array([0.0]))[0]), 1.0)
        self.assertEqual(float(mollifier(np.array([0.2, 0.0, 0.0]))), 0.0)


if __name__ == "__main__":
    unittest.main()
