import os
import sys
import unittest
from dataclasses import replace

import numpy as np
from numpy.testing import assert_allclose

SCRIPTS_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "scripts"))
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

from errors import CompatibilityViolated, DomainNotCovered, InvalidParams, NonZeroMean, ProfileViolatesBounds
from localized_waves import build_mollifier
from spectral_oracles import forward_difference, grid_points, inverse_laplacian, spectral_divergence
from subsolution_factory import (
    DensityProfile,
    PressureLaw,
    compact_div_solver,
    compact_poisson,
    compact_strict_subsolution,
    periodic_anti_divergence,
    periodic_pressure_subsolution,
    smooth_bump,
    stress_from_potentials,
    vacuum_gap_subsolution,
)


class TestProfiles(unittest.TestCase):
    def test_pressure_law_inverse(self):
        law = PressureLaw(2.0, 1.4)
        rho = np.array([0.5, 1.0, 3.0])
        assert_allclose(law.inverse(law(rho)), rho)
        with self.assertRaises(InvalidParams):
            PressureLaw(0.0, 2.0)

    def test_unknown_kind(self):
        with self.assertRaises(InvalidParams):
            DensityProfile("wave", 1.0)

    def test_bump_pressure_has_zero_mean(self):
        x = grid_points((64,) * 3, 1.0 / 64, np.zeros(3))
        profile = DensityProfile("bump", 1.0, amplitude=0.2, radius=0.3)
        deviation = profile.pressure_deviation(x)
        scale = float(np.sum(np.abs(deviation)))
        self.assertLess(abs(float(np.sum(deviation))), 5e-2 * scale)
        self.assertTrue(np.all(deviation[~profile.support_mask(x)] == 0.0))


class TestPeriodicSubsolution(unittest.TestCase):
    def test_constant_profile(self):
        s = periodic_pressure_subsolution(DensityProfile("constant", 1.0), 1.0, 16, 3)
        self.assertAlmostEqual(s.strict_margin(), 1.5)
        self.assertAlmostEqual(s.defect_integral(), np.sqrt(3.0), places=10)
        self.assertAlmostEqual(s.energy_error(), 3.0, places=10)
        residual = s.constraint_residual()
        self.assertEqual(residual["mass"], 0.0)
        self.assertEqual(residual["momentum"], 0.0)

    def test_sine_profile_balances_pressure(self):
        profile = DensityProfile("sine", 1.0, amplitude=0.3)
        s = periodic_pressure_subsolution(profile, 0.5, 16, 3)
        residual = s.constraint_residual()
        self.assertLess(residual["momentum"], 1e-10)
        self.assertGreater(s.strict_margin(), 0.0)
        assert_allclose(np.trace(s.U, axis1=-2, axis2=-1), 0.0, atol=1e-12)
        assert_allclose(s.U, np.swapaxes(s.U, -1, -2), atol=1e-12)

    def test_small_q_is_raised(self):
        profile = DensityProfile("sine", 1.0, amplitude=0.6)
        s = periodic_pressure_subsolution(profile, 1e-6, 16, 3)
        self.assertGreater(s.strict_margin(), 0.0)
        self.assertGreater(float(np.min(s.q)), 1e-6)

    def test_anti_divergence(self):
        x = grid_points((16,) * 3, 1.0 / 16, np.zeros(3))
        f = np.sin(2 * np.pi * x[..., 0]) * np.cos(2 * np.pi * x[..., 2])
        u = periodic_anti_divergence(f, 1.0 / 16)
        div = spectral_divergence([u[..., i] for i in range(3)], 1.0 / 16)
        assert_allclose(div, f, atol=1e-12)
        with self.assertRaises(NonZeroMean):
            periodic_anti_divergence(f + 1.0, 1.0 / 16)
        with self.assertRaises(NonZeroMean):
            inverse_laplacian(f + 1.0, 1.0 / 16)


class TestVacuumGap(unittest.TestCase):
    def test_linear_law_keeps_rho_gap(self):
        profile = DensityProfile("dip", 1.0, PressureLaw(1.0, 1.0), amplitude=0.5, radius=0.25)
        s = vacuum_gap_subsolution(profile, 16, 3)
        self.assertEqual(s.label, "vacuum")
        assert_allclose(s.q, profile.rho_bar - s.rho, atol=1e-15)
        self.assertGreater(s.strict_margin(), 0.0)
        self.assertFalse(bool(s.domain.all()))

    def test_quadratic_law_switches_to_pressure_gap(self):
        profile = DensityProfile("dip", 1.0, PressureLaw(1.0, 2.0), amplitude=0.5, radius=0.25)
        s = vacuum_gap_subsolution(profile, 16, 3)
        self.assertEqual(s.label, "vacuum_pressure")
        self.assertLess(s.constraint_residual()["momentum_abs"], 1e-12)
        self.assertGreater(s.strict_margin(), 0.0)

    def test_constant_density_has_no_gap(self):
        with self.assertRaises(ProfileViolatesBounds):
            vacuum_gap_subsolution(DensityProfile("constant", 1.0), 16, 3)


def bump_dipole(resolution=32):
    """Forward x_1-difference of a bump at the centre: compact, zero line sums."""
    spacing = 1.0 / resolution
    x = grid_points((resolution,) * 3, spacing, np.zeros(3))
    bump = smooth_bump(np.linalg.norm(x - 0.5, axis=-1) / 0.2)
    return forward_difference(bump, 0, spacing), x, spacing


class TestCompactPoisson(unittest.TestCase):
    def test_kernel_support_and_laplacian(self):
        mollifier = build_mollifier(0.1, 3)
        assert_allclose(mollifier.newton_difference(np.array([0.1, 0.15, 0.3])), 0.0, atol=0.0)
        self.assertLess(float(mollifier.newton_difference(np.array([0.001]))[0]), 0.0)
        # Away from the origin the radial Laplacian of N - N * omega is -omega.
        for r in (0.03, 0.07):
            dr = 1e-4 * 0.1
            k = mollifier.newton_difference(np.array([r - dr, r, r + dr]))
            laplacian = (k[2] - 2.0 * k[1] + k[0]) / dr ** 2 + (2.0 / r) * (k[2] - k[0]) / (2.0 * dr)
            omega = float(mollifier(np.array([[r, 0.0, 0.0]]))[0])
            self.assertAlmostEqual(laplacian / omega, -1.0, delta=1e-4)

    def test_zero_source(self):
        solution = compact_poisson(DensityProfile("constant", 1.0), 0.05, None, 16, 3)
        self.assertFalse(np.any(solution.u))
        self.assertEqual(solution.leakage, 0.0)

    def test_support_and_mean_zero_chain(self):
        profile = DensityProfile("bump", 1.0, amplitude=0.1, radius=0.25)
        solution = compact_poisson(profile, 0.05, None, 32, 3, source_factor=2.0)
        x = grid_points((32,) * 3, 1.0 / 32, np.zeros(3))
        r = profile.radius_of(x)
        self.assertEqual(solution.leakage, 0.0)
        self.assertTrue(np.all(solution.u[r >= 0.3] == 0.0))
        self.assertTrue(np.all(solution.p_eps[r >= 0.3 + 2.0 / 32] == 0.0))
        self.assertLess(abs(float(np.sum(solution.u))), 1e-8 * float(np.sum(np.abs(solution.u))))
        self.assertLess(abs(float(np.sum(solution.p_eps))), 1e-8 * float(np.sum(np.abs(solution.p_eps))))
        self.assertTrue(np.isfinite(solution.consistency))


class TestCompactDivergence(unittest.TestCase):
    def test_potentials_are_exact_and_stay_in_the_box(self):
        source, x, spacing = bump_dipole()
        potentials = compact_div_solver(source, spacing, (0.2, 0.8))
        self.assertLess(potentials.residual, 1e-12)
        outside = np.any((x <= 0.2) | (x >= 0.8), axis=-1)
        self.assertTrue(np.all(potentials.phi[outside] == 0.0))

    def test_zero_source(self):
        potentials = compact_div_solver(np.zeros((16,) * 3), 1.0 / 16, (0.2, 0.8))
        self.assertFalse(np.any(potentials.phi))

    def test_rejects_bad_sources(self):
        source, _, spacing = bump_dipole()
        with self.assertRaises(DomainNotCovered):
            compact_div_solver(source, spacing, (0.4, 0.6))
        bump = np.abs(source)
        with self.assertRaises(CompatibilityViolated):
            compact_div_solver(bump, spacing, (0.2, 0.8))

    def test_stress_identities(self):
        source, x, spacing = bump_dipole()
        potentials = compact_div_solver(source, spacing, (0.2, 0.8))
        stress = stress_from_potentials(source, potentials, 2.0, spacing)
        self.assertLess(stress.residuals["mass"], 1e-10)
        self.assertLess(stress.residuals["momentum"], 1e-10)
        self.assertLess(stress.residuals["div_div_V"], 1e-8)
        self.assertLess(stress.trace_defect, 1e-12 * (1.0 + float(np.max(np.abs(stress.U)))))
        assert_allclose(stress.U, np.swapaxes(stress.U, -1, -2), atol=0.0)
        outside = np.any((x <= 0.2 - 2.0 * spacing) | (x >= 0.8), axis=-1)
        self.assertTrue(np.all(stress.m[outside] == 0.0))
        self.assertTrue(np.all(stress.U[outside] == 0.0))

    def test_requires_positive_source_factor(self):
        source, _, spacing = bump_dipole()
        potentials = compact_div_solver(source, spacing, (0.2, 0.8))
        with self.assertRaises(InvalidParams):
            stress_from_potentials(source, potentials, 0.0, spacing)


class TestCompactSubsolution(unittest.TestCase):
    def test_bump_profile(self):
        profile = DensityProfile("bump", 1.0, amplitude=0.1, radius=0.25)
        result = compact_strict_subsolution(profile, 1.0, 0.05, 1.0, 32, 3)
        self.assertGreater(result.chi, 0.0)
        self.assertGreater(result.margin_min, 0.0)
        self.assertLess(result.residuals["trace_identity"], 1e-9)
        self.assertLessEqual(result.leakage, 1e-10)
        lo, hi = result.support_box
        self.assertGreaterEqual(lo, 0.0)
        self.assertLessEqual(hi, 1.0)
        s = result.to_subsolution()
        self.assertEqual(s.operator, "forward")
        residual = s.constraint_residual()
        self.assertLess(residual["mass"], 1e-10)
        self.assertLess(residual["momentum"], 1e-10)
        assert_allclose(s.B, np.eye(3))
        self.assertGreater(s.strict_margin(), 0.0)
        self.assertFalse(bool(s.domain[0, 0, 0]))
        self.assertTrue(bool(s.domain[16, 16, 16]))

    def test_finer_grid_keeps_exact_support(self):
        profile = DensityProfile("bump", 1.0, amplitude=0.1, radius=0.25)
        result = compact_strict_subsolution(profile, 1.0, 0.05, 1.0, 64, 3)
        self.assertEqual(result.leakage, 0.0)
        self.assertLess(result.to_subsolution().constraint_residual()["momentum"], 1e-5)

    def test_support_must_fit_the_unit_box(self):
        profile = DensityProfile("bump", 1.0, amplitude=0.1, radius=0.45)
        with self.assertRaises(DomainNotCovered):
            compact_strict_subsolution(profile, 1.0, 0.05, 1.0, 32, 3)

    def test_rejects_non_positive_source(self):
        with self.assertRaises(InvalidParams):
            compact_strict_subsolution(DensityProfile("bump", 1.0, amplitude=0.1), -1.0, 0.05, 1.0, 16, 3)

    def test_unknown_operator(self):
        s = periodic_pressure_subsolution(DensityProfile("constant", 1.0), 1.0, 16, 3)
        with self.assertRaises(InvalidParams):
            replace(s, operator="central")


if __name__ == "__main__":
    unittest.main()
