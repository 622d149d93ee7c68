import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose

SCRIPTS_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "scripts"))
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

from errors import InvalidDensity, InvalidInput, InvalidParams
from states_geometry import (
    ConstraintParams,
    FlowState,
    SymTraceFreeMatrix,
    ambient_dimension,
    check_dimension,
    defect,
    defect_values,
    exact_distance_to_K,
    hull_box_radius,
    hull_margin,
    hull_membership,
    k_point_state,
    k_stress,
    random_states,
    relaxation_e,
    state_coordinates,
    state_from_coordinates,
)


class TestStateTypes(unittest.TestCase):
    def test_rejects_trace(self):
        with self.assertRaises(InvalidInput):
            SymTraceFreeMatrix(np.eye(3))

    def test_rejects_non_finite_momentum(self):
        with self.assertRaises(InvalidInput):
            FlowState(np.array([np.nan, 0.0, 0.0]), SymTraceFreeMatrix.zeros(3))

    def test_rejects_non_positive_density(self):
        with self.assertRaises(InvalidDensity):
            ConstraintParams(0.0, 1.0)
        with self.assertRaises(InvalidInput):
            ConstraintParams(1.0, -1.0)

    def test_dimension_floor(self):
        check_dimension(3)
        with self.assertRaises(InvalidParams):
            check_dimension(2)

    def test_ambient_dimension(self):
        self.assertEqual(ambient_dimension(3), 8)
        self.assertEqual(ambient_dimension(4), 13)

    def test_coordinates_round_trip_one_state(self):
        rng = np.random.Generator(np.random.Philox(3))
        _, m, U = random_states(rng, 5, 4)
        back_m, back_U = state_from_coordinates(state_coordinates(m, U), 4)
        assert_allclose(back_m, m, atol=1e-14)
        assert_allclose(back_U, U, atol=1e-14)


class TestHullGeometry(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.Generator(np.random.Philox(11))

    def test_zero_state_margin(self):
        p = ConstraintParams(1.0, 1.0)
        certificate = hull_membership(p, FlowState.zero(3))
        self.assertAlmostEqual(certificate.e_value, 0.0)
        self.assertAlmostEqual(certificate.margin, 1.5)
        self.assertTrue(certificate.strict)

    def test_k_points_sit_on_the_boundary(self):
        for n in (3, 4):
            a = self.rng.standard_normal((50, n))
            rho = self.rng.uniform(0.5, 2.0, 50)
            q = np.einsum("si,si->s", a, a) / (n * rho)
            U = k_stress(rho, a)
            assert_allclose(hull_margin(rho, q, a, U), 0.0, atol=1e-10)
            assert_allclose(defect_values(rho, q, a, U), 0.0, atol=1e-10)

    def test_e_bounds(self):
        for n in (3, 4):
            rho, m, U = random_states(self.rng, 2000, n)
            e = relaxation_e(rho, m, U)
            lower = np.einsum("si,si->s", m, m) / (2.0 * rho)
            self.assertTrue(np.all(e >= lower - 1e-12))
            norms = np.max(np.abs(np.linalg.eigvalsh(U)), axis=-1)
            self.assertTrue(np.all(norms <= 2.0 * (n - 1) / n * e + 1e-10))

    def test_e_is_convex(self):
        rho1, m1, U1 = random_states(self.rng, 1000, 3)
        rho2, m2, U2 = random_states(self.rng, 1000, 3)
        e1 = relaxation_e(rho1, m1, U1)
        e2 = relaxation_e(rho2, m2, U2)
        mid = relaxation_e(0.5 * (rho1 + rho2), 0.5 * (m1 + m2), 0.5 * (U1 + U2))
        self.assertTrue(np.all(mid <= 0.5 * (e1 + e2) + 1e-10))

    def test_defect_of_k_point(self):
        p = ConstraintParams(2.0, 1.5)
        a = np.array([3.0, 0.0, 0.0])
        a *= np.sqrt(3 * p.rho * p.q) / np.linalg.norm(a)
        self.assertAlmostEqual(defect(p, k_point_state(p, a)), 0.0, places=10)

    def test_exact_distance_from_origin(self):
        p = ConstraintParams(1.0, 1.0)
        # |a|^2 = 3 and the K stress has eigenvalues (2, -1, -1).
        self.assertAlmostEqual(exact_distance_to_K(p, FlowState.zero(3)), 3.0, places=6)

    def test_exact_distance_vanishes_on_k(self):
        p = ConstraintParams(1.0, 1.0)
        a = np.array([1.0, 1.0, 1.0])
        self.assertAlmostEqual(exact_distance_to_K(p, k_point_state(p, a)), 0.0, places=5)

    def test_min_radius_is_sharp(self):
        rho, m, U = random_states(self.rng, 1000, 3)
        for s in range(1000):
            w = FlowState(m[s], SymTraceFreeMatrix(U[s]))
            radius = hull_membership(ConstraintParams(rho[s], 1.0), w).min_radius
            self.assertGreaterEqual(radius ** 2, float(m[s] @ m[s]) * (1.0 - 1e-12))
            for factor, inside in ((1.0 - 1e-6, False), (1.0 + 1e-6, True)):
                r = factor * radius
                certificate = hull_membership(ConstraintParams(rho[s], r ** 2 / (3.0 * rho[s])), w)
                self.assertEqual(certificate.margin >= 0.0, inside)

    def test_defect_is_comparable_to_the_distance(self):
        # For any a on the sphere |K(a) - K(m)|_F <= |a - m| (|a| + |m|)(1 + 1/sqrt(n)) / rho.
        n = 3
        rho, m, U = random_states(self.rng, 1000, n, m_scale=0.5, U_scale=0.3)
        q = 1.5 * 2.0 * relaxation_e(rho, m, U) / n
        for s in range(1000):
            p = ConstraintParams(rho[s], q[s])
            w = FlowState(m[s], SymTraceFreeMatrix(U[s]))
            radius = np.sqrt(n * p.rho * p.q)
            size = np.linalg.norm(m[s])
            lipschitz = (size + radius) * (1.0 + 1.0 / np.sqrt(n)) / p.rho
            d = defect(p, w)
            distance = exact_distance_to_K(p, w, seed=s)
            upper = 1.0 + (size + radius) / radius + lipschitz
            self.assertLessEqual(d, upper * distance * (1.0 + 1e-6) + 1e-9)
            self.assertLessEqual(distance, (1.0 + lipschitz) * d * (1.0 + 1e-6) + 1e-9)

    def test_defect_counts_excess_momentum(self):
        p = ConstraintParams(1.0, 1.0)
        a = np.array([1.0, 1.0, 1.0])
        outside = FlowState(1.5 * a, SymTraceFreeMatrix(k_stress(np.asarray(1.0), 1.5 * a)))
        self.assertLess(hull_membership(p, outside).margin, 0.0)
        self.assertAlmostEqual(defect(p, outside), (2.25 * 3.0 - 3.0) / np.sqrt(3.0))

    def test_box_radius(self):
        self.assertEqual(hull_box_radius(1.0, 0.0, 3, 0.0), 0.0)
        small = hull_box_radius(1.0, 0.5, 3, 0.1)
        large = hull_box_radius(1.0, 0.5, 3, 0.4)
        self.assertGreater(large, small)
        batched = hull_box_radius(np.ones(3), np.full(3, 0.5), 3, np.array([0.1, 0.4, -1.0]))
        assert_allclose(batched, [small, large, 0.0])

    def test_box_radius_keeps_states_inside(self):
        n = 3
        rho = np.ones(2000)
        q = np.ones(2000)
        margin = float(hull_margin(1.0, 1.0, np.zeros(n), np.zeros((n, n))))
        gamma = hull_box_radius(1.0, 0.0, n, 0.5 * margin)
        coords = gamma * (2.0 * self.rng.random((2000, ambient_dimension(n))) - 1.0)
        m, U = state_from_coordinates(coords, n)
        self.assertTrue(np.all(hull_margin(rho, q, m, U) >= 0.5 * margin - 1e-12))


if __name__ == "__main__":
    unittest.main()
