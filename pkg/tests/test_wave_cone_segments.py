import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose

SCRIPTS_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "scripts"))
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

from errors import DecompositionFailed, InvalidInput
from states_geometry import (
    ConstraintParams,
    FlowState,
    SymTraceFreeMatrix,
    ambient_dimension,
    hull_margin,
    k_point_state,
    k_stress,
)
from wave_cone_segments import (
    DecompositionCache,
    LambdaDirection,
    admissible_segment,
    caratheodory_decompose,
    segment_length_bound,
    wave_cone_test,
)


class TestWaveCone(unittest.TestCase):
    def test_k_differences_are_in_the_cone(self):
        rng = np.random.Generator(np.random.Philox(5))
        for n in (3, 4):
            a = rng.standard_normal(n)
            b = rng.standard_normal(n)
            direction = wave_cone_test(a - b, k_stress(np.asarray(1.0), a) - k_stress(np.asarray(1.0), b))
            self.assertIsNotNone(direction)
            self.assertAlmostEqual(np.linalg.norm(direction.xi), 1.0)
            self.assertLess(abs(direction.n_bar @ direction.xi), 1e-10)
            self.assertLess(np.linalg.norm(direction.V_bar.entries @ direction.xi), 1e-10)

    def test_generic_pair_is_rejected(self):
        n_bar = np.array([1.0, 0.0, 0.0])
        V_bar = np.diag([1.0, 2.0, -3.0])
        self.assertIsNone(wave_cone_test(n_bar, V_bar))

    def test_direction_validates_wavevector(self):
        with self.assertRaises(InvalidInput):
            LambdaDirection(np.zeros(3), SymTraceFreeMatrix.zeros(3), np.array([1.0, 1.0, 0.0]))
        with self.assertRaises(InvalidInput):
            LambdaDirection(np.array([0.0, 0.0, 1.0]), SymTraceFreeMatrix.zeros(3), np.array([0.0, 0.0, 1.0]))


class TestDecomposition(unittest.TestCase):
    def test_origin_decomposes_onto_k(self):
        for n in (3, 4):
            p = ConstraintParams(1.0, 1.0)
            result = caratheodory_decompose(p, FlowState.zero(n), seed=1)
            self.assertLessEqual(len(result.weights), ambient_dimension(n) + 1)
            self.assertAlmostEqual(float(result.weights.sum()), 1.0, places=12)
            self.assertTrue(np.all(result.weights > 0.0))
            self.assertLess(result.reconstruction_residual, 1e-9)
            assert_allclose(np.sum(result.momenta ** 2, axis=1), n * p.rho * p.q, rtol=1e-12)

    def test_interior_state_with_momentum(self):
        p = ConstraintParams(2.0, 0.5)
        w = FlowState(np.array([0.3, -0.2, 0.1]), SymTraceFreeMatrix(np.diag([0.05, 0.0, -0.05])))
        result = caratheodory_decompose(p, w, seed=2)
        self.assertLess(result.reconstruction_residual, 1e-9)
        for point in result.k_points():
            self.assertAlmostEqual(float(hull_margin(p.rho, p.q, point.m, point.U.entries)), 0.0, places=10)

    def test_boundary_state_fails(self):
        p = ConstraintParams(1.0, 1.0)
        on_k = k_point_state(p, np.array([np.sqrt(3.0), 0.0, 0.0]))
        with self.assertRaises(DecompositionFailed):
            caratheodory_decompose(p, on_k)

    def test_cache_reuses_decompositions(self):
        cache = DecompositionCache()
        p = ConstraintParams(1.0, 1.0)
        first = caratheodory_decompose(p, FlowState.zero(3), seed=4, cache=cache)
        second = caratheodory_decompose(p, FlowState.zero(3), seed=4, cache=cache)
        self.assertEqual((cache.hits, cache.misses), (1, 1))
        assert_allclose(first.weights, second.weights)


class TestAdmissibleSegment(unittest.TestCase):
    def test_segment_stays_inside(self):
        p = ConstraintParams(1.0, 1.0)
        w = FlowState.zero(3)
        segment = admissible_segment(p, w, seed=7)
        center_margin = float(hull_margin(p.rho, p.q, w.m, w.U.entries))
        for endpoint in segment.endpoints:
            margin = float(hull_margin(p.rho, p.q, endpoint.m, endpoint.U.entries))
            self.assertGreaterEqual(margin, 0.5 * center_margin - 1e-9)
        self.assertGreaterEqual(segment.shrink, 0.5)
        self.assertLessEqual(segment.shrink, 1.0)
        self.assertGreater(segment.interior_margin, 0.0)
        self.assertAlmostEqual(segment.length_bound, segment_length_bound(p, w))


if __name__ == "__main__":
    unittest.main()
