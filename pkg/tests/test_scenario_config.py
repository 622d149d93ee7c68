import json
import os
import sys
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose

SCRIPTS_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "scripts"))
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

from constants import DEFAULT_MAX_STAGES
from errors import ParseError, ValidationError
from scenario_config import load_config, parse_config


def violations_for(document):
    try:
        parse_config(json.dumps(document))
    except ValidationError as exc:
        return exc.violations
    return []


class TestParsing(unittest.TestCase):
    def test_defaults(self):
        cfg = parse_config("{}")
        self.assertEqual(cfg.case, "torus")
        self.assertEqual(cfg.dimension, 3)
        self.assertEqual(cfg.resolution, 32)
        iteration = cfg.iteration_config()
        self.assertEqual(iteration.max_stages, DEFAULT_MAX_STAGES)
        self.assertEqual(iteration.eps0, 1.0)
        assert_allclose(cfg.source_matrix(), np.zeros((3, 3)))

    def test_syntax_error_position(self):
        with self.assertRaises(ParseError) as ctx:
            parse_config('{"case": "torus",\n  "dimension": }')
        self.assertEqual(ctx.exception.line, 2)
        self.assertGreater(ctx.exception.column, 1)

    def test_top_level_must_be_object(self):
        with self.assertRaises(ParseError):
            parse_config("[1, 2]")

    def test_compact_case(self):
        cfg = parse_config(json.dumps({
            "case": "compact_diag_source",
            "profile": {"kind": "bump", "rho_bar": 1.0, "amplitude": 0.1, "radius": 0.3},
            "compact": {"a": 2.0},
        }))
        assert_allclose(cfg.source_matrix(), 2.0 * np.eye(3))
        self.assertEqual(cfg.compact["eps"], 0.05)
        profile = cfg.density_profile()
        self.assertEqual(profile.kind, "bump")
        self.assertEqual(profile.radius, 0.3)

    def test_load_from_file(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = os.path.join(tmp_dir, "scenario.json")
            with open(path, "w", encoding="utf-8") as handle:
                json.dump({"dimension": 4, "resolution": 16}, handle)
            cfg = load_config(path)
        self.assertEqual(cfg.dimension, 4)
        self.assertEqual(cfg.resolution, 16)

    def test_shipped_scenarios_are_valid(self):
        scenario_dir = os.path.join(os.path.dirname(SCRIPTS_DIR), "scenarios")
        cases = {load_config(os.path.join(scenario_dir, name)).case for name in sorted(os.listdir(scenario_dir))}
        self.assertEqual(cases, {"torus", "compact_diag_source", "compact_general"})


class TestValidation(unittest.TestCase):
    def test_dimension_floor(self):
        self.assertIn("dimension: n >= 3 required", violations_for({"dimension": 2}))

    def test_resolution_power_of_two(self):
        issues = violations_for({"resolution": 24})
        self.assertTrue(any(issue.startswith("resolution:") for issue in issues))

    def test_diag_source_needs_scalar_matrix(self):
        issues = violations_for({
            "case": "compact_diag_source",
            "profile": {"kind": "bump", "amplitude": 0.1},
            "B": [[1, 0, 0], [0, 2, 0], [0, 0, 1]],
        })
        self.assertIn("B: compact_diag_source requires B = a I with a > 0", issues)

    def test_unknown_fields(self):
        issues = violations_for({"colour": "red", "profile": {"kind": "constant", "foo": 1}})
        self.assertIn("colour: unknown field", issues)
        self.assertIn("profile.foo: unknown field", issues)

    def test_all_violations_are_reported(self):
        issues = violations_for({
            "dimension": 2,
            "seed": -1,
            "iteration": {"max_stages": 0, "lambda_growth": 0.5},
            "B": [[1, "x"]],
        })
        self.assertIn("dimension: n >= 3 required", issues)
        self.assertIn("seed: must be a non-negative integer", issues)
        self.assertIn("iteration.max_stages: must be a positive integer", issues)
        self.assertIn("iteration.lambda_growth: must be at least 1", issues)
        self.assertIn("B: must be a 3x3 matrix", issues)

    def test_profile_case_mismatch(self):
        issues = violations_for({"case": "compact_general", "profile": {"kind": "sine", "amplitude": 0.2}})
        self.assertIn("profile.kind: case compact_general accepts dip", issues)

    def test_error_message_joins_violations(self):
        with self.assertRaises(ValidationError) as ctx:
            parse_config(json.dumps({"dimension": 2, "colour": 1}))
        self.assertIn("colour: unknown field", str(ctx.exception))
        self.assertEqual(len(ctx.exception.violations), 2)


class TestOverrides(unittest.TestCase):
    def test_command_line_overrides(self):
        cfg = parse_config("{}").with_overrides(seed=7, stages=2, out="runs/x", verify_grid=16)
        self.assertEqual(cfg.seed, 7)
        self.assertEqual(cfg.iteration_config().max_stages, 2)
        self.assertEqual(cfg.iteration_config().seed, 7)
        self.assertEqual(cfg.outputs["runs"], "runs/x")
        self.assertEqual(cfg.verify_grid, 16)

    def test_overrides_are_validated(self):
        with self.assertRaises(ValidationError):
            parse_config("{}").with_overrides(verify_grid=20)
        with self.assertRaises(ValidationError):
            parse_config("{}").with_overrides(stages=0)


if __name__ == "__main__":
    unittest.main()
