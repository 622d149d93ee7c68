from dataclasses import replace
import json
import logging
import os
import sys
import tempfile
import unittest

import pandas as pd

SCRIPTS_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "scripts"))
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

from convex_integration_driver import DefectReport
from errors import MarginExhausted, MissingInput
from export_plot_data import export_plot_data
from logging_utils import LEVEL_ENV, setup_logging
from subsolution_factory import DensityProfile, periodic_pressure_subsolution
from verification import (
    VerificationReport,
    geometry_checks,
    iteration_checks,
    subsolution_checks,
    tiling_checks,
    wave_checks,
    wave_cone_checks,
)


def stage_report(stage, defect, margin=0.5):
    return DefectReport(
        stage=stage, defect_integral=defect, l2_increment=0.1, margin_min=margin, energy_error=1.0,
        wall_seconds=0.0, target=defect, cells=10, max_depth=3, min_lambda_hat=8.0, ramp_bound=1e-3,
    )


class TestVerificationReport(unittest.TestCase):
    def test_relations(self):
        report = VerificationReport()
        self.assertTrue(report.at_most("a", "m", 1.0, 1.0).passed)
        self.assertFalse(report.above("b", "m", 0.0, 0.0).passed)
        self.assertFalse(report.at_least("c", "m", float("nan"), 0.0).passed)
        self.assertFalse(report.passed)
        self.assertEqual(report.failures(), ["b", "c"])

    def test_error_fails_the_report(self):
        report = VerificationReport()
        report.at_most("a", "m", 0.0, 1.0)
        report.record_error(MarginExhausted("no room"))
        self.assertFalse(report.passed)
        self.assertEqual(report.to_dict()["error"], {"type": "MarginExhausted", "message": "no room"})

    def test_write_json(self):
        report = VerificationReport()
        report.at_most("a", "m", 0.5, 1.0, "detail")
        report.info["seed"] = 3
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = os.path.join(tmp_dir, "out", "verification.json")
            report.write(path)
            with open(path, encoding="utf-8") as handle:
                document = json.load(handle)
        self.assertTrue(document["passed"])
        self.assertEqual(document["checks"][0]["relation"], "<=")
        self.assertEqual(document["info"], {"seed": 3})


class TestChecks(unittest.TestCase):
    def test_geometry_and_cone_checks_pass(self):
        report = VerificationReport()
        geometry_checks(report, seed=1, samples=1000)
        wave_cone_checks(report, seed=1, samples=1000)
        self.assertEqual(report.failures(), [])
        self.assertEqual(len(report.checks), 14)

    def test_tiling_checks(self):
        report = VerificationReport()
        tiling_checks(report, 3, seed=1)
        self.assertEqual(report.failures(), [])
        self.assertEqual(len(report.info["pairing_exponential"]), 2)

    def test_subsolution_checks(self):
        s = periodic_pressure_subsolution(DensityProfile("sine", 1.0, amplitude=0.2), 1.0, 16, 3)
        report = VerificationReport()
        residual = subsolution_checks(report, s, "stage_00")
        self.assertTrue(report.passed)
        self.assertIn("momentum", residual)

    def test_iteration_checks_flag_increase(self):
        s = periodic_pressure_subsolution(DensityProfile("constant", 1.0), 1.0, 16, 3)
        report = VerificationReport()
        iteration_checks(report, s, s, [stage_report(1, 0.5), stage_report(2, 0.6)], 1e-6)
        self.assertIn("defect_non_increasing", report.failures())
        self.assertIn("defect_ratio_per_stage", report.failures())

    def test_iteration_checks_without_stages(self):
        s = periodic_pressure_subsolution(DensityProfile("constant", 1.0), 1.0, 16, 3)
        report = VerificationReport()
        iteration_checks(report, s, s, [], 10.0)
        self.assertTrue(report.passed)
        self.assertEqual(report.info["stages"], 0)

    def test_iteration_checks_flag_wave_audit(self):
        s = periodic_pressure_subsolution(DensityProfile("constant", 1.0), 1.0, 16, 3)
        audit = {"wave_certificate": 0.0, "wave_value_mismatch": 1e-3, "audited_waves": 2.0}
        iterate = replace(s, base=s, wave_audit=lambda: dict(audit))
        report = VerificationReport()
        iteration_checks(report, s, iterate, [], 10.0)
        self.assertEqual(report.failures(), ["final_wave_value_mismatch"])
        self.assertEqual(report.info["final_residual"]["audited_waves"], 2.0)

    def test_wave_checks_fit_slope(self):
        rows = pd.DataFrame({
            "lambda_hat": [8.0, 16.0, 32.0, 64.0],
            "deviation": [0.8, 0.4, 0.2, 0.1],
            "majorant": [1.0, 0.5, 0.25, 0.125],
            "certificate": [0.0] * 4,
            "fd_div_n": [1e-9] * 4,
            "fd_div_V": [1e-9] * 4,
            "mean_abs": [0.0] * 4,
        })
        report = VerificationReport()
        wave_checks(report, rows)
        self.assertTrue(report.passed)
        self.assertAlmostEqual(report.info["deviation_slope"], -1.0)

    def test_wave_checks_flag_spectral_residual(self):
        report = VerificationReport()
        wave_checks(report, pd.DataFrame(), {"div_n": 1e-6, "div_V_minus_Bn": 0.5, "resolution": 64.0})
        self.assertEqual(report.failures(), ["wave_spectral_residual"])


class TestLogging(unittest.TestCase):
    def test_level_from_environment(self):
        previous = os.environ.get(LEVEL_ENV)
        os.environ[LEVEL_ENV] = "warning"
        try:
            logger = setup_logging()
            self.assertEqual(logger.name, "wildflow")
            self.assertEqual(logger.level, logging.WARNING)
            os.environ[LEVEL_ENV] = "not-a-level"
            self.assertEqual(setup_logging().level, logging.INFO)
        finally:
            if previous is None:
                os.environ.pop(LEVEL_ENV, None)
            else:
                os.environ[LEVEL_ENV] = previous
            setup_logging(logging.INFO)


class TestExportPlotData(unittest.TestCase):
    def write_metrics(self, tmp_dir, rows):
        columns = ["stage", "defect_integral", "l2_increment", "margin_min", "energy_error"]
        path = os.path.join(tmp_dir, "metrics.csv")
        pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
        return path

    def test_series(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            metrics = self.write_metrics(tmp_dir, [[1, 0.5, 0.3, 0.2, 1.0], [2, 0.25, 0.1, 0.2, 0.5]])
            waves = os.path.join(tmp_dir, "wave_metrics.csv")
            pd.DataFrame({"lambda_hat": [8.0, 16.0], "deviation": [0.2, 0.1]}).to_csv(waves, index=False)
            df = export_plot_data(metrics, os.path.join(tmp_dir, "plots", "plot_data.csv"), waves)
            self.assertTrue(os.path.exists(os.path.join(tmp_dir, "plots", "plot_data.csv")))
        self.assertEqual(list(df.columns), ["series", "x", "y"])
        log2 = df[df.series == "log2_defect"]
        self.assertEqual(list(log2.y), [-1.0, -2.0])
        slope = df[df.series == "deviation_slope"].y.iloc[0]
        self.assertAlmostEqual(slope, -1.0)
        self.assertEqual(
            set(df.series),
            {"defect", "log2_defect", "energy_error", "l2_increment", "margin_min", "deviation", "deviation_slope"},
        )

    def test_empty_metrics(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            metrics = self.write_metrics(tmp_dir, [])
            output = os.path.join(tmp_dir, "plot_data.csv")
            df = export_plot_data(metrics, output)
            with open(output, encoding="utf-8") as handle:
                self.assertEqual(handle.read(), "series,x,y\n")
        self.assertTrue(df.empty)

    def test_missing_metrics(self):
        with self.assertRaises(MissingInput):
            export_plot_data(os.path.join(tempfile.gettempdir(), "missing_metrics.csv"), "unused.csv")


if __name__ == "__main__":
    unittest.main()
