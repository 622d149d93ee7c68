import argparse
import sys
import os

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from logging_utils import setup_logging
from constants import DEFAULT_SEED
from convex_integration_driver import (
    ConvexIntegrationDriver,
    DefectReport,
    axis_aligned_direction,
)
from errors import WildflowError
from export_plot_data import export_plot_data
from field_io import load_subsolution, save_subsolution
from localized_waves import SeparableQuadrature, build_cutoff, build_localized_wave, build_staircase
from scenario_config import ScenarioConfig, load_config
from spectral_oracles import fd_divergence, wave_spectral_residual
from states_geometry import ConstraintParams, FlowState
from subsolution_factory import (
    SubsolutionField,
    compact_strict_subsolution,
    periodic_pressure_subsolution,
    vacuum_gap_subsolution,
)
from verification import (
    VerificationReport,
    cell_step_checks,
    geometry_checks,
    iteration_checks,
    subsolution_checks,
    tiling_checks,
    wave_cone_checks,
    wave_checks,
)
from wave_cone_segments import admissible_segment

METRIC_COLUMNS = [
    "stage",
    "defect_integral",
    "l2_increment",
    "margin_min",
    "energy_error",
    "wall_seconds",
    "target",
    "cells",
    "max_depth",
    "min_lambda_hat",
    "ramp_bound",
    "frozen",
    "ramp_waves",
]
WAVE_LAMBDAS = (8.0, 16.0, 32.0, 64.0)
WAVE_THETA = 0.125
SPECTRAL_WAVE_RESOLUTION = 64


def write_csv(df: pd.DataFrame, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    df.to_csv(path, index=False, lineterminator="\n")


def metrics_frame(reports: List[DefectReport]) -> pd.DataFrame:
    return pd.DataFrame([r.as_row() for r in reports], columns=METRIC_COLUMNS)


class ScenarioRunner:
    """Builds, iterates, verifies and exports one scenario."""

    def __init__(self, config: ScenarioConfig) -> None:
        self.config = config
        self.logger = setup_logging()
        self.out_dir = config.outputs["runs"]
        self.report = VerificationReport()

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def build_subsolution(self) -> SubsolutionField:
        cfg = self.config
        n = cfg.dimension
        profile = cfg.density_profile()
        B = cfg.source_matrix()
        if cfg.case == "torus":
            return periodic_pressure_subsolution(
                profile, cfg.q, cfg.resolution, n, B=B, margin_floor=cfg.iteration_config().margin_floor
            )
        if cfg.case == "compact_diag_source":
            result = compact_strict_subsolution(
                profile,
                float(B[0, 0]),
                float(cfg.compact["eps"]),
                float(cfg.compact["chi_hint"]),
                cfg.resolution,
                n,
            )
            self.report.info["chi"] = result.chi
            self.report.info["support_leakage"] = result.leakage
            self.report.info["support_box"] = list(result.support_box)
            self.report.info["poisson_consistency"] = result.residuals["poisson_consistency"]
            self.report.at_most("compact_support_leakage", "subsolution_factory", result.leakage, 1e-10)
            self.report.at_most(
                "stress_trace_identity", "subsolution_factory", result.residuals["trace_identity"], 1e-9
            )
            self.report.at_most("div_div_V", "subsolution_factory", result.residuals["div_div_V"], 1e-8)
            self.report.at_most("div_solver_residual", "subsolution_factory", result.residuals["div_solver"], 1e-5)
            return result.to_subsolution()
        return vacuum_gap_subsolution(profile, cfg.resolution, n, B=B)

    def wave_rows(self, samples: Optional[int] = None) -> pd.DataFrame:
        """Deviation, majorant and constraint oracles of one test wave across frequencies.

        Deviations are sampled at verify_grid**n seeded points unless samples is given.
        """
        cfg = self.config
        n = cfg.dimension
        samples = samples or cfg.verify_grid ** n
        p = ConstraintParams(1.0, 1.0)
        segment = admissible_segment(p, FlowState.zero(n), seed=cfg.seed)
        direction = axis_aligned_direction(segment.direction).scaled(2.0)
        cutoff = build_cutoff(np.full(n, 0.5), 1.0, WAVE_THETA)
        profile = build_staircase(0.5, 1.0 / 64.0)
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        points = rng.random((samples, n))
        fd_points = 0.25 + 0.5 * rng.random((64, n))
        rows = []
        for lam in WAVE_LAMBDAS:
            wave = build_localized_wave(direction, lam, cutoff, profile, B=cfg.source_matrix())
            fd = fd_divergence(wave, fd_points, 1e-5)
            mean_m, mean_U = SeparableQuadrature(wave).mean()
            rows.append({
                "lambda_hat": lam,
                "deviation": wave.sup_deviation(points),
                "majorant": wave.deviation_majorant(),
                "certificate": wave.constraint_certificate(),
                "fd_div_n": fd["div_n"],
                "fd_div_V": fd["div_V_minus_Bn"],
                "mean_abs": float(max(np.max(np.abs(mean_m)), np.max(np.abs(mean_U)))),
            })
            self.logger.info("Wave lambda_hat=%g deviation %.3e", lam, rows[-1]["deviation"])
        df = pd.DataFrame(rows)
        write_csv(df, self.path("wave_metrics.csv"))
        return df

    def spectral_wave_residual(self, resolution: int = SPECTRAL_WAVE_RESOLUTION) -> Dict[str, float]:
        """Spectral divergence of a single-period wave whose profiles the grid resolves."""
        cfg = self.config
        n = cfg.dimension
        segment = admissible_segment(ConstraintParams(1.0, 1.0), FlowState.zero(n), seed=cfg.seed)
        direction = axis_aligned_direction(segment.direction)
        wave = build_localized_wave(
            direction, 1.0, build_cutoff(np.full(n, 0.5), 1.0, 0.5), build_staircase(0.5, 0.12),
            B=cfg.source_matrix(),
        )
        residual = wave_spectral_residual(wave, resolution)
        self.logger.info(
            "Spectral wave residual at %d^%d: div n %.3e, div V - B n %.3e",
            resolution, n, residual["div_n"], residual["div_V_minus_Bn"],
        )
        return residual

    def iterate(self, s0: SubsolutionField) -> Tuple[SubsolutionField, List[DefectReport]]:
        driver = ConvexIntegrationDriver(self.config.iteration_config())

        def snapshot(stage: int, field: SubsolutionField, _report: DefectReport) -> None:
            save_subsolution(self.out_dir, f"stage_{stage:02d}", field)

        final, reports = driver.run(s0, on_stage=snapshot)
        self.logger.info(
            "Decomposition cache: %d hits, %d misses", driver.cache.hits, driver.cache.misses
        )
        write_csv(metrics_frame(reports), self.path("metrics.csv"))
        save_subsolution(self.out_dir, "final", final)
        if driver.last_error is not None:
            raise driver.last_error
        return final, reports

    def run(self) -> VerificationReport:
        cfg = self.config
        self.logger.info("wildflow scenario: case=%s n=%d resolution=%d seed=%d",
                         cfg.case, cfg.dimension, cfg.resolution, cfg.seed)

        self.logger.info("[1/4] BUILDING SUBSOLUTION")
        s0 = self.build_subsolution()
        save_subsolution(self.out_dir, "stage_00", s0)
        subsolution_checks(self.report, s0, "stage_00")

        self.logger.info("[2/4] ITERATING")
        final, reports = self.iterate(s0)

        self.logger.info("[3/4] VERIFYING")
        geometry_checks(self.report, cfg.seed)
        wave_cone_checks(self.report, cfg.seed)
        wave_checks(self.report, self.wave_rows(), self.spectral_wave_residual())
        cell_step_checks(self.report, cfg.dimension, cfg.seed)
        tiling_checks(self.report, cfg.dimension, cfg.seed)
        iteration_checks(self.report, s0, final, reports, cfg.iteration_config().stop_defect_tol)
        self.report.write(self.path("verification.json"))
        if not self.report.passed:
            self.logger.warning("Verification failures: %s", ", ".join(self.report.failures()))
        else:
            self.logger.info("All %d invariant checks passed", len(self.report.checks))

        self.logger.info("[4/4] EXPORTING PLOT DATA")
        export_plot_data(self.path("metrics.csv"), self.path("plot_data.csv"), self.path("wave_metrics.csv"))
        return self.report

    def verify_saved(self, tag: str = "stage_00") -> VerificationReport:
        s = load_subsolution(
            self.out_dir, tag, self.config.source_matrix(), self.config.pressure_law(),
            operator=self.config.difference_operator(),
        )
        subsolution_checks(self.report, s, tag)
        self.report.write(self.path(f"verify_{tag}.json"))
        return self.report


def run_scenario(config: ScenarioConfig) -> int:
    """Run one scenario end to end; module errors are written to the report and re-raised."""
    runner = ScenarioRunner(config)
    try:
        runner.run()
    except WildflowError as exc:
        runner.report.record_error(exc)
        runner.report.write(runner.path("verification.json"))
        raise
    return 0


def _load(args: argparse.Namespace) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    return cfg.with_overrides(seed=args.seed, stages=args.stages, out=args.out, verify_grid=args.verify_grid)


def main(argv: Optional[List[str]] = None) -> None:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Scenario JSON document (default: torus, n=3, rho=q=1)")
    common.add_argument("--seed", type=int, default=None, help=f"Random seed (default: {DEFAULT_SEED})")
    common.add_argument("--out", default=None, help="Output directory for fields, metrics and reports")
    common.add_argument("--stages", type=int, default=None, help="Maximum number of refinement stages")
    common.add_argument("--verify-grid", type=int, default=None, help="Resolution of the verification grid")

    parser = argparse.ArgumentParser(
        description="Convex integration for the steady compressible Euler equations",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Full scenario: subsolution, iteration, verification and plot data
  python scripts/run_pipeline.py iterate --config scenarios/torus.json

  # Build and save only the starting subsolution
  python scripts/run_pipeline.py subsolution --config scenarios/compact.json --out data/runs/compact

  # Frequency sweep of a single localized wave
  python scripts/run_pipeline.py wave --seed 7

  # Re-check a saved snapshot
  python scripts/run_pipeline.py verify --out data/runs/ --tag stage_00

  # Long-format plot data from a metrics CSV
  python scripts/run_pipeline.py export --out data/runs/
        """,
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("subsolution", parents=[common], help="Build and save the starting subsolution")
    commands.add_parser("wave", parents=[common], help="Deviation and constraint oracles of a test wave")
    commands.add_parser("iterate", parents=[common], help="Run the full scenario")
    verify = commands.add_parser("verify", parents=[common], help="Re-check a saved snapshot")
    verify.add_argument("--tag", default="stage_00", help="Snapshot tag (default: stage_00)")
    commands.add_parser("export", parents=[common], help="Write long-format plot data")

    args = parser.parse_args(argv)

    try:
        cfg = _load(args)
        runner = ScenarioRunner(cfg)
        if args.command == "subsolution":
            s0 = runner.build_subsolution()
            save_subsolution(runner.out_dir, "stage_00", s0)
            subsolution_checks(runner.report, s0, "stage_00")
            runner.report.write(runner.path("verification.json"))
        elif args.command == "wave":
            runner.wave_rows()
        elif args.command == "iterate":
            run_scenario(cfg)
        elif args.command == "verify":
            report = runner.verify_saved(args.tag)
            if not report.passed:
                raise WildflowError(f"verification failed: {', '.join(report.failures())}")
        else:
            export_plot_data(runner.path("metrics.csv"), runner.path("plot_data.csv"), runner.path("wave_metrics.csv"))
    except KeyboardInterrupt:
        print("\n\nPipeline interrupted by user.")
        sys.exit(1)
    except Exception as exc:
        print(f"\n\nPipeline failed: {exc}")
        import traceback

        traceback.print_exc()
        sys.exit(1)


if __name__ == "__main__":
    main()
