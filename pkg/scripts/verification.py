"""
Machine-checkable invariant report.

Each check records the measured value, its threshold and pass/fail. The
report is written as JSON next to the run artifacts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence
import json
import os
import sys

import numpy as np
import pandas as pd

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from constants import WAVE_CONE_TOL, WAVE_VALUE_TOL
from convex_integration_driver import (
    Cube,
    DefectReport,
    axis_aligned_direction,
    constant_cell_step,
    energy_pump_check,
)
from localized_waves import replicate_tiling
from states_geometry import (
    ConstraintParams,
    FlowState,
    defect_values,
    hull_margin,
    k_stress,
    operator_norm,
    random_states,
    relaxation_e,
    state_coordinates,
    state_from_coordinates,
)
from subsolution_factory import SubsolutionField
from wave_cone_segments import admissible_segment, wave_cone_vectors

# Spectral divergence of a resolved test wave on a 64-point grid per axis.
SPECTRAL_WAVE_TOL = 1e-2


@dataclass
class InvariantCheck:
    name: str
    module: str
    measured: float
    threshold: float
    relation: str
    passed: bool
    detail: str = ""


class VerificationReport:
    """Collects invariant checks; `passed` is true when every check passed."""

    def __init__(self) -> None:
        self.checks: List[InvariantCheck] = []
        self.info: Dict[str, Any] = {}
        self.error: Optional[Dict[str, str]] = None

    def _add(self, name: str, module: str, measured: float, threshold: float, relation: str, passed: bool, detail: str):
        check = InvariantCheck(name, module, float(measured), float(threshold), relation, bool(passed), detail)
        self.checks.append(check)
        return check

    def at_most(self, name: str, module: str, measured: float, threshold: float, detail: str = "") -> InvariantCheck:
        return self._add(name, module, measured, threshold, "<=", np.isfinite(measured) and measured <= threshold, detail)

    def at_least(self, name: str, module: str, measured: float, threshold: float, detail: str = "") -> InvariantCheck:
        return self._add(name, module, measured, threshold, ">=", np.isfinite(measured) and measured >= threshold, detail)

    def above(self, name: str, module: str, measured: float, threshold: float, detail: str = "") -> InvariantCheck:
        return self._add(name, module, measured, threshold, ">", np.isfinite(measured) and measured > threshold, detail)

    def record_error(self, exc: BaseException) -> None:
        self.error = {"type": type(exc).__name__, "message": str(exc)}

    @property
    def passed(self) -> bool:
        return self.error is None and all(check.passed for check in self.checks)

    def failures(self) -> List[str]:
        return [check.name for check in self.checks if not check.passed]

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "passed": self.passed,
            "checks": [asdict(check) for check in self.checks],
            "info": self.info,
        }
        if self.error is not None:
            out["error"] = self.error
        return out

    def write(self, path: str) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")


def geometry_checks(report: VerificationReport, seed: int, samples: int = 2000, dims: Sequence[int] = (3, 4)) -> None:
    for n in dims:
        rng = np.random.Generator(np.random.Philox(seed + n))
        rho, m, U = random_states(rng, samples, n)
        rho2, m2, U2 = random_states(rng, samples, n)
        e1 = relaxation_e(rho, m, U)
        e2 = relaxation_e(rho2, m2, U2)
        worst_convexity = -np.inf
        for theta in (0.25, 0.5, 0.75):
            mid = relaxation_e(theta * rho + (1 - theta) * rho2, theta * m + (1 - theta) * m2, theta * U + (1 - theta) * U2)
            worst_convexity = max(worst_convexity, float(np.max(mid - theta * e1 - (1 - theta) * e2)))
        report.at_most(f"e_convexity_n{n}", "states_geometry", worst_convexity, 1e-10)

        lower = np.einsum("si,si->s", m, m) / (2.0 * rho)
        report.at_most(f"e_lower_bound_n{n}", "states_geometry", float(np.max(lower - e1)), 1e-12)
        op = operator_norm(U) - (2.0 * (n - 1) / n) * e1
        report.at_most(f"operator_norm_bound_n{n}", "states_geometry", float(np.max(op)), 1e-10)

        a = rng.standard_normal((samples, n))
        q = np.einsum("si,si->s", a, a) / (n * rho)
        on_k = defect_values(rho, q, a, k_stress(rho, a))
        report.at_most(f"defect_zero_on_K_n{n}", "states_geometry", float(np.max(on_k)), 1e-10)
        margin_k = hull_margin(rho, q, a, k_stress(rho, a))
        report.at_most(f"margin_zero_on_K_n{n}", "states_geometry", float(np.max(np.abs(margin_k))), 1e-10)

        coords = state_coordinates(m, U)
        back_m, back_U = state_from_coordinates(coords, n)
        report.at_most(
            f"coordinates_inverse_n{n}", "states_geometry",
            float(max(np.max(np.abs(back_m - m)), np.max(np.abs(back_U - U)))), 1e-13,
        )


def wave_cone_checks(report: VerificationReport, seed: int, samples: int = 1000, dims: Sequence[int] = (3, 4)) -> None:
    for n in dims:
        rng = np.random.Generator(np.random.Philox(seed + 10 * n))
        a = rng.standard_normal((samples, n))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b = rng.standard_normal((samples, n))
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        rho = np.ones(samples)
        _, relative = wave_cone_vectors(a - b, k_stress(rho, a) - k_stress(rho, b))
        failures = int(np.count_nonzero(relative > WAVE_CONE_TOL))
        report.at_most(f"wave_cone_K_differences_n{n}", "wave_cone_segments", failures, 0, f"max relative {relative.max():.3e}")


def wave_checks(
    report: VerificationReport,
    wave_rows: pd.DataFrame,
    spectral: Optional[Dict[str, float]] = None,
) -> None:
    if spectral is not None:
        worst = max(spectral["div_n"], spectral["div_V_minus_Bn"])
        report.at_most(
            "wave_spectral_residual", "localized_waves", worst, SPECTRAL_WAVE_TOL,
            f"resolution {int(spectral['resolution'])}",
        )
    if wave_rows.empty:
        return
    report.at_most("wave_symbolic_certificate", "localized_waves", float(wave_rows["certificate"].max()), 1e-12)
    report.at_most(
        "wave_fd_divergence", "localized_waves",
        float(max(wave_rows["fd_div_n"].max(), wave_rows["fd_div_V"].max())), 1e-6,
    )
    report.at_most("wave_mean", "localized_waves", float(wave_rows["mean_abs"].max()), 1e-9)
    report.at_most(
        "wave_deviation_below_majorant", "localized_waves",
        float((wave_rows["deviation"] - wave_rows["majorant"]).max()), 0.0,
    )
    if len(wave_rows) >= 2:
        slope = float(np.polyfit(np.log(wave_rows["lambda_hat"]), np.log(wave_rows["deviation"]), 1)[0])
        report.at_most("wave_deviation_slope_error", "localized_waves", abs(slope + 1.0), 0.2, f"slope {slope:.3f}")
        report.info["deviation_slope"] = slope


def subsolution_checks(report: VerificationReport, s: SubsolutionField, tag: str, residual_tol: float = 1e-5) -> Dict[str, float]:
    residual = s.constraint_residual()
    report.at_most(f"{tag}_mass_residual", "subsolution_factory", residual["mass"], residual_tol)
    report.at_most(f"{tag}_momentum_residual", "subsolution_factory", residual["momentum"], residual_tol)
    report.above(f"{tag}_strict_margin", "subsolution_factory", s.strict_margin(), 0.0)
    report.info[f"{tag}_residual"] = residual
    return residual


def iteration_checks(
    report: VerificationReport,
    s0: SubsolutionField,
    final: SubsolutionField,
    reports: Sequence[DefectReport],
    stop_tol: float,
    residual_tol: float = 1e-5,
) -> None:
    module = "convex_integration_driver"
    residual = final.constraint_residual()
    report.info["final_residual"] = residual
    report.at_most("final_mass_residual", module, residual["mass"], residual_tol)
    report.at_most("final_momentum_residual", module, residual["momentum"], residual_tol)
    if "wave_certificate" in residual:
        report.at_most("final_wave_certificate", module, residual["wave_certificate"], 1e-12)
        report.at_most("final_wave_value_mismatch", module, residual["wave_value_mismatch"], WAVE_VALUE_TOL)
    initial = s0.defect_integral()
    report.info["initial_defect_integral"] = initial
    report.info["stages"] = len(reports)
    if not reports:
        report.at_most("initial_within_tolerance", module, initial, stop_tol)
        return
    defects = [initial] + [r.defect_integral for r in reports]
    increases = max(b - a for a, b in zip(defects[:-1], defects[1:]))
    report.at_most("defect_non_increasing", module, increases, 1e-12 * max(defects))
    ratios = [b / a for a, b in zip(defects[:-1], defects[1:]) if a > stop_tol]
    if ratios:
        report.at_most("defect_ratio_per_stage", module, max(ratios), 0.55)
    report.above("margin_positive_all_stages", module, min(r.margin_min for r in reports), 0.0)
    energy0 = s0.energy_error()
    final_energy = final.energy_error()
    report.info["energy_error_initial"] = energy0
    report.info["energy_error_final"] = final_energy
    report.at_most("energy_error_non_increasing", module, final_energy - energy0, 1e-12 * max(energy0, 1.0))
    report.info["l2_increments"] = [r.l2_increment for r in reports]


def cell_step_checks(report: VerificationReport, n: int, seed: int, samples: int = 1000) -> None:
    module = "convex_integration_driver"
    p = ConstraintParams(1.0, 1.0)
    w = FlowState.zero(n)
    cell = Cube(np.full(n, 0.5), 1.0)
    eps = 0.1
    step = constant_cell_step(p, w, cell, eps, seed=seed)
    average = step.cell_average_defect(resolution=8 if n > 3 else 12)
    report.at_most("cell_average_defect", module, average, eps)
    report.info["cell_step_lambda_hat"] = float(step.wave.lambda_hat) if step.wave is not None else 0.0
    report.info["cell_step_gamma"] = step.gamma

    rng = np.random.Generator(np.random.Philox(seed))
    x = cell.center + (rng.random((samples, n)) - 0.5) * cell.side
    m, U = step.perturbation(x)
    box = step.gamma * (2.0 * rng.random((samples, len(state_coordinates(w.m, w.U.entries)))) - 1.0)
    box_m, box_U = state_from_coordinates(box, n)
    margins = hull_margin(np.ones(samples), np.ones(samples), w.m + m + box_m, w.U.entries + U + box_U)
    report.above("gamma_box_inside_hull", module, float(margins.min()), 0.0)

    pump = energy_pump_check(p, w, cell, seed=seed)
    report.at_least("energy_pump_floor", module, pump.measured, pump.floor, f"constant {pump.constant:.3e}")


TEST_FUNCTIONS = {
    "linear_along_xi": lambda n: [np.ones_like] * (n - 1) + [lambda y: y],
    "exponential": lambda n: [np.exp] * n,
    "quadratic": lambda n: [lambda y: 1.0 + y ** 2] * n,
    "sine_first_axis": lambda n: [lambda y: np.sin(3.0 * y)] + [np.ones_like] * (n - 1),
    "mixed": lambda n: [np.cos] + [np.exp] * (n - 2) + [lambda y: y ** 3],
}


def tiling_checks(report: VerificationReport, n: int, seed: int, levels: Sequence[int] = (1, 2)) -> None:
    """Weak convergence of tiled waves against smooth test functions, and their energy floor."""
    module = "localized_waves"
    segment = admissible_segment(ConstraintParams(1.0, 1.0), FlowState.zero(n), seed=seed)
    direction = axis_aligned_direction(segment.direction)
    tilings = [replicate_tiling(direction, k) for k in levels]

    worst_increase = -np.inf
    for name, factory in TEST_FUNCTIONS.items():
        sizes = [float(np.max(np.abs(tiling.pairing(factory(n))))) for tiling in tilings]
        report.info[f"pairing_{name}"] = sizes
        worst_increase = max(worst_increase, max(b - a for a, b in zip(sizes[:-1], sizes[1:])))
    report.at_most("tiling_pairings_decrease", module, worst_increase, 1e-9)

    floor = 0.5 * direction.norm() ** 2
    energy = max(tiling.energy() for tiling in tilings)
    report.at_least("tiling_energy_floor", module, energy, floor)
