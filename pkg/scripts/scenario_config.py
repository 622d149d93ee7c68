"""
Scenario documents: JSON parsing and validation.

Validation reports every violation with a dotted path, e.g.
"iteration.max_stages: must be a positive integer" or "B[0][1]: not a number".
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple
import json
import os
import sys

import numpy as np

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from constants import (
    DEFAULT_CELL_CAP,
    DEFAULT_MARGIN_FLOOR,
    DEFAULT_MAX_STAGES,
    DEFAULT_SEED,
    DEFAULT_STOP_DEFECT,
    MAX_RESOLUTION,
    MIN_DIMENSION,
    MIN_RESOLUTION,
)
from convex_integration_driver import IterationConfig
from errors import ParseError, ValidationError
from subsolution_factory import PROFILE_KINDS, DensityProfile, PressureLaw

try:
    from config import ITERATION_CONFIG, OUTPUT_PATHS, RUN_CONFIG
except ImportError:
    RUN_CONFIG = {
        "case": "torus",
        "dimension": 3,
        "resolution": 32,
        "seed": DEFAULT_SEED,
        "record_wall_time": False,
    }
    ITERATION_CONFIG = {
        "eps0": 1.0,
        "lambda_growth": 2.0,
        "stop_defect_tol": DEFAULT_STOP_DEFECT,
        "max_stages": DEFAULT_MAX_STAGES,
        "cell_cap": DEFAULT_CELL_CAP,
    }
    OUTPUT_PATHS = {"runs": "data/runs/", "plots": "data/plots/"}

CASES = ("torus", "compact_diag_source", "compact_general")
CASE_PROFILES = {
    "torus": ("constant", "sine", "bump"),
    "compact_diag_source": ("constant", "bump"),
    "compact_general": ("dip",),
}
ITERATION_FIELDS = {
    "eps0": float,
    "lambda_growth": float,
    "stop_defect_tol": float,
    "max_stages": int,
    "cell_cap": int,
    "margin_floor": float,
    "exhaustion_radius": float,
}


@dataclass(frozen=True)
class ScenarioConfig:
    case: str = "torus"
    dimension: int = 3
    resolution: int = 32
    seed: int = DEFAULT_SEED
    profile: Dict[str, Any] = field(default_factory=lambda: {"kind": "constant", "rho_bar": 1.0})
    pressure: Dict[str, float] = field(default_factory=lambda: {"coefficient": 1.0, "exponent": 2.0})
    q: float = 1.0
    B: Optional[Tuple[Tuple[float, ...], ...]] = None
    compact: Dict[str, float] = field(default_factory=lambda: {"a": 1.0, "eps": 0.05, "chi_hint": 1.0})
    iteration: Dict[str, Any] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=lambda: dict(OUTPUT_PATHS))
    verify_grid: int = 32
    record_wall_time: bool = False

    def pressure_law(self) -> PressureLaw:
        return PressureLaw(**self.pressure)

    def density_profile(self) -> DensityProfile:
        params = dict(self.profile)
        center = params.pop("center", None)
        return DensityProfile(
            pressure=self.pressure_law(),
            center=None if center is None else tuple(float(c) for c in center),
            **params,
        )

    def source_matrix(self) -> np.ndarray:
        n = self.dimension
        if self.B is not None:
            return np.asarray(self.B, dtype=float)
        if self.case == "compact_diag_source":
            return float(self.compact.get("a", 1.0)) * np.eye(n)
        return np.zeros((n, n))

    def difference_operator(self) -> str:
        return "forward" if self.case == "compact_diag_source" else "spectral"

    def iteration_config(self) -> IterationConfig:
        values = dict(ITERATION_CONFIG)
        values.update(self.iteration)
        kwargs = {k: ITERATION_FIELDS[k](v) for k, v in values.items() if k in ITERATION_FIELDS}
        kwargs.setdefault("margin_floor", DEFAULT_MARGIN_FLOOR)
        return IterationConfig(seed=self.seed, record_wall_time=self.record_wall_time, **kwargs)

    def with_overrides(
        self,
        seed: Optional[int] = None,
        stages: Optional[int] = None,
        out: Optional[str] = None,
        verify_grid: Optional[int] = None,
    ) -> "ScenarioConfig":
        updated = self
        if seed is not None:
            updated = replace(updated, seed=int(seed))
        if stages is not None:
            iteration = dict(updated.iteration)
            iteration["max_stages"] = int(stages)
            updated = replace(updated, iteration=iteration)
        if out is not None:
            outputs = dict(updated.outputs)
            outputs["runs"] = out
            updated = replace(updated, outputs=outputs)
        if verify_grid is not None:
            updated = replace(updated, verify_grid=int(verify_grid))
        violations = validate_config(updated)
        if violations:
            raise ValidationError(violations)
        return updated


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and np.isfinite(value)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _power_of_two_in_range(value: Any) -> bool:
    return _is_int(value) and MIN_RESOLUTION <= value <= MAX_RESOLUTION and value & (value - 1) == 0


def _check_matrix(B: Any, n: int, issues: List[str]) -> Optional[np.ndarray]:
    if not isinstance(B, (list, tuple)) or len(B) != n:
        issues.append(f"B: must be a {n}x{n} matrix")
        return None
    ok = True
    for i, row in enumerate(B):
        if not isinstance(row, (list, tuple)) or len(row) != n:
            issues.append(f"B[{i}]: must have {n} entries")
            ok = False
            continue
        for j, value in enumerate(row):
            if not _is_number(value):
                issues.append(f"B[{i}][{j}]: not a number")
                ok = False
    return np.asarray(B, dtype=float) if ok else None


def _check_profile(profile: Any, case: str, n: int, issues: List[str]) -> None:
    if not isinstance(profile, dict):
        issues.append("profile: must be an object")
        return
    kind = profile.get("kind")
    if kind not in PROFILE_KINDS:
        issues.append(f"profile.kind: must be one of {', '.join(PROFILE_KINDS)}")
    elif case in CASE_PROFILES and kind not in CASE_PROFILES[case]:
        issues.append(f"profile.kind: case {case} accepts {', '.join(CASE_PROFILES[case])}")
    rho_bar = profile.get("rho_bar", 1.0)
    if not _is_number(rho_bar) or rho_bar <= 0.0:
        issues.append("profile.rho_bar: must be a positive number")
        rho_bar = None
    amplitude = profile.get("amplitude", 0.0)
    if not _is_number(amplitude) or amplitude < 0.0:
        issues.append("profile.amplitude: must be a non-negative number")
    elif kind == "sine" and amplitude >= 1.0:
        issues.append("profile.amplitude: sine profile needs amplitude < 1 to keep rho positive")
    elif kind == "dip" and rho_bar is not None and amplitude >= rho_bar:
        issues.append("profile.amplitude: dip must stay below the background density")
    elif kind == "dip" and amplitude == 0.0:
        issues.append("profile.amplitude: dip needs a positive amplitude for a nonempty strict domain")
    radius = profile.get("radius", 0.25)
    if not _is_number(radius) or not 0.0 < radius < 0.5:
        issues.append("profile.radius: must lie in (0, 0.5)")
    inner = profile.get("inner_ratio", 0.5)
    if not _is_number(inner) or not 0.0 < inner < 1.0:
        issues.append("profile.inner_ratio: must lie in (0, 1)")
    center = profile.get("center")
    if center is not None:
        if not isinstance(center, (list, tuple)) or len(center) != n or not all(_is_number(c) for c in center):
            issues.append(f"profile.center: must be {n} numbers")
    known = {"kind", "rho_bar", "amplitude", "radius", "inner_ratio", "center"}
    for key in sorted(set(profile) - known):
        issues.append(f"profile.{key}: unknown field")


def validate_config(cfg: ScenarioConfig) -> List[str]:
    """Return every violation found in a scenario configuration."""
    issues: List[str] = []
    if cfg.case not in CASES:
        issues.append(f"case: must be one of {', '.join(CASES)}")
    n = cfg.dimension
    if not _is_int(n) or n < MIN_DIMENSION:
        issues.append(f"dimension: n >= {MIN_DIMENSION} required")
        n = MIN_DIMENSION
    if not _power_of_two_in_range(cfg.resolution):
        issues.append(f"resolution: must be a power of two between {MIN_RESOLUTION} and {MAX_RESOLUTION}")
    if not _power_of_two_in_range(cfg.verify_grid):
        issues.append(f"verify_grid: must be a power of two between {MIN_RESOLUTION} and {MAX_RESOLUTION}")
    if not _is_int(cfg.seed) or cfg.seed < 0:
        issues.append("seed: must be a non-negative integer")

    _check_profile(cfg.profile, cfg.case, n, issues)

    if not isinstance(cfg.pressure, dict):
        issues.append("pressure: must be an object")
    else:
        for key in ("coefficient", "exponent"):
            value = cfg.pressure.get(key, 1.0)
            if not _is_number(value) or value <= 0.0:
                issues.append(f"pressure.{key}: must be a positive number")
        for key in sorted(set(cfg.pressure) - {"coefficient", "exponent"}):
            issues.append(f"pressure.{key}: unknown field")

    if cfg.case == "torus" and (not _is_number(cfg.q) or cfg.q <= 0.0):
        issues.append("q: torus case needs a positive q")

    B = None
    if cfg.B is not None:
        B = _check_matrix(cfg.B, n, issues)
    if cfg.case == "compact_diag_source":
        compact = cfg.compact if isinstance(cfg.compact, dict) else {}
        a = compact.get("a", 1.0)
        if not _is_number(a) or a <= 0.0:
            issues.append("compact.a: must be a positive number")
        if B is not None:
            diagonal = B[0, 0]
            if not np.allclose(B, diagonal * np.eye(n), rtol=0.0, atol=0.0) or diagonal <= 0.0:
                issues.append("B: compact_diag_source requires B = a I with a > 0")
            elif _is_number(a) and diagonal != a:
                issues.append("B: diagonal must equal compact.a")
        for key in ("eps", "chi_hint"):
            value = compact.get(key, 1.0)
            if not _is_number(value) or value <= 0.0:
                issues.append(f"compact.{key}: must be a positive number")

    if not isinstance(cfg.iteration, dict):
        issues.append("iteration: must be an object")
    else:
        for key, value in cfg.iteration.items():
            kind = ITERATION_FIELDS.get(key)
            if kind is None:
                issues.append(f"iteration.{key}: unknown field")
            elif kind is int and (not _is_int(value) or value < 1):
                issues.append(f"iteration.{key}: must be a positive integer")
            elif kind is float and (not _is_number(value) or value < 0.0):
                issues.append(f"iteration.{key}: must be a non-negative number")
        for key in ("eps0", "stop_defect_tol"):
            value = cfg.iteration.get(key)
            if _is_number(value) and value <= 0.0:
                issues.append(f"iteration.{key}: must be positive")
        growth = cfg.iteration.get("lambda_growth")
        if _is_number(growth) and growth < 1.0:
            issues.append("iteration.lambda_growth: must be at least 1")

    if not isinstance(cfg.outputs, dict) or not isinstance(cfg.outputs.get("runs"), str):
        issues.append("outputs.runs: must be a path")
    return issues


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate a JSON scenario document."""
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from exc
    if not isinstance(document, dict):
        raise ParseError("scenario document must be a JSON object", 1, 1)

    defaults = ScenarioConfig()
    known = set(ScenarioConfig.__dataclass_fields__)
    unknown = sorted(set(document) - known)
    merged = dict(RUN_CONFIG)
    merged = {k: v for k, v in merged.items() if k in known}
    merged.update({k: v for k, v in document.items() if k in known})
    B = merged.get("B")
    if isinstance(B, list):
        merged["B"] = tuple(tuple(row) if isinstance(row, list) else row for row in B)
    outputs = dict(defaults.outputs)
    if isinstance(merged.get("outputs"), dict):
        outputs.update(merged["outputs"])
        merged["outputs"] = outputs
    if isinstance(merged.get("compact"), dict):
        compact = dict(defaults.compact)
        compact.update(merged["compact"])
        merged["compact"] = compact
    cfg = ScenarioConfig(**merged)

    violations = [f"{key}: unknown field" for key in unknown] + validate_config(cfg)
    if violations:
        raise ValidationError(violations)
    return cfg


def load_config(path: str) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_config(handle.read())
