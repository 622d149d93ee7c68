"""
Stagewise convex integration of a strict subsolution.

Every grid sample carries a laminate over finitely many points of K, a
physical offset collecting wave correctors, and the cube cell it currently
sits in. A stage shrinks each laminate toward its barycenter until every
leaf defect fits the stage budget, then splits it level by level: each cell
hosts one localized wave with its own hashed phase, and the next cells are
the maximal cubes of a shifted dyadic grid inside the wave's plateaus. The
samples therefore hold the exact value of the base field plus the waves of
every cell that contains them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache, partial
from typing import Callable, Dict, List, Optional, Tuple
import copy
import logging
import os
import sys
import time

import numpy as np
from scipy import ndimage

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from constants import (
    COVER_MAX_DEPTH,
    CUTOFF_THETA,
    DEFAULT_CELL_CAP,
    DEFAULT_MARGIN_FLOOR,
    DEFAULT_MAX_STAGES,
    DEFAULT_SEED,
    DEFAULT_STOP_DEFECT,
    DELTA_HALVINGS,
    LAMBDA_HAT_CAP,
    LAMBDA_HAT_START,
    MAX_LAMINATE_LEVELS,
    PROFILE_DELTA_FRACTION,
    WAVE_AUDIT_CAP,
    WAVE_CONE_TOL,
    WEIGHT_PRUNE,
)
from errors import DecompositionFailed, InvalidParams, MarginExhausted, ResourceLimit, WildflowError
from localized_waves import (
    STAIRCASE_LEVELS,
    LocalizedWave,
    build_cutoff,
    build_localized_wave,
    build_staircase,
    majorant_table,
    plateau_value,
    replicate_tiling,
    staircase_values,
)
from logging_utils import setup_logging
from states_geometry import (
    ConstraintParams,
    FlowState,
    SymTraceFreeMatrix,
    ambient_dimension,
    defect_values,
    hull_box_radius,
    hull_margin,
    k_stress,
)
from subsolution_factory import SubsolutionField
from wave_cone_segments import (
    DecompositionCache,
    LambdaDirection,
    admissible_segment,
    caratheodory_decompose,
    segment_length_bound,
    wave_cone_vectors,
)

logger = logging.getLogger("wildflow")

# Antiderivatives of a mean-zero unit-period profile lose a factor two per level.
H_SUP = {j: 2.0 ** (-j) for j in range(STAIRCASE_LEVELS + 1)}


@dataclass
class IterationConfig:
    eps0: float = 1.0
    lambda_growth: float = 2.0
    stop_defect_tol: float = DEFAULT_STOP_DEFECT
    max_stages: int = DEFAULT_MAX_STAGES
    seed: int = DEFAULT_SEED
    cell_cap: int = DEFAULT_CELL_CAP
    margin_floor: float = DEFAULT_MARGIN_FLOOR
    exhaustion_radius: float = 0.0
    record_wall_time: bool = False

    def __post_init__(self) -> None:
        if self.eps0 <= 0.0:
            raise InvalidParams("eps0 must be positive")
        if self.lambda_growth < 1.0:
            raise InvalidParams("lambda_growth must be at least 1")
        if self.max_stages < 1:
            raise InvalidParams("max_stages must be at least 1")
        if self.cell_cap < 1:
            raise InvalidParams("cell_cap must be positive")
        if self.seed < 0:
            raise InvalidParams("seed must be non-negative")
        if self.exhaustion_radius < 0.0:
            raise InvalidParams("exhaustion_radius must be non-negative")

    def eps_schedule(self, stage: int) -> float:
        return self.eps0 * 2.0 ** (-stage)

    def lambda_start(self, stage: int) -> float:
        return LAMBDA_HAT_START * self.lambda_growth ** (stage - 1)


@dataclass
class DefectReport:
    stage: int
    defect_integral: float
    l2_increment: float
    margin_min: float
    energy_error: float
    wall_seconds: float
    target: float
    cells: int
    max_depth: int
    min_lambda_hat: float
    ramp_bound: float
    frozen: int = 0
    ramp_waves: int = 0

    def as_row(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class LaminateState:
    """
    Per-sample laminates: weights over K points given by unit momenta, plus offsets.

    position is the sample in the normalized coordinates of its current cell,
    key the hash chain naming that cell, and slope_U the gradient of offset_U
    across the cell in those coordinates.
    """

    rho: np.ndarray
    q: np.ndarray
    weights: np.ndarray
    unit: np.ndarray
    offset_m: np.ndarray
    offset_U: np.ndarray
    log2_side: np.ndarray
    frozen: np.ndarray
    position: np.ndarray
    key: np.ndarray
    slope_U: np.ndarray

    @property
    def count(self) -> int:
        return self.weights.shape[0]

    @property
    def n(self) -> int:
        return self.unit.shape[-1]

    def k_points(self) -> Tuple[np.ndarray, np.ndarray]:
        scale = np.sqrt(self.n * self.rho * self.q)
        Zm = self.unit * scale[:, None, None]
        return Zm, k_stress(self.rho[:, None], Zm)

    def barycenter(self, weights: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        weights = self.weights if weights is None else weights
        Zm, ZU = self.k_points()
        return np.einsum("sp,spi->si", weights, Zm), np.einsum("sp,spij->sij", weights, ZU)

    def state(self) -> Tuple[np.ndarray, np.ndarray]:
        m, U = self.barycenter()
        return m + self.offset_m, U + self.offset_U


@dataclass
class LevelOutcome:
    weights: np.ndarray
    offset_m: np.ndarray
    offset_U: np.ndarray
    log2_side: np.ndarray
    depth: np.ndarray
    gamma: np.ndarray
    frozen: np.ndarray
    position: np.ndarray
    key: np.ndarray
    slope_U: np.ndarray
    min_lambda_hat: float
    ramp_bound: float
    ramp_waves: int = 0


PHASE_TAG, SHIFT_TAG, CHILD_TAG, AUDIT_TAG = 1, 2, 3, 4
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, elementwise on uint64."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = x + _GOLDEN
        x = (x ^ (x >> np.uint64(30))) * _MIX_A
        x = (x ^ (x >> np.uint64(27))) * _MIX_B
    return x ^ (x >> np.uint64(31))


def cell_keys(key, *parts) -> np.ndarray:
    """Extend a cell hash chain by integer parts; arrays broadcast."""
    out = np.asarray(key, dtype=np.uint64)
    for part in parts:
        out = _mix(out ^ _mix(np.asarray(part, dtype=np.int64).astype(np.uint64)))
    return out


def cell_uniform(key) -> np.ndarray:
    """A uniform number in [0, 1) determined by the key."""
    return (_mix(key) >> np.uint64(11)).astype(float) * 2.0 ** -53


def descend_cover(
    position: np.ndarray,
    key: np.ndarray,
    phase: np.ndarray,
    lambda_hat: np.ndarray,
    xi: np.ndarray,
    mu1: np.ndarray,
    delta: np.ndarray,
    plateau_half: float,
    max_depth: int = COVER_MAX_DEPTH,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Find the cube of the next cover that contains each point.

    Every cell carries one dyadic grid shifted by its key, so cubes of all
    depths nest. A cube is admissible when it lies in the cutoff plateau and
    its phase range stays inside one plateau of the profile; the cover is
    made of the maximal admissible cubes. Returns the point in the cube's
    normalized coordinates, the cube key and the depth, zero where no cube
    up to max_depth fits.
    """
    count, n = position.shape
    origin = cell_uniform(cell_keys(key[:, None], SHIFT_TAG, np.arange(n))) - 0.5
    spread = lambda_hat * np.abs(xi).sum(axis=1)
    depth = np.zeros(count, dtype=int)
    child = np.zeros_like(position)
    child_key = key.copy()
    for j in range(1, max_depth + 1):
        todo = np.flatnonzero(depth == 0)
        if todo.size == 0:
            break
        side = 2.0 ** -j
        index = np.floor((position[todo] - origin[todo]) / side)
        centre = origin[todo] + (index + 0.5) * side
        in_cutoff = np.max(np.abs(centre), axis=1) + 0.5 * side <= plateau_half
        mid = phase[todo] + lambda_hat[todo] * np.einsum("si,si->s", centre, xi[todo])
        half = 0.5 * side * spread[todo]
        turns = np.floor(mid - half)
        lo = mid - half - turns
        hi = mid + half - turns
        m1, d = mu1[todo], delta[todo]
        one_plateau = ((lo >= d) & (hi <= m1 - d)) | ((lo >= m1 + d) & (hi <= 1.0 - d))
        ok = in_cutoff & one_plateau
        rows = todo[ok]
        depth[rows] = j
        child[rows] = (position[rows] - centre[ok]) / side
        child_key[rows] = cell_keys(key[rows], CHILD_TAG, j, *index[ok].astype(np.int64).T)
    return child, child_key, depth


@lru_cache(maxsize=1024)
def _wave_template(
    d_m: Tuple[float, ...],
    d_U: Tuple[float, ...],
    xi: Tuple[float, ...],
    B_hat: Tuple[float, ...],
    lambda_hat: float,
    mu1: float,
    delta: float,
    theta: float,
) -> LocalizedWave:
    n = len(xi)
    U = np.reshape(d_U, (n, n))
    direction = LambdaDirection(np.array(d_m), SymTraceFreeMatrix(sym_clean(U)), np.array(xi))
    return LocalizedWave(
        direction,
        lambda_hat,
        build_cutoff(np.zeros(n), 1.0, theta),
        build_staircase(mu1, delta),
        B=np.reshape(B_hat, (n, n)),
    )


def cell_wave(
    d_m: np.ndarray,
    d_U: np.ndarray,
    xi: np.ndarray,
    B_hat: np.ndarray,
    lambda_hat: float,
    mu1: float,
    delta: float,
    phase: float,
    theta: float = CUTOFF_THETA,
) -> LocalizedWave:
    """
    The closed-form wave of one cell in the cell's normalized coordinates.

    Cells with the same direction and profile share the symbolic expressions;
    only the phase is their own.
    """
    template = _wave_template(
        tuple(np.ravel(d_m).tolist()),
        tuple(np.ravel(d_U).tolist()),
        tuple(np.ravel(xi).tolist()),
        tuple(np.ravel(B_hat).tolist()),
        float(lambda_hat),
        float(mu1),
        float(delta),
        float(theta),
    )
    wave = copy.copy(template)
    wave.phase = float(phase)
    return wave


@dataclass
class WaveLedger:
    """
    A deterministic sample of the waves inserted during a run.

    Each level offers the plateau wave and the cutoff-ramp wave with the
    smallest audit hash until the ledger is full. Every kept wave is rebuilt
    in closed form, its constraint certificate taken and its value at the
    sample compared with the increment the sample received.
    """

    theta: float = CUTOFF_THETA
    capacity: int = WAVE_AUDIT_CAP
    prior: Optional[Callable[[], Dict[str, float]]] = None
    rows: List[Dict[str, np.ndarray]] = field(default_factory=list)
    _audits: Dict[int, Dict[str, float]] = field(default_factory=dict, repr=False)

    def record(self, key: np.ndarray, on_ramp: np.ndarray, **columns: np.ndarray) -> None:
        if key.size == 0:
            return
        rank = cell_uniform(cell_keys(key, AUDIT_TAG))
        for group in (~on_ramp, on_ramp):
            candidates = np.flatnonzero(group)
            if candidates.size == 0 or len(self.rows) >= self.capacity:
                continue
            r = candidates[np.argmin(rank[candidates])]
            self.rows.append({name: np.array(values[r], dtype=float) for name, values in columns.items()})

    def wave(self, row: Dict[str, np.ndarray]) -> LocalizedWave:
        return cell_wave(
            row["d_m"], row["d_U"], row["xi"], row["B_hat"], row["lambda_hat"],
            row["mu1"], row["delta"], row["phase"], self.theta,
        )

    def residual(self, upto: Optional[int] = None) -> Dict[str, float]:
        """Audit of the first upto recorded waves, merged with the audit of earlier runs."""
        upto = len(self.rows) if upto is None else upto
        if upto not in self._audits:
            certificate = 0.0
            mismatch = 0.0
            for row in self.rows[:upto]:
                wave = self.wave(row)
                certificate = max(certificate, wave.constraint_certificate())
                m, U = wave.evaluate_normalized(row["y"][None, :])
                scale = 1.0 + max(np.abs(row["value_m"]).max(), np.abs(row["value_U"]).max())
                gap = max(np.abs(m[0] - row["value_m"]).max(), np.abs(U[0] - row["value_U"]).max())
                mismatch = max(mismatch, gap / scale)
            audit = {"wave_certificate": certificate, "wave_value_mismatch": mismatch, "audited_waves": float(upto)}
            if self.prior is not None:
                earlier = self.prior()
                audit["wave_certificate"] = max(certificate, earlier["wave_certificate"])
                audit["wave_value_mismatch"] = max(mismatch, earlier["wave_value_mismatch"])
                audit["audited_waves"] += earlier["audited_waves"]
            self._audits[upto] = audit
        return dict(self._audits[upto])


def k_diameter_bound(rho, q, n: int) -> float:
    """2 sup |w| over the K sets of the field: |m|^2 = n rho q and |U|_F = n q sqrt(1 - 1/n)."""
    rho = np.asarray(rho, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(2.0 * np.max(np.sqrt(n * rho * q + (n * q) ** 2 * (1.0 - 1.0 / n))))


def decompose_samples(
    rho: np.ndarray,
    q: np.ndarray,
    m: np.ndarray,
    U: np.ndarray,
    seed: int,
    cache: DecompositionCache,
) -> Tuple[np.ndarray, np.ndarray]:
    """Caratheodory weights and unit momenta for every sample, padded to N+1 points."""
    count, n = m.shape
    width = ambient_dimension(n) + 1
    weights = np.zeros((count, width))
    unit = np.zeros((count, width, n))
    unit[:, :, 0] = 1.0
    for s in range(count):
        p = ConstraintParams(float(rho[s]), float(q[s]))
        decomposition = caratheodory_decompose(
            p, FlowState(m[s], SymTraceFreeMatrix(U[s])), seed=seed, cache=cache
        )
        size = len(decomposition.weights)
        weights[s, :size] = decomposition.weights
        unit[s, :size] = decomposition.unit_momenta
    return weights, unit


def shrunk_k_points(lam: LaminateState, delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Z_delta = w_bar + (1 - delta)(Z - w_bar) with w_bar the barycenter of the laminate."""
    Zm, ZU = lam.k_points()
    bm, bU = lam.barycenter()
    shrink = (1.0 - delta)[:, None]
    return (
        bm[:, None, :] + shrink[:, :, None] * (Zm - bm[:, None, :]),
        bU[:, None, :, :] + shrink[:, :, None, None] * (ZU - bU[:, None, :, :]),
    )


def choose_delta(lam: LaminateState, budget: float) -> np.ndarray:
    """Largest delta = 2^-j whose maximal leaf defect fits the budget, per sample."""
    delta = np.full(lam.count, 0.5)
    settled = np.zeros(lam.count, dtype=bool)
    active = lam.weights > WEIGHT_PRUNE
    for _ in range(DELTA_HALVINGS):
        todo = np.flatnonzero(~settled)
        if todo.size == 0:
            break
        sub = _subset(lam, todo)
        Zm, ZU = shrunk_k_points(sub, delta[todo])
        leaves = defect_values(
            sub.rho[:, None],
            sub.q[:, None],
            Zm + sub.offset_m[:, None, :],
            ZU + sub.offset_U[:, None, :, :],
        )
        worst = np.max(np.where(active[todo], leaves, 0.0), axis=1)
        ok = worst <= budget
        settled[todo[ok]] = True
        delta[todo[~ok]] *= 0.5
    if not np.all(settled):
        raise MarginExhausted("no shrink factor brings the leaf defects below the stage budget")
    return delta


def _subset(lam: LaminateState, index: np.ndarray) -> LaminateState:
    return LaminateState(
        rho=lam.rho[index],
        q=lam.q[index],
        weights=lam.weights[index],
        unit=lam.unit[index],
        offset_m=lam.offset_m[index],
        offset_U=lam.offset_U[index],
        log2_side=lam.log2_side[index],
        frozen=lam.frozen[index],
        position=lam.position[index],
        key=lam.key[index],
        slope_U=lam.slope_U[index],
    )


def lambda_hats(
    n: int, theta: float, entry: np.ndarray, source: np.ndarray, tolerance: np.ndarray, start: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized doubling of the normalized frequency until the deviation majorant fits.

    Returns the frequencies and their majorants.
    """
    table = majorant_table(n, theta)
    levels = np.arange(len(table.stress_part))
    h_sup = np.array([H_SUP.get(int(j), 0.0) for j in levels])
    lam = np.full(entry.shape, float(start))

    def bound(values: np.ndarray) -> np.ndarray:
        powers = values[:, None] ** (-levels.astype(float))[None, :]
        terms = entry[:, None] * table.stress_part[None, :] + source[:, None] * table.source_part[None, :]
        return np.sum(powers * h_sup[None, :] * terms, axis=1)

    deviation = bound(lam)
    while np.any(deviation > tolerance):
        grow = deviation > tolerance
        lam[grow] *= 2.0
        if np.any(lam > LAMBDA_HAT_CAP):
            raise ResourceLimit("no admissible wave frequency below the configured cap")
        deviation = bound(lam)
    return lam, deviation


def laminate_levels(
    lam: LaminateState,
    Zm: np.ndarray,
    ZU: np.ndarray,
    B: np.ndarray,
    start: float,
    theta: float = CUTOFF_THETA,
    strict: bool = False,
    first_level: int = 1,
    ledger: Optional[WaveLedger] = None,
) -> LevelOutcome:
    """
    Split the laminates of all samples level by level.

    Each level merges the first two active weights with one wave on the
    sample's cell, its direction the difference of their shrunk K points and
    its coefficients frozen at the cell centre. On the cutoff plateau the
    wave value is the closed-form plateau value and affine in the cell
    coordinates; in the cutoff ramp the full wave is evaluated and the sample
    stops. A sample that continues moves to its cube of the next cover.
    """
    n = lam.n
    nu = lam.weights.copy()
    off_m = lam.offset_m.copy()
    off_U = lam.offset_U.copy()
    log2_side = lam.log2_side.copy()
    frozen = lam.frozen.copy()
    position = lam.position.copy()
    key = lam.key.copy()
    slope = lam.slope_U.copy()
    depth = np.zeros(lam.count, dtype=int)
    gamma = np.full(lam.count, np.inf)
    refining = ~frozen
    min_lambda = np.inf
    ramp = 0.0
    ramp_waves = 0
    plateau_half = 0.5 * (1.0 - theta)

    for level in range(first_level, first_level + MAX_LAMINATE_LEVELS):
        active = nu > WEIGHT_PRUNE
        todo = np.flatnonzero(refining & (active.sum(axis=1) >= 2))
        if todo.size == 0:
            break
        rows = np.arange(todo.size)
        order = np.argsort(~active[todo], axis=1, kind="stable")
        a, b = order[:, 0], order[:, 1]
        nu_t = nu[todo]
        na, nb = nu_t[rows, a], nu_t[rows, b]
        pair = na + nb
        mu1 = na / pair

        Zm_t, ZU_t = Zm[todo], ZU[todo]
        diff_m = Zm_t[rows, a] - Zm_t[rows, b]
        diff_U = ZU_t[rows, a] - ZU_t[rows, b]
        cur_m = np.einsum("sp,spi->si", nu_t, Zm_t) + off_m[todo]
        cur_U = (
            np.einsum("sp,spij->sij", nu_t, ZU_t)
            + off_U[todo]
            - np.einsum("sijk,sk->sij", slope[todo], position[todo])
        )
        d_m = -pair[:, None] * diff_m
        d_U = -pair[:, None, None] * diff_U

        nodes_m = np.stack([cur_m, cur_m + nb[:, None] * diff_m, cur_m - na[:, None] * diff_m], axis=1)
        nodes_U = np.stack([cur_U, cur_U + nb[:, None, None] * diff_U, cur_U - na[:, None, None] * diff_U], axis=1)
        rho_t, q_t = lam.rho[todo], lam.q[todo]
        margins = hull_margin(rho_t[:, None], q_t[:, None], nodes_m, nodes_U).min(axis=1)
        bad = margins <= 0.0
        if np.any(bad):
            if strict:
                raise MarginExhausted(f"laminate node left the hull at level {level}")
            logger.warning("Freezing %d samples whose laminate nodes left the hull", int(bad.sum()))
            frozen[todo[bad]] = True
            refining[todo[bad]] = False
            keep = ~bad
            if not np.any(keep):
                continue
            todo = todo[keep]
            a, b, na, nb, pair, mu1 = a[keep], b[keep], na[keep], nb[keep], pair[keep], mu1[keep]
            d_m, d_U, nodes_m, margins = d_m[keep], d_U[keep], nodes_m[keep], margins[keep]
            rho_t, q_t = rho_t[keep], q_t[keep]

        m_norm = np.linalg.norm(nodes_m, axis=2).max(axis=1)
        level_gamma = hull_box_radius(rho_t, m_norm, n, 0.5 * margins)
        gamma[todo] = np.minimum(gamma[todo], level_gamma)

        xi, relative = wave_cone_vectors(d_m, d_U)
        if np.any(relative > 10.0 * WAVE_CONE_TOL):
            raise DecompositionFailed("difference of K points left the wave cone")

        side = 2.0 ** log2_side[todo]
        B_hat = side[:, None, None] * B[None, :, :]
        entry = np.maximum(np.abs(d_m).max(axis=1), np.abs(d_U).max(axis=(1, 2)))
        source = np.abs(B_hat).max(axis=(1, 2)) * np.abs(d_m).max(axis=1)
        lam_hat, deviation = lambda_hats(n, theta, entry, source, 0.5 * level_gamma, start)
        min_lambda = min(min_lambda, float(lam_hat.min()))
        ramp = max(ramp, float(deviation.max()))

        phase = cell_uniform(cell_keys(key[todo], PHASE_TAG))
        y = position[todo]
        delta_p = PROFILE_DELTA_FRACTION * np.minimum(mu1, 1.0 - mu1)
        s = phase + lam_hat * np.einsum("si,si->s", y, xi)
        h0, h1, branch, _ = staircase_values(mu1, delta_p, s)
        pm, pU = plateau_value(d_m, d_U, xi, B_hat, lam_hat, h0, h1)
        on_ramp = np.max(np.abs(y), axis=1) > plateau_half
        for r in np.flatnonzero(on_ramp):
            wave = cell_wave(d_m[r], d_U[r], xi[r], B_hat[r], lam_hat[r], mu1[r], delta_p[r], phase[r], theta)
            value_m, value_U = wave.evaluate_normalized(y[r][None, :])
            pm[r], pU[r] = value_m[0], value_U[0]
        # The ramp value is added as a plain offset; the laminate weights stay.
        h0 = np.where(on_ramp, 0.0, h0)
        branch = np.where(on_ramp, 0, branch)
        ramp_waves += int(on_ramp.sum())

        off_m[todo] += pm - h0[:, None] * d_m
        off_U[todo] += pU - h0[:, None, None] * d_U
        alpha = np.clip(mu1 - h0, 0.0, 1.0)
        nu[todo, a] = alpha * pair
        nu[todo, b] = (1.0 - alpha) * pair
        depth[todo] += 1
        if ledger is not None:
            ledger.record(
                key[todo], on_ramp, d_m=d_m, d_U=d_U, xi=xi, B_hat=B_hat, lambda_hat=lam_hat,
                mu1=mu1, delta=delta_p, phase=phase, y=y, value_m=pm, value_U=pU,
            )

        # d/dy of (h_1 / lambda_hat) corr is h_0 corr (x) xi on a plateau.
        corr = plateau_value(d_m, d_U, xi, B_hat, lam_hat, np.zeros(todo.size), lam_hat)[1]
        slope[todo] += np.einsum("s,sij,sk->sijk", h0, corr, xi)

        child, child_key, cube = descend_cover(y, key[todo], phase, lam_hat, xi, mu1, delta_p, plateau_half)
        stop = (branch == 0) | (cube == 0)
        refining[todo[stop]] = False
        frozen[todo[stop]] = True
        go = ~stop
        moved = todo[go]
        position[moved] = child[go]
        key[moved] = child_key[go]
        # Kept in log2: nested sides underflow after a few stages.
        log2_side[moved] -= cube[go]
        slope[moved] *= (2.0 ** -cube[go].astype(float))[:, None, None, None]

    gamma = np.where(np.isfinite(gamma), gamma, 0.0)
    return LevelOutcome(
        weights=nu,
        offset_m=off_m,
        offset_U=off_U,
        log2_side=log2_side,
        depth=depth,
        gamma=gamma,
        frozen=frozen,
        position=position,
        key=key,
        slope_U=slope,
        min_lambda_hat=min_lambda,
        ramp_bound=ramp,
        ramp_waves=ramp_waves,
    )


def domain_distance(domain: np.ndarray, spacing: float) -> np.ndarray:
    """Distance from each sample to the complement of the domain; infinite on a full torus."""
    if np.all(domain):
        return np.full(domain.shape, np.inf)
    inside = ndimage.distance_transform_edt(domain) * spacing
    return np.where(domain, inside - 0.5 * spacing, 0.0)


def initial_sides(s: SubsolutionField, distance: np.ndarray) -> np.ndarray:
    """
    Stage-one cell sides: the grid spacing, capped so the cube stays inside the
    domain and the margin cannot vanish across the cell.
    """
    n = s.n
    margin = s.margin()
    grads = np.gradient(margin, s.spacing)
    grads = grads if isinstance(grads, (list, tuple)) else [grads]
    slope = np.sqrt(sum(g ** 2 for g in grads))
    lipschitz = np.where(slope > 0.0, margin / (4.0 * np.maximum(slope, 1e-300) * np.sqrt(n)), np.inf)
    whitney = 2.0 * distance / np.sqrt(n)
    side = np.minimum.reduce([np.full(margin.shape, s.spacing), whitney, np.maximum(lipschitz, 0.0)])
    return side


class ConvexIntegrationDriver:
    """Runs refinement stages on one subsolution and records a report per stage."""

    def __init__(self, config: Optional[IterationConfig] = None, cache: Optional[DecompositionCache] = None):
        self.config = config or IterationConfig()
        self.cache = cache or DecompositionCache()
        self.logger = setup_logging()
        self.last_error: Optional[WildflowError] = None
        self._field: Optional[SubsolutionField] = None
        self._index: Optional[np.ndarray] = None
        self._laminate: Optional[LaminateState] = None
        self._decomposed: Optional[np.ndarray] = None
        self._report_mask: Optional[np.ndarray] = None
        self._uncovered = 0.0
        self._diameter = 0.0
        self._base: Optional[SubsolutionField] = None
        self.ledger = WaveLedger()

    def prepare(self, s: SubsolutionField) -> None:
        """Pick the refined samples and their stage-one cells."""
        n = s.n
        flat = s.shape
        distance = domain_distance(s.domain, s.spacing)
        sides = initial_sides(s, distance)
        eligible = s.domain & (s.margin() > self.config.margin_floor) & (sides > 0.0)
        index = np.flatnonzero(eligible.ravel())
        width = ambient_dimension(n) + 1
        count = index.size
        rho = s.rho.ravel()[index]
        q = np.broadcast_to(s.q, flat).ravel()[index]
        unit = np.zeros((count, width, n))
        unit[:, :, 0] = 1.0
        self._laminate = LaminateState(
            rho=rho,
            q=q,
            weights=np.zeros((count, width)),
            unit=unit,
            offset_m=np.zeros((count, n)),
            offset_U=np.zeros((count, n, n)),
            log2_side=np.log2(sides.ravel()[index]),
            frozen=np.zeros(count, dtype=bool),
            position=np.zeros((count, n)),
            key=cell_keys(np.uint64(self.config.seed), index),
            slope_U=np.zeros((count, n, n, n)),
        )
        self._decomposed = np.zeros(count, dtype=bool)
        self._index = index
        self._field = s
        self._base = s if s.base is None else s.base
        self.ledger = WaveLedger(prior=s.wave_audit)
        if self.config.exhaustion_radius > 0.0:
            self._report_mask = s.domain & (distance > self.config.exhaustion_radius)
        else:
            self._report_mask = s.domain
        uncovered = float(np.sum(s.domain) * s.cell_volume - np.sum(sides.ravel()[index] ** n))
        self._uncovered = max(uncovered, 0.0)
        self._diameter = k_diameter_bound(s.rho, s.q, n)
        self.logger.info(
            "Prepared %d of %d samples for refinement (uncovered measure %.3e)",
            count, int(np.sum(s.domain)), max(uncovered, 0.0),
        )

    def _decompose(self, rows: np.ndarray, m: np.ndarray, U: np.ndarray) -> None:
        lam = self._laminate
        todo = rows[~self._decomposed[rows]]
        if todo.size == 0:
            return
        weights, unit = decompose_samples(lam.rho[todo], lam.q[todo], m[todo], U[todo], self.config.seed, self.cache)
        lam.weights[todo] = weights
        lam.unit[todo] = unit
        bm, bU = _subset(lam, todo).barycenter()
        lam.offset_m[todo] = m[todo] - bm
        lam.offset_U[todo] = U[todo] - bU
        self._decomposed[todo] = True

    def refine(self, s: SubsolutionField, target: float, stage: int) -> Tuple[SubsolutionField, Dict[str, float]]:
        """One stage: bring the defect integral on the report domain below target."""
        if self._laminate is None or self._field is not s:
            self.prepare(s)
        lam = self._laminate
        index = self._index
        n = s.n
        volume = s.cell_volume
        m_flat = s.m.reshape(-1, n)
        U_flat = s.U.reshape(-1, n, n)
        m_now, U_now = m_flat[index], U_flat[index]

        defect_now = s.defect().ravel()
        report = self._report_mask.ravel()
        refined = np.zeros(defect_now.shape, dtype=bool)
        refined[index] = True
        outside = float(np.sum(defect_now[report & ~refined]) * volume)
        counted = report[index] & ~lam.frozen
        room = target - outside - float(np.sum(defect_now[index][report[index] & lam.frozen]) * volume)
        if room <= 0.0:
            raise MarginExhausted(
                f"defect {outside:.3e} outside the refined set already exceeds the stage target {target:.3e}"
            )
        budget = 0.9 * room / (max(int(counted.sum()), 1) * volume)
        if self._uncovered > target / (4.0 * self._diameter):
            self.logger.warning(
                "Cells leave %.3e of the domain uncovered, above eps/(4M) = %.3e",
                self._uncovered, target / (4.0 * self._diameter),
            )

        rows = np.flatnonzero(~lam.frozen & (defect_now[index] > budget))
        if rows.size > self.config.cell_cap:
            raise ResourceLimit(f"{rows.size} cells exceed the cap of {self.config.cell_cap}")
        summary = {
            "cells": int(rows.size), "max_depth": 0, "min_lambda_hat": float("inf"), "ramp_bound": 0.0, "ramp_waves": 0,
        }
        if rows.size == 0:
            return s, summary

        self._decompose(rows, m_now, U_now)
        sub = _subset(lam, rows)
        delta = choose_delta(sub, budget)
        Zm, ZU = shrunk_k_points(sub, delta)
        outcome = laminate_levels(sub, Zm, ZU, s.B, self.config.lambda_start(stage), ledger=self.ledger)

        lam.weights[rows] = (1.0 - delta)[:, None] * outcome.weights + delta[:, None] * sub.weights
        lam.offset_m[rows] = outcome.offset_m
        lam.offset_U[rows] = outcome.offset_U
        lam.log2_side[rows] = outcome.log2_side
        lam.frozen[rows] = outcome.frozen
        lam.position[rows] = outcome.position
        lam.key[rows] = outcome.key
        lam.slope_U[rows] = outcome.slope_U

        new_m, new_U = _subset(lam, rows).state()
        m_next = m_flat.copy()
        U_next = U_flat.copy()
        m_next[index[rows]] = new_m
        U_next[index[rows]] = new_U
        result = replace(
            s.with_state(m_next.reshape(s.m.shape), U_next.reshape(s.U.shape)),
            base=self._base,
            wave_audit=partial(self.ledger.residual, len(self.ledger.rows)),
        )
        self._field = result
        summary.update(
            max_depth=int(outcome.depth.max()),
            min_lambda_hat=outcome.min_lambda_hat,
            ramp_bound=outcome.ramp_bound,
            ramp_waves=outcome.ramp_waves,
        )
        return result, summary

    def run(
        self,
        s0: SubsolutionField,
        on_stage: Optional[Callable[[int, SubsolutionField, DefectReport], None]] = None,
    ) -> Tuple[SubsolutionField, List[DefectReport]]:
        config = self.config
        s = s0
        reports: List[DefectReport] = []
        self.last_error = None
        self.prepare(s)
        mask = self._report_mask
        current = s.defect_integral(mask)
        self.logger.info("Initial defect integral %.6e", current)
        if current < config.stop_defect_tol:
            return s, reports

        for stage in range(1, config.max_stages + 1):
            started = time.perf_counter()
            target = min(config.eps_schedule(stage), 0.5 * current)
            try:
                nxt, summary = self.refine(s, target, stage)
            except WildflowError as exc:
                self.last_error = exc
                self.logger.error("Stage %d stopped: %s", stage, exc)
                break
            diff_m = nxt.m - s.m
            diff_U = nxt.U - s.U
            increment = float(np.sqrt((np.sum(diff_m ** 2) + np.sum(diff_U ** 2)) * s.cell_volume))
            s = nxt
            previous, current = current, s.defect_integral(mask)
            margins = s.margin()[s.domain]
            report = DefectReport(
                stage=stage,
                defect_integral=current,
                l2_increment=increment,
                margin_min=float(margins.min()) if margins.size else 0.0,
                energy_error=s.energy_error(mask),
                wall_seconds=time.perf_counter() - started if config.record_wall_time else 0.0,
                target=target,
                cells=summary["cells"],
                max_depth=summary["max_depth"],
                min_lambda_hat=summary["min_lambda_hat"],
                ramp_bound=summary["ramp_bound"],
                frozen=int(self._laminate.frozen.sum()),
                ramp_waves=summary["ramp_waves"],
            )
            reports.append(report)
            if on_stage is not None:
                on_stage(stage, s, report)
            self.logger.info(
                "Stage %s: defect %.3e -> %.3e (target %.3e), increment %.3e, cells %d, depth %d",
                stage, previous, current, target, increment, report.cells, report.max_depth,
            )
            if current > target * (1.0 + 1e-9):
                self.logger.warning("Stage %d missed its target: %.6e > %.6e", stage, current, target)
            if current < config.stop_defect_tol:
                break
        return s, reports


def refine_subsolution(
    s: SubsolutionField,
    eps: float,
    seed: int = DEFAULT_SEED,
    cache: Optional[DecompositionCache] = None,
) -> SubsolutionField:
    """A single stage with target eps on the domain of s."""
    if eps <= 0.0:
        raise InvalidParams("eps must be positive")
    driver = ConvexIntegrationDriver(IterationConfig(seed=seed, max_stages=1), cache=cache)
    refined, _ = driver.refine(s, eps, 1)
    return refined


def run_iteration(
    s0: SubsolutionField,
    config: Optional[IterationConfig] = None,
) -> Tuple[SubsolutionField, List[DefectReport]]:
    return ConvexIntegrationDriver(config).run(s0)


@dataclass(frozen=True)
class Cube:
    center: np.ndarray
    side: float

    def __post_init__(self) -> None:
        if self.side <= 0.0:
            raise InvalidParams("cube side must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))

    @property
    def volume(self) -> float:
        return self.side ** len(self.center)

    def grid_points(self, resolution: int) -> np.ndarray:
        axes = [c - 0.5 * self.side + (np.arange(resolution) + 0.5) * self.side / resolution for c in self.center]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(self.center))


@dataclass
class CellRefinement:
    """Perturbation of a constant state on one cube, level one as an exact wave."""

    params: ConstraintParams
    state: FlowState
    cell: Cube
    wave: Optional[LocalizedWave]
    laminate: Optional[LaminateState]
    shrunk: Optional[Tuple[np.ndarray, np.ndarray]]
    delta: float
    gamma: float
    eps: float
    seed: int
    pair: Tuple[int, int] = (0, 1)
    key: int = 0

    @property
    def identity(self) -> bool:
        return self.wave is None

    def perturbation(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = self.state.n
        if self.identity:
            return np.zeros((len(x), n)), np.zeros((len(x), n, n))
        wave = self.wave
        m, U = wave.evaluate(x)
        y = wave.cutoff.normalized(x)
        plateau_half = wave.cutoff.plateau_half_width
        room = plateau_half - np.max(np.abs(y), axis=1)
        mu1 = wave.profile.mu1
        h0, _, branch, _ = staircase_values(mu1, wave.profile.delta, wave.phase_at(x))
        inside = (room > 0.0) & (branch != 0)
        inside &= wave.cutoff.contains(x)
        if not np.any(inside):
            return m, U

        rows = np.flatnonzero(inside)
        count = rows.size
        xi = wave.direction.xi
        child, child_key, cube = descend_cover(
            y[rows],
            np.full(count, self.key, dtype=np.uint64),
            np.full(count, wave.phase),
            np.full(count, wave.lambda_hat),
            np.repeat(xi[None, :], count, axis=0),
            np.full(count, mu1),
            np.full(count, wave.profile.delta),
            plateau_half,
        )
        covered = cube > 0
        if not np.any(covered):
            return m, U
        rows, child, child_key, cube = rows[covered], child[covered], child_key[covered], cube[covered]
        count = rows.size
        h0_rows = h0[rows]

        base = self.laminate
        nu = np.repeat(base.weights, count, axis=0)
        sub_a, sub_b = self.pair
        pair = nu[:, sub_a] + nu[:, sub_b]
        alpha = np.clip(mu1 - h0_rows, 0.0, 1.0)
        nu[:, sub_a] = alpha * pair
        nu[:, sub_b] = (1.0 - alpha) * pair
        Zm = np.repeat(self.shrunk[0], count, axis=0)
        ZU = np.repeat(self.shrunk[1], count, axis=0)
        here_m = self.state.m + m[rows]
        here_U = self.state.U.entries + U[rows]
        off_m = here_m - np.einsum("sp,spi->si", nu, Zm)
        off_U = here_U - np.einsum("sp,spij->sij", nu, ZU)
        corr = plateau_value(
            wave.direction.n_bar, wave.direction.V_bar.entries, xi, wave.B_hat,
            np.array(wave.lambda_hat), np.array(0.0), np.array(wave.lambda_hat),
        )[1]
        scale = h0_rows * 2.0 ** -cube.astype(float)
        points = LaminateState(
            rho=np.full(count, self.params.rho),
            q=np.full(count, self.params.q),
            weights=nu,
            unit=np.repeat(base.unit, count, axis=0),
            offset_m=off_m,
            offset_U=off_U,
            log2_side=np.log2(wave.cutoff.side) - cube,
            frozen=np.zeros(count, dtype=bool),
            position=child,
            key=child_key,
            slope_U=scale[:, None, None, None] * np.einsum("ij,k->ijk", corr, xi)[None],
        )
        outcome = laminate_levels(points, Zm, ZU, wave.B, wave.lambda_hat, wave.cutoff.theta, first_level=2)
        final_m = np.einsum("sp,spi->si", outcome.weights, Zm) + outcome.offset_m
        final_U = np.einsum("sp,spij->sij", outcome.weights, ZU) + outcome.offset_U
        m[rows] = final_m - self.state.m
        U[rows] = final_U - self.state.U.entries
        return m, U

    def cell_average_defect(self, resolution: int = 16) -> float:
        x = self.cell.grid_points(resolution)
        m, U = self.perturbation(x)
        values = defect_values(
            np.full(len(x), self.params.rho),
            np.full(len(x), self.params.q),
            self.state.m + m,
            self.state.U.entries + U,
        )
        return float(np.mean(values))


def constant_cell_step(
    p: ConstraintParams,
    w: FlowState,
    cell: Cube,
    eps: float,
    seed: int = DEFAULT_SEED,
    theta: float = CUTOFF_THETA,
) -> CellRefinement:
    """
    Refine a constant strict state on one cube so the cell-averaged defect drops below eps.

    Raises MarginExhausted when w is not strictly inside the hull and
    ResourceLimit when no admissible wave frequency exists.
    """
    if eps <= 0.0:
        raise InvalidParams("eps must be positive")
    n = w.n
    if len(cell.center) != n:
        raise InvalidParams("cell dimension does not match the state")
    margin = float(hull_margin(p.rho, p.q, w.m, w.U.entries))
    if margin <= 0.0:
        raise MarginExhausted("state is not strictly inside the hull")
    current = float(defect_values(p.rho, p.q, w.m, w.U.entries))
    if current <= eps:
        gamma = float(hull_box_radius(p.rho, np.linalg.norm(w.m), n, 0.5 * margin))
        return CellRefinement(p, w, cell, None, None, None, 0.0, gamma, eps, seed)

    decomposition = caratheodory_decompose(p, w, seed=seed)
    width = ambient_dimension(n) + 1
    weights = np.zeros((1, width))
    unit = np.zeros((1, width, n))
    unit[:, :, 0] = 1.0
    size = len(decomposition.weights)
    weights[0, :size] = decomposition.weights
    unit[0, :size] = decomposition.unit_momenta
    lam = LaminateState(
        rho=np.array([p.rho]),
        q=np.array([p.q]),
        weights=weights,
        unit=unit,
        offset_m=np.zeros((1, n)),
        offset_U=np.zeros((1, n, n)),
        log2_side=np.array([np.log2(cell.side)]),
        frozen=np.zeros(1, dtype=bool),
        position=np.zeros((1, n)),
        key=cell_keys(np.uint64(seed), [0]),
        slope_U=np.zeros((1, n, n, n)),
    )
    bm, bU = lam.barycenter()
    lam.offset_m[:] = w.m - bm
    lam.offset_U[:] = w.U.entries - bU
    if size < 2:
        gamma = float(hull_box_radius(p.rho, np.linalg.norm(w.m), n, 0.5 * margin))
        return CellRefinement(p, w, cell, None, None, None, 0.0, gamma, eps, seed)

    delta = choose_delta(lam, 0.5 * eps)
    Zm, ZU = shrunk_k_points(lam, delta)

    # Level one as an exact wave on the whole cell.
    a, b = 0, 1
    na, nb = weights[0, a], weights[0, b]
    pair = na + nb
    mu1 = na / pair
    diff_m = Zm[0, a] - Zm[0, b]
    diff_U = ZU[0, a] - ZU[0, b]
    d_m = -pair * diff_m
    d_U = -pair * diff_U
    xi, relative = wave_cone_vectors(d_m, d_U)
    if relative > 10.0 * WAVE_CONE_TOL:
        raise DecompositionFailed("difference of K points left the wave cone")
    direction = LambdaDirection(d_m, SymTraceFreeMatrix(sym_clean(d_U)), xi)

    cur_m = weights[0] @ Zm[0] + lam.offset_m[0]
    cur_U = np.einsum("p,pij->ij", weights[0], ZU[0]) + lam.offset_U[0]
    nodes_m = np.stack([cur_m, cur_m + nb * diff_m, cur_m - na * diff_m])
    nodes_U = np.stack([cur_U, cur_U + nb * diff_U, cur_U - na * diff_U])
    node_margin = float(np.min(hull_margin(np.full(3, p.rho), np.full(3, p.q), nodes_m, nodes_U)))
    if node_margin <= 0.0:
        raise MarginExhausted("laminate node left the hull at level 1")
    gamma = float(hull_box_radius(p.rho, float(np.linalg.norm(nodes_m, axis=1).max()), n, 0.5 * node_margin))

    B = np.zeros((n, n))
    entry = np.array([max(np.abs(d_m).max(), np.abs(d_U).max())])
    lam_hat = float(lambda_hats(n, theta, entry, np.zeros(1), np.array([0.5 * gamma]), LAMBDA_HAT_START)[0][0])
    key = int(lam.key[0])
    phase = float(cell_uniform(cell_keys(lam.key[0], PHASE_TAG)))
    profile = build_staircase(mu1, PROFILE_DELTA_FRACTION * min(mu1, 1.0 - mu1))
    cutoff = build_cutoff(cell.center, cell.side, theta)
    wave = build_localized_wave(direction, lam_hat / cell.side, cutoff, profile, B=B, phase=phase)

    refinement = CellRefinement(
        p, w, cell, wave, lam, (Zm, ZU), float(delta[0]), gamma, eps, seed, pair=(a, b), key=key
    )
    nodes = cell.grid_points(8)
    inside = nodes[cutoff.contains(nodes)]
    if inside.size:
        refinement.gamma = min(gamma, _sampled_gamma(refinement, inside))
    return refinement


def sym_clean(U: np.ndarray) -> np.ndarray:
    U = 0.5 * (U + U.T)
    return U - np.trace(U) / U.shape[0] * np.eye(U.shape[0])


def _sampled_gamma(refinement: CellRefinement, points: np.ndarray) -> float:
    """Smallest box radius the deeper levels keep at the sampled points."""
    m, U = refinement.perturbation(points)
    p = refinement.params
    n = refinement.state.n
    states_m = refinement.state.m + m
    states_U = refinement.state.U.entries + U
    margins = hull_margin(np.full(len(points), p.rho), np.full(len(points), p.q), states_m, states_U)
    norms = np.linalg.norm(states_m, axis=1)
    radii = hull_box_radius(np.full(len(points), p.rho), norms, n, 0.5 * margins)
    return float(np.min(radii))


@dataclass(frozen=True)
class EnergyPump:
    measured: float
    floor: float
    constant: float
    half_length_m: float

    @property
    def certified(self) -> bool:
        return self.measured >= self.floor


def householder_to_last_axis(xi: np.ndarray) -> np.ndarray:
    """Reflection R with R xi = e_n."""
    n = len(xi)
    target = np.zeros(n)
    target[-1] = 1.0
    v = xi - target
    norm = float(v @ v)
    if norm < 1e-28:
        return np.eye(n)
    return np.eye(n) - 2.0 * np.outer(v, v) / norm


def axis_aligned_direction(direction: LambdaDirection) -> LambdaDirection:
    """The same wave-cone direction rotated so that its wavevector is e_n."""
    R = householder_to_last_axis(direction.xi)
    xi = np.zeros(direction.n)
    xi[-1] = 1.0
    return LambdaDirection(R @ direction.n_bar, SymTraceFreeMatrix(sym_clean(R @ direction.V_bar.entries @ R.T)), xi)


def energy_pump_check(
    p: ConstraintParams,
    w: FlowState,
    cell: Cube,
    k: int = 2,
    seed: int = 0,
    cache: Optional[DecompositionCache] = None,
) -> EnergyPump:
    """
    Momentum energy that one admissible segment pumps into a cell.

    The segment wave is rotated so its wavevector is a coordinate axis, tiled
    at level k and integrated exactly. The floor is half the squared certified
    half-length times the cell volume.
    """
    n = w.n
    margin = float(hull_margin(p.rho, p.q, w.m, w.U.entries))
    if margin <= 0.0:
        return EnergyPump(measured=0.0, floor=0.0, constant=0.0, half_length_m=0.0)
    segment = admissible_segment(p, w, seed=seed, cache=cache)
    tiling = replicate_tiling(axis_aligned_direction(segment.direction), k)
    measured = cell.volume * tiling.momentum_energy()
    target = n * p.rho * p.q
    constant = (target - float(w.m @ w.m)) ** 2 / (32.0 * ambient_dimension(n) ** 2 * target)
    bound = segment_length_bound(p, w)
    floor = 0.5 * (segment.shrink * bound) ** 2 * cell.volume
    result = EnergyPump(measured=measured, floor=floor, constant=constant, half_length_m=segment.half_length_m)
    if not result.certified:
        logger.warning("Pumped energy %.3e below the floor %.3e", measured, floor)
    return result
