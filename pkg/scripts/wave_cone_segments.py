"""
Wave cone membership, Caratheodory decompositions over K and admissible segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple
import os
import sys

import numpy as np
from scipy.optimize import linprog

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from constants import LP_ROUNDS, RECONSTRUCTION_TOL, WAVE_CONE_TOL, WEIGHT_SUM_TOL
from errors import DecompositionFailed, InvalidInput
from logging_utils import setup_logging
from states_geometry import (
    ConstraintParams,
    FlowState,
    SymTraceFreeMatrix,
    ambient_dimension,
    check_dimension,
    hull_margin,
    k_stress,
    normalize_state,
    state_coordinates,
    unit_k_point,
)


@dataclass(frozen=True)
class LambdaDirection:
    n_bar: np.ndarray
    V_bar: SymTraceFreeMatrix
    xi: np.ndarray

    def __post_init__(self) -> None:
        n_bar = np.array(self.n_bar, dtype=float)
        V_bar = self.V_bar if isinstance(self.V_bar, SymTraceFreeMatrix) else SymTraceFreeMatrix(self.V_bar)
        xi = np.array(self.xi, dtype=float)
        if abs(np.linalg.norm(xi) - 1.0) > 1e-12:
            raise InvalidInput("wavevector must be a unit vector")
        if abs(n_bar @ xi) > 10 * WAVE_CONE_TOL * (1.0 + np.linalg.norm(n_bar)):
            raise InvalidInput("momentum direction is not orthogonal to the wavevector")
        if np.linalg.norm(V_bar.entries @ xi) > 10 * WAVE_CONE_TOL * (1.0 + np.linalg.norm(V_bar.entries)):
            raise InvalidInput("stress direction does not annihilate the wavevector")
        for array in (n_bar, xi):
            array.setflags(write=False)
        object.__setattr__(self, "n_bar", n_bar)
        object.__setattr__(self, "V_bar", V_bar)
        object.__setattr__(self, "xi", xi)

    @property
    def n(self) -> int:
        return self.n_bar.shape[0]

    def scaled(self, factor: float) -> "LambdaDirection":
        return LambdaDirection(factor * self.n_bar, SymTraceFreeMatrix(factor * self.V_bar.entries), self.xi)

    def as_state(self) -> FlowState:
        return FlowState(self.n_bar, self.V_bar)

    def norm(self) -> float:
        return float(np.sqrt(self.n_bar @ self.n_bar + np.sum(self.V_bar.entries ** 2)))


@dataclass(frozen=True)
class CaratheodoryDecomposition:
    weights: np.ndarray
    momenta: np.ndarray
    reconstruction_residual: float
    params: ConstraintParams

    @property
    def unit_momenta(self) -> np.ndarray:
        n = self.momenta.shape[1]
        return self.momenta / np.sqrt(n * self.params.rho * self.params.q)

    def k_points(self) -> Tuple[FlowState, ...]:
        return tuple(
            FlowState(m, SymTraceFreeMatrix(k_stress(np.asarray(self.params.rho), m)))
            for m in self.momenta
        )


@dataclass(frozen=True)
class AdmissibleSegment:
    center: FlowState
    direction: LambdaDirection
    half_length_m: float
    interior_margin: float
    shrink: float
    length_bound: float
    unshrunk_length_m: float
    decomposition: CaratheodoryDecomposition

    @property
    def endpoints(self) -> Tuple[FlowState, FlowState]:
        step = self.direction.as_state()
        return self.center - step, self.center + step


@dataclass
class DecompositionCache:
    """Normalized decompositions keyed by a rounded normalized state."""

    decimals: int = 12
    entries: Dict[tuple, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def key(self, coords: np.ndarray, seed: int) -> tuple:
        return (seed,) + tuple(np.round(coords, self.decimals).tolist())


def wave_cone_vectors(n_bar: np.ndarray, V_bar: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Batched wave-cone search.

    Returns the right singular vector of the smallest singular value of the stacked
    (n+1) x n matrix [n_bar^T; V_bar] and that singular value relative to the scale.
    """
    n_bar = np.asarray(n_bar, dtype=float)
    V_bar = np.asarray(V_bar, dtype=float)
    stack = np.concatenate([n_bar[..., None, :], V_bar], axis=-2)
    _, s, vt = np.linalg.svd(stack)
    xi = vt[..., -1, :]
    pivot = np.take_along_axis(xi, np.argmax(np.abs(xi), axis=-1)[..., None], axis=-1)
    xi = xi * np.sign(pivot)
    scale = np.maximum(1.0, s[..., 0])
    return xi, s[..., -1] / scale


def wave_cone_test(n_bar: np.ndarray, V_bar) -> Optional[LambdaDirection]:
    n_bar = np.asarray(n_bar, dtype=float)
    entries = V_bar.entries if isinstance(V_bar, SymTraceFreeMatrix) else np.asarray(V_bar, dtype=float)
    check_dimension(n_bar.shape[0])
    xi, relative = wave_cone_vectors(n_bar, entries)
    if relative > WAVE_CONE_TOL:
        return None
    return LambdaDirection(n_bar, SymTraceFreeMatrix(entries), xi)


def _design_directions(n: int) -> np.ndarray:
    """Coordinate axes followed by (e_i +- e_j)/sqrt(2), truncated to N+1 directions."""
    directions = [np.eye(n)[i] for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            for sign in (1.0, -1.0):
                v = np.zeros(n)
                v[i] = 1.0
                v[j] = sign
                directions.append(v / np.sqrt(2.0))
    return np.array(directions[: ambient_dimension(n) + 1])


def _random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _unit_coordinates(a_hat: np.ndarray) -> np.ndarray:
    m, U = unit_k_point(a_hat)
    return state_coordinates(m, U)


def _prune_support(columns: np.ndarray, weights: np.ndarray, limit: int) -> np.ndarray:
    """Caratheodory reduction by stepping along nullspace vectors of [Z; 1]."""
    weights = weights.copy()
    while np.count_nonzero(weights) > limit:
        active = np.flatnonzero(weights)
        system = np.vstack([columns[:, active], np.ones(active.size)])
        _, _, vt = np.linalg.svd(system)
        null = vt[-1]
        if not np.any(null > 0):
            null = -null
        positive = null > 1e-15
        ratios = np.full(active.size, np.inf)
        ratios[positive] = weights[active][positive] / null[positive]
        k = int(np.argmin(ratios))
        weights[active] -= ratios[k] * null
        weights[active[k]] = 0.0
        weights[np.abs(weights) < 1e-16] = 0.0
        weights = np.clip(weights, 0.0, None)
    return weights


def _polish(columns: np.ndarray, weights: np.ndarray, target: np.ndarray) -> np.ndarray:
    active = np.flatnonzero(weights)
    system = np.vstack([columns[:, active], np.ones(active.size)])
    rhs = np.concatenate([target, [1.0]])
    solution, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    if solution.min() < -1e-12:
        return weights
    polished = np.zeros_like(weights)
    polished[active] = np.clip(solution, 0.0, None)
    return polished / polished.sum()


def decompose_normalized(
    m_hat: np.ndarray,
    U_hat: np.ndarray,
    seed: int = 0,
    candidate_support: Optional[np.ndarray] = None,
    rounds: int = LP_ROUNDS,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Weights and unit momenta reconstructing a normalized interior state.

    Returns (weights, unit momenta, residual) with at most N+1 active points.
    """
    n = m_hat.shape[0]
    check_dimension(n)
    dim = ambient_dimension(n)
    target = state_coordinates(m_hat, U_hat)
    rng = np.random.Generator(np.random.Philox(seed))
    base = _design_directions(n)
    directions = np.vstack([base, -base])

    for round_index in range(rounds):
        rotation = _random_rotation(rng, n)
        candidates = directions @ rotation.T
        if candidate_support is not None:
            candidates = np.vstack([np.asarray(candidate_support, dtype=float), candidates])
        columns = _unit_coordinates(candidates).T
        result = linprog(
            np.zeros(candidates.shape[0]),
            A_eq=np.vstack([columns, np.ones(candidates.shape[0])]),
            b_eq=np.concatenate([target, [1.0]]),
            bounds=(0.0, None),
            method="highs",
        )
        if result.status == 0:
            weights = np.where(result.x > 1e-14, result.x, 0.0)
            weights = weights / weights.sum()
            weights = _prune_support(columns, weights, dim + 1)
            weights = _polish(columns, weights, target)
            residual = float(np.linalg.norm(columns @ weights - target))
            if residual <= RECONSTRUCTION_TOL and abs(weights.sum() - 1.0) <= WEIGHT_SUM_TOL:
                active = np.flatnonzero(weights)
                return weights[active], candidates[active], residual
        extra = rng.standard_normal((directions.shape[0] // 2, n))
        extra /= np.linalg.norm(extra, axis=1, keepdims=True)
        directions = np.vstack([directions, extra, -extra])

    raise DecompositionFailed(
        f"no decomposition after {rounds} sampling rounds; shrink toward an interior point first"
    )


def caratheodory_decompose(
    p: ConstraintParams,
    w: FlowState,
    seed: int = 0,
    candidate_support: Optional[np.ndarray] = None,
    cache: Optional[DecompositionCache] = None,
) -> CaratheodoryDecomposition:
    n = w.n
    if hull_margin(p.rho, p.q, w.m, w.U.entries) <= 0.0:
        raise DecompositionFailed("state is not strictly inside the hull")
    m_hat, U_hat = normalize_state(np.asarray(p.rho), np.asarray(p.q), w.m, w.U.entries)

    key = None
    found = None
    if cache is not None:
        key = cache.key(state_coordinates(m_hat, U_hat), seed)
        found = cache.entries.get(key)
        if found is None:
            cache.misses += 1
        else:
            cache.hits += 1
    if found is None:
        weights, unit, _ = decompose_normalized(m_hat, U_hat, seed=seed, candidate_support=candidate_support)
        found = (weights, unit)
        if cache is not None:
            cache.entries[key] = found

    weights, unit = found
    momenta = unit * np.sqrt(n * p.rho * p.q)
    stresses = k_stress(np.full(len(weights), p.rho), momenta)
    m_rec = weights @ momenta
    U_rec = np.einsum("k,kij->ij", weights, stresses)
    residual = float(np.sqrt(np.sum((m_rec - w.m) ** 2) + np.sum((U_rec - w.U.entries) ** 2)))
    return CaratheodoryDecomposition(
        weights=np.array(weights),
        momenta=momenta,
        reconstruction_residual=residual,
        params=p,
    )


def segment_length_bound(p: ConstraintParams, w: FlowState) -> float:
    """Lower bound (n rho q - |m|^2) / (4 N sqrt(n rho q)) on the momentum length."""
    n = w.n
    target = n * p.rho * p.q
    return (target - float(w.m @ w.m)) / (4.0 * ambient_dimension(n) * np.sqrt(target))


def admissible_segment(
    p: ConstraintParams,
    w: FlowState,
    seed: int = 0,
    cache: Optional[DecompositionCache] = None,
) -> AdmissibleSegment:
    logger = setup_logging()
    decomposition = caratheodory_decompose(p, w, seed=seed, cache=cache)
    order = np.argsort(-decomposition.weights, kind="stable")
    weights = decomposition.weights[order]
    momenta = decomposition.momenta[order]
    if len(weights) < 2:
        raise DecompositionFailed("interior state decomposed onto a single K point")

    spread = weights[1:] * np.linalg.norm(momenta[1:] - momenta[0], axis=1)
    j = 1 + int(np.argmax(spread))
    half = 0.5 * weights[j]
    a, b = momenta[j], momenta[0]
    n_bar = half * (a - b)
    V_bar = half * (np.outer(a, a) - np.outer(b, b)) / p.rho
    direction = wave_cone_test(n_bar, V_bar)
    if direction is None:
        raise DecompositionFailed("difference of K points left the wave cone")

    length = float(np.linalg.norm(n_bar))
    bound = segment_length_bound(p, w)
    if length < bound * (1.0 - 1e-9):
        logger.warning("Segment length %.3e below certified bound %.3e", length, bound)

    center_margin = float(hull_margin(p.rho, p.q, w.m, w.U.entries))

    def endpoint_margin(t: float) -> float:
        step_m = t * direction.n_bar
        step_U = t * direction.V_bar.entries
        margins = hull_margin(
            np.full(2, p.rho),
            np.full(2, p.q),
            np.stack([w.m + step_m, w.m - step_m]),
            np.stack([w.U.entries + step_U, w.U.entries - step_U]),
        )
        return float(margins.min())

    shrink = 1.0
    if endpoint_margin(1.0) < 0.5 * center_margin:
        lo, hi = 0.5, 1.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if endpoint_margin(mid) >= 0.5 * center_margin:
                lo = mid
            else:
                hi = mid
        shrink = lo

    scaled = direction.scaled(shrink)
    return AdmissibleSegment(
        center=w,
        direction=scaled,
        half_length_m=shrink * length,
        interior_margin=endpoint_margin(shrink),
        shrink=shrink,
        length_bound=bound,
        unshrunk_length_m=length,
        decomposition=decomposition,
    )
