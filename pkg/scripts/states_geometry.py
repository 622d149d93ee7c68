"""
Pointwise geometry of the constraint set K_{rho,q} and its convex hull.

States are pairs (m, U) of a momentum vector and a symmetric trace-free stress
matrix. All numeric helpers accept batched arrays: vectors of shape (..., n)
and matrices of shape (..., n, n), broadcasting against (...,) arrays for
rho and q.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple
import os
import sys

import numpy as np

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from constants import (
    DISTANCE_MAX_ITER,
    DISTANCE_STARTS,
    DISTANCE_TOL,
    MIN_DIMENSION,
    TINY_DENSITY,
    TRACE_TOL,
)
from errors import InvalidDensity, InvalidInput, InvalidParams, NonConvergence


@dataclass(frozen=True)
class SymTraceFreeMatrix:
    entries: np.ndarray

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError("SymTraceFreeMatrix needs a square matrix")
        if not np.all(np.isfinite(entries)):
            raise InvalidInput("non-finite matrix entries")
        upper = np.triu(entries)
        entries = upper + np.triu(entries, 1).T
        trace = np.trace(entries)
        if abs(trace) > TRACE_TOL * (1.0 + np.linalg.norm(entries)):
            raise InvalidInput(f"matrix is not trace-free (trace={trace:.3e})")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def project(cls, matrix: np.ndarray) -> "SymTraceFreeMatrix":
        """Symmetric trace-free part of an arbitrary square matrix."""
        return cls(sym_trace_free_part(np.asarray(matrix, dtype=float)))

    @classmethod
    def zeros(cls, n: int) -> "SymTraceFreeMatrix":
        return cls(np.zeros((n, n)))


@dataclass(frozen=True)
class FlowState:
    m: np.ndarray
    U: SymTraceFreeMatrix

    def __post_init__(self) -> None:
        m = np.array(self.m, dtype=float)
        U = self.U if isinstance(self.U, SymTraceFreeMatrix) else SymTraceFreeMatrix(self.U)
        if m.shape != (U.n,):
            raise ValueError(f"momentum of shape {m.shape} does not match a {U.n}x{U.n} stress")
        if not np.all(np.isfinite(m)):
            raise InvalidInput("non-finite momentum")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "U", U)

    @property
    def n(self) -> int:
        return self.U.n

    @classmethod
    def zero(cls, n: int) -> "FlowState":
        return cls(np.zeros(n), SymTraceFreeMatrix.zeros(n))

    def coordinates(self) -> np.ndarray:
        return state_coordinates(self.m, self.U.entries)

    def __add__(self, other: "FlowState") -> "FlowState":
        return FlowState(self.m + other.m, SymTraceFreeMatrix(self.U.entries + other.U.entries))

    def __sub__(self, other: "FlowState") -> "FlowState":
        return FlowState(self.m - other.m, SymTraceFreeMatrix(self.U.entries - other.U.entries))

    def scaled(self, factor: float) -> "FlowState":
        return FlowState(factor * self.m, SymTraceFreeMatrix(factor * self.U.entries))


@dataclass(frozen=True)
class ConstraintParams:
    rho: float
    q: float = 0.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.rho) and np.isfinite(self.q)):
            raise InvalidInput("non-finite constraint parameters")
        if self.rho <= TINY_DENSITY:
            raise InvalidDensity(f"density must be positive, got {self.rho!r}")
        if self.q < 0.0:
            raise InvalidInput(f"q must be non-negative, got {self.q!r}")


@dataclass(frozen=True)
class HullCertificate:
    e_value: float
    threshold: float
    margin: float
    min_radius: float

    @property
    def member(self) -> bool:
        return self.margin >= 0.0

    @property
    def strict(self) -> bool:
        return self.margin > 0.0


def ambient_dimension(n: int) -> int:
    """Dimension N of the (m, U) state space."""
    return n + n * (n + 1) // 2 - 1


def sym_trace_free_part(matrix: np.ndarray) -> np.ndarray:
    n = matrix.shape[-1]
    sym = 0.5 * (matrix + np.swapaxes(matrix, -1, -2))
    trace = np.trace(sym, axis1=-2, axis2=-1)
    return sym - (trace / n)[..., None, None] * np.eye(n)


def state_coordinates(m: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Flatten (m, U) to N coordinates: m, upper off-diagonals, first n-1 diagonals."""
    m = np.asarray(m, dtype=float)
    U = np.asarray(U, dtype=float)
    n = m.shape[-1]
    rows, cols = np.triu_indices(n, 1)
    diag = np.arange(n - 1)
    return np.concatenate([m, U[..., rows, cols], U[..., diag, diag]], axis=-1)


def state_from_coordinates(coords: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    coords = np.asarray(coords, dtype=float)
    batch = coords.shape[:-1]
    rows, cols = np.triu_indices(n, 1)
    n_off = rows.size
    m = coords[..., :n]
    U = np.zeros(batch + (n, n))
    U[..., rows, cols] = coords[..., n:n + n_off]
    U[..., cols, rows] = coords[..., n:n + n_off]
    diag = np.arange(n - 1)
    U[..., diag, diag] = coords[..., n + n_off:]
    U[..., n - 1, n - 1] = -coords[..., n + n_off:].sum(axis=-1)
    return m, U


def _check_rho(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if not np.all(np.isfinite(rho)):
        raise InvalidInput("non-finite density")
    if np.any(rho <= TINY_DENSITY):
        raise InvalidDensity(f"density must be positive, min={float(np.min(rho))!r}")
    return rho


def lambda_max(A) -> np.ndarray:
    """Largest eigenvalue of symmetric matrices (batched over leading axes)."""
    entries = A.entries if isinstance(A, SymTraceFreeMatrix) else np.asarray(A, dtype=float)
    if not np.all(np.isfinite(entries)):
        raise InvalidInput("non-finite matrix entries")
    values = np.linalg.eigvalsh(entries)[..., -1]
    return float(values) if values.ndim == 0 else values


def lambda_min(A) -> np.ndarray:
    entries = A.entries if isinstance(A, SymTraceFreeMatrix) else np.asarray(A, dtype=float)
    values = np.linalg.eigvalsh(entries)[..., 0]
    return float(values) if values.ndim == 0 else values


def k_stress(rho, m) -> np.ndarray:
    """The stress m (x) m / rho - |m|^2/(n rho) I paired with m on K."""
    rho = np.asarray(rho, dtype=float)
    m = np.asarray(m, dtype=float)
    n = m.shape[-1]
    outer = m[..., :, None] * m[..., None, :]
    sq = np.einsum("...i,...i->...", m, m)
    return (outer - (sq / n)[..., None, None] * np.eye(n)) / rho[..., None, None]


def relaxation_e(rho, m, U) -> np.ndarray:
    """(n/2) lambda_max(m (x) m / rho - U)."""
    rho = _check_rho(rho)
    m = np.asarray(m, dtype=float)
    U = U.entries if isinstance(U, SymTraceFreeMatrix) else np.asarray(U, dtype=float)
    n = m.shape[-1]
    outer = m[..., :, None] * m[..., None, :] / rho[..., None, None]
    return 0.5 * n * lambda_max(outer - U)


def hull_margin(rho, q, m, U) -> np.ndarray:
    """Batched (n/2) q - e; positive strictly inside the hull."""
    m = np.asarray(m, dtype=float)
    return 0.5 * m.shape[-1] * np.asarray(q, dtype=float) - relaxation_e(rho, m, U)


def hull_membership(p: ConstraintParams, w: FlowState) -> HullCertificate:
    e_value = float(relaxation_e(p.rho, w.m, w.U))
    threshold = 0.5 * w.n * p.q
    return HullCertificate(
        e_value=e_value,
        threshold=threshold,
        margin=threshold - e_value,
        min_radius=float(np.sqrt(2.0 * p.rho * max(e_value, 0.0))),
    )


def defect_values(rho, q, m, U) -> np.ndarray:
    """Batched surrogate distance to K_{rho,q}."""
    rho = _check_rho(rho)
    q = np.asarray(q, dtype=float)
    m = np.asarray(m, dtype=float)
    U = np.asarray(U, dtype=float)
    n = m.shape[-1]
    target = n * rho * q
    sq = np.einsum("...i,...i->...", m, m)
    root = np.sqrt(target)
    safe_root = np.where(root > 0.0, root, 1.0)
    radial = np.where(root > 0.0, np.abs(target - sq) / safe_root, np.sqrt(sq))
    stress = np.linalg.norm(U - k_stress(rho, m), axis=(-2, -1))
    return radial + stress


def defect(p: ConstraintParams, w: FlowState) -> float:
    return float(defect_values(p.rho, p.q, w.m, w.U.entries))


def normalize_state(rho, q, m, U) -> Tuple[np.ndarray, np.ndarray]:
    """Map (m, U) to the universal picture where K is (a, a(x)a - I/n) with |a| = 1."""
    rho = np.asarray(rho, dtype=float)
    q = np.asarray(q, dtype=float)
    n = np.asarray(m).shape[-1]
    scale_m = np.sqrt(n * rho * q)
    return np.asarray(m) / scale_m[..., None], np.asarray(U) / (n * q)[..., None, None]


def denormalize_state(rho, q, m_hat, U_hat) -> Tuple[np.ndarray, np.ndarray]:
    rho = np.asarray(rho, dtype=float)
    q = np.asarray(q, dtype=float)
    n = np.asarray(m_hat).shape[-1]
    scale_m = np.sqrt(n * rho * q)
    return np.asarray(m_hat) * scale_m[..., None], np.asarray(U_hat) * (n * q)[..., None, None]


def unit_k_point(a_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """K point of the normalized picture for unit momenta a_hat (batched)."""
    a_hat = np.asarray(a_hat, dtype=float)
    n = a_hat.shape[-1]
    return a_hat, a_hat[..., :, None] * a_hat[..., None, :] - np.eye(n) / n


def _distance_objective(a, m, U, rho) -> np.ndarray:
    stress = k_stress(np.full(a.shape[:-1], rho), a)
    return np.sum((m - a) ** 2, axis=-1) + np.sum((U - stress) ** 2, axis=(-2, -1))


def exact_distance_to_K(
    p: ConstraintParams,
    w: FlowState,
    seed: int = 0,
    starts: int = DISTANCE_STARTS,
    tol: float = DISTANCE_TOL,
    max_iter: int = DISTANCE_MAX_ITER,
) -> float:
    """
    Euclidean distance from w to K_{rho,q} by multi-start projected ascent.

    On the sphere |a| = sqrt(n rho q) the squared distance equals a constant minus
    2 m.a - 2 a^T U a / rho, so the iteration maximizes m.a + a^T M a with
    M = U/rho shifted to be positive semidefinite; each step is monotone.
    """
    n = w.n
    radius = np.sqrt(n * p.rho * p.q)
    m = w.m
    U = w.U.entries
    if radius == 0.0:
        return float(np.sqrt(_distance_objective(np.zeros((1, n)), m, U, p.rho)[0]))

    M = U / p.rho
    shifted = M - lambda_min(M) * np.eye(n)
    rng = np.random.Generator(np.random.Philox(seed))
    a = rng.standard_normal((starts, n))
    a *= radius / np.linalg.norm(a, axis=1, keepdims=True)

    def gain(points: np.ndarray) -> np.ndarray:
        return points @ m + np.einsum("si,ij,sj->s", points, shifted, points)

    value = gain(a)
    converged = np.zeros(starts, dtype=bool)
    scale = 1.0 + abs(radius * np.linalg.norm(m)) + radius ** 2 * np.linalg.norm(shifted)
    for _ in range(max_iter):
        grad = m[None, :] + 2.0 * a @ shifted
        norms = np.linalg.norm(grad, axis=1, keepdims=True)
        stalled = norms[:, 0] <= 1e-300
        step = np.where(stalled[:, None], a, radius * grad / np.where(stalled[:, None], 1.0, norms))
        new_value = gain(step)
        done = np.abs(new_value - value) <= tol * scale
        converged |= done
        a = np.where(converged[:, None], a, step)
        value = np.where(converged, value, new_value)
        if converged.all():
            break

    objective = _distance_objective(a, m, U, p.rho)
    if not converged.any():
        best = float(np.sqrt(max(objective.min(), 0.0)))
        raise NonConvergence("no start of the distance iteration converged", best_value=best)
    return float(np.sqrt(max(objective[converged].min(), 0.0)))


def operator_norm(U) -> np.ndarray:
    entries = U.entries if isinstance(U, SymTraceFreeMatrix) else np.asarray(U, dtype=float)
    values = np.linalg.eigvalsh(entries)
    return np.max(np.abs(values), axis=-1)


def check_dimension(n: int) -> None:
    if n < MIN_DIMENSION:
        raise InvalidParams(f"dimension must be at least {MIN_DIMENSION}, got {n}")


def random_states(
    rng: np.random.Generator,
    count: int,
    n: int,
    m_scale: float = 1.0,
    U_scale: float = 1.0,
    rho_range: Tuple[float, float] = (0.5, 2.0),
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded batch of (rho, m, U) samples for property checks."""
    rho = rng.uniform(*rho_range, size=count)
    m = m_scale * rng.standard_normal((count, n))
    U = sym_trace_free_part(U_scale * rng.standard_normal((count, n, n)))
    return rho, m, U


def k_point_state(p: ConstraintParams, a: np.ndarray) -> FlowState:
    a = np.asarray(a, dtype=float)
    return FlowState(a, SymTraceFreeMatrix(k_stress(np.asarray(p.rho), a)))


def hull_box_radius(rho, m_norm, n: int, budget):
    """
    Half-side gamma of a coordinate box around a state that changes e by at most budget.

    |delta e| <= (n/2) [ (2 |m| sqrt(n) g + n g^2) / rho + c_U g ] where c_U bounds
    the Frobenius norm of a stress whose coordinates are at most g. Batched;
    a non-positive budget gives 0.
    """
    rho = np.asarray(rho, dtype=float)
    m_norm = np.asarray(m_norm, dtype=float)
    budget = np.maximum(np.asarray(budget, dtype=float), 0.0)
    c_u = np.sqrt(n * (n - 1) + (n - 1) + (n - 1) ** 2)
    a = 0.5 * n * n / rho
    b = 0.5 * n * (2.0 * m_norm * np.sqrt(n) / rho + c_u)
    gamma = (-b + np.sqrt(b * b + 4.0 * a * budget)) / (2.0 * a)
    return float(gamma) if gamma.ndim == 0 else gamma
