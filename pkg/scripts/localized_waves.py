"""
Closed-form localized plane waves.

A wave lives on a cube cell and is written in normalized cell coordinates
y = (x - center) / side. Every field component is a finite sum of terms

    c * lambda_hat**(-j) * h_j(lambda_hat * xi.y + phase) * d^beta phi(y)

where h_j is the staircase hierarchy and phi the tensor-product cutoff. The
expressions are differentiated symbolically, so supports, means and the linear
constraints are exact up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import gamma as gamma_fn
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple
import itertools
import os
import sys

import numpy as np
from numpy.polynomial import Polynomial
from scipy import special

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from constants import CUTOFF_THETA, LAMBDA_HAT_CAP, LAMBDA_HAT_START, SMOOTHSTEP_ORDER
from errors import InvalidParams, MissingDerivatives, ResourceLimit
from states_geometry import FlowState
from wave_cone_segments import LambdaDirection

STAIRCASE_LEVELS = 6
NEGATIVE_LEVELS = 8
CUTOFF_DERIVATIVES = 9


@lru_cache(maxsize=None)
def smoothstep(order: int = SMOOTHSTEP_ORDER) -> Polynomial:
    """Odd-symmetric transition on [-1, 1]: 0 at -1, 1 at +1, flat to the given order."""
    kernel = Polynomial([1.0, 0.0, -1.0]) ** order
    primitive = kernel.integ()
    return (primitive - primitive(-1.0)) / (primitive(1.0) - primitive(-1.0))


@lru_cache(maxsize=None)
def smoothstep_integral(order: int = SMOOTHSTEP_ORDER) -> Polynomial:
    """Antiderivative of the smoothstep vanishing at -1."""
    primitive = smoothstep(order).integ()
    return primitive - primitive(-1.0)


@lru_cache(maxsize=None)
def gauss_legendre(order: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = special.roots_legendre(order)
    return nodes, weights


def panel_quadrature(breaks: np.ndarray, order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on every panel between consecutive breaks."""
    breaks = np.unique(np.asarray(breaks, dtype=float))
    nodes, weights = gauss_legendre(order)
    left = breaks[:-1, None]
    half = 0.5 * np.diff(breaks)[:, None]
    x = left + half * (nodes[None, :] + 1.0)
    w = half * weights[None, :]
    return x.ravel(), w.ravel()


@dataclass(frozen=True)
class PiecewisePolynomial:
    """Polynomial pieces, each written in the local variable v in [-1, 1] of its panel."""

    breaks: np.ndarray
    pieces: Tuple[Polynomial, ...]
    periodic: bool = False

    def _locate(self, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        start, stop = self.breaks[0], self.breaks[-1]
        if self.periodic:
            s = start + np.mod(s - start, stop - start)
        index = np.clip(np.searchsorted(self.breaks, s, side="right") - 1, 0, len(self.pieces) - 1)
        return s, index

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        s_loc, index = self._locate(s)
        out = np.zeros_like(s_loc)
        for k, piece in enumerate(self.pieces):
            mask = index == k
            if not np.any(mask):
                continue
            a, b = self.breaks[k], self.breaks[k + 1]
            v = (2.0 * s_loc[mask] - a - b) / (b - a)
            out[mask] = piece(v)
        if not self.periodic:
            outside = (s < self.breaks[0]) | (s > self.breaks[-1])
            out[outside] = 0.0
        return out

    def derivative(self) -> "PiecewisePolynomial":
        pieces = tuple(
            piece.deriv() * (2.0 / (b - a))
            for piece, a, b in zip(self.pieces, self.breaks[:-1], self.breaks[1:])
        )
        return PiecewisePolynomial(self.breaks, pieces, self.periodic)

    def integral(self) -> float:
        total = 0.0
        for piece, a, b in zip(self.pieces, self.breaks[:-1], self.breaks[1:]):
            primitive = piece.integ()
            total += 0.5 * (b - a) * (primitive(1.0) - primitive(-1.0))
        return total

    def antiderivative(self, mean_zero: bool = True) -> "PiecewisePolynomial":
        constant = 0.0
        pieces = []
        for piece, a, b in zip(self.pieces, self.breaks[:-1], self.breaks[1:]):
            primitive = piece.integ() * (0.5 * (b - a))
            primitive = primitive - primitive(-1.0) + constant
            constant = primitive(1.0)
            pieces.append(primitive)
        result = PiecewisePolynomial(self.breaks, tuple(pieces), self.periodic)
        if mean_zero:
            shift = result.integral() / (self.breaks[-1] - self.breaks[0])
            result = PiecewisePolynomial(self.breaks, tuple(p - shift for p in pieces), self.periodic)
        return result

    def sup_norm(self, samples: int = 513) -> float:
        v = np.linspace(-1.0, 1.0, samples)
        return float(max(np.max(np.abs(piece(v))) for piece in self.pieces))


def _compose_linear(poly: Polynomial, offset: float, slope: float) -> Polynomial:
    return poly(Polynomial([offset, slope]))


@dataclass(frozen=True)
class StaircaseProfile:
    mu1: float
    delta: float
    levels: Dict[int, PiecewisePolynomial]
    sup_norms: Dict[int, float]

    @property
    def mu2(self) -> float:
        return 1.0 - self.mu1

    def evaluate(self, k: int, s) -> np.ndarray:
        """h_k for k >= 0; for k < 0 the (-k)-th derivative of h_0."""
        if k not in self.levels:
            raise MissingDerivatives(f"staircase level {k} is not available")
        return self.levels[k](s)

    def breakpoints(self) -> np.ndarray:
        return self.levels[0].breaks


def build_staircase(mu1: float, delta: float) -> StaircaseProfile:
    if not 0.0 < mu1 < 1.0:
        raise InvalidParams(f"mu1 must lie in (0, 1), got {mu1!r}")
    mu2 = 1.0 - mu1
    if not 0.0 < delta < min(mu1, mu2) / 4.0:
        raise InvalidParams(f"delta must lie in (0, min(mu1, mu2)/4), got {delta!r}")

    step = smoothstep()
    breaks = np.array([0.0, delta, mu1 - delta, mu1 + delta, 1.0 - delta, 1.0])
    # Down transition centred at 0 (split across the period), up transition centred at mu1.
    down_right = mu1 - _compose_linear(step, 0.5, 0.5)
    up = -mu2 + step
    down_left = mu1 - _compose_linear(step, -0.5, 0.5)
    pieces = (
        down_right,
        Polynomial([-mu2]),
        up,
        Polynomial([mu1]),
        down_left,
    )
    h0 = PiecewisePolynomial(breaks, pieces, periodic=True)
    shift = h0.integral()
    h0 = PiecewisePolynomial(breaks, tuple(p - shift for p in pieces), periodic=True)

    levels = {0: h0}
    for k in range(1, STAIRCASE_LEVELS + 1):
        levels[k] = levels[k - 1].antiderivative(mean_zero=True)
    for k in range(1, NEGATIVE_LEVELS + 1):
        levels[-k] = levels[-k + 1].derivative()
    sup_norms = {k: level.sup_norm() for k, level in levels.items()}
    return StaircaseProfile(mu1=mu1, delta=delta, levels=levels, sup_norms=sup_norms)


def staircase_values(mu1, delta, s) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Closed-form h_0, h_1, phase branch and distance to the nearest layer.

    Vectorized over arrays of (mu1, delta, s). Branch 1 is the plateau where
    h_0 = -mu2, branch 2 the plateau where h_0 = mu1, branch 0 a transition
    layer. On plateaus h_1 is the mean-zero antiderivative of the sharp step,
    which the odd transitions leave unchanged.
    """
    mu1 = np.asarray(mu1, dtype=float)
    delta = np.asarray(delta, dtype=float)
    s = np.mod(np.asarray(s, dtype=float), 1.0)
    mu1, delta, s = np.broadcast_arrays(mu1, delta, s)
    mu2 = 1.0 - mu1
    step = smoothstep()
    step_int = smoothstep_integral()

    def sharp_h1(t):
        return np.where(t <= mu1, -mu2 * t, -mu1 * mu2 + mu1 * (t - mu1)) + 0.5 * mu1 * mu2

    h0 = np.where(s <= mu1, -mu2, mu1).astype(float)
    h1 = sharp_h1(s)
    branch = np.where(s <= mu1, 1, 2)

    in_up = np.abs(s - mu1) < delta
    v_up = np.where(in_up, (s - mu1) / delta, 0.0)
    h0 = np.where(in_up, -mu2 + step(v_up), h0)
    h1 = np.where(in_up, sharp_h1(mu1 - delta) + delta * (-mu2 * (v_up + 1.0) + step_int(v_up)), h1)

    t = np.where(s > 0.5, s - 1.0, s)
    in_down = np.abs(t) < delta
    v_dn = np.where(in_down, t / delta, 0.0)
    h0 = np.where(in_down, mu1 - step(v_dn), h0)
    h1 = np.where(
        in_down,
        sharp_h1(np.mod(-delta, 1.0)) + delta * (mu1 * (v_dn + 1.0) - step_int(v_dn)),
        h1,
    )
    branch = np.where(in_up | in_down, 0, branch)

    distance = np.minimum.reduce([
        np.abs(s - (mu1 - delta)),
        np.abs(s - (mu1 + delta)),
        np.abs(s - delta),
        np.abs(s - (1.0 - delta)),
    ])
    distance = np.where(branch == 0, 0.0, distance)
    return h0, h1, branch, distance


@dataclass(frozen=True)
class CutoffBump:
    center: np.ndarray
    side: float
    theta: float
    psi: Tuple[PiecewisePolynomial, ...]
    psi_sup: Tuple[float, ...]

    @property
    def n(self) -> int:
        return self.center.shape[0]

    @property
    def plateau_half_width(self) -> float:
        return 0.5 * (1.0 - self.theta)

    def normalized(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.center) / self.side

    def axis_values(self, order: int, y: np.ndarray) -> np.ndarray:
        if order >= len(self.psi):
            raise MissingDerivatives(f"cutoff derivative of order {order} is not available")
        return self.psi[order](y)

    def derivative(self, beta: Sequence[int], x: np.ndarray) -> np.ndarray:
        """Physical partial derivative d^beta phi at points x."""
        y = self.normalized(x)
        value = np.ones(y.shape[:-1])
        for axis, order in enumerate(beta):
            value = value * self.axis_values(order, y[..., axis])
        return value / self.side ** int(sum(beta))

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.derivative((0,) * self.n, x)

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.all(np.abs(self.normalized(x)) <= 0.5, axis=-1)

    def ramp_fraction(self) -> float:
        return 1.0 - (1.0 - self.theta) ** self.n


def build_cutoff(center: Sequence[float], side: float, theta: float = CUTOFF_THETA) -> CutoffBump:
    if side <= 0.0:
        raise InvalidParams("cutoff cell side must be positive")
    if not 0.0 < theta < 1.0:
        raise InvalidParams("cutoff margin must lie in (0, 1)")
    step = smoothstep()
    edge = 0.5 * (1.0 - theta)
    breaks = np.array([-0.5, -edge, edge, 0.5])
    pieces = (step, Polynomial([1.0]), _compose_linear(step, 0.0, -1.0))
    base = PiecewisePolynomial(breaks, pieces, periodic=False)
    psi = [base]
    for _ in range(1, CUTOFF_DERIVATIVES):
        psi.append(psi[-1].derivative())
    return CutoffBump(
        center=np.asarray(center, dtype=float),
        side=float(side),
        theta=float(theta),
        psi=tuple(psi),
        psi_sup=tuple(p.sup_norm() for p in psi),
    )


class TermExpr:
    """
    Linear combination of (j, beta) terms sharing one wavevector.

    With absolute=True the arithmetic tracks majorants: every coefficient and
    every xi component enters by absolute value and subtraction adds.
    """

    __slots__ = ("terms", "xi", "absolute")
    __array_ufunc__ = None

    def __init__(self, terms: Dict[Tuple[int, Tuple[int, ...]], float], xi: np.ndarray, absolute: bool = False):
        self.terms = {key: value for key, value in terms.items() if value != 0.0}
        self.xi = np.asarray(xi, dtype=float)
        self.absolute = absolute

    @classmethod
    def single(cls, j: int, beta: Tuple[int, ...], coefficient: float, xi, absolute: bool = False) -> "TermExpr":
        return cls({(j, tuple(beta)): abs(coefficient) if absolute else coefficient}, xi, absolute)

    def _empty(self) -> "TermExpr":
        return TermExpr({}, self.xi, self.absolute)

    def derivative(self, axis: int) -> "TermExpr":
        xi_i = abs(self.xi[axis]) if self.absolute else self.xi[axis]
        out: Dict[Tuple[int, Tuple[int, ...]], float] = {}
        for (j, beta), c in self.terms.items():
            if xi_i != 0.0:
                key = (j - 1, beta)
                out[key] = out.get(key, 0.0) + c * xi_i
            raised = list(beta)
            raised[axis] += 1
            key = (j, tuple(raised))
            out[key] = out.get(key, 0.0) + c
        return TermExpr(out, self.xi, self.absolute)

    def __add__(self, other):
        if isinstance(other, (int, float)) and other == 0:
            return self
        out = dict(self.terms)
        for key, c in other.terms.items():
            out[key] = out.get(key, 0.0) + c
        return TermExpr(out, self.xi, self.absolute)

    __radd__ = __add__

    def __neg__(self):
        if self.absolute:
            return self
        return TermExpr({key: -c for key, c in self.terms.items()}, self.xi, self.absolute)

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, factor: float):
        factor = abs(float(factor)) if self.absolute else float(factor)
        return TermExpr({key: factor * c for key, c in self.terms.items()}, self.xi, self.absolute)

    __rmul__ = __mul__

    def max_coefficient(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)


def laplacian(field):
    n = len(field.xi) if isinstance(field, TermExpr) else field.ndim
    return _sum(field.derivative(i).derivative(i) for i in range(n))


def _sum(items: Iterable):
    total = 0
    for item in items:
        total = item + total if isinstance(total, int) else total + item
    return total


def potential_R_delta2(f: Sequence) -> List[List]:
    """
    Local operator R o Delta^2 applied to a vector field with symbolic or spectral derivatives.

    T_ij = Delta(d_i f_j + d_j f_i) - (n-2)/(n-1) d_i d_j div f - delta_ij/(n-1) Delta div f
    is symmetric, trace-free, supported in supp f and satisfies div T = Delta^2 f.
    """
    f = list(f)
    if not f or not all(callable(getattr(component, "derivative", None)) for component in f):
        raise MissingDerivatives("potential_R_delta2 needs fields exposing derivative(axis)")
    n = len(f)
    grads = [[f[j].derivative(i) for j in range(n)] for i in range(n)]
    div = _sum(grads[i][i] for i in range(n))
    lap_div = laplacian(div)
    out: List[List] = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            entry = laplacian(grads[i][j] + grads[j][i]) - ((n - 2.0) / (n - 1.0)) * div.derivative(i).derivative(j)
            if i == j:
                entry = entry - (1.0 / (n - 1.0)) * lap_div
            out[i][j] = entry
            out[j][i] = entry
    return out


def _unit(n: int, axis: int) -> Tuple[int, ...]:
    beta = [0] * n
    beta[axis] = 1
    return tuple(beta)


def wave_expressions(
    n_bar: np.ndarray,
    V_bar: np.ndarray,
    xi: np.ndarray,
    B_hat: np.ndarray,
    absolute: bool = False,
) -> Tuple[List[TermExpr], List[List[TermExpr]]]:
    """Symbolic (n_tilde, V_tilde) of a wave in normalized cell coordinates."""
    n = len(xi)
    zero = (0,) * n
    base = TermExpr.single(STAIRCASE_LEVELS, zero, 1.0, xi, absolute)
    lap_base = laplacian(base)
    delta3 = laplacian(laplacian(lap_base))
    g = _sum(TermExpr.single(STAIRCASE_LEVELS, _unit(n, k), n_bar[k], xi, absolute) for k in range(n))
    lap2_g = laplacian(laplacian(g))

    n_tilde = [delta3 * n_bar[i] - lap2_g.derivative(i) for i in range(n)]

    f = []
    for i in range(n):
        stress_part = _sum(
            TermExpr.single(STAIRCASE_LEVELS, _unit(n, k), V_bar[i, k], xi, absolute) for k in range(n)
        )
        component = laplacian(stress_part)
        for l in range(n):
            if B_hat[i, l] != 0.0:
                component = component + (g.derivative(l) - lap_base * n_bar[l]) * B_hat[i, l]
        f.append(component)
    corrector = potential_R_delta2(f)
    V_tilde = [[delta3 * V_bar[i, j] - corrector[i][j] for j in range(n)] for i in range(n)]
    return n_tilde, V_tilde


def evaluate_expressions(
    expressions: Sequence[TermExpr],
    y: np.ndarray,
    profile: StaircaseProfile,
    cutoff: CutoffBump,
    lambda_hat: float,
    phase: float,
) -> np.ndarray:
    """Evaluate a list of expressions at normalized points y of shape (P, n)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    xi = expressions[0].xi
    s = lambda_hat * (y @ xi) + phase
    inside = np.all(np.abs(y) <= 0.5, axis=1)
    out = np.zeros((len(expressions), y.shape[0]))
    if not np.any(inside):
        return out
    yi = y[inside]
    si = s[inside]
    h_cache: Dict[int, np.ndarray] = {}
    psi_cache: Dict[Tuple[int, int], np.ndarray] = {}
    keys = sorted({key for expr in expressions for key in expr.terms})
    acc = np.zeros((len(expressions), yi.shape[0]))
    for j, beta in keys:
        if j not in h_cache:
            h_cache[j] = lambda_hat ** (-j) * profile.evaluate(j, si)
        basis = h_cache[j].copy()
        for axis, order in enumerate(beta):
            ck = (axis, order)
            if ck not in psi_cache:
                psi_cache[ck] = cutoff.axis_values(order, yi[:, axis])
            basis *= psi_cache[ck]
        for row, expr in enumerate(expressions):
            c = expr.terms.get((j, beta))
            if c:
                acc[row] += c * basis
    out[:, inside] = acc
    return out


@dataclass(frozen=True)
class MajorantTable:
    """Per-level bounds on the deviation terms of a wave with unit-size entries."""

    stress_part: np.ndarray
    source_part: np.ndarray

    def bound(self, lambda_hat: float, h_sup: Dict[int, float], entry_scale: float, source_scale: float) -> float:
        levels = np.arange(len(self.stress_part))
        weights = np.array([h_sup.get(int(j), 0.0) for j in levels]) * lambda_hat ** (-levels.astype(float))
        return float(np.sum(weights * (entry_scale * self.stress_part + source_scale * self.source_part)))


def _component_majorant(expressions: Iterable[TermExpr], cutoff: CutoffBump, levels: int) -> np.ndarray:
    worst = np.zeros(levels + 1)
    n = cutoff.n
    zero = (0,) * n
    for expr in expressions:
        per_level = np.zeros(levels + 1)
        for (j, beta), c in expr.terms.items():
            if (j, beta) == (0, zero) or j < 0:
                continue
            per_level[j] += abs(c) * np.prod([cutoff.psi_sup[b] for b in beta])
        worst = np.maximum(worst, per_level)
    return worst


@lru_cache(maxsize=None)
def majorant_table(n: int, theta: float) -> MajorantTable:
    # |xi_i| <= 1 and unit entries dominate any direction with entries of size one.
    cutoff = build_cutoff(np.zeros(n), 1.0, theta)
    ones_vec = np.ones(n)
    ones_mat = np.ones((n, n))
    n_w, V_w = wave_expressions(ones_vec, ones_mat, ones_vec, np.zeros((n, n)), absolute=True)
    _, V_b = wave_expressions(ones_vec, np.zeros((n, n)), ones_vec, ones_mat, absolute=True)
    components = np.sqrt(n + n * n)
    stress = _component_majorant(n_w + [e for row in V_w for e in row], cutoff, STAIRCASE_LEVELS)
    source = _component_majorant([e for row in V_b for e in row], cutoff, STAIRCASE_LEVELS)
    return MajorantTable(stress_part=components * stress, source_part=components * source)


class LocalizedWave:
    """Closed-form wave (n_tilde, V_tilde) on one cube cell."""

    def __init__(
        self,
        direction: LambdaDirection,
        lambda_freq: float,
        cutoff: CutoffBump,
        profile: StaircaseProfile,
        B: Optional[np.ndarray] = None,
        phase: float = 0.0,
    ) -> None:
        n = direction.n
        self.direction = direction
        self.cutoff = cutoff
        self.profile = profile
        self.B = np.zeros((n, n)) if B is None else np.asarray(B, dtype=float)
        self.lambda_freq = float(lambda_freq)
        self.lambda_hat = self.lambda_freq * cutoff.side
        self.phase = float(phase)
        self.B_hat = cutoff.side * self.B
        self.n_tilde, self.V_tilde = wave_expressions(
            direction.n_bar, direction.V_bar.entries, direction.xi, self.B_hat
        )

    @property
    def n(self) -> int:
        return self.direction.n

    def flat_expressions(self) -> List[TermExpr]:
        return list(self.n_tilde) + [e for row in self.V_tilde for e in row]

    def evaluate_normalized(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        values = evaluate_expressions(self.flat_expressions(), y, self.profile, self.cutoff, self.lambda_hat, self.phase)
        n = self.n
        m = values[:n].T
        U = values[n:].T.reshape(-1, n, n)
        return m, U

    def evaluate(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.evaluate_normalized(self.cutoff.normalized(np.atleast_2d(x)))

    def phase_at(self, x: np.ndarray) -> np.ndarray:
        y = self.cutoff.normalized(np.atleast_2d(x))
        return self.lambda_hat * (y @ self.direction.xi) + self.phase

    def plane_wave(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(x)
        amplitude = self.profile.evaluate(0, self.phase_at(x)) * self.cutoff.value(x)
        return (
            amplitude[:, None] * self.direction.n_bar,
            amplitude[:, None, None] * self.direction.V_bar.entries,
        )

    def constraint_certificate(self) -> float:
        """Largest surviving coefficient of div n_tilde and div V_tilde - B n_tilde, relative."""
        n = self.n
        div_n = _sum(self.n_tilde[i].derivative(i) for i in range(n))
        worst = div_n.max_coefficient()
        for i in range(n):
            residual = _sum(self.V_tilde[i][j].derivative(j) for j in range(n))
            for j in range(n):
                if self.B_hat[i, j] != 0.0:
                    residual = residual - self.n_tilde[j] * self.B_hat[i, j]
            worst = max(worst, residual.max_coefficient())
        scale = max(1.0, max(e.max_coefficient() for e in self.flat_expressions()))
        return worst / scale

    def leading_coefficients(self) -> Tuple[np.ndarray, np.ndarray]:
        """Coefficient of h_0 * phi in every component; equals the direction itself."""
        key = (0, (0,) * self.n)
        m = np.array([e.terms.get(key, 0.0) for e in self.n_tilde])
        U = np.array([[e.terms.get(key, 0.0) for e in row] for row in self.V_tilde])
        return m, U

    def deviation_majorant(self) -> float:
        table = majorant_table(self.n, self.cutoff.theta)
        entry = max(np.max(np.abs(self.direction.n_bar)), np.max(np.abs(self.direction.V_bar.entries)))
        source = np.max(np.abs(self.B_hat)) * np.max(np.abs(self.direction.n_bar))
        return table.bound(self.lambda_hat, self.profile.sup_norms, entry, source)

    def sup_deviation(self, x: np.ndarray) -> float:
        m, U = self.evaluate(x)
        pm, pU = self.plane_wave(x)
        dm = np.linalg.norm(m - pm, axis=1)
        dU = np.linalg.norm(U - pU, axis=(1, 2))
        return float(np.max(np.sqrt(dm ** 2 + dU ** 2)))


def build_localized_wave(
    direction: LambdaDirection,
    lambda_freq: float,
    cutoff: CutoffBump,
    profile: StaircaseProfile,
    B: Optional[np.ndarray] = None,
    phase: float = 0.0,
) -> LocalizedWave:
    if lambda_freq < 1.0:
        raise InvalidParams("wave frequency must be at least 1")
    return LocalizedWave(direction, lambda_freq, cutoff, profile, B=B, phase=phase)


def lambda_hat_for_deviation(
    n: int,
    theta: float,
    h_sup: Dict[int, float],
    entry_scale: float,
    source_scale: float,
    tolerance: float,
    start: float = LAMBDA_HAT_START,
) -> float:
    """Smallest power-of-two multiple of start whose deviation majorant is below tolerance."""
    table = majorant_table(n, theta)
    lam = start
    while table.bound(lam, h_sup, entry_scale, source_scale) > tolerance:
        lam *= 2.0
        if lam > LAMBDA_HAT_CAP:
            raise ResourceLimit("no admissible wave frequency below the configured cap")
    return lam


def plateau_value(
    n_bar: np.ndarray,
    V_bar: np.ndarray,
    xi: np.ndarray,
    B_hat: np.ndarray,
    lambda_hat: np.ndarray,
    h0: np.ndarray,
    h1: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Batched wave value at points of the cutoff plateau.

    There every derivative of phi vanishes and only the h_0 term and the
    h_1 term of the source corrector survive.
    """
    n = n_bar.shape[-1]
    c = np.einsum("...ij,...j->...i", B_hat, n_bar)
    xc = np.einsum("...i,...i->...", xi, c)
    sym = xi[..., :, None] * c[..., None, :] + c[..., :, None] * xi[..., None, :]
    corr = (
        sym
        - ((n - 2.0) / (n - 1.0)) * xc[..., None, None] * xi[..., :, None] * xi[..., None, :]
        - (xc / (n - 1.0))[..., None, None] * np.eye(n)
    )
    scale = (h1 / lambda_hat)[..., None, None]
    m = h0[..., None] * n_bar
    U = h0[..., None, None] * V_bar + scale * corr
    return m, U


@dataclass
class TwoPhaseRegions:
    mask_first: np.ndarray
    mask_second: np.ndarray
    measure_first: float
    measure_second: float
    cell_measure: float
    achieved_first: float
    achieved_second: float

    @property
    def overlap(self) -> float:
        return float(np.count_nonzero(self.mask_first & self.mask_second))


def two_phase_regions(
    wave: LocalizedWave,
    w: FlowState,
    endpoints: Tuple[FlowState, FlowState],
    eps: float,
    resolution: int = 64,
) -> TwoPhaseRegions:
    """Grid masks of the cell where w + w_tilde is eps-close to each endpoint."""
    n = wave.n
    ticks = (np.arange(resolution) + 0.5) / resolution - 0.5
    y = np.stack(np.meshgrid(*([ticks] * n), indexing="ij"), axis=-1).reshape(-1, n)
    m, U = wave.evaluate_normalized(y)
    states_m = w.m + m
    states_U = w.U.entries + U
    cell_measure = wave.cutoff.side ** n
    voxel = cell_measure / y.shape[0]
    masks = []
    for endpoint in endpoints:
        dist = np.sqrt(
            np.sum((states_m - endpoint.m) ** 2, axis=1)
            + np.sum((states_U - endpoint.U.entries) ** 2, axis=(1, 2))
        )
        masks.append(dist < eps)
    mu = (wave.profile.mu1, wave.profile.mu2)
    measures = [float(np.count_nonzero(mask)) * voxel for mask in masks]
    masks = [mask.reshape((resolution,) * n) for mask in masks]
    return TwoPhaseRegions(
        mask_first=masks[0],
        mask_second=masks[1],
        measure_first=measures[0],
        measure_second=measures[1],
        cell_measure=cell_measure,
        achieved_first=abs(measures[0] - mu[0] * cell_measure),
        achieved_second=abs(measures[1] - mu[1] * cell_measure),
    )


def _axis_breaks(wave: LocalizedWave, axis: int) -> np.ndarray:
    breaks = list(wave.cutoff.psi[0].breaks)
    xi = wave.direction.xi
    if abs(xi[axis]) > 0.5:
        lam = wave.lambda_hat * xi[axis]
        s_lo = wave.phase - 0.5 * abs(lam)
        s_hi = wave.phase + 0.5 * abs(lam)
        profile_breaks = wave.profile.breakpoints()[:-1]
        for period in range(int(np.floor(s_lo)) - 1, int(np.ceil(s_hi)) + 1):
            for b in profile_breaks:
                y = (period + b - wave.phase) / lam
                if -0.5 < y < 0.5:
                    breaks.append(y)
    return np.unique(np.array(breaks))


class SeparableQuadrature:
    """
    Exact Gauss-Legendre integration of wave expressions whose wavevector is a coordinate axis.

    Every term factorizes into one-dimensional pieces; panels follow every
    breakpoint of the staircase and the cutoff so each panel integrates a polynomial.
    """

    def __init__(self, wave: LocalizedWave, order: int = 50) -> None:
        xi = wave.direction.xi
        axis = int(np.argmax(np.abs(xi)))
        if not np.isclose(abs(xi[axis]), 1.0, atol=1e-14):
            raise InvalidParams("separable quadrature needs an axis-aligned wavevector")
        self.wave = wave
        self.axis = axis
        self.n = wave.n
        self.cross_nodes, self.cross_weights = panel_quadrature(wave.cutoff.psi[0].breaks, order)
        self.axis_nodes, self.axis_weights = panel_quadrature(_axis_breaks(wave, axis), order)
        self._axis_cache: Dict[Tuple[int, int], np.ndarray] = {}
        self._cross_cache: Dict[int, np.ndarray] = {}

    def _cross(self, order: int) -> np.ndarray:
        if order not in self._cross_cache:
            self._cross_cache[order] = self.wave.cutoff.axis_values(order, self.cross_nodes)
        return self._cross_cache[order]

    def _along(self, j: int, order: int) -> np.ndarray:
        key = (j, order)
        if key not in self._axis_cache:
            wave = self.wave
            s = wave.lambda_hat * wave.direction.xi[self.axis] * self.axis_nodes + wave.phase
            self._axis_cache[key] = (
                wave.lambda_hat ** (-j) * wave.profile.evaluate(j, s) * wave.cutoff.axis_values(order, self.axis_nodes)
            )
        return self._axis_cache[key]

    def factor_tables(
        self,
        expressions: Sequence[TermExpr],
        weight_fns: Optional[Sequence[Callable[[np.ndarray], np.ndarray]]] = None,
    ) -> Tuple[Dict[Tuple[int, int], float], List[Dict[int, float]]]:
        """One-dimensional integrals of every factor that occurs in the expressions."""
        axis_keys = set()
        cross_keys = set()
        for expr in expressions:
            for j, beta in expr.terms:
                axis_keys.add((j, beta[self.axis]))
                cross_keys.update(beta[i] for i in range(self.n) if i != self.axis)
        axis_table = {}
        along_weights = self.axis_weights
        if weight_fns is not None:
            along_weights = along_weights * weight_fns[self.axis](self.axis_nodes)
        for key in axis_keys:
            axis_table[key] = float(np.dot(along_weights, self._along(*key)))
        cross_tables: List[Dict[int, float]] = []
        for i in range(self.n):
            if i == self.axis:
                cross_tables.append({})
                continue
            weights = self.cross_weights
            if weight_fns is not None:
                weights = weights * weight_fns[i](self.cross_nodes)
            cross_tables.append({order: float(np.dot(weights, self._cross(order))) for order in cross_keys})
        return axis_table, cross_tables

    def integral_from_tables(self, expr: TermExpr, axis_table, cross_tables) -> float:
        total = 0.0
        for (j, beta), c in expr.terms.items():
            term = c * axis_table[(j, beta[self.axis])]
            for i in range(self.n):
                if i != self.axis:
                    term *= cross_tables[i][beta[i]]
            total += term
        return total

    def integral(self, expr: TermExpr, weight_fns: Optional[Sequence[Callable]] = None) -> float:
        """Integral over the normalized cell, optionally against separable weights g_i(y_i)."""
        tables = self.factor_tables([expr], weight_fns)
        return self.integral_from_tables(expr, *tables)

    def square_integral(self, expr: TermExpr) -> float:
        keys = list(expr.terms)
        if not keys:
            return 0.0
        coeffs = np.array([expr.terms[k] for k in keys])
        gram = np.ones((len(keys), len(keys)))
        for i in range(self.n):
            if i == self.axis:
                factors = sorted({(j, beta[i]) for j, beta in keys})
                rows = np.array([self._along(*f) for f in factors])
                weights = self.axis_weights
                index = np.array([factors.index((j, beta[i])) for j, beta in keys])
            else:
                factors = sorted({beta[i] for _, beta in keys})
                rows = np.array([self._cross(f) for f in factors])
                weights = self.cross_weights
                index = np.array([factors.index(beta[i]) for _, beta in keys])
            small = (rows * weights) @ rows.T
            gram *= small[np.ix_(index, index)]
        return float(coeffs @ gram @ coeffs)

    def mean(self) -> Tuple[np.ndarray, np.ndarray]:
        exprs = self.wave.flat_expressions()
        tables = self.factor_tables(exprs)
        values = np.array([self.integral_from_tables(e, *tables) for e in exprs])
        n = self.n
        return values[:n], values[n:].reshape(n, n)

    def energy(self, momentum_only: bool = False) -> float:
        total = sum(self.square_integral(e) for e in self.wave.n_tilde)
        if not momentum_only:
            total += sum(self.square_integral(e) for row in self.wave.V_tilde for e in row)
        return total


@dataclass
class TiledWave:
    wave: LocalizedWave
    k: int
    segment_half: LambdaDirection
    epsilon: float

    @property
    def side(self) -> float:
        return 2.0 ** (-self.k)

    @property
    def cells(self) -> int:
        return 2 ** (self.wave.n * self.k)

    def evaluate(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        side = self.side
        index = np.clip(np.floor(x / side), 0, 2 ** self.k - 1)
        y = (x - (index + 0.5) * side) / side
        inside = np.all((x >= 0.0) & (x <= 1.0), axis=1)
        m, U = self.wave.evaluate_normalized(y)
        m[~inside] = 0.0
        U[~inside] = 0.0
        return m, U

    def energy(self) -> float:
        """Integral of |w_tilde_k|^2 over the unit cube; every cell carries the same copy."""
        return SeparableQuadrature(self.wave).energy()

    def momentum_energy(self) -> float:
        return SeparableQuadrature(self.wave).energy(momentum_only=True)

    def pairing(self, test_factors: Sequence[Callable[[np.ndarray], np.ndarray]]) -> np.ndarray:
        """Integrals of every component against a separable test function prod g_i(x_i)."""
        quad = SeparableQuadrature(self.wave)
        side = self.side
        count = 2 ** self.k
        n = self.wave.n
        centers = (np.arange(count) + 0.5) * side
        exprs = self.wave.flat_expressions()
        tables = {}
        for axis in range(n):
            for c_index, center in enumerate(centers):
                fns = [np.ones_like] * n
                fns[axis] = (lambda c, g: (lambda y: g(c + side * y)))(center, test_factors[axis])
                tables[(axis, c_index)] = quad.factor_tables(exprs, fns)
        out = np.zeros(len(exprs))
        for cell in itertools.product(range(count), repeat=n):
            axis_table = tables[(quad.axis, cell[quad.axis])][0]
            cross_tables = [tables[(i, cell[i])][1][i] for i in range(n)]
            for row, expr in enumerate(exprs):
                out[row] += side ** n * quad.integral_from_tables(expr, axis_table, cross_tables)
        return out


def replicate_tiling(
    direction: LambdaDirection,
    k: int,
    B: Optional[np.ndarray] = None,
    theta: float = 0.125,
    cell_cap: int = 2 ** 18,
) -> TiledWave:
    """
    Tile the unit cube by 2^(nk) cells of side 2^-k carrying copies of one wave
    for the segment [-w, w].

    The normalized frequency is the power of two at or above 1/eps_k with
    eps_k = 2^(-nk)/k; the measured deviation shrinks like 1/lambda_hat.
    """
    if k < 1:
        raise InvalidParams("tiling level must be at least 1")
    n = direction.n
    cells = 2 ** (n * k)
    if cells > cell_cap:
        raise ResourceLimit(f"{cells} cells exceed the cap of {cell_cap}")
    epsilon = 2.0 ** (-n * k) / k
    side = 2.0 ** (-k)
    lambda_hat = 2.0 ** np.ceil(np.log2(max(LAMBDA_HAT_START, 1.0 / epsilon)))
    profile = build_staircase(0.5, 1.0 / 64.0)
    cutoff = build_cutoff(np.full(n, 0.5 * side), side, theta)
    wave = LocalizedWave(direction.scaled(2.0), lambda_hat / side, cutoff, profile, B=B, phase=0.0)
    return TiledWave(wave=wave, k=k, segment_half=direction, epsilon=epsilon)


@dataclass(frozen=True)
class Mollifier:
    """Radial mollifier omega, constant on |x| < 1/2, supported in the unit ball."""

    epsilon: float
    n: int
    level: float
    profile: PiecewisePolynomial

    def radial(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return self.level * np.where(r <= 1.0, self.profile(np.minimum(r, 1.0)), 0.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1) / self.epsilon
        return self.radial(r) / self.epsilon ** self.n

    def mass(self) -> float:
        return _radial_integral(self.radial, self.n)

    def fourier(self, frequency: np.ndarray) -> np.ndarray:
        """Fourier transform of omega^eps at |k| = frequency (cycles per unit length)."""
        kappa = np.asarray(frequency, dtype=float) * self.epsilon
        nodes, weights = panel_quadrature(np.array([0.0, 0.5, 1.0]), 96)
        values = self.radial(nodes)
        nu = 0.5 * self.n - 1.0
        flat = kappa.ravel()
        out = np.empty_like(flat)
        small = flat < 1e-12
        out[small] = 1.0
        kk = flat[~small]
        if kk.size:
            arg = 2.0 * np.pi * np.outer(kk, nodes)
            kernel = special.jv(nu, arg) * nodes ** (0.5 * self.n)
            out[~small] = 2.0 * np.pi * kk ** (-nu) * (kernel * (values * weights)).sum(axis=1)
        return out.reshape(kappa.shape)

    def newton_difference(self, r: np.ndarray) -> np.ndarray:
        """
        N - N * omega^eps at distance r from the origin, N the Newtonian kernel.

        Radial unit mass makes the difference vanish for r >= eps:
        K(r) = -eps^(2-n)/(n-2) int_{r/eps}^1 (t^(2-n) - s^(2-n)) omega(s) s^(n-1) ds.
        """
        n = self.n
        if n < 3:
            raise InvalidParams("the Newtonian kernel difference needs n >= 3")
        tau = np.asarray(r, dtype=float) / self.epsilon
        flat = tau.ravel()
        out = np.zeros_like(flat)
        inside = (flat > 0.0) & (flat < 1.0)
        if np.any(inside):
            nodes, weights = gauss_legendre(64)
            t = flat[inside][:, None]
            s = t + 0.5 * (1.0 - t) * (nodes[None, :] + 1.0)
            w = 0.5 * (1.0 - t) * weights[None, :]
            integrand = (t ** (2 - n) - s ** (2 - n)) * self.radial(s) * s ** (n - 1)
            out[inside] = -self.epsilon ** (2 - n) / (n - 2) * np.sum(w * integrand, axis=1)
        return out.reshape(tau.shape)

    def newton_difference_ball_average(self, radius: float) -> float:
        """Mean of newton_difference over the ball of the given radius (finite at the origin)."""
        n = self.n
        top = min(radius, self.epsilon)
        nodes, weights = gauss_legendre(64)
        r = 0.5 * top * (nodes + 1.0)
        integral = 0.5 * top * np.sum(weights * self.newton_difference(r) * r ** (n - 1))
        return float(n * integral / radius ** n)


def sphere_area(n: int) -> float:
    return 2.0 * np.pi ** (0.5 * n) / gamma_fn(0.5 * n)


def _radial_integral(radial: Callable[[np.ndarray], np.ndarray], n: int) -> float:
    nodes, weights = panel_quadrature(np.array([0.0, 0.5, 1.0]), 64)
    return float(sphere_area(n) * np.sum(weights * radial(nodes) * nodes ** (n - 1)))


def build_mollifier(epsilon: float, n: int) -> Mollifier:
    if epsilon <= 0.0:
        raise InvalidParams("mollifier radius must be positive")
    step = smoothstep()
    profile = PiecewisePolynomial(
        np.array([0.0, 0.5, 1.0]),
        (Polynomial([1.0]), _compose_linear(step, 0.0, -1.0)),
        periodic=False,
    )
    unnormalized = Mollifier(epsilon=epsilon, n=n, level=1.0, profile=profile)
    return Mollifier(epsilon=epsilon, n=n, level=1.0 / unnormalized.mass(), profile=profile)
