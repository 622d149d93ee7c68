"""
Starting strict subsolutions sampled on a periodic grid over [0, 1)^n.

The torus constructions use spectral derivatives. The compactly supported ones
use forward differences, which keep supports exact, and stay inside the unit box.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Tuple
import logging
import os
import sys

import numpy as np
from scipy import ndimage

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from constants import CHI_DOUBLINGS, DEFAULT_MARGIN_FLOOR, Q_RESCALE_CAP
from errors import (
    ChiSearchFailed,
    CompatibilityViolated,
    DomainNotCovered,
    InvalidParams,
    NonZeroMean,
    ProfileViolatesBounds,
    StrictnessUnachievable,
)
from localized_waves import Mollifier, build_mollifier, sphere_area
from spectral_oracles import (
    SpectralField,
    angular_wavenumbers,
    forward_antiderivative,
    forward_difference,
    grid_points,
    inverse_laplacian,
    spectral_gradient,
)
from states_geometry import defect_values, hull_margin, lambda_max, sym_trace_free_part

logger = logging.getLogger("wildflow")

PROFILE_KINDS = ("constant", "sine", "bump", "dip")
# Spectral derivatives on the torus, or one-sided differences that keep supports compact.
DIFFERENCE_OPERATORS = ("spectral", "forward")


@dataclass(frozen=True)
class PressureLaw:
    """Polytropic law p(rho) = coefficient * rho**exponent."""

    coefficient: float = 1.0
    exponent: float = 2.0

    def __post_init__(self) -> None:
        if self.coefficient <= 0.0 or self.exponent <= 0.0:
            raise InvalidParams("pressure law needs positive coefficient and exponent")

    def __call__(self, rho):
        return self.coefficient * np.asarray(rho, dtype=float) ** self.exponent

    def inverse(self, p):
        return (np.asarray(p, dtype=float) / self.coefficient) ** (1.0 / self.exponent)

    def derivative(self, rho):
        return self.coefficient * self.exponent * np.asarray(rho, dtype=float) ** (self.exponent - 1.0)


def smooth_bump(t: np.ndarray) -> np.ndarray:
    """exp(1 - 1/(1 - t^2)) on |t| < 1, zero outside; equals 1 at the origin."""
    t = np.asarray(t, dtype=float)
    inside = np.abs(t) < 1.0
    out = np.zeros_like(t)
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - t[inside] ** 2))
    return out


@dataclass(frozen=True)
class DensityProfile:
    kind: str
    rho_bar: float
    pressure: PressureLaw = PressureLaw()
    amplitude: float = 0.0
    radius: float = 0.25
    inner_ratio: float = 0.5
    center: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.kind not in PROFILE_KINDS:
            raise InvalidParams(f"unknown density profile {self.kind!r}")
        if self.rho_bar <= 0.0:
            raise InvalidParams("background density must be positive")
        if not 0.0 < self.radius < 0.5:
            raise InvalidParams("profile radius must lie in (0, 1/2)")
        if not 0.0 < self.inner_ratio < 1.0:
            raise InvalidParams("inner radius ratio must lie in (0, 1)")

    def center_point(self, n: int) -> np.ndarray:
        return np.full(n, 0.5) if self.center is None else np.asarray(self.center, dtype=float)

    def radius_of(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(x - self.center_point(x.shape[-1]), axis=-1)

    @property
    def p_bar(self) -> float:
        return float(self.pressure(self.rho_bar))

    def pressure_deviation(self, x: np.ndarray) -> np.ndarray:
        """p(rho) - p(rho_bar); mean-zero in pressure space for the bump profile."""
        x = np.asarray(x, dtype=float)
        if self.kind == "bump":
            n = x.shape[-1]
            r = self.radius_of(x)
            inner = self.inner_ratio * self.radius
            # The two bumps integrate to R1^n and R^n times the same constant.
            kappa = self.inner_ratio ** n
            return self.amplitude * (smooth_bump(r / inner) - kappa * smooth_bump(r / self.radius))
        return self.pressure(self.rho(x)) - self.p_bar

    def rho(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            return np.full(x.shape[:-1], self.rho_bar)
        if self.kind == "sine":
            return self.rho_bar * (1.0 + self.amplitude * np.sin(2.0 * np.pi * x[..., 0]))
        if self.kind == "dip":
            return self.rho_bar - self.amplitude * smooth_bump(self.radius_of(x) / self.radius)
        total = self.p_bar + self.pressure_deviation(x)
        if np.any(total <= 0.0):
            raise ProfileViolatesBounds("bump amplitude drives the pressure to zero")
        return self.pressure.inverse(total)

    def support_mask(self, x: np.ndarray) -> np.ndarray:
        if self.kind in ("constant", "sine"):
            return np.ones(np.asarray(x).shape[:-1], dtype=bool)
        return self.radius_of(np.asarray(x, dtype=float)) < self.radius


@dataclass(frozen=True)
class SubsolutionField:
    """Grid samples of (rho, m, U, q) with the domain where strictness is claimed."""

    rho: np.ndarray
    q: np.ndarray
    m: np.ndarray
    U: np.ndarray
    domain: np.ndarray
    spacing: float
    B: np.ndarray
    pressure: PressureLaw
    label: str = ""
    operator: str = "spectral"
    # An iterate keeps the field it was refined from and an audit of the waves added to it.
    base: Optional["SubsolutionField"] = field(default=None, compare=False, repr=False)
    wave_audit: Optional[Callable[[], Dict[str, float]]] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.operator not in DIFFERENCE_OPERATORS:
            raise InvalidParams(f"unknown difference operator {self.operator!r}")

    @property
    def n(self) -> int:
        return self.m.shape[-1]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.rho.shape

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.n

    def points(self) -> np.ndarray:
        return grid_points(self.shape, self.spacing, np.zeros(self.n))

    def margin(self) -> np.ndarray:
        return hull_margin(self.rho, self.q, self.m, self.U)

    def strict_margin(self) -> float:
        if not np.any(self.domain):
            return 0.0
        return float(np.min(self.margin()[self.domain]))

    def defect(self) -> np.ndarray:
        return defect_values(self.rho, self.q, self.m, self.U)

    def defect_integral(self, mask: Optional[np.ndarray] = None) -> float:
        mask = self.domain if mask is None else mask
        return float(np.sum(self.defect()[mask]) * self.cell_volume)

    def energy_error(self, mask: Optional[np.ndarray] = None) -> float:
        mask = self.domain if mask is None else mask
        sq = np.einsum("...i,...i->...", self.m, self.m)
        gap = np.abs(sq - self.n * self.rho * self.q)
        return float(np.sum(gap[mask]) * self.cell_volume)

    def with_state(self, m: np.ndarray, U: np.ndarray) -> "SubsolutionField":
        return replace(self, m=m, U=U)

    def constraint_residual(self) -> Dict[str, float]:
        """
        Relative residuals of div m = 0 and div U + grad(p(rho) + q) = B m.

        A plain field is measured with its difference operator. An iterate is
        its base field plus exact waves, so the base residual is combined with
        the audited certificate of the waves; the grid samples of an iterate
        are not differentiated.
        """
        if self.base is None:
            return linear_residual(
                self.m, self.U, self.pressure(self.rho) + self.q, self.B, self.spacing, operator=self.operator
            )
        residual = dict(self.base.constraint_residual())
        if self.wave_audit is not None:
            audit = self.wave_audit()
            residual.update(audit)
            residual["mass"] += audit["wave_certificate"]
            residual["momentum"] += audit["wave_certificate"]
        return residual


def _norm(values: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.asarray(values) ** 2)))


def _partial(values: np.ndarray, axis: int, spacing: float, operator: str) -> np.ndarray:
    if operator == "forward":
        return forward_difference(values, axis, spacing)
    return SpectralField(values, spacing).derivative(axis).values


def linear_residual(
    m: np.ndarray,
    U: np.ndarray,
    P: np.ndarray,
    B: np.ndarray,
    spacing: float,
    operator: str = "spectral",
) -> Dict[str, float]:
    n = m.shape[-1]
    partials_m = [_partial(m[..., i], i, spacing, operator) for i in range(n)]
    div_m = sum(partials_m)
    div_U = np.stack(
        [sum(_partial(U[..., i, j], j, spacing, operator) for j in range(n)) for i in range(n)], axis=-1
    )
    grad_P = np.stack([_partial(P, i, spacing, operator) for i in range(n)], axis=-1)
    Bm = m @ np.asarray(B, dtype=float).T
    mass_scale = sum(_norm(d) for d in partials_m)
    momentum = div_U + grad_P - Bm
    momentum_scale = max(_norm(div_U), _norm(grad_P), _norm(Bm))
    return {
        "mass": _norm(div_m) / mass_scale if mass_scale > 0.0 else 0.0,
        "momentum": _norm(momentum) / momentum_scale if momentum_scale > 0.0 else 0.0,
        "mass_abs": _norm(div_m) * np.sqrt(spacing ** n),
        "momentum_abs": _norm(momentum) * np.sqrt(spacing ** n),
    }


def unit_grid(n: int, resolution: int) -> Tuple[np.ndarray, float]:
    spacing = 1.0 / resolution
    return grid_points((resolution,) * n, spacing, np.zeros(n)), spacing


def periodic_anti_divergence(f: np.ndarray, spacing: float) -> np.ndarray:
    """u = grad Delta^{-1} f on the torus, stacked on the last axis."""
    f = np.asarray(f, dtype=float)
    if abs(f.mean()) > 1e-10 * max(np.mean(np.abs(f)), 1e-300) and np.any(f):
        raise NonZeroMean(f"anti-divergence needs a mean-zero field, mean={f.mean():.3e}")
    if not np.any(f):
        return np.zeros(f.shape + (f.ndim,))
    potential = inverse_laplacian(f - f.mean(), spacing, mean_tol=np.inf)
    return np.stack(spectral_gradient(potential, spacing), axis=-1)


def periodic_pressure_subsolution(
    profile: DensityProfile,
    q,
    resolution: int,
    n: int,
    B: Optional[np.ndarray] = None,
    margin_floor: float = DEFAULT_MARGIN_FLOOR,
    rescale_cap: float = Q_RESCALE_CAP,
) -> SubsolutionField:
    """
    (rho, 0, U, q) with div U = -grad(p(rho) + q) on the torus.

    U_ij = -u^(i)_j with div u^(i) = d_i P is symmetric already; its trace
    is removed and compensated by the factor n/(n - 1). When the margin is not
    positive, q is raised by a constant, which leaves U unchanged.
    """
    x, spacing = unit_grid(n, resolution)
    rho = profile.rho(x)
    q = np.broadcast_to(np.asarray(q, dtype=float), rho.shape).copy()
    if np.any(q <= 0.0):
        raise InvalidParams("periodic subsolution needs q > 0")
    P = profile.pressure(rho) + q
    gradient = spectral_gradient(P, spacing)
    U0 = np.zeros(rho.shape + (n, n))
    for i in range(n):
        u_i = periodic_anti_divergence(gradient[i], spacing)
        U0[..., i, :] = -u_i
    U = (n / (n - 1.0)) * sym_trace_free_part(U0)
    m = np.zeros(rho.shape + (n,))

    shift = 0.0
    need = lambda_max(-U) - q
    worst = float(np.max(need))
    if worst >= -margin_floor:
        shift = worst + max(margin_floor, 1e-3 * float(np.max(q)))
        if shift > rescale_cap:
            raise StrictnessUnachievable(f"q would need a shift of {shift:.3e} (cap {rescale_cap:.3e})")
        logger.warning("Raising q by %.6e to make the periodic subsolution strict", shift)
        q = q + shift
    B = np.zeros((n, n)) if B is None else np.asarray(B, dtype=float)
    return SubsolutionField(
        rho=rho,
        q=q,
        m=m,
        U=U,
        domain=np.ones(rho.shape, dtype=bool),
        spacing=spacing,
        B=B,
        pressure=profile.pressure,
        label="torus",
    )


@dataclass(frozen=True)
class PoissonSolution:
    u: np.ndarray
    p_eps: np.ndarray
    source: np.ndarray
    spacing: float
    support_radius: float
    leakage: float
    consistency: float


def _discrete_compatible(source: np.ndarray, profile: DensityProfile, x: np.ndarray, spacing: float) -> np.ndarray:
    """Remove the grid mean of a compactly supported source without leaving its support."""
    n = x.shape[-1]
    total = float(np.sum(source)) * spacing ** n
    scale = float(np.sum(np.abs(source))) * spacing ** n
    if scale == 0.0:
        return source
    if abs(total) > 5e-2 * scale:
        raise CompatibilityViolated(f"source integral {total:.3e} is not zero (scale {scale:.3e})")
    weight = smooth_bump(profile.radius_of(x) / profile.radius)
    return source - total * weight / (np.sum(weight) * spacing ** n)


def newton_kernel_table(mollifier: Mollifier, spacing: float) -> np.ndarray:
    """N - N * omega^eps at every grid offset closer than eps; the origin holds the cell average."""
    n = mollifier.n
    reach = int(np.ceil(mollifier.epsilon / spacing))
    offsets = np.arange(-reach, reach + 1) * spacing
    axes = np.meshgrid(*([offsets] * n), indexing="ij")
    table = mollifier.newton_difference(np.sqrt(sum(a ** 2 for a in axes)))
    # Ball with the volume of one cell.
    radius = spacing / (sphere_area(n) / n) ** (1.0 / n)
    table[(reach,) * n] = mollifier.newton_difference_ball_average(radius)
    return table


def forward_laplacian(u: np.ndarray, spacing: float) -> np.ndarray:
    return sum(forward_difference(forward_difference(u, i, spacing), i, spacing) for i in range(u.ndim))


def _mollified(values: np.ndarray, mollifier: Mollifier, spacing: float) -> np.ndarray:
    ks = angular_wavenumbers(values.shape, spacing)
    frequency = np.sqrt(sum(k ** 2 for k in ks)) / (2.0 * np.pi)
    return np.real(np.fft.ifftn(np.fft.fftn(values) * mollifier.fourier(frequency)))


def compact_poisson(
    profile: DensityProfile,
    eps: float,
    mollifier: Optional[Mollifier],
    resolution: int,
    n: int,
    source_factor: float = 1.0,
) -> PoissonSolution:
    """
    u = (N - N * omega_eps) * s for s = source_factor * p_1, by direct convolution.

    The kernel vanishes beyond eps, so u is zero outside the (radius + eps)-ball
    exactly. p_eps is the forward-difference Laplacian of u; `consistency` is its
    relative L2 distance to s - s * omega_eps.
    """
    if mollifier is None:
        mollifier = build_mollifier(eps, n)
    x, spacing = unit_grid(n, resolution)
    source = _discrete_compatible(source_factor * profile.pressure_deviation(x), profile, x, spacing)
    support_radius = profile.radius + eps
    if not np.any(source):
        zeros = np.zeros(source.shape)
        return PoissonSolution(zeros, zeros, source, spacing, support_radius, 0.0, 0.0)

    kernel = newton_kernel_table(mollifier, spacing)
    u = spacing ** n * ndimage.convolve(source, kernel, mode="wrap")
    p_eps = forward_laplacian(u, spacing)

    outside = profile.radius_of(x) >= support_radius
    peak = max(float(np.max(np.abs(u))), 1e-300)
    leakage = float(np.max(np.abs(u[outside]))) / peak if np.any(outside) else 0.0
    target = source - _mollified(source, mollifier, spacing)
    consistency = _norm(p_eps - target) / max(_norm(source), 1e-300)
    return PoissonSolution(
        u=u,
        p_eps=p_eps,
        source=source,
        spacing=spacing,
        support_radius=support_radius,
        leakage=leakage,
        consistency=consistency,
    )


def _axis_bump(coords: np.ndarray, lo: float, hi: float, spacing: float) -> np.ndarray:
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    theta = smooth_bump((coords - mid) / half)
    return theta / (np.sum(theta) * spacing)


def _cube_mask(shape: Tuple[int, ...], spacing: float, lo: float, hi: float) -> np.ndarray:
    coords = (np.arange(shape[0]) + 0.5) * spacing
    inside_1d = (coords > lo) & (coords < hi)
    mask = np.ones(shape, dtype=bool)
    for axis in range(len(shape)):
        view = [1] * len(shape)
        view[axis] = -1
        mask = mask & inside_1d.reshape(view)
    return mask


@dataclass(frozen=True)
class DivergencePotentials:
    phi: np.ndarray
    box: Tuple[float, float]
    residual: float


def compact_div_solver(p_src: np.ndarray, spacing: float, box: Tuple[float, float]) -> DivergencePotentials:
    """
    phi_1..phi_n supported in the cube box^n with sum_j D_j phi_j = p_src.

    D_j is the forward difference. Peels one axis at a time: phi_1 integrates
    p - theta_1(x_1) g(x') along x_1, where g is the x_1-sum of p, and the
    remainder theta_1 g is handled by the same construction in the remaining
    variables. Every line sum is zero, so the forward antiderivatives stop at
    the box.
    """
    p_src = np.asarray(p_src, dtype=float)
    n = p_src.ndim
    lo, hi = box
    mask = _cube_mask(p_src.shape, spacing, lo, hi)
    scale = float(np.max(np.abs(p_src))) if p_src.size else 0.0
    if scale == 0.0:
        return DivergencePotentials(np.zeros(p_src.shape + (n,)), box, 0.0)
    if np.any(p_src[~mask] != 0.0):
        raise DomainNotCovered("source is not supported inside the solver box")
    total = float(np.sum(p_src)) * spacing ** n
    if abs(total) > 1e-10 * float(np.sum(np.abs(p_src))) * spacing ** n:
        raise CompatibilityViolated(f"source integral {total:.3e} is not zero")

    coords = (np.arange(p_src.shape[0]) + 0.5) * spacing
    theta = _axis_bump(coords, lo, hi, spacing)
    envelope_all = np.ones(p_src.shape)
    for axis in range(n):
        shape = [1] * n
        shape[axis] = -1
        envelope_all = envelope_all * theta.reshape(shape)
    # Rounding left in the grid integral goes to a product bump inside the box.
    source = p_src - float(np.sum(p_src)) * spacing ** n * envelope_all
    phi = np.zeros(p_src.shape + (n,))
    remainder = source
    envelope = np.ones(p_src.shape)
    for axis in range(n):
        shape = [1] * n
        shape[axis] = -1
        theta_axis = theta.reshape(shape)
        if axis < n - 1:
            g = np.sum(remainder, axis=axis, keepdims=True) * spacing
            integrand = remainder - theta_axis * g
            remainder_next = np.broadcast_to(g, p_src.shape).copy()
        else:
            integrand = remainder
            remainder_next = None
        phi[..., axis] = np.where(mask, envelope * forward_antiderivative(integrand, axis, spacing), 0.0)
        if remainder_next is not None:
            envelope = envelope * np.broadcast_to(theta_axis, p_src.shape)
            remainder = remainder_next
    divergence = sum(forward_difference(phi[..., j], j, spacing) for j in range(n))
    residual = _norm(divergence - p_src) / max(_norm(p_src), 1e-300)
    return DivergencePotentials(phi=phi, box=box, residual=residual)


@dataclass(frozen=True)
class StressFromPotentials:
    m: np.ndarray
    U: np.ndarray
    V: np.ndarray
    trace_defect: float
    residuals: Dict[str, float]


def stress_from_potentials(p_src: np.ndarray, potentials: DivergencePotentials, a: float, spacing: float) -> StressFromPotentials:
    """
    (m, U) with div m = 0 and div U + grad p = a m from div phi = p.

    A = n/(1 - n) (grad phi - (p/n) I) is split into U = sym A and V = skew A,
    and m = -(1/a) div V. All derivatives are forward differences, which
    commute, so the identities hold to rounding. The realized divergence of
    phi enters A so that tr A vanishes identically.
    """
    if a <= 0.0:
        raise InvalidParams("stress_from_potentials needs B = a I with a > 0")
    phi = potentials.phi
    n = phi.shape[-1]
    grad = np.zeros(phi.shape[:-1] + (n, n))
    for i in range(n):
        for j in range(n):
            grad[..., i, j] = forward_difference(phi[..., j], i, spacing)
    realized = np.trace(grad, axis1=-2, axis2=-1)
    A = (n / (1.0 - n)) * (grad - (realized / n)[..., None, None] * np.eye(n))
    trace_defect = float(np.max(np.abs(np.trace(A, axis1=-2, axis2=-1))))
    U = 0.5 * (A + np.swapaxes(A, -1, -2))
    V = 0.5 * (A - np.swapaxes(A, -1, -2))
    div_V = np.stack(
        [sum(forward_difference(V[..., i, j], j, spacing) for j in range(n)) for i in range(n)],
        axis=-1,
    )
    m = -div_V / a
    residuals = linear_residual(m, U, p_src, a * np.eye(n), spacing, operator="forward")
    div_div_V = sum(forward_difference(div_V[..., i], i, spacing) for i in range(n))
    residuals["div_div_V"] = _norm(div_div_V) / max(_norm(div_V), 1e-300)
    return StressFromPotentials(m=m, U=U, V=V, trace_defect=trace_defect, residuals=residuals)


@dataclass(frozen=True)
class CompactSubsolutionResult:
    m_tilde: np.ndarray
    U_tilde: np.ndarray
    chi: float
    q: np.ndarray
    rho: np.ndarray
    support_box: Tuple[float, float]
    leakage: float
    margin_min: float
    residuals: Dict[str, float]
    spacing: float
    a: float
    pressure: PressureLaw
    domain: np.ndarray

    def to_subsolution(self) -> SubsolutionField:
        n = self.m_tilde.shape[-1]
        return SubsolutionField(
            rho=self.rho,
            q=self.q,
            m=self.m_tilde,
            U=self.U_tilde,
            domain=self.domain,
            spacing=self.spacing,
            B=self.a * np.eye(n),
            pressure=self.pressure,
            label="compact",
            operator="forward",
        )


def compact_strict_subsolution(
    profile: DensityProfile,
    a: float,
    eps: float,
    chi_hint: float,
    resolution: int,
    n: int,
    margin_floor: float = DEFAULT_MARGIN_FLOOR,
    domain_pad: float = 0.1,
) -> CompactSubsolutionResult:
    """
    Strict subsolution (rho, m_tilde, U_tilde, p(rho) + chi/n) for B = a I.

    Since p(rho) + q = 2 p(rho) + chi/n, the Poisson/div chain is driven by
    s = 2 p_1; U1 = -(n/(n-1)) Hess u + p_eps/(n-1) I carries -grad p_eps and
    the potentials of s - p_eps carry the rest. The density is read back from
    the compatible source, so grad(p(rho) + q) is exactly grad s. Supports lie
    in the cube support_box^n, which must fit inside the unit box.
    """
    if a <= 0.0:
        raise InvalidParams("compact strict subsolution needs B = a I with a > 0")
    if chi_hint <= 0.0:
        raise InvalidParams("chi hint must be positive")
    x, spacing = unit_grid(n, resolution)
    poisson = compact_poisson(profile, eps, build_mollifier(eps, n), resolution, n, source_factor=2.0)
    base = profile.p_bar + 0.5 * poisson.source
    if np.any(base <= 0.0):
        raise ProfileViolatesBounds("bump amplitude drives the pressure to zero")
    rho = profile.pressure.inverse(base)

    hessian = np.zeros(rho.shape + (n, n))
    first = [forward_difference(poisson.u, j, spacing) for j in range(n)]
    for i in range(n):
        for j in range(n):
            hessian[..., i, j] = forward_difference(first[j], i, spacing)
    U1 = -(n / (n - 1.0)) * hessian + (poisson.p_eps / (n - 1.0))[..., None, None] * np.eye(n)

    # p_eps reaches two cells below the (radius + eps)-ball; the box adds eps/2 for the peeling bumps.
    remainder = poisson.source - poisson.p_eps
    center = profile.center_point(n)
    lo = float(np.min(center)) - (profile.radius + 1.5 * eps + 2.0 * spacing)
    hi = float(np.max(center)) + profile.radius + 1.5 * eps
    support_box = (lo - 2.0 * spacing, hi)
    if support_box[0] < 0.0 or support_box[1] > 1.0:
        raise DomainNotCovered("profile support plus mollifier radius leaves the unit box")
    potentials = compact_div_solver(remainder, spacing, (lo, hi))
    stress = stress_from_potentials(remainder, potentials, a, spacing)
    m_tilde = stress.m
    U_tilde = sym_trace_free_part(U1 + stress.U)

    p_rho = profile.pressure(rho)
    outer = m_tilde[..., :, None] * m_tilde[..., None, :] / rho[..., None, None]
    need = float(np.max(lambda_max(outer - U_tilde) - p_rho))
    chi = float(chi_hint)
    for _ in range(CHI_DOUBLINGS):
        if chi / n - need >= margin_floor:
            break
        chi *= 2.0
        logger.info("Doubling chi to %.6e", chi)
    else:
        raise ChiSearchFailed(f"no chi up to {chi:.3e} makes the subsolution strict")

    q = p_rho + chi / n
    domain = profile.radius_of(x) < profile.radius + eps + domain_pad
    residuals = linear_residual(m_tilde, U_tilde, p_rho + q, a * np.eye(n), spacing, operator="forward")
    residuals["div_solver"] = potentials.residual
    residuals["trace_identity"] = stress.trace_defect
    residuals["div_div_V"] = stress.residuals["div_div_V"]
    residuals["poisson_consistency"] = poisson.consistency

    outside = ~_cube_mask(rho.shape, spacing, *support_box)
    peak = max(float(np.max(np.abs(m_tilde))), float(np.max(np.abs(U_tilde))), 1e-300)
    spill = 0.0
    if np.any(outside):
        spill = max(float(np.max(np.abs(m_tilde[outside]))), float(np.max(np.abs(U_tilde[outside])))) / peak
    margin_min = float(np.min(hull_margin(rho, q, m_tilde, U_tilde)))
    return CompactSubsolutionResult(
        m_tilde=m_tilde,
        U_tilde=U_tilde,
        chi=chi,
        q=q,
        rho=rho,
        support_box=support_box,
        leakage=max(spill, poisson.leakage),
        margin_min=margin_min,
        residuals=residuals,
        spacing=spacing,
        a=float(a),
        pressure=profile.pressure,
        domain=domain,
    )


def vacuum_gap_subsolution(
    profile: DensityProfile,
    resolution: int,
    n: int,
    B: Optional[np.ndarray] = None,
    residual_tol: float = 1e-7,
) -> SubsolutionField:
    """
    (rho, 0, 0, q) strict where the density dips below its background.

    q = rho_bar - rho solves the momentum equation only when p(rho) + q is
    constant; otherwise q = p(rho_bar) - p(rho) is used.
    """
    x, spacing = unit_grid(n, resolution)
    rho = profile.rho(x)
    if np.any(rho <= 0.0) or np.any(rho > profile.rho_bar * (1.0 + 1e-14)):
        raise ProfileViolatesBounds("vacuum-gap profile must satisfy 0 < rho <= rho_bar")
    q = np.maximum(profile.rho_bar - rho, 0.0)
    if not np.any(q > 0.0):
        raise ProfileViolatesBounds("density never dips below its background: empty strict domain")
    m = np.zeros(rho.shape + (n,))
    U = np.zeros(rho.shape + (n, n))
    B = np.zeros((n, n)) if B is None else np.asarray(B, dtype=float)
    residual = linear_residual(m, U, profile.pressure(rho) + q, B, spacing)
    label = "vacuum"
    if residual["momentum_abs"] > residual_tol:
        logger.warning(
            "q = rho_bar - rho leaves a momentum residual %.3e; switching to q = p(rho_bar) - p(rho)",
            residual["momentum_abs"],
        )
        q = np.maximum(profile.p_bar - profile.pressure(rho), 0.0)
        label = "vacuum_pressure"
    domain = q > 0.0
    return SubsolutionField(
        rho=rho, q=q, m=m, U=U, domain=domain, spacing=spacing, B=B, pressure=profile.pressure, label=label
    )
