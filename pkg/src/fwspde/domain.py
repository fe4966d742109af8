"""Spectral discretization of a vector-valued interval domain with Dirichlet ends.

State fields live on a uniform interior grid of (0, L) and are expanded in the
sine eigenbasis of the second-derivative operator with zero boundary values,

    e_k(xi) = sqrt(2/L) * sin(k * pi * xi / L),    k = 1, ..., n_modes,

which diagonalizes the linear part componentwise: component i has eigenvalues
alpha_{i,k} = kappa_i * (k*pi/L)**2.  On the uniform grid the composite
trapezoidal rule (with the zero boundary values included) makes the sampled
basis exactly orthonormal, so analysis/synthesis are exact inverses whenever
n_modes == n_grid and exact orthogonal projections otherwise.  Both transforms
are computed with the type-I discrete sine transform.

The sup norm used throughout is the maximum over components and grid nodes;
for paths it is additionally the maximum over frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dst


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DomainSpec:
    """Interval length and discretization sizes for one scenario."""

    length: float
    n_grid: int = 128
    n_modes: int = 128
    n_components: int = 1

    def __post_init__(self):
        if not (self.length > 0.0 and np.isfinite(self.length)):
            raise ValueError(f"domain length must be positive and finite, got {self.length}")
        if self.n_grid < 2:
            raise ValueError(f"n_grid must be at least 2, got {self.n_grid}")
        if not 1 <= self.n_modes <= self.n_grid:
            raise ValueError(
                f"n_modes must lie in [1, n_grid={self.n_grid}], got {self.n_modes}"
            )
        if self.n_components < 1:
            raise ValueError(f"n_components must be positive, got {self.n_components}")


@dataclass(frozen=True)
class OperatorSpec:
    """Componentwise diffusivities kappa_i of the linear operator."""

    diffusivities: tuple

    def __post_init__(self):
        kappas = tuple(float(k) for k in self.diffusivities)
        object.__setattr__(self, "diffusivities", kappas)
        if len(kappas) == 0:
            raise ValueError("at least one diffusivity is required")
        if any(not (k > 0.0 and np.isfinite(k)) for k in kappas):
            raise ValueError(f"diffusivities must be positive and finite, got {kappas}")


class Basis:
    """Precomputed sine basis data for one (DomainSpec, OperatorSpec) pair.

    Attributes
    ----------
    xi : ndarray, shape (n_grid,)
        Interior grid nodes.
    h : float
        Grid spacing; also the trapezoidal quadrature weight per node.
    eigenvalues : ndarray, shape (n_components, n_modes)
        alpha_{i,k} = kappa_i * (k*pi/L)**2.
    sup_norms_sq : ndarray, shape (n_modes,)
        Squared sup norms |e_k|_inf**2 = 2/L of the basis functions.
    """

    def __init__(self, domain: DomainSpec, operator: OperatorSpec):
        if len(operator.diffusivities) != domain.n_components:
            raise ValueError(
                "operator has %d diffusivities but domain declares %d components"
                % (len(operator.diffusivities), domain.n_components)
            )
        self.domain = domain
        self.operator = operator
        L = domain.length
        n = domain.n_grid
        self.h = L / (n + 1)
        self.xi = _freeze(np.arange(1, n + 1) * self.h)
        k = np.arange(1, domain.n_modes + 1)
        kappa = np.asarray(operator.diffusivities)[:, None]
        self.eigenvalues = _freeze(kappa * (k * np.pi / L) ** 2)
        self.sup_norms_sq = _freeze(np.full(domain.n_modes, 2.0 / L))
        # DST-I scalings: analysis includes the trapezoid weight h, synthesis
        # evaluates the expansion on the grid.  dst(..., type=1) computes
        # 2 * sum_q x_q sin(pi (q+1)(k+1) / (n+1)).
        self._anal_scale = self.h * np.sqrt(2.0 / L) / 2.0
        self._synth_scale = np.sqrt(2.0 / L) / 2.0

    # -- raw-array transforms (batch friendly: act along the last axis) -----

    def analyze(self, values: np.ndarray) -> np.ndarray:
        """Coefficients <values, e_k> for k = 1..n_modes, along the last axis."""
        coeffs = self._anal_scale * dst(values, type=1, axis=-1)
        return coeffs[..., : self.domain.n_modes]

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Evaluate a coefficient array on the grid, along the last axis."""
        K, n = self.domain.n_modes, self.domain.n_grid
        if coeffs.shape[-1] != K:
            if coeffs.shape[-1] > n:
                raise ValueError(
                    f"got {coeffs.shape[-1]} coefficients for a basis of {K} modes"
                )
            padded = np.zeros(coeffs.shape[:-1] + (n,))
            padded[..., : coeffs.shape[-1]] = coeffs
        elif K < n:
            padded = np.zeros(coeffs.shape[:-1] + (n,))
            padded[..., :K] = coeffs
        else:
            padded = coeffs
        return self._synth_scale * dst(padded, type=1, axis=-1)

    def mode_values(self, j: int) -> np.ndarray:
        """Grid samples of e_j (1-based mode index)."""
        if not 1 <= j <= self.domain.n_modes:
            raise ValueError(f"mode index {j} outside [1, {self.domain.n_modes}]")
        L = self.domain.length
        return np.sqrt(2.0 / L) * np.sin(j * np.pi * self.xi / L)

    def semigroup_factors(self, t: float) -> np.ndarray:
        """exp(-alpha_{i,k} * t), shape (n_components, n_modes)."""
        if t < 0.0:
            raise ValueError(f"semigroup time must be nonnegative, got {t}")
        return np.exp(-self.eigenvalues * t)

    def smooth(self, values: np.ndarray, t: float) -> np.ndarray:
        """Apply the semigroup at time t to grid values (..., r, n_grid)."""
        self._check_component_axis(values)
        return self.synthesize(self.semigroup_factors(t) * self.analyze(values))

    def _check_component_axis(self, values: np.ndarray):
        r = self.domain.n_components
        if values.ndim < 2 or values.shape[-2] != r or values.shape[-1] != self.domain.n_grid:
            raise ValueError(
                f"expected grid values with trailing shape ({r}, {self.domain.n_grid}), "
                f"got {values.shape}"
            )


def build_basis(domain: DomainSpec, operator: OperatorSpec) -> Basis:
    return Basis(domain, operator)


@dataclass(frozen=True)
class Field:
    """One snapshot: values on (n_components, n_grid), zero boundary implied."""

    domain: DomainSpec
    values: np.ndarray

    def __post_init__(self):
        vals = _freeze(self.values)
        expected = (self.domain.n_components, self.domain.n_grid)
        if vals.shape != expected:
            raise ValueError(f"field values must have shape {expected}, got {vals.shape}")
        object.__setattr__(self, "values", vals)

    @staticmethod
    def zero(domain: DomainSpec) -> "Field":
        return Field(domain, np.zeros((domain.n_components, domain.n_grid)))


@dataclass(frozen=True)
class PathField:
    """A discrete trajectory: frame values indexed by a uniform time lattice."""

    domain: DomainSpec
    times: np.ndarray
    values: np.ndarray  # (n_frames, n_components, n_grid)

    def __post_init__(self):
        times = _freeze(self.times)
        vals = _freeze(self.values)
        if times.ndim != 1 or len(times) < 1:
            raise ValueError("times must be a nonempty 1-d array")
        expected = (len(times), self.domain.n_components, self.domain.n_grid)
        if vals.shape != expected:
            raise ValueError(f"path values must have shape {expected}, got {vals.shape}")
        if len(times) > 1:
            steps = np.diff(times)
            if steps.min() <= 0:
                raise ValueError("times must be strictly increasing")
            if steps.max() - steps.min() > 1e-9 * max(steps.max(), 1.0):
                raise ValueError("time lattice must be uniform")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", vals)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def frame(self, idx: int) -> Field:
        return Field(self.domain, self.values[idx])

    @staticmethod
    def zero(domain: DomainSpec, horizon: float, dt: float) -> "PathField":
        n_steps = _step_count(horizon, dt)
        times = np.arange(n_steps + 1) * dt
        return PathField(domain, times, np.zeros((n_steps + 1, domain.n_components, domain.n_grid)))


def _step_count(horizon: float, dt: float) -> int:
    if dt <= 0 or horizon <= 0:
        raise ValueError(f"horizon and dt must be positive, got T={horizon}, dt={dt}")
    n = horizon / dt
    if abs(n - round(n)) > 1e-9 * max(n, 1.0):
        raise ValueError(f"dt={dt} does not divide the horizon T={horizon}")
    return int(round(n))


def to_spectral(f: Field, basis: Basis) -> np.ndarray:
    if f.domain != basis.domain:
        raise ValueError("field and basis built on different domains")
    return basis.analyze(f.values)


def to_grid(coeffs: np.ndarray, basis: Basis) -> Field:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[0] != basis.domain.n_components:
        raise ValueError(
            f"expected coefficients with shape ({basis.domain.n_components}, <=n_modes), "
            f"got {coeffs.shape}"
        )
    return Field(basis.domain, basis.synthesize(coeffs))


def semigroup_apply(f: Field, basis: Basis, t: float) -> Field:
    if f.domain != basis.domain:
        raise ValueError("field and basis built on different domains")
    return Field(f.domain, basis.smooth(f.values, t))


def sup_norm(f: Field) -> float:
    return float(np.abs(f.values).max())


def sup_norm_path(p: PathField) -> float:
    return float(np.abs(p.values).max())


def path_distance(p: PathField, q: PathField) -> float:
    """Sup-norm distance between two paths on the same lattice and domain."""
    if p.domain != q.domain:
        raise ValueError("paths live on different domains")
    if p.values.shape != q.values.shape or not np.allclose(p.times, q.times, atol=1e-12):
        raise ValueError("paths are sampled on different time lattices")
    return float(np.abs(p.values - q.values).max())
