"""Reaction, diffusion-coefficient, and noise-spectrum declarations plus validators.

A drift is declared as a split f = g + h where g is continuous and decreasing
in the state variable (pointwise, per component) and h is globally Lipschitz
with a stated envelope L(t).  The diffusion coefficient sigma may be bounded
or may grow like (1 + |x|)**nu.  The noise spectrum declares the multipliers
lambda_{n,j} on the shared sine basis together with the regularity pair
(beta, rho).

Validators sample the declared properties on a lattice of times, grid points,
state values, and random state pairs, and report every violated assumption
with a concrete witness.  Check ids are grouped by the object they test
(drift/..., diffusion/..., noise/...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .domain import Basis

_TOL = 1e-9


@dataclass(frozen=True)
class DriftSpec:
    """Split reaction term f = g + h.

    g(t, xi, v) acts elementwise on state values of any shape and must be
    decreasing in v.  h(t, xi, x) maps full states (..., r, n) to forcing of
    the same shape and must be Lipschitz with envelope L(t) = lipschitz(t).
    Optional dissipativity triple (m, mu, c0) declares
    g(t, xi, v) * sign(v) <= -mu * |v|**m for |v| > c0.
    """

    g: Callable
    h: Optional[Callable] = None
    lipschitz: Callable = lambda t: 1.0
    g_prime: Optional[Callable] = None
    h_jacobian: Optional[Callable] = None
    dissipativity: Optional[tuple] = None  # (m, mu, c0)
    name: str = "custom"

    def g_at(self, t: float, xi: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.g(t, xi, v), dtype=np.float64)

    def h_at(self, t: float, xi: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.h is None:
            return np.zeros_like(x)
        return np.asarray(self.h(t, xi, x), dtype=np.float64)

    def f_at(self, t: float, xi: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.g_at(t, xi, x) + self.h_at(t, xi, x)


@dataclass(frozen=True)
class DiffusionSpec:
    """Diagonal multiplicative coefficient sigma_n(t, xi, x).

    sigma(t, xi, x) returns an array of the same shape as x: channel n
    multiplies the n-th noise field and feeds component n.  `bounded` declares
    |sigma| <= L(t); otherwise |sigma| <= L(t) * (1 + |x|)**nu is declared.
    sigma_min > 0 enables control recovery (the coefficient is invertible).
    """

    sigma: Callable
    nu: float = 0.0
    bounded: bool = False
    lipschitz: Callable = lambda t: 1.0
    sigma_min: Optional[float] = None
    sigma_prime: Optional[Callable] = None
    name: str = "custom"

    def sigma_at(self, t: float, xi: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.sigma(t, xi, x), dtype=np.float64)


@dataclass(frozen=True)
class NoiseSpec:
    """Spectrum of the driving noise on the shared sine basis.

    lambdas has shape (n_channels, n_modes); entry (n, j) multiplies the
    j-th basis function in channel n.  beta in (0, 1) and rho in [2, inf]
    declare the regularity pair; rho = math.inf is the bounded-multiplier
    regime.
    """

    lambdas: np.ndarray
    beta: float
    rho: float = math.inf

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.lambdas, dtype=np.float64)).copy()
        lam.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not (self.rho >= 2.0):
            raise ValueError(f"rho must lie in [2, inf], got {self.rho}")

    @property
    def n_modes(self) -> int:
        return self.lambdas.shape[1]

    @property
    def regularity_exponent(self) -> float:
        """beta * (rho - 2) / rho, with the rho = inf limit equal to beta."""
        if math.isinf(self.rho):
            return self.beta
        return self.beta * (self.rho - 2.0) / self.rho

    @staticmethod
    def white(n_channels: int, n_modes: int, beta: float, rho: float = math.inf) -> "NoiseSpec":
        return NoiseSpec(np.ones((n_channels, n_modes)), beta=beta, rho=rho)


def admissible_nu(m: float, beta: float, rho: float) -> float:
    """Exclusive upper bound on the diffusion growth exponent nu.

    Returns min(1, (m - 1)/2 * (1 - beta*(rho-2)/rho)); admissible exponents
    are 0 <= nu < admissible_nu(m, beta, rho).
    """
    if m <= 1.0:
        raise ValueError(f"the dissipativity order m must exceed 1, got {m}")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if not rho >= 2.0:
        raise ValueError(f"rho must lie in [2, inf], got {rho}")
    frac = beta if math.isinf(rho) else beta * (rho - 2.0) / rho
    return min(1.0, 0.5 * (m - 1.0) * (1.0 - frac))


# ---------------------------------------------------------------------------
# validation report plumbing


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    description: str
    passed: bool
    witness: Optional[str] = None


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> tuple:
        return tuple(c for c in self.checks if not c.passed)

    def lines(self) -> list:
        out = []
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            line = f"[{status}] {c.check_id}: {c.description}"
            if not c.passed and c.witness:
                line += f" | witness: {c.witness}"
            out.append(line)
        return out

    @staticmethod
    def merge(*reports: "ValidationReport") -> "ValidationReport":
        checks = []
        for r in reports:
            checks.extend(r.checks)
        return ValidationReport(tuple(checks))


@dataclass(frozen=True)
class SamplePlan:
    """Sampling lattice used by the validators (documented defaults)."""

    times: tuple = (0.0, 0.5, 1.0)
    n_space: int = 9
    levels: tuple = (-1e3, -10.0, -1.0, -0.1, 0.0, 0.1, 1.0, 10.0, 1e3)
    magnitudes: tuple = (0.0, 0.5, 1.0, 10.0, 1e3)
    n_pairs: int = 64
    seed: int = 20260814


def _space_samples(basis: Basis, plan: SamplePlan) -> np.ndarray:
    idx = np.linspace(0, basis.domain.n_grid - 1, plan.n_space).astype(int)
    return basis.xi[np.unique(idx)]


def validate_drift(drift: DriftSpec, basis: Basis, plan: SamplePlan = SamplePlan()) -> ValidationReport:
    """Check the declared drift split on the sampling plan."""
    rng = np.random.default_rng(plan.seed)
    xi = _space_samples(basis, plan)
    r = basis.domain.n_components
    checks = []

    # g decreasing in v: for every sampled v < v', g(v') - g(v) <= tol.
    levels = np.sort(np.asarray(plan.levels, dtype=np.float64))
    worst = None
    for t in plan.times:
        vals = np.stack([drift.g_at(t, xi, np.full_like(xi, v)) for v in levels])
        diffs = np.diff(vals, axis=0)  # g(v_{k+1}) - g(v_k), should be <= 0
        scale = 1.0 + np.abs(vals).max()
        k, q = np.unravel_index(np.argmax(diffs), diffs.shape)
        if diffs[k, q] > _TOL * scale and (worst is None or diffs[k, q] > worst[0]):
            worst = (
                float(diffs[k, q]),
                f"t={t}, xi={xi[q]:.6g}: g({levels[k + 1]:.6g})={vals[k + 1, q]:.6g} "
                f"> g({levels[k]:.6g})={vals[k, q]:.6g}",
            )
    checks.append(
        CheckResult(
            "drift/g-decreasing",
            "g(t, xi, v) is decreasing in v on the sampled levels",
            worst is None,
            None if worst is None else worst[1],
        )
    )

    # h globally Lipschitz with envelope L(t), plus linear growth.
    lip_worst = None
    growth_worst = None
    if drift.h is not None:
        for t in plan.times:
            L = float(drift.lipschitz(t))
            for _ in range(plan.n_pairs):
                mag = rng.choice(np.asarray(plan.magnitudes)[1:] if len(plan.magnitudes) > 1 else [1.0])
                x = mag * rng.standard_normal((r, len(xi)))
                y = mag * rng.standard_normal((r, len(xi)))
                hx, hy = drift.h_at(t, xi, x), drift.h_at(t, xi, y)
                gap = np.abs(hx - hy).max()
                allowed = L * (1.0 + _TOL) * np.abs(x - y).max() + _TOL
                if gap > allowed and (lip_worst is None or gap - allowed > lip_worst[0]):
                    lip_worst = (
                        gap - allowed,
                        f"t={t}, |x-y|={np.abs(x - y).max():.6g}: |h(x)-h(y)|={gap:.6g} "
                        f"> L(t)*|x-y|={L * np.abs(x - y).max():.6g}",
                    )
                hnorm = np.abs(hx).max()
                glim = L * (1.0 + _TOL) * (1.0 + np.abs(x).max()) + _TOL
                if hnorm > glim and (growth_worst is None or hnorm - glim > growth_worst[0]):
                    growth_worst = (
                        hnorm - glim,
                        f"t={t}, |x|={np.abs(x).max():.6g}: |h(x)|={hnorm:.6g} > "
                        f"L(t)*(1+|x|)={L * (1 + np.abs(x).max()):.6g}",
                    )
    checks.append(
        CheckResult(
            "drift/h-lipschitz",
            "h is Lipschitz with the declared envelope L(t) on sampled pairs",
            lip_worst is None,
            None if lip_worst is None else lip_worst[1],
        )
    )
    checks.append(
        CheckResult(
            "drift/h-growth",
            "|h(t, x)| <= L(t) * (1 + |x|) on sampled states",
            growth_worst is None,
            None if growth_worst is None else growth_worst[1],
        )
    )

    if drift.dissipativity is not None:
        m, mu, c0 = drift.dissipativity
        worst_d = None
        test_levels = [v for v in np.concatenate([levels, [-1e6, -31.0, 31.0, 1e6]]) if abs(v) > c0]
        for t in plan.times:
            for v in test_levels:
                gv = drift.g_at(t, xi, np.full_like(xi, v))
                lhs = (gv * np.sign(v)).max()
                bound = -mu * abs(v) ** m
                if lhs > bound * (1.0 - _TOL) + _TOL and (worst_d is None or lhs - bound > worst_d[0]):
                    worst_d = (
                        lhs - bound,
                        f"t={t}, v={v:.6g}: g*sign(v)={lhs:.6g} > -mu*|v|^m={bound:.6g}",
                    )
        checks.append(
            CheckResult(
                "drift/dissipativity",
                f"g * sign(v) <= -mu*|v|^m beyond |v| > c0 (m={m}, mu={mu}, c0={c0})",
                worst_d is None,
                None if worst_d is None else worst_d[1],
            )
        )

    return ValidationReport(tuple(checks))


def validate_diffusion(
    diffusion: DiffusionSpec,
    basis: Basis,
    plan: SamplePlan = SamplePlan(),
    drift: Optional[DriftSpec] = None,
    noise: Optional[NoiseSpec] = None,
) -> ValidationReport:
    """Check sigma's Lipschitz and growth declarations; with drift and noise
    context, also check the growth exponent against the admissible window."""
    rng = np.random.default_rng(plan.seed + 1)
    xi = _space_samples(basis, plan)
    r = basis.domain.n_components
    checks = []

    lip_worst = None
    for t in plan.times:
        L = float(diffusion.lipschitz(t))
        for _ in range(plan.n_pairs):
            mag = rng.choice(np.asarray(plan.magnitudes)[1:] if len(plan.magnitudes) > 1 else [1.0])
            x = mag * rng.standard_normal((r, len(xi)))
            y = x + rng.standard_normal((r, len(xi)))
            sx, sy = diffusion.sigma_at(t, xi, x), diffusion.sigma_at(t, xi, y)
            gap = np.abs(sx - sy).max()
            allowed = L * (1.0 + _TOL) * np.abs(x - y).max() + _TOL
            if gap > allowed and (lip_worst is None or gap - allowed > lip_worst[0]):
                lip_worst = (
                    gap - allowed,
                    f"t={t}: |sigma(x)-sigma(y)|={gap:.6g} > L(t)*|x-y|="
                    f"{L * np.abs(x - y).max():.6g}",
                )
    checks.append(
        CheckResult(
            "diffusion/sigma-lipschitz",
            "sigma is Lipschitz with the declared envelope L(t) on sampled pairs",
            lip_worst is None,
            None if lip_worst is None else lip_worst[1],
        )
    )

    growth_worst = None
    tag = "diffusion/sigma-bounded" if diffusion.bounded else "diffusion/sigma-growth"
    for t in plan.times:
        L = float(diffusion.lipschitz(t))
        for mag in plan.magnitudes:
            x = mag * np.abs(rng.standard_normal((r, len(xi))))
            x[0, : len(xi) // 2] = mag  # pin the sup so the envelope is exercised
            s = np.abs(diffusion.sigma_at(t, xi, x)).max()
            if diffusion.bounded:
                allowed = L * (1.0 + _TOL) + _TOL
                desc = f"|sigma|={s:.6g} > L(t)={L:.6g}"
            else:
                allowed = L * (1.0 + _TOL) * (1.0 + np.abs(x).max()) ** diffusion.nu + _TOL
                desc = (
                    f"|sigma|={s:.6g} > L(t)*(1+|x|)^nu="
                    f"{L * (1.0 + np.abs(x).max()) ** diffusion.nu:.6g}"
                )
            if s > allowed and (growth_worst is None or s - allowed > growth_worst[0]):
                growth_worst = (s - allowed, f"t={t}, |x|={np.abs(x).max():.6g}: {desc}")
    checks.append(
        CheckResult(
            tag,
            "bounded: |sigma| <= L(t)" if diffusion.bounded
            else f"growth: |sigma| <= L(t)*(1+|x|)^nu with nu={diffusion.nu}",
            growth_worst is None,
            None if growth_worst is None else growth_worst[1],
        )
    )

    if not diffusion.bounded and drift is not None and noise is not None:
        if drift.dissipativity is None:
            checks.append(
                CheckResult(
                    "diffusion/nu-window",
                    "unbounded sigma requires a declared dissipativity triple",
                    False,
                    "drift declares no (m, mu, c0) triple",
                )
            )
        else:
            m = drift.dissipativity[0]
            bound = admissible_nu(m, noise.beta, noise.rho)
            ok = 0.0 <= diffusion.nu < bound - 1e-12
            checks.append(
                CheckResult(
                    "diffusion/nu-window",
                    f"growth exponent inside the admissible window [0, {bound:.6g})",
                    ok,
                    None
                    if ok
                    else f"nu={diffusion.nu} outside [0, {bound:.6g}) from m={m}, "
                    f"beta={noise.beta}, rho={noise.rho}",
                )
            )

    return ValidationReport(tuple(checks))


def _series_converges_by_ratio(term, n_max: int = 1 << 20) -> tuple:
    """Classify sum(term(k), k>=1) by comparing dyadic partial-sum increments.

    Returns (converges, detail).  Increments S_{2N} - S_N of a convergent
    power-tail series shrink geometrically; for a divergent one they do not
    decrease below a fixed fraction of the previous increment.
    """
    block_edges = [1 << p for p in range(8, int(math.log2(n_max)) + 1)]
    prev_inc = None
    ratios = []
    for lo, hi in zip(block_edges[:-1], block_edges[1:]):
        k = np.arange(lo, hi)
        inc = float(np.sum(term(k)))
        if prev_inc is not None:
            if inc < 1e-12:
                return True, f"tail increment {inc:.3e} below 1e-12 at N={hi}"
            ratios.append(inc / prev_inc)
        prev_inc = inc
    ratio = ratios[-1]
    if ratio < 0.999:
        return True, f"dyadic increment ratio {ratio:.6g} < 1"
    return False, f"dyadic increment ratio {ratio:.6g} >= 1 at N={block_edges[-1]}"


def validate_noise(noise: NoiseSpec, basis: Basis, plan: SamplePlan = SamplePlan()) -> ValidationReport:
    """Check the regularity pair and the two spectral series."""
    checks = []
    frac = noise.regularity_exponent
    checks.append(
        CheckResult(
            "noise/beta-rho",
            "beta * (rho - 2) / rho < 1",
            frac < 1.0,
            None if frac < 1.0 else f"beta={noise.beta}, rho={noise.rho} give {frac:.6g} >= 1",
        )
    )

    # sum_k alpha_k^{-beta} |e_k|_inf^2: on this basis |e_k|^2 = 2/L and
    # alpha_k ~ k^2, so the tail behaves like k^{-2 beta}.
    L = basis.domain.length
    kappa_min = min(basis.operator.diffusivities)
    beta = noise.beta

    def alpha_term(k):
        return (kappa_min * (k * np.pi / L) ** 2) ** (-beta) * (2.0 / L)

    converges, detail = _series_converges_by_ratio(alpha_term)
    checks.append(
        CheckResult(
            "noise/alpha-series",
            "sum_k alpha_k^(-beta) |e_k|^2 converges (tail ~ k^(-2 beta))",
            converges,
            None if converges else f"beta={beta}: {detail}",
        )
    )

    lam = noise.lambdas
    if math.isinf(noise.rho):
        sup = float(np.abs(lam).max())
        ok = np.isfinite(sup)
        checks.append(
            CheckResult(
                "noise/lambda-series",
                "rho = inf: sup_j lambda_{n,j} finite",
                ok,
                None if ok else "non-finite multiplier in lambdas",
            )
        )
    else:
        # The declared spectrum is a finite table; the series with the
        # remaining multipliers set to zero converges iff every entry is
        # finite.  A constant continuation beyond the table would diverge,
        # so reject tables that do not decay at the tail end.
        powers = np.abs(lam) ** noise.rho * (2.0 / L)
        tail = powers[:, -max(4, lam.shape[1] // 8):]
        head = powers[:, : max(4, lam.shape[1] // 8)]
        decays = float(tail.mean()) < 0.5 * float(head.mean()) + 1e-12 or float(tail.max()) < 1e-12
        ok = bool(np.isfinite(powers).all()) and decays
        checks.append(
            CheckResult(
                "noise/lambda-series",
                "rho < inf: sum_j lambda^rho |f_j|^2 converges (finite, decaying table)",
                ok,
                None
                if ok
                else f"rho={noise.rho}: tail mean {float(tail.mean()):.3e} does not decay "
                f"below half the head mean {float(head.mean()):.3e}",
            )
        )
    return ValidationReport(tuple(checks))


# ---------------------------------------------------------------------------
# presets


def coefficient_preset(name: str, **kwargs) -> tuple:
    """Build a named (DriftSpec, DiffusionSpec) pair.

    Known names: "linear_additive", "allen_cahn_like",
    "power_dissipative" (requires m, nu; optional mu, c0).
    """
    if name == "linear_additive":
        drift = DriftSpec(
            g=lambda t, xi, v: np.zeros_like(v),
            h=None,
            lipschitz=lambda t: 1.0,
            g_prime=lambda t, xi, v: np.zeros_like(v),
            name=name,
        )
        diffusion = DiffusionSpec(
            sigma=lambda t, xi, x: np.ones_like(x),
            nu=0.0,
            bounded=True,
            lipschitz=lambda t: 1.0,
            sigma_min=1.0,
            sigma_prime=lambda t, xi, x: np.zeros_like(x),
            name=name,
        )
        return drift, diffusion

    if name == "allen_cahn_like":
        drift = DriftSpec(
            g=lambda t, xi, v: -(v ** 3),
            h=lambda t, xi, x: x,
            lipschitz=lambda t: 1.0,
            g_prime=lambda t, xi, v: -3.0 * v ** 2,
            h_jacobian=lambda t, xi, x: np.ones_like(x),
            dissipativity=(3.0, 1.0, 1.0),
            name=name,
        )
        diffusion = DiffusionSpec(
            sigma=lambda t, xi, x: np.ones_like(x),
            nu=0.0,
            bounded=True,
            lipschitz=lambda t: 1.0,
            sigma_min=1.0,
            sigma_prime=lambda t, xi, x: np.zeros_like(x),
            name=name,
        )
        return drift, diffusion

    if name == "power_dissipative":
        m = float(kwargs["m"])
        nu = float(kwargs["nu"])
        mu = float(kwargs.get("mu", 1.0))
        c0 = float(kwargs.get("c0", 1.0))
        if m <= 1.0:
            raise ValueError(f"power_dissipative requires m > 1, got {m}")
        if nu < 0.0:
            raise ValueError(f"power_dissipative requires nu >= 0, got {nu}")
        drift = DriftSpec(
            g=lambda t, xi, v: -mu * np.abs(v) ** m * np.sign(v),
            h=None,
            lipschitz=lambda t: 1.0,
            g_prime=lambda t, xi, v: -mu * m * np.abs(v) ** (m - 1.0),
            dissipativity=(m, mu, c0),
            name=name,
        )
        diffusion = DiffusionSpec(
            sigma=lambda t, xi, x: (1.0 + np.abs(x)) ** nu,
            nu=nu,
            bounded=(nu == 0.0),
            lipschitz=lambda t: 1.0,
            sigma_min=1.0,
            sigma_prime=lambda t, xi, x: nu * (1.0 + np.abs(x)) ** (nu - 1.0) * np.sign(x),
            name=name,
        )
        return drift, diffusion

    raise ValueError(f"unknown coefficient preset {name!r}")
