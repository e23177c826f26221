"""Benchmark PDE families: residuals, analytic/reference fields, point sets.

Input column order is spatial coordinates first, then time:
``(x, t)`` for 1D Burgers, ``(x, y, t)`` for 2D Burgers, ``(x, y)`` for
Kovasznay flow.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from . import autodiff as ad
from .nn import EmbeddingCodec

TWO_PI = 2.0 * np.pi
GRF_POINTS = 128
BURGERS1D_NU = 0.01

RE_RANGE = (20.0, 100.0)
NU_RANGE = (1e-4, 1e-3)


class SolverError(RuntimeError):
    def __init__(self, message: str, t_reached: float):
        self.t_reached = t_reached
        super().__init__(message)


@dataclass(frozen=True)
class Domain:
    bounds: tuple          # per spatial dimension (lo, hi)
    t_end: float | None = None

    def __post_init__(self):
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        if self.t_end is not None and self.t_end <= 0:
            raise ValueError("t_end must be positive")

    @property
    def box(self) -> np.ndarray:
        rows = list(self.bounds) + ([(0.0, self.t_end)] if self.t_end is not None else [])
        return np.array(rows, dtype=np.float64)

    def contains(self, pts, tol: float = 1e-12) -> bool:
        box = self.box
        pts = np.atleast_2d(pts)
        return bool(np.all(pts >= box[:, 0] - tol) and np.all(pts <= box[:, 1] + tol))


@dataclass
class PointSets:
    """Training points for one task.

    ``bc_pairs`` holds two equally long point arrays whose predictions are
    tied together (periodic boundary); it is empty for Dirichlet systems.
    """
    collocation: np.ndarray
    ic_points: np.ndarray
    ic_values: np.ndarray
    bc_points: np.ndarray
    bc_values: np.ndarray
    bc_pairs: tuple = ()

    def all_points(self) -> np.ndarray:
        parts = [self.collocation, self.ic_points, self.bc_points, *self.bc_pairs]
        return np.concatenate([p for p in parts if len(p)], axis=0)

    @property
    def n_bc(self) -> int:
        return len(self.bc_points) + sum(len(p) for p in self.bc_pairs)


@dataclass(frozen=True)
class PointBudget:
    collocation: int
    ic: int = 0
    bc_per_face: int = 0
    bc_times: int = 0      # periodic systems: number of sampled times


# --------------------------------------------------------------------------
# residual operators (work on taped nodes or arrays)

def residual_burgers1d(jet: ad.Jet2, nu: float):
    """u_t + u u_x - nu u_xx, i.e. u_t + (u^2/2)_x - nu u_xx."""
    u = jet.value
    return jet.d(1) + u * jet.d(0) - nu * jet.dd(0)


def residual_burgers2d(ju: ad.Jet2, jv: ad.Jet2, nu: float):
    u, v = ju.value, jv.value
    ru = ju.d(2) + u * ju.d(0) + v * ju.d(1) - nu * (ju.dd(0) + ju.dd(1))
    rv = jv.d(2) + u * jv.d(0) + v * jv.d(1) - nu * (jv.dd(0) + jv.dd(1))
    return ru, rv


def residual_kovasznay(ju: ad.Jet2, jv: ad.Jet2, jp: ad.Jet2, re: float):
    """(continuity, x-momentum, y-momentum) of steady incompressible NS."""
    u, v = ju.value, jv.value
    cont = ju.d(0) + jv.d(1)
    mx = u * ju.d(0) + v * ju.d(1) + jp.d(0) - (ju.dd(0) + ju.dd(1)) / re
    my = u * jv.d(0) + v * jv.d(1) + jp.d(1) - (jv.dd(0) + jv.dd(1)) / re
    return cont, mx, my


# --------------------------------------------------------------------------
# analytic solutions

def burgers2d_exponent(x, y, t, nu):
    return (-4.0 * np.asarray(x) + 4.0 * np.asarray(y) - np.asarray(t)) / (32.0 * nu)


def analytic_burgers2d(x, y, t, nu: float):
    """Travelling-front solution of the coupled 2D Burgers system.

    u = 3/4 - s/4, v = 3/4 + s/4 with s = 1 / (1 + exp(E)) evaluated as
    exp(log_sigmoid(-E)) so no intermediate overflows.
    """
    e = burgers2d_exponent(x, y, t, nu)
    s = np.exp(ad.log_sigmoid(-e))
    return 0.75 - 0.25 * s, 0.75 + 0.25 * s


def kovasznay_lambda(re: float) -> float:
    return re / 2.0 - np.sqrt(re * re / 4.0 + 4.0 * np.pi ** 2)


def analytic_kovasznay(x, y, re: float):
    lam = kovasznay_lambda(re)
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    e = np.exp(lam * x)
    u = 1.0 - e * np.cos(TWO_PI * y)
    v = lam * e * np.sin(TWO_PI * y) / TWO_PI
    p = 0.5 * (1.0 - np.exp(2.0 * lam * x))
    return u, v, p


def kovasznay_jets(points, re: float) -> list[ad.Jet2]:
    """Closed-form value/first/second partials of the Kovasznay fields."""
    x, y = points[:, 0], points[:, 1]
    lam = kovasznay_lambda(re)
    e = np.exp(lam * x)
    c, s = np.cos(TWO_PI * y), np.sin(TWO_PI * y)
    k = TWO_PI
    ju = ad.Jet2(1.0 - e * c, {0: -lam * e * c, 1: k * e * s},
                 {(0, 0): -lam ** 2 * e * c, (1, 1): k * k * e * c, (0, 1): lam * k * e * s})
    jv = ad.Jet2(lam * e * s / k, {0: lam ** 2 * e * s / k, 1: lam * e * c},
                 {(0, 0): lam ** 3 * e * s / k, (1, 1): -lam * k * e * s, (0, 1): lam ** 2 * e * c})
    e2 = np.exp(2.0 * lam * x)
    zero = np.zeros_like(x)
    jp = ad.Jet2(0.5 * (1.0 - e2), {0: -lam * e2, 1: zero},
                 {(0, 0): -2.0 * lam ** 2 * e2, (1, 1): zero, (0, 1): zero})
    return [ju, jv, jp]


def burgers2d_jets(points, nu: float) -> list[ad.Jet2]:
    x, y, t = points[:, 0], points[:, 1], points[:, 2]
    e = burgers2d_exponent(x, y, t, nu)
    s = np.exp(ad.log_sigmoid(-e))        # 1/(1+exp(E))
    sc = np.exp(ad.log_sigmoid(e))        # 1 - s
    ds = -s * sc                          # ds/dE
    dds = s * sc * (sc - s)               # d2s/dE2
    grad_e = {0: -1.0 / (8.0 * nu), 1: 1.0 / (8.0 * nu), 2: -1.0 / (32.0 * nu)}

    def field(sign):
        g = {i: sign * 0.25 * ds * gi for i, gi in grad_e.items()}
        h = {(i, j): sign * 0.25 * dds * grad_e[i] * grad_e[j]
             for i in range(3) for j in range(i, 3)}
        return ad.Jet2(0.75 + sign * 0.25 * s, g, h)
    return [field(-1.0), field(1.0)]


# --------------------------------------------------------------------------
# Gaussian random field initial conditions

def grf_mode_std(k) -> np.ndarray:
    """Per-mode standard deviation of N(0, 625(-Lap + 25 I)^-2) on [0, 1)."""
    k = np.asarray(k, dtype=np.float64)
    return 25.0 / ((TWO_PI * k) ** 2 + 25.0)


def grf_basis(n: int = GRF_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal real Fourier basis on the grid, truncated at Nyquist.

    Returns ``(basis, std)`` with ``basis`` of shape (1 + 2*K, n): the
    constant, then sqrt(2) cos(2 pi k x) for k=1..K, then sqrt(2) sin.
    For even ``n`` the Nyquist cosine is unit-scaled and its sine row is
    zero, so the draw order stays fixed.
    """
    x = np.arange(n) / n
    K = n // 2
    ks = np.arange(1, K + 1)
    basis = np.vstack([np.ones((1, n)),
                       np.sqrt(2.0) * np.cos(TWO_PI * np.outer(ks, x)),
                       np.sqrt(2.0) * np.sin(TWO_PI * np.outer(ks, x))])
    if n % 2 == 0:
        # Nyquist: cos(pi j) = (-1)^j has unit norm already; sin(pi j) vanishes
        basis[K] /= np.sqrt(2.0)
        basis[2 * K] = 0.0
    std = np.concatenate([[grf_mode_std(0)], grf_mode_std(ks), grf_mode_std(ks)])
    return basis, std


def sample_grf_batch(rng: np.random.Generator, n_samples: int, n: int = GRF_POINTS) -> np.ndarray:
    basis, std = grf_basis(n)
    xi = rng.standard_normal((n_samples, std.size))
    return (xi * std) @ basis


def sample_grf_u0(seed: int, n: int = GRF_POINTS) -> np.ndarray:
    """One periodic initial condition on ``n`` equispaced points of [0, 1)."""
    return sample_grf_batch(np.random.default_rng(seed), 1, n)[0]


# --------------------------------------------------------------------------
# pseudo-spectral 1D Burgers reference

@dataclass
class SpectralSolution:
    x: np.ndarray          # (n,) grid on [0, 1)
    t: np.ndarray          # (n_t,) output times
    u: np.ndarray          # (n_t, n)
    dt: float
    nu: float

    @cached_property
    def _coeff_spline(self):
        c = np.fft.rfft(self.u, axis=1) / self.x.size
        return CubicSpline(self.t, c, axis=0)

    def __call__(self, x, t) -> np.ndarray:
        """Fourier interpolation in x, cubic spline in t."""
        x, t = np.asarray(x, dtype=np.float64), np.asarray(t, dtype=np.float64)
        c = self._coeff_spline(t)                   # (N, n/2+1)
        n = self.x.size
        k = np.arange(c.shape[1])
        w = np.full(k.size, 2.0)
        w[0] = 1.0
        if n % 2 == 0:
            w[-1] = 1.0
        phase = np.exp(1j * TWO_PI * np.outer(x, k))
        return np.real((c * w * phase).sum(axis=1))


def _burgers_rhs(uh, k, mask, n):
    u = np.fft.irfft(uh, n)
    return -0.5j * k * np.fft.rfft(u * u) * mask


def solve_burgers1d_reference(u0, nu: float = BURGERS1D_NU, times=None, cfl: float = 0.2,
                              refine: int = 1) -> SpectralSolution:
    """Periodic viscous Burgers on [0, 1) by Fourier pseudo-spectral + IF-RK4.

    Diffusion is integrated exactly (integrating factor); the nonlinear flux
    is 2/3-dealiased.  The step is ``cfl * dx / max|u0|`` (Burgers obeys a
    maximum principle), shrunk so every output time is hit exactly, then
    divided by ``refine``.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    n = u0.size
    if nu <= 0:
        raise ValueError("nu must be positive")
    times = np.linspace(0.0, 1.0, 1001) if times is None else np.asarray(times, dtype=np.float64)
    if times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must start at 0 and increase")
    if not np.all(np.isfinite(u0)):
        raise SolverError("non-finite initial condition", 0.0)
    dx = 1.0 / n
    umax = max(np.abs(u0).max(), 1e-12)
    dt_target = min(cfl * dx / umax, 1e-2)
    k = TWO_PI * np.arange(n // 2 + 1)
    mask = (np.arange(n // 2 + 1) < n / 3.0).astype(np.float64)
    out = np.empty((times.size, n))
    out[0] = u0
    uh = np.fft.rfft(u0)
    dt_used = dt_target
    for j in range(1, times.size):
        span = times[j] - times[j - 1]
        steps = int(np.ceil(span / dt_target - 1e-9)) * refine
        dt = span / steps
        dt_used = min(dt_used, dt)
        E = np.exp(-nu * k * k * dt)
        E2 = np.exp(-nu * k * k * dt / 2.0)
        for _ in range(steps):
            k1 = _burgers_rhs(uh, k, mask, n)
            k2 = _burgers_rhs(E2 * (uh + 0.5 * dt * k1), k, mask, n)
            k3 = _burgers_rhs(E2 * uh + 0.5 * dt * k2, k, mask, n)
            k4 = _burgers_rhs(E * uh + dt * E2 * k3, k, mask, n)
            uh = E * uh + dt / 6.0 * (E * k1 + 2.0 * E2 * (k2 + k3) + k4)
        out[j] = np.fft.irfft(uh, n)
        if not np.all(np.isfinite(out[j])):
            raise SolverError(f"non-finite field at t={times[j]:.4g}", float(times[j - 1]))
    return SpectralSolution(np.arange(n) / n, times, out, dt_used, nu)


def spectral_residual(sol: SpectralSolution, x, t, h: float = 1e-4) -> np.ndarray:
    """Pointwise Burgers residual of the interpolated reference field.

    Space derivatives are exact derivatives of the Fourier interpolant;
    the time derivative is a central difference of step ``h``.
    """
    x, t = np.asarray(x, dtype=np.float64), np.asarray(t, dtype=np.float64)
    c = sol._coeff_spline(t)
    n = sol.x.size
    kk = np.arange(c.shape[1])
    w = np.full(kk.size, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    phase = np.exp(1j * TWO_PI * np.outer(x, kk)) * c * w
    u = np.real(phase.sum(axis=1))
    ux = np.real((phase * 1j * TWO_PI * kk).sum(axis=1))
    uxx = np.real((phase * -(TWO_PI * kk) ** 2).sum(axis=1))
    ut = (sol(x, t + h) - sol(x, t - h)) / (2.0 * h)
    return ut + u * ux - sol.nu * uxx


# --------------------------------------------------------------------------
# systems

class PdeSystem:
    """One member of a PDE family (fixed task parameters)."""

    system_id: str = ""
    input_dim: int = 0
    output_dim: int = 0
    components: tuple = ()
    directions: tuple = ()
    second: tuple = ()
    domain: Domain
    codec: EmbeddingCodec

    def residuals(self, jets: Sequence[ad.Jet2]) -> list:
        raise NotImplementedError

    def reference(self, points) -> np.ndarray:
        raise NotImplementedError

    def reference_jets(self, points) -> list[ad.Jet2] | None:
        return None

    def raw_embedding(self) -> np.ndarray:
        raise NotImplementedError

    def embedding(self) -> np.ndarray:
        return self.codec.encode(self.raw_embedding())

    def default_budget(self) -> PointBudget:
        raise NotImplementedError

    def params_dict(self) -> dict:
        raise NotImplementedError

    def eval_grid(self) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        brief = {k: (f"<{len(v)} floats>" if isinstance(v, list) and len(v) > 4 else v)
                 for k, v in self.params_dict().items()}
        return f"{type(self).__name__}({brief})"


def _lattice(n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    return np.linspace(lo, hi, n)


class Kovasznay(PdeSystem):
    system_id = "kovasznay"
    input_dim = 2
    output_dim = 3
    components = ("u", "v", "p")
    directions = (0, 1)
    second = (0, 1)

    def __init__(self, re: float):
        if re <= 0:
            raise ValueError("Re must be positive")
        self.re = float(re)
        self.domain = Domain(((0.0, 1.0), (0.0, 1.0)))
        self.codec = EmbeddingCodec("affine", *RE_RANGE)

    @property
    def lam(self) -> float:
        return kovasznay_lambda(self.re)

    def residuals(self, jets):
        return list(residual_kovasznay(*jets, self.re))

    def reference(self, points):
        points = np.atleast_2d(points)
        return np.stack(analytic_kovasznay(points[:, 0], points[:, 1], self.re), axis=1)

    def reference_jets(self, points):
        return kovasznay_jets(np.atleast_2d(points), self.re)

    def raw_embedding(self):
        return np.array([self.re])

    def params_dict(self):
        return {"re": self.re}

    def default_budget(self):
        return PointBudget(collocation=2601, bc_per_face=80)

    def eval_grid(self):
        g = _lattice(101)
        X, Y = np.meshgrid(g, g, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=1)


class Burgers2D(PdeSystem):
    system_id = "burgers2d"
    input_dim = 3
    output_dim = 2
    components = ("u", "v")
    directions = (0, 1, 2)
    second = (0, 1)

    def __init__(self, nu: float):
        if nu <= 0:
            raise ValueError("nu must be positive")
        self.nu = float(nu)
        self.domain = Domain(((0.0, 1.0), (0.0, 1.0)), t_end=1.0)
        self.codec = EmbeddingCodec("log10", *NU_RANGE)

    def residuals(self, jets):
        return list(residual_burgers2d(*jets, self.nu))

    def reference(self, points):
        points = np.atleast_2d(points)
        return np.stack(analytic_burgers2d(points[:, 0], points[:, 1], points[:, 2], self.nu), axis=1)

    def reference_jets(self, points):
        return burgers2d_jets(np.atleast_2d(points), self.nu)

    def raw_embedding(self):
        return np.array([self.nu])

    def params_dict(self):
        return {"nu": self.nu}

    def default_budget(self):
        return PointBudget(collocation=10_000, ic=500, bc_per_face=100)

    def eval_grid(self, t: float = 1.0):
        g = _lattice(101)
        X, Y = np.meshgrid(g, g, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), np.full(X.size, t)], axis=1)


class Burgers1D(PdeSystem):
    system_id = "burgers1d"
    input_dim = 2
    output_dim = 1
    components = ("u",)
    directions = (0, 1)
    second = (0,)

    def __init__(self, u0, nu: float = BURGERS1D_NU, t_end: float = 1.0):
        self.u0 = np.asarray(u0, dtype=np.float64).copy()
        if self.u0.size != GRF_POINTS:
            raise ValueError(f"u0 must have {GRF_POINTS} samples")
        self.nu = float(nu)
        self.domain = Domain(((0.0, 1.0),), t_end=t_end)
        self.codec = EmbeddingCodec("identity")

    @cached_property
    def solution(self) -> SpectralSolution:
        return solve_burgers1d_reference(self.u0, self.nu, np.linspace(0.0, self.domain.t_end, 1001))

    def residuals(self, jets):
        return [residual_burgers1d(jets[0], self.nu)]

    def reference(self, points):
        points = np.atleast_2d(points)
        return self.solution(points[:, 0] % 1.0, points[:, 1])[:, None]

    def raw_embedding(self):
        return self.u0.copy()

    def params_dict(self):
        return {"u0": self.u0.tolist(), "nu": self.nu}

    def default_budget(self):
        return PointBudget(collocation=10_000, ic=GRF_POINTS, bc_times=100)

    def eval_grid(self):
        x = np.arange(256) / 256.0
        t = np.linspace(0.0, self.domain.t_end, 100)
        X, T = np.meshgrid(x, t, indexing="ij")
        return np.stack([X.ravel(), T.ravel()], axis=1)


SYSTEMS = {"kovasznay": Kovasznay, "burgers2d": Burgers2D, "burgers1d": Burgers1D}


def make_system(system_id: str, **params) -> PdeSystem:
    try:
        cls = SYSTEMS[system_id]
    except KeyError:
        raise ValueError(f"unknown system {system_id!r}; choose from {sorted(SYSTEMS)}") from None
    return cls(**params)


# --------------------------------------------------------------------------
# point sets

def make_point_sets(system: PdeSystem, seed: int, budget: PointBudget | None = None) -> PointSets:
    """Collocation / initial / boundary points with targets from the reference."""
    budget = budget or system.default_budget()
    rng = np.random.default_rng(seed)
    empty = np.zeros((0, system.input_dim))
    empty_v = np.zeros((0, system.output_dim))

    if isinstance(system, Kovasznay):
        g = _lattice(101)
        X, Y = np.meshgrid(g, g, indexing="ij")
        lattice = np.stack([X.ravel(), Y.ravel()], axis=1)
        colloc = lattice[rng.choice(len(lattice), budget.collocation, replace=False)]
        faces = []
        for fixed_axis, fixed_val in ((0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0)):
            free = g[rng.choice(g.size, budget.bc_per_face, replace=False)]
            pts = np.empty((budget.bc_per_face, 2))
            pts[:, fixed_axis] = fixed_val
            pts[:, 1 - fixed_axis] = free
            faces.append(pts)
        bc = np.concatenate(faces)
        return PointSets(colloc, empty, empty_v, bc, system.reference(bc))

    if isinstance(system, Burgers2D):
        colloc = rng.uniform(0.0, 1.0, (budget.collocation, 3))
        ic = np.column_stack([rng.uniform(0.0, 1.0, (budget.ic, 2)), np.zeros(budget.ic)])
        faces = []
        for fixed_axis, fixed_val in ((0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0)):
            pts = rng.uniform(0.0, 1.0, (budget.bc_per_face, 3))
            pts[:, fixed_axis] = fixed_val
            faces.append(pts)
        bc = np.concatenate(faces)
        return PointSets(colloc, ic, system.reference(ic), bc, system.reference(bc))

    if isinstance(system, Burgers1D):
        T = system.domain.t_end
        colloc = np.column_stack([rng.uniform(0.0, 1.0, budget.collocation),
                                  rng.uniform(0.0, T, budget.collocation)])
        n_ic = budget.ic
        idx = np.arange(GRF_POINTS) if n_ic == GRF_POINTS else np.sort(rng.choice(GRF_POINTS, n_ic, replace=False))
        ic = np.column_stack([idx / GRF_POINTS, np.zeros(idx.size)])
        ts = rng.uniform(0.0, T, budget.bc_times)
        left = np.column_stack([np.zeros_like(ts), ts])
        right = np.column_stack([np.ones_like(ts), ts])
        return PointSets(colloc, ic, system.u0[idx][:, None], empty, empty_v, (left, right))

    raise TypeError(f"no point-set rule for {type(system).__name__}")


def subsample_budget(system: PdeSystem, fraction: float) -> PointBudget:
    """Scaled-down budget (at least one point per category that is present)."""
    b = system.default_budget()

    def scale(n):
        return max(1, int(round(n * fraction))) if n else 0
    return PointBudget(scale(b.collocation), b.ic if isinstance(system, Burgers1D) else scale(b.ic),
                       scale(b.bc_per_face), scale(b.bc_times))


# --------------------------------------------------------------------------
# tasks

def sample_tasks(system_id: str, n: int, seed: int) -> list[PdeSystem]:
    """``n`` task instances drawn from the family's parameter measure."""
    rng = np.random.default_rng(seed)
    if system_id == "kovasznay":
        return [Kovasznay(re) for re in rng.uniform(*RE_RANGE, n)]
    if system_id == "burgers2d":
        lo, hi = np.log10(NU_RANGE)
        return [Burgers2D(10.0 ** e) for e in rng.uniform(lo, hi, n)]
    if system_id == "burgers1d":
        return [Burgers1D(u0) for u0 in sample_grf_batch(rng, n)]
    raise ValueError(f"unknown system {system_id!r}")


def base_task(system_id: str) -> PdeSystem:
    if system_id == "kovasznay":
        return Kovasznay(60.0)
    if system_id == "burgers2d":
        return Burgers2D(5e-4)
    if system_id == "burgers1d":
        return Burgers1D(sample_grf_u0(0))
    raise ValueError(f"unknown system {system_id!r}")


def task_record(system: PdeSystem, seed: int) -> dict:
    return {"system": system.system_id, "params": system.params_dict(), "seed": int(seed)}


def system_from_record(rec: dict) -> PdeSystem:
    return make_system(rec["system"], **rec["params"])


def write_tasks(path, systems: Sequence[PdeSystem], seeds: Sequence[int]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s, seed in zip(systems, seeds):
            fh.write(json.dumps(task_record(s, seed)) + "\n")
    return path


def read_tasks(path) -> list[tuple[PdeSystem, int]]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append((system_from_record(rec), int(rec["seed"])))
    return out


def coord_names(system: PdeSystem) -> list[str]:
    return {"kovasznay": ["x", "y"], "burgers2d": ["x", "y", "t"], "burgers1d": ["x", "t"]}[system.system_id]


def write_field_csv(path, system: PdeSystem, points, values) -> Path:
    """Long-format field export: ``x[,y][,t],component,value``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.atleast_2d(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*coord_names(system), "component", "value"])
        for ci, name in enumerate(system.components):
            for p, v in zip(points, values[:, ci]):
                w.writerow([*(repr(float(c)) for c in p), name, repr(float(v))])
    return path
