"""Flat torus model and analytic Morse fields.

Points on T^n = (R/Z)^n are plain float arrays with coordinates in [0, 1).
Fields are closed-form (cosine modes or periodised Gaussian bumps) so every
derivative used by the flow is exact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi

NEWTON_TOL = 1e-10
DEDUP_TOL = 1e-6
HESS_TOL = 1e-8
ND_TOL = 1e-8

# images kept on each side when periodising a Gaussian; widths are capped below
_BUMP_IMAGES = 4
_MAX_BUMP_WIDTH = 0.3


class DimensionError(ValueError):
    """Raised when points or vectors of different dimension are combined."""


class DegeneracyError(ValueError):
    """Raised when a field has a critical point that is not Morse."""


def wrap(x):
    """Map coordinates into [0, 1)."""
    r = np.mod(np.asarray(x, dtype=float), 1.0)
    return np.where(r >= 1.0, 0.0, r)


def wrapped_diff(p, r):
    """Per-coordinate difference ``p - r`` mapped into [-1/2, 1/2]."""
    p = np.asarray(p, dtype=float)
    r = np.asarray(r, dtype=float)
    if p.shape[-1] != r.shape[-1]:
        raise DimensionError(f"dimension mismatch: {p.shape[-1]} vs {r.shape[-1]}")
    d = p - r
    return d - np.round(d)


def torus_distance(p, r):
    """Geodesic distance on the flat torus."""
    return np.linalg.norm(wrapped_diff(p, r), axis=-1)


def torus_translate(p, v):
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    if p.shape[-1] != v.shape[-1]:
        raise DimensionError(f"dimension mismatch: {p.shape[-1]} vs {v.shape[-1]}")
    return wrap(p + v)


def green_kernel_sq(p, r, g_scale=1.0):
    """Leading-order kernel gamma_n * G^(2/(2-n)) in the flat model, i.e. g_scale * d^2."""
    d = wrapped_diff(p, r)
    return g_scale * np.sum(d * d, axis=-1)


@dataclass(frozen=True)
class MorseField:
    """Positive scalar field K on T^n with exact derivatives.

    ``kind == "cosine"``: K(x) = offset + sum_m amp_m cos(2 pi k_m . x) with
    integer wave vectors k_m (rows of ``waves``).

    ``kind == "bumps"``: K(x) = offset + sum_m amp_m prod_i g_m(x_i - c_mi)
    where g_m is a Gaussian of width ``widths[m]`` periodised over Z.
    """

    kind: str
    dimension: int
    offset: float
    amps: np.ndarray
    waves: np.ndarray | None = None
    centers: np.ndarray | None = None
    widths: np.ndarray | None = None
    min_value: float = field(init=False)

    def __post_init__(self):
        if self.kind not in ("cosine", "bumps"):
            raise ValueError(f"unknown field type {self.kind!r}")
        object.__setattr__(self, "amps", np.asarray(self.amps, dtype=float).reshape(-1))
        n = int(self.dimension)
        if self.kind == "cosine":
            waves = np.asarray(self.waves, dtype=float).reshape(len(self.amps), n)
            if not np.all(waves == np.round(waves)):
                raise ValueError("cosine wave vectors must be integer")
            object.__setattr__(self, "waves", waves)
            lower = self.offset - np.sum(np.abs(self.amps))
        else:
            centers = wrap(np.asarray(self.centers, dtype=float).reshape(len(self.amps), n))
            widths = np.asarray(self.widths, dtype=float).reshape(-1)
            if np.any(widths <= 0) or np.any(widths > _MAX_BUMP_WIDTH):
                raise ValueError(f"bump widths must lie in (0, {_MAX_BUMP_WIDTH}]")
            object.__setattr__(self, "centers", centers)
            object.__setattr__(self, "widths", widths)
            peak = np.array([_periodic_gaussian(np.zeros(1), w)[0][0] for w in widths])
            lower = self.offset + np.sum(np.where(self.amps < 0, self.amps * peak**n, 0.0))
        if lower <= 0:
            raise ValueError(f"field is not bounded below by a positive constant (bound {lower:g})")
        object.__setattr__(self, "min_value", float(lower))

    # -- construction / serialisation ---------------------------------------

    @classmethod
    def from_dict(cls, data, dimension):
        kind = data.get("type", "cosine")
        offset = float(data["offset"])
        coeffs = data.get("coefficients", [])
        n = int(dimension)
        if kind == "cosine":
            amps, waves = [], []
            if coeffs and all(np.isscalar(c) for c in coeffs):
                # shorthand: one amplitude per axis, unit frequency
                if len(coeffs) != n:
                    raise DimensionError(f"{len(coeffs)} axis coefficients for dimension {n}")
                for i, c in enumerate(coeffs):
                    if c != 0:
                        k = [0] * n
                        k[i] = 1
                        amps.append(float(c))
                        waves.append(k)
            else:
                for c in coeffs:
                    k = list(c["k"])
                    if len(k) != n:
                        raise DimensionError(f"wave vector {k} has wrong dimension for n={n}")
                    amps.append(float(c["amp"]))
                    waves.append(k)
            return cls("cosine", n, offset, np.array(amps), waves=np.array(waves, dtype=float).reshape(-1, n))
        if kind == "bumps":
            amps = [float(c["amp"]) for c in coeffs]
            centers = [list(c["center"]) for c in coeffs]
            if any(len(c) != n for c in centers):
                raise DimensionError(f"bump center has wrong dimension for n={n}")
            widths = [float(c["width"]) for c in coeffs]
            return cls("bumps", n, offset, np.array(amps), centers=np.array(centers).reshape(-1, n),
                       widths=np.array(widths))
        raise ValueError(f"unknown field type {kind!r}")

    def to_dict(self):
        if self.kind == "cosine":
            coeffs = [{"amp": float(a), "k": [int(v) for v in k]} for a, k in zip(self.amps, self.waves)]
        else:
            coeffs = [{"amp": float(a), "center": [float(v) for v in c], "width": float(w)}
                      for a, c, w in zip(self.amps, self.centers, self.widths)]
        return {"type": self.kind, "offset": float(self.offset), "coefficients": coeffs}

    @property
    def is_separable(self):
        """True when K is a sum of one-dimensional functions of single coordinates."""
        if self.kind != "cosine":
            return False
        return bool(np.all(np.count_nonzero(self.waves, axis=1) <= 1))

    # -- evaluation ----------------------------------------------------------

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dimension:
            raise DimensionError(f"point of dimension {x.shape[-1]} for field of dimension {self.dimension}")
        return x

    def value(self, x):
        x = self._check(x)
        if self.kind == "cosine":
            phase = TWO_PI * x @ self.waves.T
            return self.offset + np.cos(phase) @ self.amps
        g0, _, _, _ = self._bump_factors(x)
        return self.offset + np.prod(g0, axis=-1) @ self.amps

    def gradient(self, x):
        x = self._check(x)
        if self.kind == "cosine":
            phase = TWO_PI * x @ self.waves.T
            return -(np.sin(phase) * self.amps) @ (TWO_PI * self.waves)
        g0, g1, _, _ = self._bump_factors(x)
        out = np.zeros(x.shape)
        for k in range(self.dimension):
            out[..., k] = (g1[..., k] * _prod_except(g0, k)) @ self.amps
        return out

    def hessian(self, x):
        x = self._check(x)
        if self.kind == "cosine":
            phase = TWO_PI * x @ self.waves.T
            w = -np.cos(phase) * self.amps * TWO_PI**2
            return np.einsum("...m,mi,mj->...ij", w, self.waves, self.waves)
        g0, g1, g2, _ = self._bump_factors(x)
        n = self.dimension
        out = np.zeros(x.shape + (n,))
        for k in range(n):
            out[..., k, k] = (g2[..., k] * _prod_except(g0, k)) @ self.amps
            for j in range(k + 1, n):
                v = (g1[..., k] * g1[..., j] * _prod_except(g0, k, j)) @ self.amps
                out[..., k, j] = v
                out[..., j, k] = v
        return out

    def laplacian(self, x):
        x = self._check(x)
        if self.kind == "cosine":
            phase = TWO_PI * x @ self.waves.T
            k2 = np.sum(self.waves**2, axis=1)
            return -(np.cos(phase) * self.amps * TWO_PI**2) @ k2
        g0, _, g2, _ = self._bump_factors(x)
        total = 0.0
        for k in range(self.dimension):
            total = total + (g2[..., k] * _prod_except(g0, k)) @ self.amps
        return total

    def grad_laplacian(self, x):
        """Gradient of the Laplacian, needed by the third-order centre testing."""
        x = self._check(x)
        if self.kind == "cosine":
            phase = TWO_PI * x @ self.waves.T
            k2 = np.sum(self.waves**2, axis=1)
            return (np.sin(phase) * self.amps * TWO_PI**3 * k2) @ self.waves
        g0, g1, g2, g3 = self._bump_factors(x)
        n = self.dimension
        out = np.zeros(x.shape)
        for j in range(n):
            acc = g3[..., j] * _prod_except(g0, j)
            for k in range(n):
                if k != j:
                    acc = acc + g2[..., k] * g1[..., j] * _prod_except(g0, k, j)
            out[..., j] = acc @ self.amps
        return out

    def _bump_factors(self, x):
        # x: (..., n) -> factors of shape (..., m, n)
        delta = wrapped_diff(x[..., None, :], self.centers)
        sig = self.widths[:, None]
        return _periodic_gaussian(delta, sig)


def _periodic_gaussian(t, sigma):
    """Periodised Gaussian and its first three derivatives at offsets ``t``."""
    t = np.asarray(t, dtype=float)
    g0 = np.zeros(t.shape)
    g1 = np.zeros(t.shape)
    g2 = np.zeros(t.shape)
    g3 = np.zeros(t.shape)
    s2 = sigma * sigma
    for j in range(-_BUMP_IMAGES, _BUMP_IMAGES + 1):
        s = t + j
        e = np.exp(-s * s / (2.0 * s2))
        g0 = g0 + e
        g1 = g1 - s / s2 * e
        g2 = g2 + (s * s / s2**2 - 1.0 / s2) * e
        g3 = g3 + (3.0 * s / s2**2 - s**3 / s2**3) * e
    return g0, g1, g2, g3


def _prod_except(g, *skip):
    mask = np.ones(g.shape[-1], dtype=bool)
    mask[list(skip)] = False
    return np.prod(g[..., mask], axis=-1)


def builtin_field(n=6):
    """Default separable cosine field used by the presets.

    Axis 0 carries a frequency-2 mode so that K has two distinct global
    maxima, at x_0 = 0 and x_0 = 1/2; the amplitude 0.7 keeps the Laplacian
    away from zero at every critical point for all n in 5..9.
    """
    amps = [0.7] + [1.0] * (n - 1)
    waves = np.zeros((n, n))
    waves[0, 0] = 2
    for i in range(1, n):
        waves[i, i] = 1
    return MorseField("cosine", n, float(n + 2), np.array(amps), waves=waves)


# -- critical points ---------------------------------------------------------

@dataclass(frozen=True)
class CriticalPoint:
    location: np.ndarray
    morse_index: int
    laplacian: float
    gradient_residual: float
    value: float

    def to_dict(self):
        return {
            "location": [float(v) for v in self.location],
            "morse_index": int(self.morse_index),
            "laplacian": float(self.laplacian),
            "gradient_residual": float(self.gradient_residual),
            "value": float(self.value),
        }


def _newton_batch(K, seeds, newton_tol, max_iter=60):
    x = np.array(seeds, dtype=float)
    step_cap = 0.125
    for _ in range(max_iter):
        g = K.gradient(x)
        res = np.linalg.norm(g, axis=-1)
        if np.all(res <= newton_tol):
            break
        H = K.hessian(x)
        step = -np.einsum("...ij,...j->...i", np.linalg.pinv(H, rcond=1e-12), g)
        norm = np.linalg.norm(step, axis=-1, keepdims=True)
        step = np.where(norm > step_cap, step * step_cap / np.maximum(norm, 1e-300), step)
        x = wrap(x + np.where(res[..., None] <= newton_tol, 0.0, step))
    return x, np.linalg.norm(K.gradient(x), axis=-1)


def _dedup(points, tol):
    if len(points) == 0:
        return points
    quant = np.mod(np.round(points, 8), 1.0)
    _, first = np.unique(quant, axis=0, return_index=True)
    points = points[np.sort(first)]
    keep = []
    for p in points:
        if not keep or np.min(torus_distance(np.array(keep), p)) >= tol:
            keep.append(p)
    return np.array(keep)


def _axis_roots(K, axis, density, newton_tol, hess_tol):
    rows = np.nonzero(K.waves[:, axis])[0]
    if len(rows) == 0:
        raise DegeneracyError(f"K is constant along axis {axis}: every critical point is degenerate")
    amps = K.amps[rows]
    freqs = K.waves[rows, axis]
    kmax = int(np.max(np.abs(freqs)))

    def d1(t):
        return -np.sin(TWO_PI * np.outer(t, freqs)) @ (amps * TWO_PI * freqs)

    def d2(t):
        return -np.cos(TWO_PI * np.outer(t, freqs)) @ (amps * (TWO_PI * freqs) ** 2)

    t = (np.arange(max(density, 8 * kmax)) + 0.25) / max(density, 8 * kmax)
    for _ in range(100):
        f1, f2 = d1(t), d2(t)
        step = np.where(np.abs(f2) > 1e-12, -f1 / np.where(np.abs(f2) > 1e-12, f2, 1.0), 0.0)
        step = np.clip(step, -0.05 / kmax, 0.05 / kmax)
        t = wrap(t + step)
    ok = np.abs(d1(t)) <= newton_tol
    roots = _dedup(t[ok][:, None], DEDUP_TOL)[:, 0]
    if np.any(np.abs(d2(roots)) < hess_tol):
        raise DegeneracyError(f"degenerate critical value along axis {axis}")
    return np.sort(roots)


def find_critical_points(K, grid_density=6, newton_tol=NEWTON_TOL, dedup_tol=DEDUP_TOL, hess_tol=HESS_TOL):
    """Locate all critical points of K by Newton iteration seeded from a uniform grid.

    Separable cosine fields are searched axis by axis (the critical set is the
    product of the one-dimensional critical sets); other fields use a full
    grid of ``grid_density ** n`` seeds. Seeds that fail to converge are
    dropped. Raises DegeneracyError if any critical point found is not Morse.
    """
    if grid_density < 2:
        raise ValueError("grid_density must be at least 2")
    n = K.dimension
    if K.is_separable:
        axes = [_axis_roots(K, i, grid_density, newton_tol, hess_tol) for i in range(n)]
        cand = np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, n)
    else:
        ticks = (np.arange(grid_density) + 0.5) / grid_density
        seeds = np.array(list(itertools.product(ticks, repeat=n)), dtype=float)
        if K.kind == "bumps":
            seeds = np.vstack([seeds, K.centers])
        x, res = _newton_batch(K, seeds, newton_tol)
        cand = _dedup(x[res <= newton_tol], dedup_tol)
    if len(cand) == 0:
        return []
    # polish and classify
    x, res = _newton_batch(K, cand, 1e-14, max_iter=5)
    x = _dedup(x, dedup_tol)
    res = np.linalg.norm(K.gradient(x), axis=-1)
    eig = np.linalg.eigvalsh(K.hessian(x))
    lap = K.laplacian(x)
    val = K.value(x)
    out = []
    for i in range(len(x)):
        if res[i] > newton_tol:
            continue
        if np.min(np.abs(eig[i])) < hess_tol:
            raise DegeneracyError(f"critical point {x[i].tolist()} has a singular Hessian")
        out.append(CriticalPoint(x[i].copy(), int(np.sum(eig[i] < 0)), float(lap[i]), float(res[i]), float(val[i])))
    out.sort(key=lambda c: tuple(c.location))
    return out


@dataclass
class NondegeneracyReport:
    ok: bool
    violations: list

    def __bool__(self):
        return self.ok


def check_nondegeneracy(K, crits, nd_tol=ND_TOL, hess_tol=HESS_TOL):
    """Check that no critical point has vanishing Laplacian (and that all are Morse)."""
    violations = []
    for c in crits:
        loc = [round(float(v), 12) for v in c.location]
        if abs(c.laplacian) <= nd_tol:
            violations.append(f"Laplacian {c.laplacian:.3e} at {loc} is within nd_tol={nd_tol:g}")
        eig = np.linalg.eigvalsh(K.hessian(c.location))
        if np.min(np.abs(eig)) < hess_tol:
            violations.append(f"Hessian at {loc} is singular (min |eig| {np.min(np.abs(eig)):.3e})")
    return NondegeneracyReport(not violations, violations)
