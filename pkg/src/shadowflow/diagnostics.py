"""Post-processing of trajectories: rates, end states, indices, towers, toy model."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .bubbles import DomainError
from .geometry import torus_distance
from .reduced_energy import limit_energy_readings

TOWER_RADIUS = 0.05
MONO_TOL = 1e-8
CONV_RADIUS = 1e-3


class InsufficientDataError(ValueError):
    """Too few samples for a meaningful fit."""


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    window: tuple

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2, "window": list(self.window)}


def _fit_log(t, logy, window=None, min_samples=10):
    t = np.asarray(t, dtype=float)
    logy = np.asarray(logy, dtype=float)
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, logy = t[keep], logy[keep]
    if len(t) < min_samples:
        raise InsufficientDataError(f"need at least {min_samples} samples, got {len(t)}")
    if not np.all(np.isfinite(logy)):
        raise DomainError("series must be strictly positive in the fit window")
    slope, intercept = np.polyfit(t, logy, 1)
    resid = logy - (slope * t + intercept)
    ss_tot = float(np.sum((logy - logy.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    # a perfectly flat series is fit exactly by a zero slope
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), float(min(max(r2, 0.0), 1.0)), (float(t[0]), float(t[-1])))


def fit_exponential(t, y, window=None, min_samples=10):
    """Least-squares fit of ln y = slope * t + intercept."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, y = t[keep], y[keep]
    if np.any(~(y > 0)):
        raise DomainError("exponential fits need y > 0 throughout the window")
    return _fit_log(t, np.log(y), None, min_samples)


def index_at_infinity(morse_indices, n):
    """(q - 1) + sum_i (n - m(K, x_i))."""
    m = list(morse_indices)
    if not m:
        raise ValueError("need at least one critical point")
    return (len(m) - 1) + sum(n - int(mi) for mi in m)


def index_table(crits, n, q_max=3):
    """Index at infinity of every subset of size <= q_max of the negative-Laplacian critical points.

    Returns a dict mapping tuples of catalogue positions to the index.
    """
    catalog = [c for c in crits if c.laplacian < 0]
    table = {}
    for q in range(1, q_max + 1):
        for combo in combinations(range(len(catalog)), q):
            table[combo] = index_at_infinity([catalog[i].morse_index for i in combo], n)
    return catalog, table


@dataclass(frozen=True)
class EndReport:
    outcome: str
    limit_points: list | None
    rates: dict
    index_at_infinity: int | None
    distinct_limits: bool
    limit_energy_readings: tuple | None
    rate_errors: dict

    def to_dict(self):
        def rate(v):
            if v is None:
                return None
            return [r.to_dict() if r is not None else None for r in v]

        return {
            "outcome": self.outcome,
            "limit_points": None if self.limit_points is None else [c.to_dict() for c in self.limit_points],
            "rates": {k: rate(v) for k, v in self.rates.items()},
            "rate_errors": self.rate_errors,
            "index_at_infinity": self.index_at_infinity,
            "distinct_limits": self.distinct_limits,
            "limit_energy_readings": None if self.limit_energy_readings is None else list(self.limit_energy_readings),
        }

    def rates_negative(self, r2_min=0.99, keys=("inv_lambda", "balance_defect", "vnorm", "center_dist")):
        """True iff every requested rate was fitted with slope < 0 and R^2 > r2_min."""
        for k in keys:
            fits = self.rates.get(k)
            if fits is None or any(f is None or not (f.slope < 0 and f.r2 > r2_min) for f in fits):
                return False
        return True


def _nearest(crits, x):
    locs = np.array([c.location for c in crits])
    d = torus_distance(locs, x)
    i = int(np.argmin(d))
    return crits[i], float(d[i])


def _rate_series(fn, t, key, errors):
    try:
        return fn(t)
    except (DomainError, InsufficientDataError) as exc:
        errors[key] = str(exc)
        return None


def classify_end(traj, crits, K=None, conv_radius=CONV_RADIUS, c_hat0=1.0):
    """Summarise a terminated trajectory; see EndReport."""
    outcome = traj.outcome
    last = traj.samples[-1].state
    n, q = last.n, last.q

    limit_points = None
    distinct = False
    if outcome != "exited_V" and crits:
        matched = [_nearest(crits, a) for a in last.centers]
        if all(d < conv_radius and c.laplacian < 0 for c, d in matched):
            limit_points = [c for c, _ in matched]
            keys = {tuple(np.round(c.location, 9)) for c in limit_points}
            distinct = len(keys) == q

    # trailing half of the trajectory
    t_all = traj.times
    half = t_all[-1] / 2.0
    sel = [i for i, t in enumerate(t_all) if t >= half]
    t = t_all[sel]
    samples = [traj.samples[i] for i in sel]
    rates, errors = {}, {}
    log_lam = np.array([s.state.log_lam for s in samples])
    rates["inv_lambda"] = [_rate_series(lambda tt, j=j: _fit_log(tt, -log_lam[:, j]), t, f"inv_lambda[{j}]", errors)
                           for j in range(q)]
    defect = np.array([np.abs(1.0 - s.balance) for s in samples])
    with np.errstate(divide="ignore"):
        log_defect = np.log(defect)
    rates["balance_defect"] = [_rate_series(lambda tt, j=j: _fit_log(tt, log_defect[:, j]), t, f"balance_defect[{j}]", errors)
                               for j in range(q)]
    log_v = np.array([s.log_vnorm if s.log_vnorm is not None else -np.inf for s in samples])
    rates["vnorm"] = [_rate_series(lambda tt: _fit_log(tt, log_v), t, "vnorm", errors)]
    if limit_points is not None:
        targets = np.array([c.location for c in limit_points])
        dist = np.array([torus_distance(s.state.centers, targets) for s in samples])
        with np.errstate(divide="ignore"):
            log_dist = np.log(dist)
        rates["center_dist"] = [_rate_series(lambda tt, j=j: _fit_log(tt, log_dist[:, j]), t, f"center_dist[{j}]", errors)
                                for j in range(q)]
    else:
        rates["center_dist"] = None

    index = None
    readings = None
    if outcome == "converged" and limit_points is not None and distinct:
        index = index_at_infinity([c.morse_index for c in limit_points], n)
        readings = limit_energy_readings([c.value for c in limit_points], n, c_hat0)
    return EndReport(outcome, limit_points, rates, index, distinct, readings, errors)


def detect_tower(traj, tower_radius=TOWER_RADIUS, lambda_min=10.0):
    """(is_tower_attempt, min_pair_floor) for a trajectory with q >= 2.

    The floor is the infimum over samples of sqrt(l_i l_j) d(a_i, a_j) for the
    spatially closest pair; its positivity keeps eps_ij away from zero.
    """
    q = traj.samples[0].state.q
    if q < 2:
        raise ValueError("detect_tower needs at least two bubbles")
    attempt = False
    floor = np.inf
    iu, ju = np.triu_indices(q, 1)
    for smp in traj.samples:
        s = smp.state
        d = torus_distance(s.centers[iu], s.centers[ju])
        both = np.minimum(s.log_lam[iu], s.log_lam[ju]) >= np.log(lambda_min)
        if np.any((d < tower_radius) & both):
            attempt = True
        k = int(np.argmin(d))
        floor = min(floor, float(np.exp(0.5 * (s.log_lam[iu[k]] + s.log_lam[ju[k]])) * d[k]))
    return attempt, floor


def verify_energy_monotone(traj_or_energies, mono_tol=MONO_TOL):
    """(ok, worst_increase) over consecutive samples."""
    if hasattr(traj_or_energies, "samples"):
        J = np.array([s.energy for s in traj_or_energies.samples])
    else:
        J = np.asarray(traj_or_energies, dtype=float)
    if len(J) < 2:
        raise InsufficientDataError("need at least two energy samples")
    inc = np.diff(J)
    worst = float(max(0.0, inc.max()))
    ok = bool(np.all(inc <= mono_tol * (1.0 + np.abs(J[:-1]))))
    return ok, worst


def norm_drift_rate(traj, cbar0=1.0):
    """Largest |N(t_{k+1}) - N(t_k)| / (t_{k+1} - t_k) along the samples."""
    t = traj.times
    N = np.array([s.state.norm_surrogate(cbar0) for s in traj.samples])
    if len(t) < 2:
        return 0.0
    return float(np.max(np.abs(np.diff(N)) / np.diff(t)))


def lambda_ratio_monotone(traj, tol=1e-8):
    """(ok, worst increase of ln(max l / min l)) between consecutive samples."""
    r = np.array([np.max(s.state.log_lam) - np.min(s.state.log_lam) for s in traj.samples])
    if len(r) < 2:
        return True, 0.0
    inc = np.diff(r)
    worst = float(max(0.0, inc.max()))
    return worst <= tol, worst


@dataclass(frozen=True)
class ToyPath:
    t: np.ndarray
    x: np.ndarray
    J: np.ndarray
    index: int
    note: str


def toy_energy(x, b):
    x = np.asarray(x, dtype=float)
    return 1.0 + 1.0 / x[..., -1] + np.sum(np.asarray(b) * x[..., :-1] ** 2, axis=-1)


def toy_flow(x0, signs, t_end, n_samples=101):
    """Exact negative gradient flow of J = 1 + 1/x_n + sum b_i x_i^2.

    x_i(t) = x_i(0) exp(-2 b_i t) and x_n(t) = (x_n(0)^3 + 3t)^(1/3); the flow
    escapes to x_n = infinity, where it attaches a cell of dimension #{b_i < 0}.
    """
    x0 = np.asarray(x0, dtype=float)
    b = np.asarray(signs, dtype=float).reshape(-1)
    if x0.ndim != 1 or len(b) != len(x0) - 1:
        raise ValueError("need len(signs) == len(x0) - 1")
    if not x0[-1] > 0:
        raise DomainError("x_n(0) must be positive")
    if np.any(b == 0):
        raise ValueError("coefficients b_i must be non-zero")
    t = np.linspace(0.0, float(t_end), n_samples)
    x = np.empty((n_samples, len(x0)))
    x[:, :-1] = x0[:-1] * np.exp(-2.0 * np.outer(t, b))
    x[:, -1] = np.cbrt(x0[-1] ** 3 + 3.0 * t)
    index = int(np.sum(b < 0))
    note = (f"critical point at infinity of index {index}: "
            + ("the flow line is a deformation retract, no topology change" if index == 0
               else f"a cell of dimension {index} is attached"))
    return ToyPath(t, x, toy_energy(x, b), index, note)
