"""Adaptive Dormand-Prince 4(5) integration of the bubble-parameter flow.

The state is advanced in the coordinates (ln alpha, a, ln lambda, ln vnorm).
Exponential growth of lambda is linear there, so the step size is governed by
the cutoff dynamics rather than by the size of lambda. ``vnorm = 0`` is an
invariant set and is kept exactly at zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bubbles import BubbleState, interaction_matrix
from .flow_field import NondegeneracyViolation, in_V
from .geometry import find_critical_points, torus_distance, wrap
from .reduced_energy import balance, energy

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

EVENT_KINDS = ("exited_V", "converged", "t_max_reached", "nd_violation", "step_underflow")
H_MIN = 1e-12
BISECT_TOL = 1e-9


class NumericFault(RuntimeError):
    """The right-hand side or the state became non-finite."""


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-8
    atol: float = 1e-10
    h_init: float = 1e-3
    h_max: float = 0.25
    t_max: float = 200.0
    record_every: float = 0.1
    conv_window: int = 20
    conv_radius: float = 1e-3
    conv_tol: float = 1e-6
    conv_rate: float = 0.5

    def __post_init__(self):
        for name in ("rtol", "atol", "h_init", "h_max", "t_max", "record_every", "conv_radius", "conv_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"integrator setting {name} must be positive")
        if not self.rtol < 1:
            raise ValueError("rtol must be < 1")
        if self.conv_window < 2:
            raise ValueError("conv_window must be at least 2")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class Event:
    kind: str
    t: float
    detail: str = ""

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def to_dict(self):
        return {"event": self.kind, "t": self.t, "detail": self.detail}


@dataclass(frozen=True)
class Sample:
    t: float
    state: BubbleState
    energy: float
    balance: np.ndarray
    eps_total: float
    etas: dict
    dlog_lambda: np.ndarray
    log_vnorm: float

    def to_dict(self):
        d = {"t": self.t}
        d.update(self.state.to_dict())
        d.update({
            "log_vnorm": self.log_vnorm,
            "energy": self.energy,
            "balance": self.balance.tolist(),
            "eps_total": self.eps_total,
            "etas": self.etas,
            "dlog_lambda": self.dlog_lambda.tolist(),
        })
        return d


@dataclass
class Trajectory:
    samples: list = field(default_factory=list)
    events: list = field(default_factory=list)
    cutoff_log: list = field(default_factory=list)
    n_steps: int = 0
    n_rejected: int = 0

    @property
    def outcome(self):
        return self.events[-1].kind if self.events else None

    @property
    def times(self):
        return np.array([s.t for s in self.samples])

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for s in self.samples:
                fh.write(json.dumps(s.to_dict()) + "\n")
            for e in self.events:
                fh.write(json.dumps(e.to_dict()) + "\n")


class _Packing:
    """Flat coordinate vector <-> BubbleState."""

    def __init__(self, q, n, with_v):
        self.q, self.n, self.with_v = q, n, with_v
        self.size = 2 * q + q * n + (1 if with_v else 0)

    def pack(self, s):
        parts = [np.log(s.alpha), s.centers.ravel(), s.log_lam]
        if self.with_v:
            parts.append([np.log(s.vnorm)])
        return np.concatenate(parts)

    def unpack(self, y):
        q, n = self.q, self.n
        alpha = np.exp(y[:q])
        centers = y[q:q + q * n].reshape(q, n)
        log_lam = y[q + q * n:2 * q + q * n]
        vnorm = float(np.exp(y[-1])) if self.with_v else 0.0
        return BubbleState(alpha, centers, log_lam, vnorm)

    def rate(self, vel):
        parts = [vel.dlog_alpha, vel.da.ravel(), vel.dlog_lambda]
        if self.with_v:
            parts.append([vel.dlog_vnorm])
        return np.concatenate(parts)

    def torus_slice(self):
        return slice(self.q, self.q + self.q * self.n)


def _rhs(rhs, pk, y):
    vel = rhs(pk.unpack(y))
    f = pk.rate(vel)
    if not np.all(np.isfinite(f)):
        raise NumericFault("non-finite right-hand side")
    return f


def _dp_step(rhs, pk, y, h, f0=None):
    k = np.empty((7, len(y)))
    k[0] = _rhs(rhs, pk, y) if f0 is None else f0
    for i in range(1, 7):
        yi = y + h * (np.asarray(_A[i]) @ k[:i])
        k[i] = _rhs(rhs, pk, yi)
    y5 = y + h * (_B5 @ k)
    err = h * (_E @ k)
    return y5, err, k[6]


def _err_norm(err, y0, y1, rtol, atol):
    sc = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / sc) ** 2)))


def step(s, h, rhs, rtol=1e-8, atol=1e-10):
    """One Dormand-Prince step of size ``h``.

    ``rhs`` maps a BubbleState to a FlowVelocity. Returns the new state and the
    scaled RMS norm of the embedded error estimate.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    pk = _Packing(s.q, s.n, s.vnorm > 0)
    y0 = pk.pack(s)
    y1, err, _ = _dp_step(rhs, pk, y0, h)
    if not np.all(np.isfinite(y1)):
        raise NumericFault("non-finite state after step")
    y1[pk.torus_slice()] = wrap(y1[pk.torus_slice()])
    return pk.unpack(y1), _err_norm(err, y0, y1, rtol, atol)


def _record(system, t, s, cr, vel):
    K = system.field
    bal = balance(s, K)
    e = energy(s, K, system.expansion, system.perturbation, system.g_scale)
    eps_total = float(np.sum(interaction_matrix(s, system.g_scale).eps))
    etas = {
        "eta_v": float(cr.eta_v),
        "eta_alpha": float(cr.eta_alpha),
        "eta_a": cr.eta_a.tolist(),
        "eta_lam_ge": cr.eta_lam_ge.tolist(),
        "eta_lam_le": cr.eta_lam_le.tolist(),
    }
    log_v = float(np.log(s.vnorm)) if s.vnorm > 0 else None
    return Sample(float(t), s, e, bal.B, eps_total, etas, vel.dlog_lambda.copy(), log_v)


def _converged(samples, maxima, cfg, n):
    w = cfg.conv_window
    if len(samples) < w or len(maxima) == 0:
        return False, ""
    window = samples[-w:]
    last = window[-1].state.centers
    d = torus_distance(last[:, None, :], maxima[None, :, :])
    target = maxima[np.argmin(d, axis=1)]
    for smp in window:
        if np.any(torus_distance(smp.state.centers, target) >= cfg.conv_radius):
            return False, ""
        if np.any(np.abs(1.0 - smp.balance) >= cfg.conv_tol) or smp.state.vnorm >= cfg.conv_tol:
            return False, ""
        if np.any(smp.dlog_lambda < cfg.conv_rate):
            return False, ""
    return True, "limit points " + "; ".join(np.array2string(x, precision=6) for x in target)


def simulate(s0, system, cfg=IntegratorConfig(), crits=None, dump_cutoffs=False):
    """Integrate from ``s0`` until a terminal event and return the Trajectory."""
    ok, reasons = in_V(s0, system.field, system.constants.eps_V, system.g_scale)
    if not ok:
        raise ValueError("initial state is not in V: " + "; ".join(reasons))
    if crits is None:
        crits = find_critical_points(system.field)
    targets = np.array([c.location for c in crits if c.laplacian < 0]).reshape(-1, s0.n)

    traj = Trajectory()
    pk = _Packing(s0.q, s0.n, s0.vnorm > 0)
    tslice = pk.torus_slice()
    rhs = system.velocity

    def finish(kind, t, detail=""):
        traj.events.append(Event(kind, float(t), detail))
        return traj

    t = 0.0
    y = pk.pack(s0)
    try:
        cr, vel = system.evaluate(s0)
    except NondegeneracyViolation as exc:
        return finish("nd_violation", t, str(exc))
    traj.samples.append(_record(system, t, s0, cr, vel))
    if dump_cutoffs:
        traj.cutoff_log.append({"t": t, **cr.to_dict()})
    h = min(cfg.h_init, cfg.h_max)
    next_rec = cfg.record_every
    err_prev = 1.0
    f0 = pk.rate(vel)

    while True:
        target_t = min(next_rec, cfg.t_max)
        h_try = min(h, cfg.h_max, target_t - t)
        lands = h_try >= target_t - t
        try:
            y1, err_vec, f_last = _dp_step(rhs, pk, y, h_try, f0)
        except NondegeneracyViolation as exc:
            return finish("nd_violation", t, str(exc))
        if not np.all(np.isfinite(y1)):
            raise NumericFault(f"non-finite state at t={t:.6g}")
        err = _err_norm(err_vec, y, y1, cfg.rtol, cfg.atol)

        if err > 1.0:
            traj.n_rejected += 1
            h = h_try * max(0.2, 0.9 * err ** -0.2)
            if h < H_MIN:
                return finish("step_underflow", t, f"step size {h:.3e} below {H_MIN:g}")
            continue

        y1[tslice] = wrap(y1[tslice])
        s1 = pk.unpack(y1)
        t1 = target_t if lands else t + h_try
        traj.n_steps += 1

        ok, reasons = in_V(s1, system.field, system.constants.eps_V, system.g_scale)
        if not ok:
            t_exit, s_exit = _bisect_exit(system, pk, y, t, h_try)
            cr_e, vel_e = system.evaluate(s_exit)
            traj.samples.append(_record(system, t_exit, s_exit, cr_e, vel_e))
            _, reasons = in_V(s_exit, system.field, system.constants.eps_V, system.g_scale)
            return finish("exited_V", t_exit, "; ".join(reasons))

        # PI controller (exponents 0.7/5 and 0.4/5)
        fac = 0.9 * max(err, 1e-10) ** (-0.14) * max(err_prev, 1e-10) ** 0.08
        h = min(cfg.h_max, h_try * min(5.0, max(0.2, fac)))
        if lands:
            h = max(h, h_try)
        err_prev = max(err, 1e-4)
        t, y = t1, y1
        f0 = f_last  # first-same-as-last; the field is periodic so wrapping is harmless
        if dump_cutoffs or lands:
            cr, vel = system.evaluate(s1)
        if dump_cutoffs:
            traj.cutoff_log.append({"t": t, **cr.to_dict()})

        if lands:
            traj.samples.append(_record(system, t, s1, cr, vel))
            next_rec = (len(traj.samples)) * cfg.record_every
            done, detail = _converged(traj.samples, targets, cfg, s0.n)
            if done:
                return finish("converged", t, detail)
            if t >= cfg.t_max:
                return finish("t_max_reached", t)


def _bisect_exit(system, pk, y0, t0, h):
    """Locate the first exit from V inside [t0, t0 + h] to BISECT_TOL in t."""
    lo, hi = 0.0, h
    tslice = pk.torus_slice()
    s_hi = None
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        ym, _, _ = _dp_step(system.velocity, pk, y0, mid)
        ym[tslice] = wrap(ym[tslice])
        sm = pk.unpack(ym)
        if in_V(sm, system.field, system.constants.eps_V, system.g_scale)[0]:
            lo = mid
        else:
            hi, s_hi = mid, sm
    if s_hi is None:
        y1, _, _ = _dp_step(system.velocity, pk, y0, hi)
        y1[tslice] = wrap(y1[tslice])
        s_hi = pk.unpack(y1)
    return t0 + hi, s_hi
