"""Pseudo-gradient vector field on the bubble parameters.

Region indicators are realised by smooth gates that are exactly 0 below the
sqrt(kappa) threshold and exactly 1 above the kappa threshold, interpolating
in log scale in between.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .bubbles import interaction_matrix
from .reduced_energy import (
    NO_PERTURBATION,
    ExpansionConstants,
    balance,
    grad_a,
    grad_alpha,
    grad_lambda,
)

GRAD_FLOOR = 1e-14


class HierarchyError(ValueError):
    """The kappa constants violate the required ordering."""


class NondegeneracyViolation(RuntimeError):
    """The lambda equation needs sign(Laplacian K) where the Laplacian vanishes."""


@dataclass(frozen=True)
class FlowConstants:
    kappa: float = 4.0
    kappa_lambda: float = 4.0**9
    kappa_a: float = 4.0**27
    kappa_alpha: float = 100.0
    kappa_v: float = 100.0
    C_v: float = 10.0
    eps_V: float = 0.01
    c_b: float = 1.0

    @classmethod
    def for_q(cls, q, **overrides):
        """Smallest constants satisfying the hierarchy for q bubbles, then overrides."""
        kappa = float(overrides.get("kappa", 4.0))
        kappa_lambda = float(overrides.get("kappa_lambda", kappa ** (2 * q * q + 1)))
        vals = {"kappa": kappa, "kappa_lambda": kappa_lambda, "kappa_a": kappa_lambda**3}
        vals.update({k: float(v) for k, v in overrides.items() if v is not None})
        return cls(**vals)

    def violations(self, q):
        out = []
        if not self.kappa >= 4:
            out.append(f"kappa={self.kappa:g} must be >= 4")
        if not self.kappa_lambda >= self.kappa ** (2 * q * q + 1):
            out.append(f"kappa_lambda={self.kappa_lambda:g} must be >= kappa^(2q^2+1)={self.kappa ** (2 * q * q + 1):g}")
        if not self.kappa_a >= self.kappa_lambda**3:
            out.append(f"kappa_a={self.kappa_a:g} must be >= kappa_lambda^3={self.kappa_lambda**3:g} (kappa_a >> kappa_lambda^2)")
        if not self.kappa_alpha >= 100:
            out.append(f"kappa_alpha={self.kappa_alpha:g} must be >= 100")
        if not self.kappa_v >= 100:
            out.append(f"kappa_v={self.kappa_v:g} must be >= 100")
        if not self.C_v > 0:
            out.append("C_v must be positive")
        if not 0 < self.eps_V < 1:
            out.append("eps_V must lie in (0, 1)")
        if not self.c_b >= 0:
            out.append("c_b must be non-negative")
        return out

    def validate(self, q):
        bad = self.violations(q)
        if bad:
            raise HierarchyError("kappa hierarchy violated: " + "; ".join(bad))
        return self

    def to_dict(self):
        return asdict(self)


def smoothstep(s):
    """Monotone C^1 step: 0 on (-inf, 1/2], 1 on [1, inf), cubic in between."""
    u = np.clip(2.0 * np.asarray(s, dtype=float) - 1.0, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _gate_log(logx, loglo, loghi):
    with np.errstate(invalid="ignore"):
        s = (np.asarray(logx, dtype=float) - loglo) / (2.0 * (loghi - loglo)) + 0.5
    return smoothstep(np.where(np.isnan(s), 0.0, s))


def gate(x, lo, hi):
    """0 for x <= lo, 1 for x >= hi, log-scale smoothstep in between."""
    if not 0 < lo < hi:
        raise ValueError(f"gate needs 0 < lo < hi, got lo={lo!r}, hi={hi!r}")
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        logx = np.log(np.maximum(x, 0.0))
    return _gate_log(logx, np.log(lo), np.log(hi))


@dataclass(frozen=True)
class CutoffReport:
    eta_v: float
    eta_alpha: float
    eta_a: np.ndarray
    eta_lam_ge: np.ndarray
    eta_lam_le: np.ndarray
    m_pair: np.ndarray
    m_tower: np.ndarray

    def to_dict(self):
        return {
            "eta_v": float(self.eta_v),
            "eta_alpha": float(self.eta_alpha),
            "eta_a": self.eta_a.tolist(),
            "eta_lam_ge": self.eta_lam_ge.tolist(),
            "eta_lam_le": self.eta_lam_le.tolist(),
            "m_pair": self.m_pair.tolist(),
            "m_tower": self.m_tower.tolist(),
        }


@dataclass(frozen=True)
class FlowVelocity:
    dlog_alpha: np.ndarray
    da: np.ndarray
    dlog_lambda: np.ndarray
    dvnorm: float
    dlog_vnorm: float = 0.0


class _FieldData:
    def __init__(self, s, K, g_scale):
        self.Kv = K.value(s.centers)
        self.gradK = K.gradient(s.centers)
        self.gnorm = np.linalg.norm(self.gradK, axis=-1)
        self.lapK = K.laplacian(s.centers)
        self.B = balance(s, K, self.Kv).B
        self.eps = interaction_matrix(s, g_scale).eps


def _cutoffs(s, fc, fd):
    n = s.n
    ll = s.log_lam
    with np.errstate(divide="ignore"):
        eta_a = _gate_log(ll + np.log(fd.gnorm), 0.5 * np.log(fc.kappa_a), np.log(fc.kappa_a))
        log_total = np.log(np.sum(fd.eps))
    x_lam = 2.0 * ll + log_total
    lk = np.log(fc.kappa_lambda)
    eta_ge = _gate_log(x_lam, 0.5 * lk, lk)
    eta_le = 1.0 - _gate_log(x_lam, -lk, -0.5 * lk)
    defect = np.sum(np.abs(1.0 - fd.B))
    # per-bubble sums; for q = 1 the pair term is simply absent
    denom = (np.sum(fd.gnorm * np.exp(-ll) + np.exp(-2.0 * ll))
             + np.sum(fd.eps ** ((n + 2) / (2 * n))))
    eta_alpha = float(gate(defect / denom, np.sqrt(fc.kappa_alpha), fc.kappa_alpha))
    eta_v = float(gate(s.vnorm / (denom + defect), np.sqrt(fc.kappa_v), fc.kappa_v))
    m_pair = smoothstep(np.exp(ll[:, None] - ll[None, :]))
    off = ~np.eye(s.q, dtype=bool)
    m_tower = fc.kappa ** np.sum(np.where(off, m_pair, 0.0), axis=1)
    return CutoffReport(eta_v, eta_alpha, eta_a, eta_ge, eta_le, m_pair, m_tower)


def cutoffs(s, K, fc, g_scale=1.0):
    return _cutoffs(s, fc, _FieldData(s, K, g_scale))


def b_alpha_correction(beta_alpha, s, cbar0=1.0, dvnorm=0.0):
    """Common alpha rate that keeps sum_i alpha_i^2 cbar0^2 + ||v||^2 fixed.

    With ``dvnorm = 0`` this is the plain quotient
    -(sum_i beta_i alpha_i^2 cbar0^2) / (sum_i alpha_i^2 cbar0^2).
    """
    w = s.alpha**2 * cbar0**2
    return -(float(np.dot(beta_alpha, w)) + s.vnorm * dvnorm) / float(np.sum(w))


def _velocity(s, fc, cr, fd, cbar0):
    damp = (1.0 - cr.eta_alpha) * (1.0 - cr.eta_v)
    beta = -cr.eta_alpha * (1.0 - cr.eta_v) / cbar0**2 * (1.0 - fd.B)

    prod = np.prod((1.0 - cr.eta_a)[None, :] ** cr.m_pair, axis=1)
    le_term = cr.eta_lam_le * prod
    active = damp * le_term > 0
    if np.any(active & (fd.lapK == 0)):
        j = int(np.nonzero(active & (fd.lapK == 0))[0][0])
        raise NondegeneracyViolation(f"Laplacian of K vanishes at the centre of bubble {j} while its lambda-term is active")
    dlog_lambda = -damp * (le_term * np.sign(fd.lapK) + cr.eta_lam_ge * cr.m_tower)

    unit = np.where(fd.gnorm[:, None] >= GRAD_FLOOR, fd.gradK / np.maximum(fd.gnorm, GRAD_FLOOR)[:, None], 0.0)
    speed = damp * cr.eta_a * np.exp(-s.log_lam)
    da = speed[:, None] * unit

    drift = np.sum(np.abs(dlog_lambda) + damp * cr.eta_a * (fd.gnorm >= GRAD_FLOOR))
    dlog_vnorm = float(-fc.C_v + fc.c_b * drift)
    dvnorm = dlog_vnorm * s.vnorm
    # the v-part of the norm is handed back to the alphas so that
    # sum alpha_i^2 cbar0^2 + vnorm^2 stays constant along the flow
    dlog_alpha = beta + b_alpha_correction(beta, s, cbar0, dvnorm)
    return FlowVelocity(dlog_alpha, da, dlog_lambda, float(dvnorm), dlog_vnorm)


def velocity(s, K, fc, cr=None, cbar0=1.0, g_scale=1.0):
    fd = _FieldData(s, K, g_scale)
    if cr is None:
        cr = _cutoffs(s, fc, fd)
    return _velocity(s, fc, cr, fd, cbar0)


def in_V(s, K, eps_V, g_scale=1.0):
    """Membership in V(q, eps_V) together with the list of violated clauses."""
    reasons = []
    lam_min = float(np.exp(np.min(s.log_lam)))
    if not np.all(-s.log_lam < np.log(eps_V)):
        reasons.append(f"1/lambda_min = {1 / lam_min:.3e} >= eps_V")
    eps = interaction_matrix(s, g_scale).eps
    if s.q > 1 and not np.max(eps) < eps_V:
        i, j = np.unravel_index(np.argmax(eps), eps.shape)
        reasons.append(f"eps_{i},{j} = {eps[i, j]:.3e} >= eps_V")
    B = balance(s, K).B
    if not np.max(np.abs(1.0 - B)) < eps_V:
        reasons.append(f"max |1 - B_j| = {np.max(np.abs(1.0 - B)):.3e} >= eps_V")
    if not s.vnorm < eps_V:
        reasons.append(f"vnorm = {s.vnorm:.3e} >= eps_V")
    return not reasons, reasons


@dataclass(frozen=True)
class FlowSystem:
    """Everything the vector field depends on, bundled for the integrator."""

    field: object
    constants: FlowConstants
    expansion: ExpansionConstants = ExpansionConstants()
    perturbation: object = NO_PERTURBATION
    g_scale: float = 1.0

    def evaluate(self, s):
        fd = _FieldData(s, self.field, self.g_scale)
        cr = _cutoffs(s, self.constants, fd)
        return cr, _velocity(s, self.constants, cr, fd, self.expansion.cbar0)

    def velocity(self, s):
        return self.evaluate(s)[1]

    def inside(self, s):
        return in_V(s, self.field, self.constants.eps_V, self.g_scale)


def principal_energy_rate(s, vel, K, c=ExpansionConstants(), p=NO_PERTURBATION, g_scale=1.0):
    """d J / dt predicted from the principal gradient testings along ``vel``."""
    ga = grad_alpha(s, K, c, p, g_scale)
    gl = grad_lambda(s, K, c, p, g_scale)
    gx = grad_a(s, K, c, p, g_scale)
    lam = np.exp(s.log_lam)
    return float(np.sum(ga * s.alpha * vel.dlog_alpha) + np.sum(gl * vel.dlog_lambda)
                 + np.sum(gx * (lam[:, None] * vel.da)))
