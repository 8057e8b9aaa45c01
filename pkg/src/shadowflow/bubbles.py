"""Bubble parameters and their pairwise interaction terms.

The interaction of bubbles i and j is

    eps_ij = (l_j/l_i + l_i/l_j + l_i l_j d^2)^((2-n)/2)

with d^2 the flat-kernel value of ``green_kernel_sq``. Everything is
evaluated from log-concentrations so that l ~ 1e100 neither overflows nor
loses the ratio structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DimensionError, green_kernel_sq, wrap, wrapped_diff


class DomainError(ValueError):
    """A parameter lies outside the domain where a formula is defined."""


@dataclass(frozen=True)
class BubbleState:
    """One point (alpha_i, a_i, lambda_i, ||v||) of the reduced phase space.

    Concentrations are stored as ``log_lam``; ``lam`` is derived.
    """

    alpha: np.ndarray
    centers: np.ndarray
    log_lam: np.ndarray
    vnorm: float = 0.0

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        log_lam = np.asarray(self.log_lam, dtype=float).reshape(-1)
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if not (len(alpha) == len(log_lam) == centers.shape[0]) or len(alpha) == 0:
            raise DimensionError("alpha, centers and lambda must describe the same q >= 1 bubbles")
        if np.any(~(alpha > 0)):
            raise DomainError("all alpha_i must be positive")
        if not np.all(np.isfinite(log_lam)):
            raise DomainError("all lambda_i must be positive and finite")
        if not (self.vnorm >= 0):
            raise DomainError("vnorm must be non-negative")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "log_lam", log_lam)
        object.__setattr__(self, "centers", wrap(centers))
        object.__setattr__(self, "vnorm", float(self.vnorm))

    @classmethod
    def from_lambda(cls, alpha, centers, lam, vnorm=0.0):
        lam = np.asarray(lam, dtype=float)
        if np.any(lam <= 0):
            raise DomainError("all lambda_i must be positive")
        return cls(alpha, centers, np.log(lam), vnorm)

    @property
    def q(self):
        return len(self.alpha)

    @property
    def n(self):
        return self.centers.shape[1]

    @property
    def lam(self):
        return np.exp(self.log_lam)

    def norm_surrogate(self, cbar0=1.0):
        """N(u) = sum_i alpha_i^2 cbar0^2 + ||v||^2, conserved by the flow."""
        return float(np.sum(self.alpha**2) * cbar0**2 + self.vnorm**2)

    def replace(self, **kw):
        d = {"alpha": self.alpha, "centers": self.centers, "log_lam": self.log_lam, "vnorm": self.vnorm}
        d.update(kw)
        return BubbleState(**d)

    def to_dict(self):
        return {
            "alpha": self.alpha.tolist(),
            "centers": self.centers.tolist(),
            "log_lambda": self.log_lam.tolist(),
            "vnorm": self.vnorm,
        }


def _check_lambda(*lams):
    for lam in lams:
        if np.any(~(np.asarray(lam) > 0)):
            raise DomainError("concentrations must be positive")


def _log_base(ll_i, ll_j, aij_sq):
    """log(l_j/l_i + l_i/l_j + l_i l_j aij_sq) and the three normalised summands."""
    u = ll_j - ll_i
    with np.errstate(divide="ignore"):
        s = ll_i + ll_j + np.log(aij_sq)
    top = np.maximum(np.maximum(u, -u), s)
    e1, e2, e3 = np.exp(u - top), np.exp(-u - top), np.exp(s - top)
    total = e1 + e2 + e3
    return top + np.log(total), e1 / total, e2 / total, e3 / total


def log_eps(ll_i, ll_j, aij_sq, n):
    b, *_ = _log_base(ll_i, ll_j, aij_sq)
    return 0.5 * (2 - n) * b


def eps_ij(lam_i, lam_j, aij_sq, n):
    """Interaction eps_ij for concentrations ``lam_i``, ``lam_j`` and kernel value ``aij_sq``."""
    _check_lambda(lam_i, lam_j)
    return np.exp(log_eps(np.log(lam_i), np.log(lam_j), np.asarray(aij_sq, dtype=float), n))


def _dlam_from_logs(ll_i, ll_j, aij_sq, n):
    b, e1, e2, e3 = _log_base(ll_i, ll_j, aij_sq)
    eps = np.exp(0.5 * (2 - n) * b)
    return -0.5 * (n - 2) * eps * (e1 - e2 + e3)


def dlam_eps(lam_i, lam_j, aij_sq, n):
    """lambda_j * d(eps_ij)/d(lambda_j) in closed form."""
    _check_lambda(lam_i, lam_j)
    return _dlam_from_logs(np.log(lam_i), np.log(lam_j), np.asarray(aij_sq, dtype=float), n)


def _da_from_logs(ll_i, ll_j, ai, aj, n, g_scale=1.0):
    delta = wrapped_diff(aj, ai)
    aij_sq = g_scale * np.sum(delta * delta, axis=-1)
    b, *_ = _log_base(ll_i, ll_j, aij_sq)
    eps = np.exp(0.5 * (2 - n) * b)
    coef = (2 - n) * g_scale * eps * np.exp(ll_i - b)
    return np.asarray(coef)[..., None] * delta


def da_eps(lam_i, lam_j, ai, aj, n, g_scale=1.0):
    """(1/lambda_j) * grad_{a_j} eps_ij, by the chain rule through d^2."""
    _check_lambda(lam_i, lam_j)
    return _da_from_logs(np.log(lam_i), np.log(lam_j), ai, aj, n, g_scale)


@dataclass(frozen=True)
class InteractionMatrix:
    """eps[i, j], dlam[i, j] = l_j d_{l_j} eps_ij and da[i, j] = (1/l_j) grad_{a_j} eps_ij."""

    eps: np.ndarray
    dlam: np.ndarray
    da: np.ndarray


def interaction_matrix(s, g_scale=1.0):
    q, n = s.q, s.n
    ll = s.log_lam
    ai = s.centers[:, None, :]
    aj = s.centers[None, :, :]
    d2 = green_kernel_sq(ai, aj, g_scale)
    lli = np.broadcast_to(ll[:, None], (q, q))
    llj = np.broadcast_to(ll[None, :], (q, q))
    off = ~np.eye(q, dtype=bool)
    eps = np.where(off, np.exp(log_eps(lli, llj, d2, n)), 0.0)
    dlam = np.where(off, _dlam_from_logs(lli, llj, d2, n), 0.0)
    da = np.where(off[..., None], _da_from_logs(lli, llj, ai, aj, n, g_scale), 0.0)
    return InteractionMatrix(eps, dlam, da)


def interaction_sums(s, g_scale=1.0, eps=None):
    """Return (sum_{r!=s} eps_rs, per-bubble sums, sum_{r!=s} eps_rs^((n+2)/(2n)))."""
    if eps is None:
        eps = interaction_matrix(s, g_scale).eps
    n = s.n
    total = float(np.sum(eps))
    per_bubble = np.sum(eps, axis=0)
    pow_frac = float(np.sum(eps ** ((n + 2) / (2 * n))))
    return total, per_bubble, pow_frac
