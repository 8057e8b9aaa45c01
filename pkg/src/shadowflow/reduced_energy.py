"""Reduced energy J(alpha, a, lambda) and its principal gradient testings.

Only principal parts are implemented; the remainders of the expansions are
unknown and are left out on purpose. All expansion constants default to 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .bubbles import DomainError, interaction_matrix

LAMBDA_FLOOR = 10.0


@dataclass(frozen=True)
class ExpansionConstants:
    c_hat0: float = 1.0
    c_hat2: float = 1.0
    b_hat1: float = 1.0
    d_hat1: float = 1.0
    c_grave0: float = 1.0
    c_grave2: float = 1.0
    b_grave1: float = 1.0
    d_grave1: float = 1.0
    c_tilde2: float = 1.0
    b_tilde2: float = 1.0
    d_tilde1: float = 1.0
    c_check3: float = 1.0
    c_check4: float = 1.0
    b_check3: float = 1.0
    cbar0: float = 1.0

    def __post_init__(self):
        bad = [f.name for f in fields(self) if not getattr(self, f.name) > 0]
        if bad:
            raise ValueError(f"expansion constants must be positive: {', '.join(bad)}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PerturbationField:
    """Regular-part field entering at order 1/l^3 (n=5) or ln(l)/l^4 (n=6).

    ``field`` is any object with a ``value(x)`` method (normally a MorseField
    built from the same serialisation). ``mode="none"`` switches the term off.
    """

    mode: str = "none"
    field: object = None

    def __post_init__(self):
        if self.mode not in ("none", "n5", "n6"):
            raise ValueError(f"unknown perturbation mode {self.mode!r}")
        if self.mode != "none" and self.field is None:
            raise ValueError(f"perturbation mode {self.mode!r} needs a field")

    def validate(self, n):
        if (self.mode == "n5" and n != 5) or (self.mode == "n6" and n != 6):
            raise ValueError(f"perturbation mode {self.mode!r} is inconsistent with n={n}")

    def terms(self, s):
        """Per-bubble SD_i: H_i/l_i^3 (n=5), W_i ln(l_i)/l_i^4 (n=6), else 0."""
        if self.mode == "none":
            return np.zeros(s.q)
        vals = np.asarray(self.field.value(s.centers), dtype=float)
        if self.mode == "n5":
            return vals * np.exp(-3.0 * s.log_lam)
        return vals * s.log_lam * np.exp(-4.0 * s.log_lam)


NO_PERTURBATION = PerturbationField()


@dataclass(frozen=True)
class BalanceVector:
    alpha_sq: float
    alphaK: float
    B: np.ndarray


def balance(s, K, Kvals=None):
    """alpha^2, alpha_K^(2n/(n-2)) and the balance quantities B_j."""
    n = s.n
    Kv = K.value(s.centers) if Kvals is None else Kvals
    a = s.alpha
    alpha_sq = float(np.sum(a * a))
    alphaK = float(np.sum(Kv * a ** (2 * n / (n - 2))))
    B = alpha_sq / alphaK * Kv * a ** (4 / (n - 2))
    return BalanceVector(alpha_sq, alphaK, B)


def solve_balanced_alpha(Kvals, n, norm_target, cbar0=1.0):
    """The positive alpha with all B_j = 1 and sum alpha_i^2 cbar0^2 = norm_target."""
    Kvals = np.asarray(Kvals, dtype=float)
    if norm_target <= 0:
        raise DomainError("norm_target must be positive")
    if np.any(Kvals <= 0):
        raise DomainError("K values must be positive")
    shape = Kvals ** ((2 - n) / 4)
    t = np.sqrt(norm_target / (cbar0**2 * np.sum(shape**2)))
    return t * shape


def limit_energy_readings(Kvals, n, c_hat0=1.0):
    """Both parenthesisations of the limit energy sum_i (K_i^((2-n)/2))^(2/n).

    Returns (power inside the sum, power outside the sum). For balanced alpha
    the principal energy equals c_hat0 times the second reading exactly.
    """
    Kvals = np.asarray(Kvals, dtype=float)
    inside = float(np.sum((Kvals ** ((2 - n) / 2)) ** (2 / n)))
    outside = float(np.sum(Kvals ** ((2 - n) / 2)) ** (2 / n))
    return c_hat0 * inside, c_hat0 * outside


class _Local:
    """Field data and shared quantities at the current centres."""

    def __init__(self, s, K, pert=NO_PERTURBATION, g_scale=1.0, lambda_floor=LAMBDA_FLOOR):
        if np.any(s.log_lam < np.log(lambda_floor)):
            raise DomainError(f"lambda below lambda_floor={lambda_floor:g}: expansion not valid")
        n = s.n
        self.n = n
        self.Kv = K.value(s.centers)
        self.lapK = K.laplacian(s.centers)
        self.gradK = K.gradient(s.centers)
        self.bal = balance(s, K, self.Kv)
        self.Sprime = self.bal.alphaK ** ((n - 2) / n)
        self.inv_lam2 = np.exp(-2.0 * s.log_lam)
        self.w = self.lapK / self.Kv * self.inv_lam2
        self.weights = s.alpha**2 / self.bal.alpha_sq
        self.inter = interaction_matrix(s, g_scale)
        self.sd = pert.terms(s)


def energy(s, K, c=ExpansionConstants(), p=NO_PERTURBATION, g_scale=1.0, lambda_floor=LAMBDA_FLOOR):
    loc = _Local(s, K, p, g_scale, lambda_floor)
    a = s.alpha
    lead = c.c_hat0 * loc.bal.alpha_sq / loc.Sprime
    pair = np.sum(np.outer(a, a) * loc.inter.eps) / loc.bal.alpha_sq
    bracket = (1.0 - c.c_hat2 * np.sum(loc.w * loc.weights) - c.b_hat1 * pair
               - c.d_hat1 * np.sum(loc.weights * loc.sd))
    return float(lead * bracket)


def grad_alpha(s, K, c=ExpansionConstants(), p=NO_PERTURBATION, g_scale=1.0, lambda_floor=LAMBDA_FLOOR):
    """Principal part of d J / d alpha_j."""
    loc = _Local(s, K, p, g_scale, lambda_floor)
    a = s.alpha
    eps = loc.inter.eps
    mean_w = np.sum(loc.w * loc.weights)
    pair_all = np.sum(np.outer(a, a) * eps) / loc.bal.alpha_sq
    # sum over i != j of (alpha_i / alpha_j) eps_ij, for each j
    pair_j = (a @ eps) / a
    sd_diff = loc.sd - np.sum(loc.weights * loc.sd)
    bracket = (c.c_grave0 * (1.0 - loc.bal.B) - c.c_grave2 * (loc.w - mean_w)
               + c.b_grave1 * (pair_all - pair_j) - c.d_grave1 * sd_diff)
    return a / loc.Sprime * bracket


def grad_lambda(s, K, c=ExpansionConstants(), p=NO_PERTURBATION, g_scale=1.0, lambda_floor=LAMBDA_FLOOR):
    """Principal part of lambda_j d J / d lambda_j."""
    loc = _Local(s, K, p, g_scale, lambda_floor)
    a = s.alpha
    inter = (a @ loc.inter.dlam) / a
    bracket = c.c_tilde2 * loc.w - c.b_tilde2 * inter + c.d_tilde1 * loc.sd
    return a**2 / loc.Sprime * bracket


def grad_a(s, K, c=ExpansionConstants(), p=NO_PERTURBATION, g_scale=1.0, lambda_floor=LAMBDA_FLOOR):
    """Principal part of (1/lambda_j) grad_{a_j} J, one tangent vector per bubble."""
    loc = _Local(s, K, p, g_scale, lambda_floor)
    a = s.alpha
    lam_inv = np.exp(-s.log_lam)
    gradlap = K.grad_laplacian(s.centers)
    inter = np.einsum("i,ijk->jk", a, loc.inter.da) / a[:, None]
    vec = (c.c_check3 * loc.gradK * (lam_inv / loc.Kv)[:, None]
           + c.c_check4 * gradlap * (lam_inv**3 / loc.Kv)[:, None]
           + c.b_check3 * inter)
    return -(a**2 / loc.Sprime)[:, None] * vec


def gradient_magnitude_bounds(s, K, g_scale=1.0):
    """Two-sided gradient size with all constants folded to one.

    lower = sum_r (|grad K_r|/l_r + 1/l_r^2 + |1 - B_r|) + sum_{r!=s} eps_rs
    upper = same with eps_rs^((n+2)/(2n)) in place of eps_rs, plus ||v||.
    """
    n = s.n
    Kv = K.value(s.centers)
    bal = balance(s, K, Kv)
    gnorm = np.linalg.norm(K.gradient(s.centers), axis=-1)
    single = np.sum(gnorm * np.exp(-s.log_lam) + np.exp(-2.0 * s.log_lam) + np.abs(1.0 - bal.B))
    eps = interaction_matrix(s, g_scale).eps
    lower = single + np.sum(eps)
    upper = single + np.sum(eps ** ((n + 2) / (2 * n))) + s.vnorm
    return float(lower), float(upper)
