import numpy as np
import pytest

from conftest import random_state_in_V
from shadowflow.bubbles import BubbleState, DomainError, interaction_matrix
from shadowflow.geometry import MorseField, builtin_field
from shadowflow.reduced_energy import (
    ExpansionConstants,
    PerturbationField,
    balance,
    energy,
    grad_a,
    grad_alpha,
    grad_lambda,
    gradient_magnitude_bounds,
    limit_energy_readings,
    solve_balanced_alpha,
)

N = 6
DEFAULT = ExpansionConstants()


def consistent_constants(n, c=DEFAULT):
    """Testing constants equal to the exact derivatives of the implemented energy."""
    return ExpansionConstants(
        c_hat0=c.c_hat0, c_hat2=c.c_hat2, b_hat1=c.b_hat1, d_hat1=c.d_hat1,
        c_grave0=2 * c.c_hat0, c_grave2=2 * c.c_hat0 * c.c_hat2, b_grave1=2 * c.c_hat0 * c.b_hat1,
        c_tilde2=2 * c.c_hat0 * c.c_hat2, b_tilde2=2 * c.c_hat0 * c.b_hat1,
        c_check3=c.c_hat0 * (n - 2) / n, c_check4=c.c_hat0 * c.c_hat2, b_check3=2 * c.c_hat0 * c.b_hat1,
    )


def d5(f, h):
    return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)


class Flat:
    """A constant field, for hand-checkable balance examples."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def value(self, x):
        return self.values


def _state(alpha, centers, lam, vnorm=0.0):
    return BubbleState.from_lambda(alpha, centers, lam, vnorm)


def test_balance_examples():
    c2 = np.zeros((2, N))
    b = balance(_state([0.7, 0.7], c2, [50, 60]), Flat([1, 1]))
    assert b.B == pytest.approx([1, 1], abs=1e-15)
    b = balance(_state([1, 1 / 16], c2, [50, 60]), Flat([1, 16]))
    assert b.alpha_sq == pytest.approx(1 + 1 / 256)
    assert b.alphaK == pytest.approx(1 + 1 / 256)
    assert b.B == pytest.approx([1, 1], abs=1e-14)
    for a, k in ((0.3, 2.0), (5.0, 0.1)):
        assert balance(_state([a], np.zeros((1, N)), [50]), Flat([k])).B == pytest.approx([1.0], abs=1e-14)


def test_solve_balanced_alpha_examples(K6):
    assert solve_balanced_alpha([3.0, 3.0, 3.0], N, 3.0) == pytest.approx([1, 1, 1], abs=1e-15)
    assert solve_balanced_alpha([2.0, 2.0], N, 2 * 1.5**2, cbar0=1.5) == pytest.approx([1, 1], abs=1e-15)
    a = solve_balanced_alpha([1.0, 16.0], N, 1.0)
    assert a[1] / a[0] == pytest.approx(1 / 16, rel=1e-14)
    assert np.sum(a**2) == pytest.approx(1.0, rel=1e-14)
    with pytest.raises(DomainError):
        solve_balanced_alpha([1.0, 2.0], N, 0.0)
    with pytest.raises(DomainError):
        solve_balanced_alpha([1.0, -2.0], N, 1.0)


def test_balance_roundtrip_random(rng):
    for n in range(5, 10):
        K = builtin_field(n)
        for _ in range(50):
            q = int(rng.integers(1, 5))
            centers = rng.uniform(0, 1, (q, n))
            norm = rng.uniform(0.1, 10)
            alpha = solve_balanced_alpha(K.value(centers), n, norm, cbar0=1.3)
            s = BubbleState.from_lambda(alpha, centers, np.full(q, 100.0))
            assert np.max(np.abs(balance(s, K).B - 1)) <= 1e-12
            assert s.norm_surrogate(1.3) == pytest.approx(norm, rel=1e-12)


def test_single_bubble_energy_formula(K6, crits6):
    top = next(c for c in crits6 if c.morse_index == N)
    Kv = top.value
    alpha = solve_balanced_alpha([Kv], N, 1.0)
    s = _state(alpha, [top.location], [500.0])
    lead = alpha[0] ** 2 / (Kv * alpha[0] ** (2 * N / (N - 2))) ** ((N - 2) / N)
    expected = lead * (1 - top.laplacian / (Kv * 500.0**2))
    assert energy(s, K6) == pytest.approx(expected, rel=1e-14)
    assert energy(s, K6) > lead


def test_energy_scaling_invariance(rng, K6):
    for _ in range(100):
        q = int(rng.integers(1, 4))
        s = random_state_in_V(rng, K6, q, imbalance=5e-3)
        t = np.exp(rng.uniform(-3, 3))
        assert energy(s.replace(alpha=t * s.alpha), K6) == pytest.approx(energy(s, K6), rel=1e-12)
    s = random_state_in_V(rng, K6, 2)
    assert energy(s.replace(alpha=2 * s.alpha), K6) == pytest.approx(energy(s, K6), rel=1e-12)


def test_limit_energy_readings(K6, crits6):
    maxima = [c for c in crits6 if c.morse_index == N]
    Kv = np.array([c.value for c in maxima[:2]])
    inside, outside = limit_energy_readings(Kv, N)
    assert inside == pytest.approx(np.sum(Kv ** ((2 - N) / N)))
    assert outside == pytest.approx(np.sum(Kv ** ((2 - N) / 2)) ** (2 / N))
    alpha = solve_balanced_alpha(Kv, N, 1.0)
    centers = [c.location for c in maxima[:2]]
    prev = None
    for lam in (1e3, 1e5, 1e7, 1e9):
        J = energy(_state(alpha, centers, [lam, 2 * lam]), K6)
        gap = abs(J - outside)
        if prev is not None:
            assert gap < prev
        prev = gap
    assert prev < 1e-15 * 1e3
    # the inside reading is a different number: no silent agreement
    assert abs(inside - outside) > 1e-2


def test_lambda_floor(K6):
    s = _state([1.0], np.zeros((1, N)), [5.0])
    for fn in (energy, grad_alpha, grad_lambda, grad_a):
        with pytest.raises(DomainError):
            fn(s, K6)
    assert np.isfinite(energy(s, K6, lambda_floor=1.0))


def test_grad_alpha_examples(K6, crits6):
    maxima = [c for c in crits6 if c.morse_index == N]
    top = maxima[0]
    s1 = _state(solve_balanced_alpha([top.value], N, 1.0), [top.location], [300.0])
    assert grad_alpha(s1, K6) == pytest.approx([0.0], abs=1e-18)

    # symmetric pair: equal K, equal lambda, mirror-image centres around a maximum
    x = top.location
    off = np.zeros(N)
    off[1] = 0.2
    s2 = _state([0.6, 0.6], [x + off, x - off], [400.0, 400.0])
    g = grad_alpha(s2, K6)
    assert g[0] == pytest.approx(g[1], rel=1e-12)

    # d(component j)/dB_j = -c_grave0 * alpha_j / S'
    s = _state(solve_balanced_alpha(K6.value(np.array([m.location for m in maxima[:2]])), N, 1.0),
               [m.location for m in maxima[:2]], [1e4, 2e4])
    c = ExpansionConstants(c_grave0=1.7)
    delta = 1e-6
    Kv = K6.value(s.centers)

    class Shifted:
        def __init__(self, factor):
            self.f = factor

        def value(self, xx):
            return K6.value(xx) * self.f

        def laplacian(self, xx):
            return K6.laplacian(xx) * self.f

        def gradient(self, xx):
            return K6.gradient(xx) * self.f[:, None]

    # scaling K_1 by (1 + delta) scales B_1 by (1 + delta) to first order in the bracket
    f = np.array([1 + delta, 1.0])
    Kp = Shifted(f)
    bal0, bal1 = balance(s, K6), balance(s, Kp)
    Sprime = bal0.alphaK ** ((N - 2) / N)
    dB = bal1.B[0] - bal0.B[0]
    dg = grad_alpha(s, Kp, c)[0] - grad_alpha(s, K6, c)[0]
    assert dg == pytest.approx(-1.7 * s.alpha[0] / Sprime * dB, rel=1e-3)
    assert Kv[0] > 0


def test_grad_lambda_examples(K6, crits6):
    top = next(c for c in crits6 if c.morse_index == N)
    alpha = solve_balanced_alpha([top.value], N, 1.0)
    lams = np.logspace(3, 6, 10)
    vals = np.array([grad_lambda(_state(alpha, [top.location], [l]), K6)[0] for l in lams])
    assert np.all(vals < 0)
    s = _state(alpha, [top.location], [1e3])
    Sprime = top.value * alpha[0] ** (2 * N / (N - 2))
    Sprime = Sprime ** ((N - 2) / N)
    assert vals[0] == pytest.approx(alpha[0] ** 2 / Sprime * top.laplacian / (top.value * 1e6), rel=1e-12)
    slope = np.polyfit(np.log(lams), np.log(-vals), 1)[0]
    assert slope == pytest.approx(-2, rel=0.05)
    # coincident centres at equal scales: the interaction part vanishes
    s2 = _state([0.5, 0.5], [top.location, top.location], [1e3, 1e3])
    g2 = grad_lambda(s2, K6)
    Kv = top.value
    alpha_k = 2 * Kv * 0.5 ** 3
    ref = 0.25 / alpha_k ** (2 / 3) * top.laplacian / (Kv * 1e6)
    assert g2 == pytest.approx([ref, ref], rel=1e-12)
    assert np.all(interaction_matrix(s2).dlam == 0)


def test_grad_a_examples(K6, crits6):
    top = next(c for c in crits6 if c.morse_index == N)
    alpha = solve_balanced_alpha([top.value], N, 1.0)
    lam = 1e3
    s = _state(alpha, [top.location], [lam])
    g = grad_a(s, K6)[0]
    bound = np.linalg.norm(K6.grad_laplacian(top.location)) / (top.value * lam**3)
    assert np.linalg.norm(g) <= bound * (1 + 1e-12)

    x = top.location + np.array([0, 0.1, 0, 0, 0, 0])
    alpha = solve_balanced_alpha(K6.value(x[None]), N, 1.0)
    lams = np.logspace(3, 6, 10)
    norms = [np.linalg.norm(grad_a(_state(alpha, [x], [l]), K6)[0]) for l in lams]
    assert np.polyfit(np.log(lams), np.log(norms), 1)[0] == pytest.approx(-1, rel=0.05)
    gk = K6.gradient(x)
    g = grad_a(_state(alpha, [x], [1e5]), K6)[0]
    assert g @ gk / (np.linalg.norm(g) * np.linalg.norm(gk)) <= -0.99


def test_gradient_bounds_examples(K6, crits6):
    top = next(c for c in crits6 if c.morse_index == N)
    alpha = solve_balanced_alpha([top.value], N, 1.0)
    lo, hi = gradient_magnitude_bounds(_state(alpha, [top.location], [200.0]), K6)
    assert lo == pytest.approx(1 / 200.0**2, rel=1e-10)
    assert hi == pytest.approx(1 / 200.0**2, rel=1e-10)

    maxima = [c for c in crits6 if c.morse_index == N][:2]
    centers = [m.location for m in maxima]
    alpha = solve_balanced_alpha(K6.value(np.array(centers)), N, 1.0)
    prev = np.inf
    for lam in (1e2, 1e4, 1e6, 1e8):
        lo, hi = gradient_magnitude_bounds(_state(alpha, centers, [lam, 1.5 * lam]), K6)
        assert 0 < lo <= hi < prev
        prev = hi
    assert prev < 1e-15


def test_gradient_bounds_ordered_random(rng, K6):
    for _ in range(300):
        s = random_state_in_V(rng, K6, int(rng.integers(1, 4)), imbalance=5e-3)
        lo, hi = gradient_magnitude_bounds(s, K6)
        assert lo <= hi


def test_grad_lambda_negative_when_laplacian_negative(rng, K6):
    for _ in range(200):
        s = random_state_in_V(rng, K6, 1, negative_laplacian=True)
        assert grad_lambda(s, K6)[0] < 0


def test_perturbation_field_modes(K6):
    W = MorseField.from_dict({"type": "cosine", "offset": 7.0, "coefficients": [1, 1, 1, 1, 1, 1]}, 6)
    p = PerturbationField("n6", W)
    p.validate(6)
    with pytest.raises(ValueError):
        p.validate(5)
    with pytest.raises(ValueError):
        PerturbationField("n7", W)
    with pytest.raises(ValueError):
        PerturbationField("n5", None)
    s = _state([1.0], np.zeros((1, N)), [100.0])
    assert p.terms(s) == pytest.approx([W.value(np.zeros(N)) * np.log(100) / 1e8])
    # the perturbation lowers the energy and enters grad_lambda with d_tilde1
    assert energy(s, K6, p=p) < energy(s, K6)
    diff = grad_lambda(s, K6, p=p) - grad_lambda(s, K6)
    assert diff[0] > 0
    with pytest.raises(ValueError):
        ExpansionConstants(c_hat0=0.0)


def test_gradients_consistent_with_energy(rng, K6):
    """Finite differences of energy() versus the principal gradients on 500 states."""
    n = N
    c = consistent_constants(n)
    ratios = {"alpha": [], "lambda": [], "a": []}
    for _ in range(500):
        q = int(rng.integers(1, 4))
        s = random_state_in_V(rng, K6, q, lam_range=(1e3, 1e5), imbalance=1e-3)
        lam = s.lam
        eps = interaction_matrix(s).eps
        order = (np.sum(np.sum(K6.gradient(s.centers) ** 2, axis=1) / lam**2 + lam**-4.0)
                 + np.sum(eps ** ((n + 2) / n)))

        g = grad_lambda(s, K6, c)
        u = g / np.linalg.norm(g)
        assert d5(lambda t: energy(s.replace(log_lam=s.log_lam + t * u), K6, c), 1e-3) > 0
        fd = [d5(lambda t: energy(s.replace(log_lam=s.log_lam + t * e), K6, c), 1e-3) for e in np.eye(q)]
        ratios["lambda"].append(np.max(np.abs(np.array(fd) - g)) / order)

        g = grad_a(s, K6, c)
        u = g / np.linalg.norm(g)
        assert d5(lambda t: energy(s.replace(centers=s.centers + t * u / lam[:, None]), K6, c), 1e-4) > 0
        fd = np.array([[d5(lambda t: energy(s.replace(centers=s.centers + t * e.reshape(q, n)), K6, c), 1e-5)
                        for e in np.eye(q * n)[j * n:(j + 1) * n]] for j in range(q)]) / lam[:, None]
        ratios["a"].append(np.max(np.abs(fd - g)) / order)

        if q > 1:
            g = grad_alpha(s, K6, c)
            u = g / np.linalg.norm(g)
            assert d5(lambda t: energy(s.replace(alpha=s.alpha + t * u), K6, c), 1e-5) > 0
            fd = [d5(lambda t: energy(s.replace(alpha=s.alpha + t * e), K6, c), 1e-5) for e in np.eye(q)]
            # the alpha testing also carries a |1 - B| (1/l^2 + eps) cross term
            cross = np.sum(np.abs(1 - balance(s, K6).B)) * (np.sum(lam**-2.0) + np.sum(eps))
            ratios["alpha"].append(np.max(np.abs(np.array(fd) - g)) / (order + cross))
    fitted = {k: float(np.max(v)) for k, v in ratios.items()}
    print(f"fitted mismatch constants C: {fitted}")
    assert all(np.isfinite(v) and v < 1.0 for v in fitted.values())
