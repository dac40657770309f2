import math

import numpy as np
import pytest

from kmtsim import laws as L
from kmtsim.conditions import (check_lemma_a1, check_lemma_a2, conjugate_cf_modulus,
                               sakhanenko_lambda, smoothness_mu)
from kmtsim.laws import LawError

CATALOG = L.default_catalog()

# Frozen oracle values, computed independently with mpmath (30 digits):
# Rademacher: root of lam e^lam = 1, the Lambert W point W(1).
LAMBERT_W1 = 0.567143290409783872999968662210
# N(0,1): root of lam * 2 int_0^inf x^3 e^{lam x} phi(x) dx = 1.
GAUSS_LAMBDA = 0.328971652750221113006788041466
# Rademacher + N(0,1): root of lam E|X|^3 e^{lam|X|} = E X^2 = 2.
RAD_GAUSS_LAMBDA = 0.254822679051868219924180663742


def test_lambda_star_rademacher():
    rep = sakhanenko_lambda(L.rademacher())
    assert rep.lambda_star == pytest.approx(LAMBERT_W1, rel=1e-9)
    assert rep.variance == 1.0 and rep.third_abs_moment == 1.0


def test_lambda_star_gaussian():
    assert sakhanenko_lambda(L.gaussian(1.0)).lambda_star == pytest.approx(GAUSS_LAMBDA, rel=1e-9)


def test_lambda_star_mixture():
    assert sakhanenko_lambda(CATALOG["rademacher+gauss1"]).lambda_star == pytest.approx(RAD_GAUSS_LAMBDA, rel=1e-9)


def test_lambda_star_live_oracle():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 20
    assert float(mp.lambertw(1).real) == pytest.approx(LAMBERT_W1, rel=1e-15)


@pytest.mark.parametrize("name", sorted(CATALOG))
@pytest.mark.parametrize("c", [0.5, 2.0])
def test_lambda_star_scaling(name, c):
    d = CATALOG[name]
    base = sakhanenko_lambda(d).lambda_star
    assert sakhanenko_lambda(L.scaled(d, c)).lambda_star * c == pytest.approx(base, rel=1e-6)


def test_lambda_star_scaled_rademacher():
    assert sakhanenko_lambda(L.rademacher(2.0)).lambda_star == pytest.approx(0.2836, abs=5e-5)


def test_sakhanenko_verdict_and_errors():
    assert sakhanenko_lambda(L.rademacher(), at=0.5).verdict
    assert not sakhanenko_lambda(L.rademacher(), at=0.6).verdict
    with pytest.raises(LawError, match="zero-mean"):
        sakhanenko_lambda(L.make_lattice(1.0, 0.0, [(0, 0.5), (1, 0.5)]))
    with pytest.raises(LawError, match="nondegenerate"):
        sakhanenko_lambda(L.point_mass(0.0))


def test_lemma_a1_examples():
    r = L.rademacher()
    res = check_lemma_a1(r, 0.567, [0.1])
    assert res.verdict
    assert res.worst_margin == pytest.approx(math.exp(0.01) - math.cosh(0.1), rel=1e-12)
    assert check_lemma_a1(r, 0.5, [0.0]).worst_margin == 0.0
    with pytest.raises(LawError, match="0.567143"):
        check_lemma_a1(r, 1.0, [0.1])


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_lemma_a1_catalog(name):
    d = CATALOG[name]
    lam = sakhanenko_lambda(d).lambda_star
    res = check_lemma_a1(d, lam, np.linspace(-lam / 3, lam / 3, 101))
    assert res.verdict and res.n_points == 101


def test_lemma_a2_examples():
    r = L.rademacher()
    # E e^{|X|} = e for Rademacher, so c1 = e is the tight admissible constant
    assert check_lemma_a2(r, 1.0, math.e).verdict
    with pytest.raises(LawError, match="2.718281828"):
        check_lemma_a2(r, 1.0, math.cosh(1.0))
    with pytest.raises(LawError, match="degenerate"):
        check_lemma_a2(L.point_mass(0.0), 1.0, 2.0)


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_lemma_a2_catalog(name):
    d = CATALOG[name]
    lam = sakhanenko_lambda(d).lambda_star
    c1 = L.expected_exp_abs(d, lam)
    res = check_lemma_a2(d, lam, c1)
    assert res.verdict and res.n_points == 101
    assert abs(res.worst_t) <= lam / 2


def test_conjugate_cf_gaussian_closed_form():
    g = L.gaussian(2.0)
    t = np.linspace(0, 5, 11)
    np.testing.assert_allclose(conjugate_cf_modulus(g, t, 0.3), np.exp(-t * t), rtol=1e-14)


def test_smoothness_mu_finite_and_discrete_rejected():
    eps = [0.25, 0.5, 1.0]
    mu_g = smoothness_mu(L.gaussian(1.0), eps, [0.0])
    # Gaussian oracle: eps * E S^2 * 2 int_eps^inf e^{-t^2/2} dt
    from scipy.special import ndtr
    ref = max(e * 2 * math.sqrt(2 * math.pi) * (1 - ndtr(e)) for e in eps)
    assert mu_g == pytest.approx(ref, rel=1e-6)
    mu = smoothness_mu(CATALOG["rademacher+gauss1"], [0.5], [-0.5, 0.0, 0.5])
    assert math.isfinite(mu) and mu > 0
    with pytest.raises(LawError):
        smoothness_mu(L.rademacher(), [0.5], [0.0])


def test_smoothness_mu_rademacher_gauss_oracle():
    # |E e^{(it+h)S}| / E e^{hS} = e^{-t^2/2} |cos t + i tanh h sin t|; h = 0 gives |cos t|
    from scipy.integrate import quad
    ref = 2 * quad(lambda t: math.exp(-t * t / 2) * abs(math.cos(t)), 0.5, 60, limit=400)[0]
    assert smoothness_mu(CATALOG["rademacher+gauss1"], [0.5], [0.0]) == pytest.approx(0.5 * 2 * ref, rel=1e-6)
