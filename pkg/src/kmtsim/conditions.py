"""Checkers for the distributional hypotheses: Sakhanenko's moment condition,
the sub-Gaussian MGF bounds it implies, and the conjugate-characteristic-
function smoothness condition."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from .laws import LatticeGaussianMixture, LawError, expected_exp_abs, mgf


@dataclass(frozen=True)
class SakhanenkoReport:
    lambda_star: float
    third_abs_moment: float
    variance: float
    condition_holds_at: float | None
    verdict: bool


@dataclass(frozen=True)
class BoundCheck:
    verdict: bool
    worst_margin: float
    worst_t: float
    n_points: int


def _abs3_exp(d: LatticeGaussianMixture, lam: float) -> float:
    """E |X|^3 exp(lam |X|)."""
    pos = d.positions
    if d.is_discrete:
        a = np.abs(pos)
        return float(d.weights @ (a**3 * np.exp(lam * a)))
    s = math.sqrt(d.gaussian_variance)
    total = 0.0
    for mu, w in zip(pos, d.weights):
        def integrand(x, mu=mu):
            return abs(x) ** 3 * math.exp(lam * abs(x) - 0.5 * ((x - mu) / s) ** 2)
        lo, hi = mu - 40 * s, mu + 40 * s
        pts = [0.0] if lo < 0 < hi else None
        val, _ = integrate.quad(integrand, lo, hi, points=pts, epsabs=1e-10, epsrel=1e-12, limit=200)
        total += w * val / (s * math.sqrt(2 * math.pi))
    return total


def sakhanenko_lambda(d: LatticeGaussianMixture, at: float | None = None) -> SakhanenkoReport:
    """Largest lambda with lambda * E|X|^3 e^{lambda|X|} <= E X^2.

    The left side is strictly increasing in lambda, so lambda_star is the
    unique positive root of the equality.
    """
    var = d.variance
    if var <= 0:
        raise LawError("Sakhanenko's condition needs a nondegenerate law")
    if abs(d.mean) > 1e-10 * d.scale:
        raise LawError(f"Sakhanenko's condition needs a zero-mean law, mean is {d.mean}")
    second = d.second_moment

    def gap(lam):
        return lam * _abs3_exp(d, lam) - second

    hi = 1.0 / max(_abs3_exp(d, 0.0) / second, 1e-300)
    while gap(hi) < 0:
        hi *= 2.0
    lam_star = optimize.brentq(gap, 0.0, hi, rtol=1e-12, xtol=1e-300)
    verdict = True if at is None else bool(at <= lam_star)
    return SakhanenkoReport(lam_star, _abs3_exp(d, 0.0), var, at, verdict)


def check_lemma_a1(d: LatticeGaussianMixture, lam: float, t_grid) -> BoundCheck:
    """E e^{tX} <= e^{t^2 EX^2} on t_grid restricted to |t| <= lam/3."""
    rep = sakhanenko_lambda(d)
    if lam > rep.lambda_star:
        raise LawError(f"lambda={lam} exceeds lambda_star={rep.lambda_star:.6g}; "
                       "Sakhanenko's condition fails")
    t = np.asarray(t_grid, dtype=float)
    t = t[np.abs(t) <= lam / 3 * (1 + 1e-12)]
    margin = np.exp(t * t * d.second_moment) - mgf(d, t)
    i = int(np.argmin(margin))
    return BoundCheck(bool(margin[i] >= -1e-12), float(margin[i]), float(t[i]), int(t.size))


def check_lemma_a2(d: LatticeGaussianMixture, lam: float, c1: float, n_grid: int = 101) -> BoundCheck:
    """E e^{tX} <= e^{(4 c1 / lam^2) t^2} for |t| <= lam/2, given E e^{lam|X|} <= c1."""
    if d.variance <= 0:
        raise LawError("degenerate law excluded")
    moment = expected_exp_abs(d, lam)
    if c1 < 1 or moment > c1 * (1 + 1e-12):
        raise LawError(f"precondition fails: E exp(lambda|X|) = {moment:.10g} > c1 = {c1}")
    t = np.linspace(-lam / 2, lam / 2, n_grid)
    margin = np.exp(4 * c1 / lam**2 * t * t) - mgf(d, t)
    i = int(np.argmin(margin))
    return BoundCheck(bool(margin[i] >= -1e-12), float(margin[i]), float(t[i]), int(t.size))


def conjugate_cf_modulus(d: LatticeGaussianMixture, t, h: float) -> np.ndarray:
    """|E e^{(it+h)S} / E e^{hS}| for the mixture law."""
    t = np.asarray(t, dtype=float)
    pos = d.positions
    tilt = d.weights * np.exp(h * (pos - pos.mean()))
    tilt = tilt / tilt.sum()
    phase = np.exp(1j * np.multiply.outer(t, pos - pos.mean()))
    lattice_part = np.abs(phase @ tilt)
    return np.exp(-0.5 * t * t * d.gaussian_variance) * lattice_part


def smoothness_mu(d: LatticeGaussianMixture, epsilon_grid, h_grid) -> float:
    """Smallest mu consistent with the smoothness condition on the given grids.

    For each eps, takes the sup over |h| <= eps of the tail integral of the
    conjugate characteristic function over |t| > eps, and returns
    max_eps eps * E S^2 * integral.
    """
    if d.is_discrete:
        raise LawError("a purely discrete law never satisfies the smoothness condition")
    sigma = math.sqrt(d.gaussian_variance)
    es2 = d.second_moment
    t_end_extra = 40.0 / sigma
    period = 2 * math.pi / d.step if d.n_atoms > 1 else None
    mu = 0.0
    for eps in epsilon_grid:
        sup_int = 0.0
        for h in h_grid:
            if abs(h) > eps:
                continue
            hi = eps + t_end_extra
            pts = None
            if period is not None:
                pts = list(np.arange(eps, hi, period / 4)[1:200])
            val, _ = integrate.quad(lambda t: float(conjugate_cf_modulus(d, t, h)), eps, hi,
                                    points=pts, epsabs=1e-8, limit=max(200, 4 * len(pts or [])))
            sup_int = max(sup_int, 2 * val)
        mu = max(mu, eps * es2 * sup_int)
    return mu
