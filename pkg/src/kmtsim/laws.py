"""Exact laws on a lattice, optionally smeared by a common Gaussian.

Every law appearing in the construction (the summands X_i, the Gaussian
proxies, and all block sums) is a finite mixture

    sum_a w_a * N(origin + a * step, sigma^2)

with integer atom indices ``a``.  The family is closed under convolution, and
distribution functions, quantiles and moment generating functions are
available in closed form or by bracketed root finding.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

DEFAULT_PRUNE = 1e-15
DEFAULT_MAX_ATOMS = 2**20
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class LawError(ValueError):
    """Raised when a law cannot be built or combined."""


@dataclass(frozen=True, eq=False)
class LatticeGaussianMixture:
    step: float
    origin: float
    indices: np.ndarray
    weights: np.ndarray
    gaussian_variance: float = 0.0
    discarded_mass: float = 0.0
    name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=float)
        if idx.ndim != 1 or idx.shape != w.shape or idx.size == 0:
            raise LawError("indices and weights must be nonempty 1-d arrays of equal length")
        if not self.step > 0:
            raise LawError(f"lattice step must be positive, got {self.step}")
        if self.gaussian_variance < 0:
            raise LawError("gaussian_variance must be nonnegative")
        if np.any(w <= 0):
            raise LawError("atom weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise LawError(f"weights sum to {w.sum()!r}, not 1")
        if np.any(np.diff(idx) <= 0):
            raise LawError("atom indices must be strictly increasing")
        idx.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @property
    def atoms(self) -> dict[int, float]:
        return {int(a): float(p) for a, p in zip(self.indices, self.weights)}

    @property
    def positions(self) -> np.ndarray:
        return self.origin + self.indices * self.step

    @property
    def is_discrete(self) -> bool:
        return self.gaussian_variance == 0.0

    @property
    def n_atoms(self) -> int:
        return int(self.indices.size)

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.positions))

    @property
    def variance(self) -> float:
        pos = self.positions
        mu = np.dot(self.weights, pos)
        return float(self.gaussian_variance + np.dot(self.weights, (pos - mu) ** 2))

    @property
    def second_moment(self) -> float:
        return float(self.gaussian_variance + np.dot(self.weights, self.positions**2))

    @property
    def scale(self) -> float:
        """A length scale used for absolute tolerances."""
        return max(1.0, math.sqrt(self.second_moment))

    def position_of(self, index) -> np.ndarray:
        return self.origin + np.asarray(index) * self.step

    def __repr__(self):
        label = f"{self.name!r}, " if self.name else ""
        return (f"LatticeGaussianMixture({label}step={self.step}, origin={self.origin}, "
                f"atoms={self.n_atoms}, sigma2={self.gaussian_variance})")


def make_lattice(step: float, origin: float, atoms: Iterable[tuple[float, float]],
                 gaussian_variance: float = 0.0, name: str | None = None) -> LatticeGaussianMixture:
    """Build a law from ``(position, weight)`` pairs lying on ``origin + step * Z``.

    Duplicate positions are merged.  Weights must sum to one within 1e-9 and
    are renormalized.
    """
    step = float(step)
    origin = float(origin)
    if not step > 0:
        raise LawError(f"lattice step must be positive, got {step}")
    merged: dict[int, float] = {}
    for pos, w in atoms:
        pos = float(pos)
        w = float(w)
        if not w > 0:
            raise LawError(f"nonpositive weight {w} at position {pos}")
        k = round((pos - origin) / step)
        if abs(origin + k * step - pos) > 1e-9 * step:
            raise LawError(f"position {pos} is not on the lattice {origin} + {step}*Z")
        merged[k] = merged.get(k, 0.0) + w
    if not merged:
        raise LawError("a law needs at least one atom")
    total = math.fsum(merged.values())
    if abs(total - 1.0) > 1e-9:
        raise LawError(f"weights sum to {total}, expected 1")
    keys = sorted(merged)
    w = np.array([merged[k] for k in keys]) / total
    return LatticeGaussianMixture(step, origin, np.array(keys, dtype=np.int64), w,
                                  float(gaussian_variance), name=name)


def point_mass(x: float = 0.0, step: float = 1.0) -> LatticeGaussianMixture:
    return LatticeGaussianMixture(float(step), float(x), np.array([0]), np.array([1.0]))


def gaussian(variance: float, mean: float = 0.0) -> LatticeGaussianMixture:
    if not variance > 0:
        raise LawError("a Gaussian law needs positive variance")
    return LatticeGaussianMixture(1.0, float(mean), np.array([0]), np.array([1.0]),
                                  float(variance), name=f"N(0,{variance:g})")


def rademacher(scale: float = 1.0) -> LatticeGaussianMixture:
    return make_lattice(2.0 * scale, -scale, [(-scale, 0.5), (scale, 0.5)],
                        name="rademacher" if scale == 1.0 else f"rademacher*{scale:g}")


def scaled(d: LatticeGaussianMixture, c: float) -> LatticeGaussianMixture:
    """Law of c*X for c > 0."""
    if not c > 0:
        raise LawError("scale factor must be positive")
    return LatticeGaussianMixture(d.step * c, d.origin * c, d.indices, d.weights,
                                  d.gaussian_variance * c * c, d.discarded_mass)


def common_grid(step_a: float, step_b: float, max_denominator: int = 10**6) -> tuple[int, int, float]:
    """Integers (p, q) and grid g with step_a = p*g and step_b = q*g."""
    ratio = step_a / step_b
    frac = Fraction(ratio).limit_denominator(max_denominator)
    if frac <= 0 or abs(float(frac) - ratio) > 1e-12 * ratio:
        raise LawError(f"incommensurable lattice steps {step_a} and {step_b}")
    p, q = frac.numerator, frac.denominator
    return p, q, step_a / p


def convolve(a: LatticeGaussianMixture, b: LatticeGaussianMixture, prune: float = DEFAULT_PRUNE,
             max_atoms: int = DEFAULT_MAX_ATOMS) -> LatticeGaussianMixture:
    """Law of X + Y for independent X ~ a, Y ~ b.

    Atoms lighter than ``prune`` times the heaviest atom are dropped; the
    dropped mass is added to ``discarded_mass`` and the rest renormalized.
    """
    sigma2 = a.gaussian_variance + b.gaussian_variance
    carried = a.discarded_mass + b.discarded_mass
    if b.n_atoms == 1 or a.n_atoms == 1:
        one, many = (b, a) if b.n_atoms == 1 else (a, b)
        shift = float(one.position_of(one.indices[0]))
        return LatticeGaussianMixture(many.step, many.origin + shift, many.indices, many.weights,
                                      sigma2, carried)
    p, q, g = common_grid(a.step, b.step)
    ia = a.indices * p
    ib = b.indices * q
    span_a = int(ia[-1] - ia[0])
    span_b = int(ib[-1] - ib[0])
    if span_a + span_b + 1 > max_atoms:
        raise LawError(f"convolution needs {span_a + span_b + 1} grid points, over the cap {max_atoms}")
    da = np.zeros(span_a + 1)
    da[ia - ia[0]] = a.weights
    db = np.zeros(span_b + 1)
    db[ib - ib[0]] = b.weights
    dense = np.convolve(da, db)
    keep = dense > 0
    if prune > 0:
        keep &= dense >= prune * dense.max()
    dropped = float(dense[~keep].sum())
    idx = np.nonzero(keep)[0]
    w = dense[idx]
    w = w / w.sum()
    return LatticeGaussianMixture(g, a.origin + b.origin, idx + ia[0] + ib[0], w, sigma2,
                                  carried + dropped)


def convolve_all(laws: Sequence[LatticeGaussianMixture], **kw) -> LatticeGaussianMixture:
    """Balanced pairwise convolution of a list of laws."""
    if not laws:
        return point_mass(0.0)
    items = list(laws)
    while len(items) > 1:
        nxt = [convolve(items[i], items[i + 1], **kw) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def cdf(d: LatticeGaussianMixture, x):
    """Distribution function; right-continuous step function when discrete."""
    x = np.asarray(x, dtype=float)
    pos = d.positions
    if d.is_discrete:
        cum = np.concatenate(([0.0], np.cumsum(d.weights)))
        out = cum[np.searchsorted(pos, x, side="right")]
        return np.minimum(out, 1.0) if out.ndim else float(min(out, 1.0))
    sd = math.sqrt(d.gaussian_variance)
    z = (x[..., None] - pos) / sd
    out = ndtr(z) @ d.weights
    return out if out.ndim else float(out)


def pdf(d: LatticeGaussianMixture, x):
    if d.is_discrete:
        raise LawError("a purely discrete law has no density")
    x = np.asarray(x, dtype=float)
    sd = math.sqrt(d.gaussian_variance)
    z = (x[..., None] - d.positions) / sd
    out = np.exp(-0.5 * z * z) @ d.weights / (sd * _SQRT_2PI)
    return out if out.ndim else float(out)


def discrete_inverse(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Index of the first cumulative weight >= u (row-wise for 2-d ``cum``)."""
    if cum.ndim == 1:
        k = np.searchsorted(cum, u, side="left")
        return np.minimum(k, cum.size - 1)
    k = (cum < u[:, None]).sum(axis=1)
    return np.minimum(k, cum.shape[1] - 1)


def invert_mixture(offsets: np.ndarray, weights: np.ndarray, tau: float, u: np.ndarray,
                   tol: float, max_iter: int = 300) -> np.ndarray:
    """Generalized inverse of y -> sum_p w_p * Phi((y - d_p) / tau) at levels ``u``.

    ``weights`` is either shared, shape (P,), or per level, shape (B, P) with
    rows summing to one.  A safeguarded Newton iteration keeps a bracket
    [lo, hi] with F(lo) < u <= F(hi) and returns ``hi`` once hi - lo <= tol,
    so the result always satisfies F(y) >= u.
    """
    u = np.asarray(u, dtype=float)
    shared = weights.ndim == 1
    zu = ndtri(u)
    lo = offsets.min() + tau * zu
    hi = offsets.max() + tau * zu
    if shared:
        mu = float(weights @ offsets)
        spread = math.sqrt(float(weights @ (offsets - mu) ** 2) + tau * tau)
        x = mu + spread * zu
    else:
        mu = weights @ offsets
        spread = np.sqrt(np.einsum("bp,bp->b", weights, (offsets[None, :] - mu[:, None]) ** 2) + tau * tau)
        x = mu + spread * zu
    # the exact bracket endpoints may tie with the root; widen by one tolerance
    lo = lo - tol
    hi = hi + tol
    x = np.clip(x, lo, hi)
    width_ref = hi - lo
    stall = np.zeros(u.shape, dtype=np.int8)
    active = np.arange(u.size)
    out = np.empty_like(u)
    for _ in range(max_iter):
        if active.size == 0:
            break
        xa = x[active]
        w = weights if shared else weights[active]
        z = (xa[:, None] - offsets[None, :]) / tau
        if shared:
            F = ndtr(z) @ w
            f = np.exp(-0.5 * z * z) @ w / (tau * _SQRT_2PI)
        else:
            F = np.einsum("bp,bp->b", ndtr(z), w)
            f = np.einsum("bp,bp->b", np.exp(-0.5 * z * z), w) / (tau * _SQRT_2PI)
        g = F - u[active]
        above = g >= 0
        lo_a = np.where(above, lo[active], xa)
        hi_a = np.where(above, xa, hi[active])
        width = hi_a - lo_a
        done = width <= tol
        out[active[done]] = hi_a[done]
        with np.errstate(divide="ignore", invalid="ignore"):
            nx = xa - g / f + np.where(above, -0.5 * tol, 0.5 * tol)
        ok = np.isfinite(nx) & (nx > lo_a) & (nx < hi_a)
        shrink = width <= 0.7 * width_ref[active]
        st = np.where(shrink, 0, stall[active] + 1)
        force = st >= 3
        st = np.where(force, 0, st)
        nx = np.where(ok & ~force, nx, 0.5 * (lo_a + hi_a))
        keep = ~done
        idx = active[keep]
        lo[idx] = lo_a[keep]
        hi[idx] = hi_a[keep]
        x[idx] = nx[keep]
        stall[idx] = st[keep]
        width_ref[idx] = np.where(shrink[keep], width[keep], width_ref[idx])
        active = idx
    if active.size:
        out[active] = hi[active]
    return out


def quantile(d: LatticeGaussianMixture, u):
    """Left-continuous generalized inverse inf{x : cdf(x) >= u}, 0 < u < 1."""
    u = np.asarray(u, dtype=float)
    if np.any(~((u > 0) & (u < 1))):
        raise LawError("quantile levels must lie strictly inside (0, 1)")
    scalar = u.ndim == 0
    u1 = np.atleast_1d(u)
    if d.is_discrete:
        cum = np.cumsum(d.weights)
        out = d.positions[discrete_inverse(cum, u1)]
    elif d.n_atoms == 1:
        out = d.positions[0] + math.sqrt(d.gaussian_variance) * ndtri(u1)
    else:
        out = invert_mixture(d.positions, d.weights, math.sqrt(d.gaussian_variance), u1,
                             tol=1e-12 * d.scale)
    return float(out[0]) if scalar else out


def quantile_from_score(d: LatticeGaussianMixture, z):
    """quantile(d, Phi(z)), exact for a single Gaussian component."""
    z = np.asarray(z, dtype=float)
    if not d.is_discrete and d.n_atoms == 1:
        return d.positions[0] + math.sqrt(d.gaussian_variance) * z
    return quantile(d, clip_unit(ndtr(z)))


def clip_unit(u):
    """Keep probabilities inside the open unit interval."""
    return np.clip(u, np.finfo(float).tiny, np.nextafter(1.0, 0.0))


def mgf(d: LatticeGaussianMixture, t):
    """E exp(tX) in closed form."""
    t = np.asarray(t, dtype=float)
    pos = d.positions
    with np.errstate(over="ignore"):
        terms = d.weights * np.exp(np.multiply.outer(t, pos) + 0.5 * d.gaussian_variance * t[..., None] ** 2)
        out = terms.sum(axis=-1)
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(terms))[0]
        raise OverflowError(f"mgf overflows at term {tuple(int(b) for b in bad)} "
                            f"(position {pos[bad[-1]]}, t={np.atleast_1d(t).ravel()[0] if t.ndim else float(t)})")
    return out if out.ndim else float(out)


def expected_exp_abs(d: LatticeGaussianMixture, lam: float) -> float:
    """E exp(lam |X|) in closed form."""
    pos = d.positions
    if d.is_discrete:
        return float(d.weights @ np.exp(lam * np.abs(pos)))
    s2 = d.gaussian_variance
    s = math.sqrt(s2)
    c = 0.5 * lam * lam * s2
    right = np.exp(lam * pos + c) * ndtr(pos / s + lam * s)
    left = np.exp(-lam * pos + c) * ndtr(-pos / s + lam * s)
    return float(d.weights @ (right + left))


def sample(d: LatticeGaussianMixture, rng: np.random.Generator, size) -> np.ndarray:
    pos = d.positions
    if d.n_atoms == 1:
        x = np.full(size, pos[0])
    else:
        x = pos[rng.choice(d.n_atoms, size=size, p=d.weights)]
    if d.gaussian_variance > 0:
        x = x + math.sqrt(d.gaussian_variance) * rng.standard_normal(size)
    return x


# -- catalog files -----------------------------------------------------------

def law_from_dict(entry: Mapping) -> LatticeGaussianMixture:
    return make_lattice(entry["step"], entry.get("origin", 0.0), [tuple(a) for a in entry["atoms"]],
                        entry.get("gaussian_variance", 0.0), name=entry.get("name"))


def law_to_dict(d: LatticeGaussianMixture, name: str | None = None) -> dict:
    return {
        "name": name or d.name,
        "step": d.step,
        "origin": d.origin,
        "atoms": [[float(p), float(w)] for p, w in zip(d.positions, d.weights)],
        "gaussian_variance": d.gaussian_variance,
    }


def load_catalog(path) -> dict[str, LatticeGaussianMixture]:
    entries = json.loads(Path(path).read_text())
    out = {}
    for i, entry in enumerate(entries):
        name = entry.get("name") or f"law{i}"
        try:
            out[name] = law_from_dict({**entry, "name": name})
        except (KeyError, TypeError, LawError) as exc:
            raise LawError(f"catalog entry {i} ({name}): {exc}") from exc
    return out


def save_catalog(laws: Mapping[str, LatticeGaussianMixture], path) -> None:
    Path(path).write_text(json.dumps([law_to_dict(d, k) for k, d in laws.items()], indent=2))


def default_catalog() -> dict[str, LatticeGaussianMixture]:
    """Zero-mean laws used by the appendix checks and the test battery."""
    rad = rademacher()
    return {
        "rademacher": rad,
        "rademacher2": rademacher(2.0),
        "gauss1": gaussian(1.0),
        "rademacher+gauss1": convolve(rad, gaussian(1.0)),
        "three_point": make_lattice(1.0, 0.0, [(-1, 0.25), (0, 0.5), (1, 0.25)], name="three_point"),
        "skew_two_point": make_lattice(1.0, 0.0, [(-1, 2 / 3), (2, 1 / 3)], name="skew_two_point"),
        "binomial4": convolve_all([rad] * 4),
        "skew+gauss": make_lattice(1.0, 0.0, [(-1, 2 / 3), (2, 1 / 3)], 0.5, name="skew+gauss"),
    }
