"""Haar analysis on [0, 1] and Hoelder-1/2 test functions.

Dyadic cells are Delta_{k,1} = [0, 2^-k] and Delta_{k,j} = ((j-1) 2^-k, j 2^-k]
for j = 2..2^k.  Haar functions are h_0 = 1 and
h_{k,j} = 2^{k/2} (1(Delta_{k+1,2j-1}) - 1(Delta_{k+1,2j})).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CERT_LEVEL = 12
QUAD_NODES = 16
SHRINK_RHO = 0.5

_GL_X, _GL_W = np.polynomial.legendre.leggauss(QUAD_NODES)


def cell_index(k: int, t) -> np.ndarray:
    """Position j of the level-k cell containing t (1-based)."""
    t = np.asarray(t, dtype=float)
    return np.maximum(1, np.ceil(t * 2.0**k)).astype(np.int64)


def haar_eval(k: int | None, j: int | None, t):
    """h_{k,j}(t); ``k=None`` gives h_0."""
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("Haar functions live on [0, 1]")
    if k is None:
        out = np.ones_like(t)
        return out if out.ndim else float(out)
    if k < 0 or not 1 <= j <= 2**k:
        raise ValueError(f"invalid Haar index (k={k}, j={j})")
    c = cell_index(k + 1, t)
    out = 2.0 ** (k / 2) * ((c == 2 * j - 1).astype(float) - (c == 2 * j))
    return out if out.ndim else float(out)


def haar_inner_product(k1: int, j1: int, k2: int, j2: int) -> float:
    """Exact integral of h_{k1,j1} * h_{k2,j2}, using that both are constant
    on the cells of level max(k1, k2) + 1."""
    level = max(k1, k2) + 1
    mid = (np.arange(1, 2**level + 1) - 0.5) / 2**level
    return float(np.sum(haar_eval(k1, j1, mid) * haar_eval(k2, j2, mid)) / 2**level)


@dataclass(frozen=True)
class HolderFunction:
    evaluator: Callable[[np.ndarray], np.ndarray]
    holder_constant: float
    certificate: tuple[float, float, float]  # (grid spacing, measured modulus, margin)
    kind: str = "custom"
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, t):
        return self.evaluator(np.asarray(t, dtype=float))

    def negated(self) -> "HolderFunction":
        ev = self.evaluator
        return HolderFunction(lambda t: -ev(t), self.holder_constant, self.certificate,
                              self.kind, self.seed, {**self.params, "negated": not self.params.get("negated", False)})


def holder_certificate(f: Callable, L: float, level: int = CERT_LEVEL) -> tuple[float, float, float]:
    """Check |f(x)-f(y)| <= L|x-y|^{1/2} on all pairs of the 2^-level grid.

    Returns (spacing, modulus, margin): the modulus is the smallest constant
    that works on the grid and margin = min over pairs of L|x-y|^{1/2} - |f(x)-f(y)|.
    The sup-norm condition is checked separately by ``sup_norm_ok``.
    """
    h = 2.0**-level
    x = np.arange(2**level + 1) * h
    v = np.asarray(f(x), dtype=float)
    worst = 0.0
    slack = math.inf
    for d in range(1, v.size):
        jump = np.max(np.abs(v[d:] - v[:-d]))
        root = math.sqrt(d * h)
        worst = max(worst, jump / root)
        slack = min(slack, L * root - jump)
    return h, worst, slack


def sup_norm_ok(f: Callable, L: float, level: int = CERT_LEVEL) -> bool:
    """||f|| <= L/2 on the 2^-level grid."""
    x = np.arange(2**level + 1) * 2.0**-level
    return bool(np.max(np.abs(np.asarray(f(x), dtype=float))) <= L / 2)


def certify(f: Callable, L: float, kind: str = "custom", seed=None, params=None) -> HolderFunction:
    cert = holder_certificate(f, L)
    if cert[2] < 0:
        raise ValueError(f"function is not certified in H(1/2, {L}): margin {cert[2]:.3g}")
    if not sup_norm_ok(f, L):
        raise ValueError(f"function is not certified in H(1/2, {L}): sup norm exceeds L/2")
    return HolderFunction(f, L, cert, kind, seed, dict(params or {}))


def _tent_series(rng: np.random.Generator, L: float, levels: int, amp: float):
    signs = [rng.choice([-1.0, 1.0], size=2**k) * rng.uniform(0.5, 1.0, size=2**k) for k in range(levels)]

    def f(t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for k, c in enumerate(signs):
            pos = t * 2**k
            j = np.minimum(np.floor(pos).astype(np.int64), 2**k - 1)
            frac = pos - j
            tent = 1.0 - np.abs(2.0 * frac - 1.0)
            out += amp * 2.0 ** (-k / 2) * c[j] * tent
        return out
    return f


def sample_holder(L: float, seed: int = 0, kind: str = "sqrt", **params) -> HolderFunction:
    """Deterministic certified member of H(1/2, L).

    kinds: ``const`` (value in params, default 0), ``sqrt`` (L sqrt(t) / 2),
    ``shifted_sqrt`` (a sqrt((t-c)_+) with seeded c), ``cusp`` (seeded
    a sqrt|t-c| centred, close to extremal), ``sine`` (seeded frequency and
    phase), ``tent_series`` (random Schauder series, a sample-path-like
    function).  If certification fails the amplitude is shrunk, up to 20 times.
    """
    if not L > 0:
        raise ValueError("L must be positive")
    rng = np.random.default_rng([int(seed), 7919])
    shrink = 1.0
    for _ in range(21):
        f = _make_kind(kind, L, rng, shrink, params)
        cert = holder_certificate(f, L)
        if cert[2] >= 0 and sup_norm_ok(f, L):
            return HolderFunction(f, L, cert, kind, seed, dict(params))
        shrink *= 0.95
        rng = np.random.default_rng([int(seed), 7919])
    raise ValueError(f"could not certify kind={kind!r} seed={seed} after 20 retries")


def _make_kind(kind: str, L: float, rng: np.random.Generator, shrink: float, params: dict):
    if kind == "const":
        value = float(params.get("value", 0.0)) * shrink
        return lambda t: np.full_like(np.asarray(t, dtype=float), value)
    if kind == "sqrt":
        a = L / 2 * shrink
        return lambda t: a * np.sqrt(t)
    if kind == "shifted_sqrt":
        c = float(params.get("c", rng.uniform(0.0, 0.5)))
        sign = float(params.get("sign", rng.choice([-1.0, 1.0])))
        a = sign * L / (2 * math.sqrt(1 - c)) * shrink
        return lambda t: a * np.sqrt(np.maximum(np.asarray(t) - c, 0.0))
    if kind == "cusp":
        c = float(params.get("c", rng.uniform(0.0, 1.0)))
        a = L / math.sqrt(2) * shrink
        top = math.sqrt(max(c, 1 - c))
        return lambda t: a * (np.sqrt(np.abs(np.asarray(t) - c)) - top / 2)
    if kind == "sine":
        omega = float(params.get("omega", rng.integers(1, 9)))
        phase = float(params.get("phase", rng.uniform(0, 2 * math.pi)))
        amp = min(L / 2, L / math.sqrt(4 * math.pi * omega)) * shrink
        return lambda t: amp * np.sin(2 * math.pi * omega * np.asarray(t) + phase)
    if kind == "tent_series":
        levels = int(params.get("levels", 12))
        return _tent_series(rng, L, levels, SHRINK_RHO * L / 6 * shrink)
    raise ValueError(f"unknown test-function kind {kind!r}")


def default_battery(L: float, size: int = 20, seed: int = 0) -> list[HolderFunction]:
    """Certified battery closed under f -> -f (size must be even)."""
    kinds = ["const", "sqrt", "cusp", "sine", "tent_series", "shifted_sqrt", "cusp", "sine",
             "tent_series", "cusp"]
    half = []
    for i in range(size // 2):
        kind = kinds[i % len(kinds)]
        params = {"value": L / 2} if kind == "const" else {}
        half.append(sample_holder(L, seed=seed * 1000 + i, kind=kind, **params))
    return half + [f.negated() for f in half]


def battery_from_specs(specs: Sequence[dict], default_L: float) -> list[HolderFunction]:
    out = []
    for s in specs:
        params = dict(s.get("params", {}))
        f = sample_holder(float(s.get("L", default_L)), int(s.get("seed", 0)), s["kind"], **params)
        out.append(f.negated() if s.get("negate") else f)
    return out


def load_battery(path, default_L: float = 1.0) -> list[HolderFunction]:
    return battery_from_specs(json.loads(Path(path).read_text()), default_L)


# -- expansions ----------------------------------------------------------------

@dataclass(frozen=True)
class HaarExpansion:
    c0: float
    coeffs: tuple  # coeffs[k] has shape (2^k,), k = 0..m-1
    m: int

    @property
    def n_coeffs(self) -> int:
        return sum(c.size for c in self.coeffs)

    def all_coeffs(self) -> np.ndarray:
        return np.concatenate(self.coeffs) if self.coeffs else np.zeros(0)


def cell_integrals(f: Callable, level: int) -> np.ndarray:
    """Integrals of f over the 2^level cells, 16-point Gauss-Legendre on each."""
    h = 2.0**-level
    left = np.arange(2**level) * h
    nodes = left[:, None] + (0.5 * h) * (_GL_X[None, :] + 1.0)
    vals = np.asarray(f(nodes.ravel()), dtype=float).reshape(nodes.shape)
    return vals @ _GL_W * (0.5 * h)


def haar_coeffs(f: Callable, m: int, quad_level: int | None = None) -> HaarExpansion:
    """Fourier-Haar coefficients c_0 and c_{k,j}, k < m.

    Half-cell integrals come from a fixed fine level (at least 12) summed
    upward, which keeps the error below 1e-9 for Hoelder-1/2 integrands.
    """
    if m < 1:
        raise ValueError("truncation level m must be >= 1")
    level = max(m, CERT_LEVEL) if quad_level is None else max(m, quad_level)
    ints = cell_integrals(f, level)
    by_level = {level: ints}
    for lv in range(level - 1, -1, -1):
        by_level[lv] = by_level[lv + 1].reshape(-1, 2).sum(axis=1)
    c0 = float(by_level[0][0])
    coeffs = []
    for k in range(m):
        half = by_level[k + 1].reshape(-1, 2)
        coeffs.append(2.0 ** (k / 2) * (half[:, 0] - half[:, 1]))
    return HaarExpansion(c0, tuple(coeffs), m)


def truncated_eval(e: HaarExpansion, t):
    t = np.asarray(t, dtype=float)
    out = np.full(t.shape, e.c0)
    for k, c in enumerate(e.coeffs):
        cell = cell_index(k + 1, t)
        j = (cell + 1) // 2
        sign = np.where(cell % 2 == 1, 1.0, -1.0)
        out = out + 2.0 ** (k / 2) * sign * c[j - 1]
    return out if out.ndim else float(out)


def local_average(f: Callable, m: int, t) -> np.ndarray:
    """2^m times the integral of f over the level-m cell containing t."""
    ints = cell_integrals(f, max(m, CERT_LEVEL))
    fine = ints.reshape(2**m, -1).sum(axis=1)
    return 2.0**m * fine[cell_index(m, t) - 1]


def write_expansion_csv(e: HaarExpansion, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "j", "coefficient"])
        w.writerow(["c0", "", repr(e.c0)])
        for k, c in enumerate(e.coeffs):
            for j, v in enumerate(c, start=1):
                w.writerow([k, j, repr(float(v))])
