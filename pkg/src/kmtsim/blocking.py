"""Dyadic blocking of a variance sequence into blocks of nearly equal variance."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np


class BlockingError(ValueError):
    pass


@dataclass(frozen=True)
class Level:
    m: int
    indices: np.ndarray       # J_m, 1-based, increasing
    odd: np.ndarray           # parity mask; all True at m = 0
    variances: np.ndarray     # var(X_i^m), i in J_m
    t: np.ndarray             # design points t_i^m
    b_values: np.ndarray      # b_m(t_i^m) as floats
    knots_t: np.ndarray       # piecewise-linear knots of b_m
    knots_b: np.ndarray
    cuts: tuple               # cuts[k][j-1]:cuts[k][j] is block (k, j) as positions into indices
    block_variances: tuple    # block_variances[k][j-1] = B^m_{k,j}

    @property
    def n_m(self) -> int:
        return int(self.indices.size)

    def block(self, k: int, j: int) -> np.ndarray:
        c = self.cuts[k]
        return self.indices[c[j - 1]:c[j]]

    def block_slice(self, k: int, j: int) -> slice:
        c = self.cuts[k]
        return slice(int(c[j - 1]), int(c[j]))

    def b(self, t):
        return np.interp(t, self.knots_t, self.knots_b)

    def a(self, t):
        return np.interp(t, self.knots_b, self.knots_t)


@dataclass(frozen=True)
class BlockTree:
    n: int
    n_min: int
    M: int
    variances: np.ndarray     # var(X_i), i = 1..n
    levels: tuple             # levels[m], m = 0..M

    @property
    def c_min(self) -> float:
        return float(self.variances.min())

    @property
    def c_max(self) -> float:
        return float(self.variances.max())

    def level(self, m: int) -> Level:
        return self.levels[m]


def tree_depth(n: int, n_min: int) -> int:
    M = int(math.floor(math.log2(n / n_min)))
    # guard the float log against exact powers of two
    while n_min * 2 ** (M + 1) <= n:
        M += 1
    while n_min * 2**M > n:
        M -= 1
    return M


def _ceil_frac(x: Fraction) -> int:
    return -((-x.numerator) // x.denominator)


def _build_level(var_frac: list, var: np.ndarray, n: int, M: int, m: int) -> Level:
    step = 2 ** (M - m)
    n_m = n // step
    idx = np.arange(1, n_m + 1)
    pos = idx * step - 1
    v = [var_frac[p] for p in pos]
    h = Fraction(step, n)
    tail = 1 - n_m * h
    cum = []
    acc = Fraction(0)
    for x in v:
        acc += x * h
        cum.append(acc)
    total = acc + v[-1] * tail
    b = [c / total for c in cum]
    cuts = []
    bvars = []
    for k in range(m + 1):
        cell = np.array([max(1, _ceil_frac(x * 2**k)) for x in b], dtype=np.int64)
        c = np.searchsorted(cell, np.arange(0, 2**k + 1), side="right")
        cuts.append(c)
        bv = np.array([math.fsum(var[pos[c[j]:c[j + 1]]]) for j in range(2**k)])
        bvars.append(bv)
    t = idx * step / n
    knots_t = np.concatenate([[0.0], t, [1.0]]) if tail > 0 else np.concatenate([[0.0], t])
    b_float = np.array([float(x) for x in b])
    knots_b = np.concatenate([[0.0], b_float, [1.0]]) if tail > 0 else np.concatenate([[0.0], b_float])
    odd = np.ones(n_m, dtype=bool) if m == 0 else (idx % 2 == 1)
    return Level(m, idx, odd, var[pos], t, b_float, knots_t, knots_b, tuple(cuts), tuple(bvars))


def build_tree(variances: Sequence[float], n_min: int, enforce: bool = True) -> BlockTree:
    """Blocking tree for X_1..X_n with the given variances.

    ``enforce=False`` skips the n_min admissibility check (used to probe
    counterexamples); everything else is still validated.
    """
    var = np.asarray(variances, dtype=float)
    n = int(var.size)
    if np.any(~np.isfinite(var)) or np.any(var <= 0):
        raise BlockingError("all variances must be positive and finite")
    if n_min < 1 or n <= n_min:
        raise BlockingError(f"need n > n_min >= 1 (n={n}, n_min={n_min})")
    ratio = float(var.max() / var.min())
    if enforce and not n_min > 2 * ratio:
        raise BlockingError(f"n_min > 2C_max/C_min violated: n_min={n_min}, 2C_max/C_min={2 * ratio:.6g}")
    M = tree_depth(n, n_min)
    var_frac = [Fraction(float(x)) for x in var]
    levels = tuple(_build_level(var_frac, var, n, M, m) for m in range(M + 1))
    return BlockTree(n, int(n_min), M, var, levels)


def check_prop_imkj(tree: BlockTree) -> bool:
    """Every block I^m_{k,j} has at least two indices."""
    return all(np.all(np.diff(c) >= 2) for lv in tree.levels for c in lv.cuts)


def _sibling_pairs(tree: BlockTree):
    for lv in tree.levels:
        for k in range(1, lv.m + 1):
            bv = lv.block_variances[k]
            yield lv.m, k, bv[0::2], bv[1::2]


def check_prop_b1(tree: BlockTree, lambda_n: float = 1.0, c: float | None = None) -> tuple[float, bool]:
    """Worst sibling variance gap |B_{k+1,2j-1} - B_{k+1,2j}| and whether it is
    within c * lambda_n^2, with c = 4 C_max by default (C_max in lambda_n units)."""
    worst = 0.0
    for _, _, left, right in _sibling_pairs(tree):
        worst = max(worst, float(np.max(np.abs(left - right))))
    if c is None:
        c = 4 * tree.c_max / lambda_n**2
    return worst, bool(worst <= c * lambda_n**2 * (1 + 1e-12))


def check_prop_b2(tree: BlockTree, c: float = 8.0) -> tuple[float, bool]:
    """Worst sibling variance ratio max(B1/B2, B2/B1); +inf for an empty block."""
    worst = 1.0
    for _, _, left, right in _sibling_pairs(tree):
        with np.errstate(divide="ignore"):
            r = np.maximum(left / right, right / left)
        worst = max(worst, float(np.max(r)))
    return worst, bool(worst <= c)


def check_maps(tree: BlockTree, n_grid: int = 1000) -> dict:
    """Inverse and Lipschitz checks of b_m, a_m on a uniform grid."""
    g = np.linspace(0.0, 1.0, n_grid)
    lmax = tree.c_max / tree.c_min
    inv_err = 0.0
    lip = 0.0
    for lv in tree.levels:
        inv_err = max(inv_err, float(np.max(np.abs(lv.b(lv.a(g)) - g))),
                      float(np.max(np.abs(lv.a(lv.b(g)) - g))))
        for fn in (lv.b, lv.a):
            slopes = np.abs(np.diff(fn(g))) / np.diff(g)
            lip = max(lip, float(slopes.max()))
        knot_slopes = np.diff(lv.knots_b) / np.diff(lv.knots_t)
        lip = max(lip, float(knot_slopes.max()), float(1 / knot_slopes.min()))
    return {"inverse_error": inv_err, "lipschitz": lip, "l_max": lmax,
            "verdict": bool(inv_err <= 1e-12 and lip <= lmax * (1 + 1e-9))}


def tree_summary(tree: BlockTree) -> dict:
    return {
        "n": tree.n, "n_min": tree.n_min, "M": tree.M,
        "n_m": [lv.n_m for lv in tree.levels],
        "prop_imkj": check_prop_imkj(tree),
        "b1_gap": check_prop_b1(tree)[0],
        "b2_ratio": check_prop_b2(tree)[0],
    }
