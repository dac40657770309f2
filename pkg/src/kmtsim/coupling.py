"""The coupling: quantile transforms, the dyadic scheme, the auxiliary
disaggregation and the recursion over levels m = M..0.

Everything here is vectorized over a batch of independent replications: the
Python loop runs over tree nodes and numpy handles the batch.  A single
replication is a batch of one.

Splitting a node with children laws (A, B) given the realized sum s uses
the conditional law of the left child given A + B = s.  The contrast
T = alpha2 * Y_L - alpha1 * Y_R equals (alpha1 + alpha2) * Y_L - alpha1 * s on
that event, an increasing affine map of Y_L, so the conditional quantile of T
and that of Y_L are the same transformation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from . import laws as L
from .blocking import BlockTree, build_tree
from .laws import LatticeGaussianMixture, LawError

log = logging.getLogger(__name__)

PAIR_PRUNE = 1e-18       # pairs lighter than this times the heaviest pair are dropped
ROW_PRUNE = 1e-17        # per-chunk posterior weight below which a pair column is skipped
CHUNK_ELEMS = 1 << 20    # rows x pairs per chunk in the mixture kernels
INVERT_TOL = 1e-11


class CouplingError(RuntimeError):
    pass


def _law_key(d: LatticeGaussianMixture):
    return (d.step, d.origin, d.gaussian_variance, d.indices.tobytes(), d.weights.tobytes())


class SplitKernel:
    """Conditional quantile split of a sum into (left, right) parts.

    ``split(s, z)`` returns the left value Q_{A | A+B=s}(Phi(z)) and the
    right value s - left, for arrays s and z of equal shape.
    """

    def __init__(self, left: LatticeGaussianMixture, right: LatticeGaussianMixture):
        self.left, self.right = left, right
        s1, s2 = left.gaussian_variance, right.gaussian_variance
        self.s1, self.s2 = s1, s2
        a, p = left.positions, left.weights
        b, q = right.positions, right.weights
        if s1 > 0 and s2 > 0:
            self.mode = "gauss" if (a.size == 1 and b.size == 1) else "mixture"
        elif s1 == 0 and s2 > 0:
            self.mode = "dleft"
        elif s1 > 0 and s2 == 0:
            self.mode = "dright"
        else:
            self.mode = "discrete"
        sig2 = s1 + s2
        if sig2 > 0:
            self.r = s1 / sig2
            self.tau = math.sqrt(s1 * s2 / sig2)
            self.sig2 = sig2
        if self.mode == "gauss":
            self.a0, self.c0 = float(a[0]), float(a[0] + b[0])
            return
        if self.mode == "discrete":
            self._init_discrete()
            return
        if self.mode == "dright":
            # pairs ordered by b descending, since the left value s - b decreases in b
            ia, ib = np.meshgrid(np.arange(a.size), np.arange(b.size)[::-1], indexing="xy")
            ia, ib = ia.ravel(), ib.ravel()
        else:
            ia, ib = np.meshgrid(np.arange(a.size), np.arange(b.size), indexing="ij")
            ia, ib = ia.ravel(), ib.ravel()
        with np.errstate(divide="ignore"):
            lw = np.log(p[ia]) + np.log(q[ib])
        keep = lw >= lw.max() + math.log(PAIR_PRUNE)
        ia, ib, lw = ia[keep], ib[keep], lw[keep]
        self.pa, self.pb = a[ia], b[ib]
        self.lw = lw
        self.c = self.pa + self.pb
        if self.mode == "mixture":
            self.d = self.pa - self.r * self.c
        else:
            grp = ia if self.mode == "dleft" else ib
            starts = np.flatnonzero(np.r_[True, grp[1:] != grp[:-1]])
            self.starts = starts
            self.values = (a if self.mode == "dleft" else b)[grp[starts]]

    @property
    def n_pairs(self) -> int:
        if self.mode == "gauss":
            return 1
        if self.mode == "discrete":
            return int(sum(v[0].size for v in self.table.values()))
        return int(self.c.size)

    # -- discrete lattice -------------------------------------------------
    def _init_discrete(self):
        A, B = self.left, self.right
        p, q, g = L.common_grid(A.step, B.step)
        self.grid, self.origin = g, A.origin + B.origin
        ia, ib = np.meshgrid(np.arange(A.n_atoms), np.arange(B.n_atoms), indexing="ij")
        ia, ib = ia.ravel(), ib.ravel()
        key = A.indices[ia] * p + B.indices[ib] * q
        w = A.weights[ia] * B.weights[ib]
        order = np.lexsort((A.indices[ia], key))
        key, ia, ib, w = key[order], ia[order], ib[order], w[order]
        table = {}
        bounds = np.flatnonzero(np.r_[True, key[1:] != key[:-1], True])
        pa, pb = A.positions, B.positions
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            cw = np.cumsum(w[lo:hi])
            table[int(key[lo])] = (pa[ia[lo:hi]], pb[ib[lo:hi]], cw / cw[-1])
        self.table = table

    def _split_discrete(self, s, u):
        kf = (s - self.origin) / self.grid
        K = np.rint(kf)
        bad = np.abs(kf - K) > 1e-6
        if np.any(bad):
            raise LawError(f"sum {s[bad][0]!r} is off the lattice of the conditioning law")
        K = K.astype(np.int64)
        left = np.empty_like(s)
        right = np.empty_like(s)
        for key in np.unique(K):
            rows = np.flatnonzero(K == key)
            try:
                xa, xb, cum = self.table[int(key)]
            except KeyError:
                raise LawError(f"sum {s[rows[0]]!r} lies outside the support") from None
            k = L.discrete_inverse(cum, u[rows])
            left[rows] = xa[k]
            right[rows] = xb[k]
        return left, right

    # -- smeared ----------------------------------------------------------
    def _weights(self, s):
        lw = self.lw[None, :] - (s[:, None] - self.c[None, :]) ** 2 / (2 * self.sig2)
        lw -= lw.max(axis=1, keepdims=True)
        w = np.exp(lw)
        w /= w.sum(axis=1, keepdims=True)
        return w

    def _chunks(self, s):
        """Row chunks sorted by s so that each chunk touches few pair columns."""
        order = np.argsort(s, kind="stable")
        size = max(1, CHUNK_ELEMS // max(1, self.c.size))
        for lo in range(0, s.size, size):
            yield order[lo:lo + size]

    def split(self, s, z):
        s = np.asarray(s, dtype=float)
        z = np.asarray(z, dtype=float)
        shape = s.shape
        s, z = s.ravel(), z.ravel()
        if self.mode == "gauss":
            left = self.a0 + self.r * (s - self.c0) + self.tau * z
            return left.reshape(shape), (s - left).reshape(shape)
        u = L.clip_unit(ndtr(z))
        if self.mode == "discrete":
            left, right = self._split_discrete(s, u)
            return left.reshape(shape), right.reshape(shape)
        left = np.empty_like(s)
        right = np.empty_like(s)
        tol = INVERT_TOL * max(1.0, math.sqrt(self.left.variance + self.right.variance))
        for rows in self._chunks(s):
            sr = s[rows]
            w = self._weights(sr)
            cols = np.flatnonzero(w.max(axis=0) >= ROW_PRUNE)
            if self.mode == "mixture":
                w = w[:, cols]
                w /= w.sum(axis=1, keepdims=True)
                y = L.invert_mixture(self.d[cols], w, self.tau, u[rows], tol)
                left[rows] = y + self.r * sr
                right[rows] = sr - left[rows]
            else:
                agg = np.add.reduceat(w, self.starts, axis=1)
                cum = np.cumsum(agg, axis=1)
                cum /= cum[:, -1:]
                k = L.discrete_inverse(cum, u[rows])
                v = self.values[k]
                if self.mode == "dleft":
                    left[rows] = v
                    right[rows] = sr - v
                else:
                    right[rows] = v
                    left[rows] = sr - v
        return left.reshape(shape), right.reshape(shape)


_KERNEL_CACHE: dict = {}


def split_kernel(left: LatticeGaussianMixture, right: LatticeGaussianMixture) -> SplitKernel:
    key = (_law_key(left), _law_key(right))
    k = _KERNEL_CACHE.get(key)
    if k is None:
        if len(_KERNEL_CACHE) > 20000:
            _KERNEL_CACHE.clear()
        k = _KERNEL_CACHE[key] = SplitKernel(left, right)
    return k


# -- scalar-style entry points -------------------------------------------------

def quantile_transform(target: LatticeGaussianMixture, n_value, n_variance: float):
    """Quantile transformation F^{-1}(Phi(N / sd)) of a centred normal value."""
    if not n_variance > 0:
        raise LawError("the Gaussian input must be nondegenerate")
    z = np.asarray(n_value, dtype=float) / math.sqrt(n_variance)
    out = L.quantile_from_score(target, z)
    return float(out) if np.ndim(out) == 0 else out


def conditional_quantile_transform(law1: LatticeGaussianMixture, law2: LatticeGaussianMixture,
                                   alpha1: float, alpha2: float, x0_realized, v_value):
    """T~ solving F_{T|X0}(T~ | x0) = Phi_{V}(v) for T = alpha2 X1 - alpha1 X2, X0 = X1 + X2.

    V is centred normal with variance alpha2^2 B1 + alpha1^2 B2.
    """
    if alpha1 <= 0 or alpha2 <= 0:
        raise LawError("alpha1 and alpha2 must be positive")
    sd_v = math.sqrt(alpha2**2 * law1.variance + alpha1**2 * law2.variance)
    x0 = np.asarray(x0_realized, dtype=float)
    z = np.broadcast_to(np.asarray(v_value, dtype=float) / sd_v, x0.shape)
    x1, _ = split_kernel(law1, law2).split(x0, z)
    out = (alpha1 + alpha2) * x1 - alpha1 * x0
    return float(out) if out.ndim == 0 else out


def innovation_scores(w: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Standardized residuals of W_k on W_1 + ... + W_k, for k = 2..s (last axis).

    Column k-2 holds the score for component k.  Each score is independent of
    the partial sum through k and of W_{k+1}, ..., W_s.
    """
    v = np.asarray(variances, dtype=float)
    cum_v = np.cumsum(v)
    cum_w = np.cumsum(w, axis=-1)
    frac = v[1:] / cum_v[1:]
    return (w[..., 1:] - frac * cum_w[..., 1:]) / np.sqrt(v[1:] * (1 - frac))


def auxiliary_disaggregate(block_sum_value, component_laws: Sequence[LatticeGaussianMixture],
                           eta_values, eta_variances=None):
    """Components xi~_1..xi~_s of a realized block sum, peeled from the last.

    xi~_k = F^{-1}_{xi_k | S_k}(Phi_{eta_k}(eta_k) | S~_k) and S~_{k-1} = S~_k - xi~_k;
    xi~_1 = S~_1.  ``eta_values`` has the components along its last axis
    (eta_1 is unused).  The etas must be independent of the block sum.
    """
    laws = list(component_laws)
    s_val = np.asarray(block_sum_value, dtype=float)
    eta = np.asarray(eta_values, dtype=float)
    ev = np.ones(len(laws)) if eta_variances is None else np.asarray(eta_variances, dtype=float)
    if np.any(ev <= 0):
        raise LawError("eta variances must be positive")
    partial = [laws[0]]
    for d in laws[1:]:
        partial.append(L.convolve(partial[-1], d))
    out = np.empty(s_val.shape + (len(laws),))
    cur = s_val
    for k in range(len(laws) - 1, 0, -1):
        z = eta[..., k] / math.sqrt(ev[k])
        out[..., k], cur = split_kernel(laws[k], partial[k - 1]).split(cur, z)
    out[..., 0] = cur
    return out


# -- the construction ----------------------------------------------------------

@dataclass
class BlockPeel:
    pos: slice                 # positions into the level arrays
    kernels: list              # kernels[k-1] splits component k off S_k, k = 2..s
    variances: np.ndarray


@dataclass
class LevelPlan:
    m: int
    source: np.ndarray         # original 1-based index of each position, i * 2^(M-m)
    odd: np.ndarray
    laws: list                 # law of Y_i^m per position
    variances: np.ndarray
    cuts: tuple
    node_laws: list            # node_laws[k][j-1]
    node_var: list             # B^m_{k,j}
    top_law: LatticeGaussianMixture
    splits: list               # splits[k][j-1]: kernel for children of node (k, j), k < m
    peels: list


@dataclass
class CouplingPlan:
    tree: BlockTree
    x_laws: list               # law of X_i, i = 1..n
    levels: list               # LevelPlan per m = 0..M

    @property
    def n(self) -> int:
        return self.tree.n

    @property
    def variances(self) -> np.ndarray:
        return self.tree.variances

    def kernel_stats(self) -> dict:
        modes: dict = {}
        pairs = 0
        for lp in self.levels:
            for row in lp.splits:
                for k in row:
                    modes[k.mode] = modes.get(k.mode, 0) + 1
                    pairs += k.n_pairs
            for pe in lp.peels:
                for k in pe.kernels:
                    modes[k.mode] = modes.get(k.mode, 0) + 1
                    pairs += k.n_pairs
        return {"modes": modes, "pairs": pairs}


def build_plan(x_laws: Sequence[LatticeGaussianMixture], n_min: int, lam: float | None = None,
               enforce: bool = True) -> CouplingPlan:
    """Precompute every law and split kernel used by the construction."""
    x_laws = list(x_laws)
    var = np.array([d.variance for d in x_laws])
    for i, d in enumerate(x_laws):
        if abs(d.mean) > 1e-10 * d.scale:
            raise LawError(f"law of X_{i + 1} is not centred (mean {d.mean})")
    tree = build_tree(var, n_min, enforce=enforce)
    if lam is not None:
        from .conditions import sakhanenko_lambda
        seen = {}
        for d in x_laws:
            key = _law_key(d)
            if key not in seen:
                seen[key] = sakhanenko_lambda(d).lambda_star
        worst = min(seen.values())
        if lam > worst:
            log.warning("lambda=%g exceeds lambda_star=%.6g; the theorems' hypotheses fail "
                        "but the construction runs", lam, worst)
    gauss_cache: dict = {}

    def gaussian_of(v):
        if v not in gauss_cache:
            gauss_cache[v] = L.gaussian(v)
        return gauss_cache[v]

    conv_cache: dict = {}

    def conv(a, b):
        key = (id(a), id(b))
        if key not in conv_cache:
            conv_cache[key] = (a, b, L.convolve(a, b))
        return conv_cache[key][2]

    levels = []
    for lv in tree.levels:
        m = lv.m
        source = lv.indices * 2 ** (tree.M - m)
        laws = [x_laws[src - 1] if odd else gaussian_of(float(x_laws[src - 1].variance))
                for src, odd in zip(source, lv.odd)]
        node_laws = [None] * (m + 1)
        finest = []
        peels = []
        for j in range(1, 2**m + 1):
            sl = lv.block_slice(m, j)
            comps = laws[sl]
            partial = [comps[0]]
            for d in comps[1:]:
                partial.append(conv(partial[-1], d))
            finest.append(partial[-1])
            kernels = [split_kernel(comps[k], partial[k - 1]) for k in range(1, len(comps))]
            peels.append(BlockPeel(sl, kernels, np.array([d.variance for d in comps])))
        node_laws[m] = finest
        for k in range(m - 1, -1, -1):
            child = node_laws[k + 1]
            node_laws[k] = [conv(child[2 * j], child[2 * j + 1]) for j in range(2**k)]
        splits = [[split_kernel(node_laws[k + 1][2 * j], node_laws[k + 1][2 * j + 1])
                   for j in range(2**k)] for k in range(m)]
        levels.append(LevelPlan(m, source, lv.odd, laws, np.array([d.variance for d in laws]),
                                lv.cuts, node_laws, list(lv.block_variances), node_laws[0][0],
                                splits, peels))
    return CouplingPlan(tree, x_laws, levels)


@dataclass
class LevelState:
    m: int
    W: np.ndarray              # (B, n_m) Gaussian inputs W_i^m
    Y: np.ndarray              # (B, n_m) outputs Y~_i^m
    Wk: list                   # Wk[k]: (B, 2^k) block sums of W
    Yk: list                   # Yk[k]: (B, 2^k) block sums of Y~
    T: list                    # T[k]: (B, 2^k) T~^m_{k,j}, k < m
    V: list                    # V[k]: (B, 2^k) V^m_{k,j}, k < m
    alpha1: list
    alpha2: list
    B: list                    # B[k]: (2^k,) block variances


@dataclass
class CouplingOutput:
    X: np.ndarray              # (B, n) or (n,)
    N: np.ndarray
    levels: list | None = None
    rng_trace: dict = field(default_factory=dict)


def _run_level(lp: LevelPlan, W: np.ndarray, retain: bool):
    nb = W.shape[0]
    m = lp.m
    Wk = [np.add.reduceat(W, lp.cuts[k][:-1], axis=1) for k in range(m + 1)]
    Yk = [None] * (m + 1)
    Tk, Vk, A1, A2 = [], [], [], []
    Bt = lp.node_var[0][0]
    Yk[0] = L.quantile_from_score(lp.top_law, Wk[0][:, 0] / math.sqrt(Bt)).reshape(nb, 1)
    for k in range(m):
        B = lp.node_var[k + 1]
        BL, BR = B[0::2], B[1::2]
        r = BL / (BL + BR)
        tau = np.sqrt(BL * BR / (BL + BR))
        WL, WR = Wk[k + 1][:, 0::2], Wk[k + 1][:, 1::2]
        z = (WL - r * (WL + WR)) / tau
        child = np.empty((nb, 2 ** (k + 1)))
        parent = Yk[k]
        for j, kern in enumerate(lp.splits[k]):
            child[:, 2 * j], child[:, 2 * j + 1] = kern.split(parent[:, j], z[:, j])
        Yk[k + 1] = child
        if retain:
            a1, a2 = np.sqrt(BL / BR), np.sqrt(BR / BL)
            Tk.append(a2 * child[:, 0::2] - a1 * child[:, 1::2])
            Vk.append(a2 * WL - a1 * WR)
            A1.append(a1)
            A2.append(a2)
    Y = np.empty_like(W)
    finest = Yk[m]
    for j, pe in enumerate(lp.peels):
        wb = W[:, pe.pos]
        cur = finest[:, j]
        if wb.shape[1] > 1:
            zs = innovation_scores(wb, pe.variances)
            base = pe.pos.start
            for k in range(wb.shape[1] - 1, 0, -1):
                Y[:, base + k], cur = pe.kernels[k - 1].split(cur, zs[:, k - 1])
        Y[:, pe.pos.start] = cur
    state = None
    if retain:
        state = LevelState(m, W.copy(), Y.copy(), Wk, Yk, Tk, Vk, A1, A2,
                           [np.asarray(b) for b in lp.node_var])
    return Y, state


def run_construction(plan: CouplingPlan, N, retain_levels: bool = False,
                     rng_trace: dict | None = None) -> CouplingOutput:
    """X~_1..X~_n from Gaussian inputs N (shape (n,) or (B, n)), levels M..0."""
    N = np.asarray(N, dtype=float)
    single = N.ndim == 1
    Nb = N.reshape(1, -1) if single else N
    n = plan.n
    if Nb.shape[1] != n:
        raise CouplingError(f"expected {n} Gaussian inputs, got {Nb.shape[1]}")
    X = np.full_like(Nb, np.nan)
    assigned = np.zeros(n, dtype=np.int64)
    W = Nb
    archive = [] if retain_levels else None
    for lp in reversed(plan.levels):
        Y, state = _run_level(lp, W, retain_levels)
        if retain_levels:
            archive.append(state)
        harvest = lp.odd
        cols = lp.source[harvest] - 1
        X[:, cols] = Y[:, harvest]
        assigned[cols] += 1
        if lp.m > 0:
            # Y~_{2i}^m becomes W_i^{m-1}
            W = Y[:, 1::2]
    if np.any(assigned != 1):
        raise CouplingError("internal consistency: some index was not assigned exactly once")
    if archive is not None:
        archive.reverse()
    out_X = X[0] if single else X
    return CouplingOutput(out_X, N, archive, dict(rng_trace or {}))


def draw_gaussians(variances: np.ndarray, seed: int, reps: Sequence[int], stream: int | None = None):
    """N_i = sqrt(var_i) Z_i with replication r drawn from substream (seed, r)."""
    sd = np.sqrt(np.asarray(variances, dtype=float))
    out = np.empty((len(reps), sd.size))
    for row, r in enumerate(reps):
        key = [int(seed), int(r)] if stream is None else [int(seed), int(r), int(stream)]
        out[row] = sd * np.random.default_rng(key).standard_normal(sd.size)
    return out


def level_diagnostics(state: LevelState) -> dict:
    """S~_0, S~_{k,j}, T*_{k,j} and V*_{k,j} of one level (arrays over the batch)."""
    m = state.m
    out = {"m": m, "S0": state.Yk[0][:, 0] - state.Wk[0][:, 0], "S": [], "Tstar": [], "Vstar": []}
    for k in range(m):
        out["S"].append(state.T[k] - state.V[k])
        out["Tstar"].append(state.Yk[k + 1][:, 0::2] - state.Yk[k + 1][:, 1::2])
        out["Vstar"].append(state.Wk[k + 1][:, 0::2] - state.Wk[k + 1][:, 1::2])
    return out


def telescoping_terms(plan: CouplingPlan, out: CouplingOutput, f_values: np.ndarray) -> np.ndarray:
    """Sum over levels of sum_{j in J_m} f(t_j^m)(Y~_j^m - W_j^m), per replication.

    ``f_values`` holds f(t_i), i = 1..n.  Needs a retained archive.
    """
    if out.levels is None:
        raise CouplingError("level archive was not retained")
    total = 0.0
    for lp, st in zip(plan.levels, out.levels):
        fv = f_values[lp.source - 1]
        total = total + (st.Y - st.W) @ fv
    return total
