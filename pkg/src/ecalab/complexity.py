"""Complexity measures for ECA rules and spacetime grids."""

from __future__ import annotations

import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources

import numba
import numpy as np

from . import eca

COMPRESSOR = f"zlib {zlib.ZLIB_VERSION} DEFLATE level 9"
LYAPUNOV_FLOOR = -1.0
WOLFRAM_CLASSES = ("I", "II", "III", "IV")


class StateSpaceTooLargeError(ValueError):
    pass


# --- Lempel-Ziv 76 ----------------------------------------------------------


@numba.njit(cache=True)
def _lz76_phrases(s):
    # Suffix automaton over {0,1}; first_end[v] is the end index of the first
    # occurrence of the substrings in state v.
    n = s.shape[0]
    size = 2 * n + 2
    nxt = np.full((size, 2), -1, dtype=np.int64)
    link = np.full(size, -1, dtype=np.int64)
    length = np.zeros(size, dtype=np.int64)
    first_end = np.zeros(size, dtype=np.int64)
    count = 1
    last = 0
    for p in range(n):
        c = s[p]
        cur = count
        count += 1
        length[cur] = length[last] + 1
        first_end[cur] = p
        v = last
        while v != -1 and nxt[v, c] == -1:
            nxt[v, c] = cur
            v = link[v]
        if v == -1:
            link[cur] = 0
        else:
            q = nxt[v, c]
            if length[v] + 1 == length[q]:
                link[cur] = q
            else:
                clone = count
                count += 1
                length[clone] = length[v] + 1
                nxt[clone, 0] = nxt[q, 0]
                nxt[clone, 1] = nxt[q, 1]
                link[clone] = link[q]
                first_end[clone] = first_end[q]
                while v != -1 and nxt[v, c] == q:
                    nxt[v, c] = clone
                    v = link[v]
                link[q] = clone
                link[cur] = clone
        last = cur

    # A phrase starting at i extends while s[i:i+l] also starts somewhere before i.
    phrases = 0
    i = 0
    while i < n:
        v = 0
        l = 0
        while i + l < n:
            v = nxt[v, s[i + l]]
            l += 1
            if first_end[v] - l + 1 >= i:
                break
        phrases += 1
        i += l
    return phrases


def lz76(seq) -> int:
    """Lempel-Ziv (1976) exhaustive-history phrase count of a 0/1 sequence."""
    s = np.ascontiguousarray(np.asarray(seq, dtype=np.uint8).ravel())
    if s.size == 0:
        raise ValueError("lz76 needs a nonempty sequence")
    if s.max() > 1:
        raise ValueError("lz76 expects a binary sequence")
    return int(_lz76_phrases(s))


def lz_normalized(seq) -> float:
    s = np.asarray(seq, dtype=np.uint8).ravel()
    c = lz76(s)
    n = s.size
    if n < 2:
        return float(c)
    return c * math.log2(n) / n


def lz_grid(grid: eca.SpacetimeGrid) -> float:
    return lz_normalized(grid.bits.ravel())


# --- compression ------------------------------------------------------------


def compression_complexity(grid: eca.SpacetimeGrid) -> float:
    raw = np.packbits(grid.bits.ravel()).tobytes()
    return len(zlib.compress(raw, 9)) / len(raw)


# --- damage spreading -------------------------------------------------------


def _slope(t: np.ndarray, y: np.ndarray) -> float:
    tc = t - t.mean()
    return float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))


def damage_curves(rule: int, width: int, trials: int, steps: int, seed: int) -> np.ndarray:
    """Hamming distance between each trial's pair of trajectories, shape (trials, steps + 1)."""
    rng = eca.make_rng(seed, 0x1A)
    base = (rng.random((trials, width)) < 0.5).astype(np.uint8)
    flipped = base.copy()
    flipped[np.arange(trials), rng.integers(0, width, size=trials)] ^= 1
    a = eca.evolve_bits(rule, base, steps)
    b = eca.evolve_bits(rule, flipped, steps)
    return (a ^ b).sum(axis=2, dtype=np.int64).T


def lyapunov(rule: int, width: int = 256, trials: int = 32, steps: int = 200, seed: int = 0) -> float:
    """Mean least-squares slope of ln H(t) over the times where damage H survives.

    A trial whose damage is gone after the first step has no slope to fit and
    contributes ``LYAPUNOV_FLOOR``.
    """
    if width < 16 or trials < 1 or steps < 2:
        raise ValueError("lyapunov needs width >= 16, trials >= 1, steps >= 2")
    curves = damage_curves(rule, width, trials, steps, seed)
    t = np.arange(steps + 1, dtype=np.float64)
    slopes = []
    for h in curves:
        alive = h > 0
        if alive.sum() < 2:
            slopes.append(LYAPUNOV_FLOOR)
        else:
            slopes.append(_slope(t[alive], np.log(h[alive].astype(np.float64))))
    return float(np.mean(slopes))


# --- Krylov spreading -------------------------------------------------------

MAX_KRYLOV_WIDTH = 14


def transition_map(rule: int, width: int) -> np.ndarray:
    """Successor index of every periodic state; cell i of state s is bit i of s."""
    if width > MAX_KRYLOV_WIDTH:
        raise StateSpaceTooLargeError(f"2**{width} states is too many to enumerate (max width {MAX_KRYLOV_WIDTH})")
    codes = np.arange(2**width, dtype=np.int64)
    bits = ((codes[:, None] >> np.arange(width)) & 1).astype(np.uint8)
    nxt = eca.step(rule, bits).astype(np.int64)
    return (nxt << np.arange(width)).sum(axis=1)


def occupancy_observable(width: int, cell: int = 0) -> np.ndarray:
    codes = np.arange(2**width, dtype=np.int64)
    o = ((codes >> cell) & 1) - 0.5
    return o / np.linalg.norm(o)


def krylov_basis(succ: np.ndarray, o0: np.ndarray, max_dim: int, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of span{O, UO, U^2 O, ...} with (UO)(s) = O(succ(s)).

    Arnoldi with a second Gram-Schmidt pass; stops at ``max_dim`` vectors or
    when the new residual norm drops below ``tol``.
    """
    basis = [o0 / np.linalg.norm(o0)]
    while len(basis) < max_dim:
        w = basis[-1][succ]
        q = np.array(basis)
        for _ in range(2):
            w = w - q.T @ (q @ w)
        norm = np.linalg.norm(w)
        if norm < tol:
            break
        basis.append(w / norm)
    return np.array(basis)


def krylov(rule: int, width: int = 10, horizon: int = 32, cell: int = 0) -> float:
    """Time-averaged mean Krylov index of the evolving cell-occupancy observable."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    succ = transition_map(rule, width)
    o = occupancy_observable(width, cell % width)
    basis = krylov_basis(succ, o, horizon)
    idx = np.arange(len(basis))
    total = 0.0
    for _ in range(horizon):
        amp = basis @ o
        total += float(idx @ amp**2) / float(o @ o)
        o = o[succ]
    return total / horizon


# --- Wolfram classes --------------------------------------------------------


@lru_cache(maxsize=1)
def wolfram_table() -> dict:
    text = resources.files("ecalab.data").joinpath("wolfram_classes.json").read_text()
    return json.loads(text)


def wolfram_class(rule: int) -> str:
    return wolfram_table()["classes"][str(eca.canonical(rule))]


# --- aggregate report -------------------------------------------------------


@dataclass(frozen=True)
class ComplexityConfig:
    width: int = 256
    steps: int = 1000
    density: float = 0.5
    seed: int = 0
    lyapunov_width: int = 256
    lyapunov_trials: int = 32
    lyapunov_steps: int = 200
    krylov_width: int = 10
    krylov_horizon: int = 32


@dataclass(frozen=True)
class ComplexityReport:
    rule: int
    lempel_ziv: float
    compression: float
    lyapunov: float
    krylov: float
    wolfram_class: str

    def as_dict(self) -> dict:
        return asdict(self)


def report(rule: int, config: ComplexityConfig = ComplexityConfig()) -> ComplexityReport:
    rule = eca.check_rule(rule)
    grid = eca.random_grid(rule, config.width, config.steps, config.seed, config.density)
    return ComplexityReport(
        rule=rule,
        lempel_ziv=lz_grid(grid),
        compression=compression_complexity(grid),
        lyapunov=lyapunov(rule, config.lyapunov_width, config.lyapunov_trials, config.lyapunov_steps, config.seed),
        krylov=krylov(rule, config.krylov_width, config.krylov_horizon),
        wolfram_class=wolfram_class(rule),
    )


def _report_star(args):
    return report(*args)


def sweep(rules, config: ComplexityConfig = ComplexityConfig(), workers: int = 1) -> list[ComplexityReport]:
    """Reports for ``rules``, ordered by rule id regardless of worker count."""
    rules = sorted({eca.check_rule(r) for r in rules})
    if workers <= 1:
        return [report(r, config) for r in rules]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_report_star, [(r, config) for r in rules]))
