"""Elementary cellular automata on a periodic ring.

States are 1-D ``uint8`` arrays of 0/1 cells; batches are arrays whose last
axis is the ring.  Rule numbers follow Wolfram's convention: bit ``n`` of the
code is the output for the neighborhood ``(left, center, right)`` read as the
3-bit number ``n``.

All randomness goes through :func:`make_rng`, a Philox4x64 counter-based
generator keyed by ``SeedSequence((seed, *stream))``; identical keys always
give identical draws.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_RULES = 256


class InvalidStateError(ValueError):
    pass


class WindowTooLargeError(ValueError):
    pass


class GridFormatError(ValueError):
    pass


def check_rule(rule: int) -> int:
    rule = int(rule)
    if not 0 <= rule < N_RULES:
        raise ValueError(f"rule must be in [0, 255], got {rule}")
    return rule


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for ``(seed, *stream)``.

    Philox is counter based, so distinct stream tuples (e.g. a sample index)
    give independent, order-free draws.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def rule_table(rule: int) -> np.ndarray:
    """Output bit for each neighborhood index 0..7."""
    rule = check_rule(rule)
    return np.array([(rule >> n) & 1 for n in range(8)], dtype=np.uint8)


def apply_rule(rule: int, left: int, center: int, right: int) -> int:
    return (check_rule(rule) >> (4 * left + 2 * center + right)) & 1


def step(rule: int, state: np.ndarray) -> np.ndarray:
    """One synchronous update of a state (or a batch of states along axis 0..n-1)."""
    s = np.asarray(state, dtype=np.uint8)
    if s.ndim == 0 or s.shape[-1] < 3:
        raise InvalidStateError("state width must be at least 3")
    idx = (np.roll(s, 1, axis=-1) << 2) | (s << 1) | np.roll(s, -1, axis=-1)
    return rule_table(rule)[idx]


def evolve_bits(rule: int, init: np.ndarray, steps: int) -> np.ndarray:
    """Unpacked rollout: returns ``steps + 1`` rows stacked on a new leading axis."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    s = np.asarray(init, dtype=np.uint8)
    if s.ndim == 0 or s.shape[-1] < 3:
        raise InvalidStateError("state width must be at least 3")
    table = rule_table(rule)
    out = np.empty((steps + 1, *s.shape), dtype=np.uint8)
    out[0] = s
    for t in range(steps):
        cur = out[t]
        idx = (np.roll(cur, 1, axis=-1) << 2) | (cur << 1) | np.roll(cur, -1, axis=-1)
        out[t + 1] = table[idx]
    return out


@dataclass(frozen=True, eq=False)
class SpacetimeGrid:
    """A T x W evolution, stored packed 8 cells per byte, row-major."""

    rule: int
    width: int
    packed: np.ndarray
    seed: int = 0

    @classmethod
    def from_bits(cls, rule: int, bits: np.ndarray, seed: int = 0) -> "SpacetimeGrid":
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.ndim != 2 or bits.shape[0] < 1:
            raise InvalidStateError("grid must be a nonempty 2-D array")
        packed = np.packbits(bits, axis=1)
        packed.setflags(write=False)
        return cls(check_rule(rule), bits.shape[1], packed, int(seed))

    @property
    def rows(self) -> int:
        return self.packed.shape[0]

    @property
    def bits(self) -> np.ndarray:
        return np.unpackbits(self.packed, axis=1, count=self.width)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpacetimeGrid):
            return NotImplemented
        return (
            (self.rule, self.width, self.seed) == (other.rule, other.width, other.seed)
            and np.array_equal(self.packed, other.packed)
        )


@dataclass(frozen=True)
class Window:
    bits: np.ndarray
    t0: int
    x0: int


def evolve(rule: int, init: np.ndarray, steps: int, seed: int = 0) -> SpacetimeGrid:
    init = np.asarray(init, dtype=np.uint8)
    if init.ndim != 1:
        raise InvalidStateError("init must be a single 1-D state")
    return SpacetimeGrid.from_bits(rule, evolve_bits(rule, init, steps), seed)


def random_state(width: int, density: float = 0.5, seed: int = 0, *stream: int) -> np.ndarray:
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must be in [0, 1]")
    return (make_rng(seed, *stream).random(width) < density).astype(np.uint8)


def random_grid(rule: int, width: int = 256, steps: int = 1000, seed: int = 0, density: float = 0.5) -> SpacetimeGrid:
    return evolve(rule, random_state(width, density, seed), steps, seed)


def sample_window(grid: SpacetimeGrid, t_len: int, x_len: int, seed: int = 0) -> Window:
    """Random ``t_len x x_len`` slice; the spatial range may wrap the ring."""
    if t_len < 1 or x_len < 1:
        raise ValueError("window sides must be positive")
    if t_len > grid.rows or x_len > grid.width:
        raise WindowTooLargeError(
            f"window {t_len}x{x_len} does not fit grid {grid.rows}x{grid.width}"
        )
    rng = make_rng(seed, 0x57)
    t0 = int(rng.integers(0, grid.rows - t_len + 1))
    x0 = 0 if x_len == grid.width else int(rng.integers(0, grid.width))
    cols = (x0 + np.arange(x_len)) % grid.width
    bits = grid.bits[t0 : t0 + t_len][:, cols]
    return Window(bits, t0, x0)


# --- symmetries -------------------------------------------------------------


def reflect(rule: int) -> int:
    """Mirror image: swap the roles of the left and right neighbors."""
    rule = check_rule(rule)
    out = 0
    for n in range(8):
        l, c, r = (n >> 2) & 1, (n >> 1) & 1, n & 1
        out |= ((rule >> (4 * r + 2 * c + l)) & 1) << n
    return out


def complement(rule: int) -> int:
    """Conjugate by the 0/1 swap of every input and output cell."""
    rule = check_rule(rule)
    out = 0
    for n in range(8):
        out |= (1 - ((rule >> (7 - n)) & 1)) << n
    return out


@dataclass(frozen=True)
class SymmetryClass:
    canonical: int
    members: frozenset[int]


def orbit(rule: int) -> frozenset[int]:
    r = check_rule(rule)
    return frozenset({r, reflect(r), complement(r), complement(reflect(r))})


def canonical(rule: int) -> int:
    return min(orbit(rule))


def symmetry_classes() -> list[SymmetryClass]:
    seen: set[int] = set()
    classes = []
    for r in range(N_RULES):
        if r in seen:
            continue
        members = orbit(r)
        seen |= members
        classes.append(SymmetryClass(min(members), members))
    return classes


# --- .ecg files -------------------------------------------------------------

_ECG_MAGIC = b"ECG1"
_ECG_HEADER = struct.Struct("<4sIIIIQ")


def save_grid(grid: SpacetimeGrid, path: str | Path) -> None:
    """Write ``grid`` as ``.ecg``; the reserved header word carries a CRC32 of the bits."""
    payload = np.ascontiguousarray(grid.packed, dtype=np.uint8).tobytes()
    header = _ECG_HEADER.pack(_ECG_MAGIC, grid.rule, grid.width, grid.rows, zlib.crc32(payload), grid.seed)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)


def load_grid(path: str | Path) -> SpacetimeGrid:
    data = Path(path).read_bytes()
    if len(data) < _ECG_HEADER.size:
        raise GridFormatError("file too short for .ecg header")
    magic, rule, width, rows, crc, seed = _ECG_HEADER.unpack_from(data)
    if magic != _ECG_MAGIC:
        raise GridFormatError(f"bad magic {magic!r}")
    if rule >= N_RULES or width < 1 or rows < 1:
        raise GridFormatError("invalid header fields")
    row_bytes = (width + 7) // 8
    payload = data[_ECG_HEADER.size :]
    if len(payload) != rows * row_bytes:
        raise GridFormatError(f"expected {rows * row_bytes} payload bytes, found {len(payload)}")
    if zlib.crc32(payload) != crc:
        raise GridFormatError("payload checksum mismatch")
    packed = np.frombuffer(payload, dtype=np.uint8).reshape(rows, row_bytes).copy()
    packed.setflags(write=False)
    return SpacetimeGrid(rule, width, packed, seed)
