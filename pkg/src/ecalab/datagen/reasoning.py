"""ARC-style frame sequences for the easy and hard reasoning tasks.

Frames are ``G x G`` grids of color indices, 0 being background and
``1..n_colors`` the cyclic palette (red, green, blue, yellow by default).
Models see each frame one-hot encoded per cell, flattened row-major.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import eca
from .dataset import Dataset

PALETTE = ("red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple")

# 5x5 base shapes for the hard task.
SHAPES = {
    "L": [
        "10000",
        "10000",
        "10000",
        "10000",
        "11111",
    ],
    "T": [
        "11111",
        "00100",
        "00100",
        "00100",
        "00100",
    ],
    "S": [
        "01111",
        "01000",
        "01110",
        "00010",
        "11110",
    ],
    "cross": [
        "00100",
        "00100",
        "11111",
        "00100",
        "00100",
    ],
}

# (d_row, d_col) for up, right, down, left
DIRECTIONS = ((-1, 0), (0, 1), (1, 0), (0, -1))


def shape_bitmap(name: str) -> np.ndarray:
    return np.array([[int(c) for c in row] for row in SHAPES[name]], dtype=np.uint8)


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class EasyConfig:
    grid: int = 10
    n_colors: int = 4
    square: int = 3
    positions: tuple = ((1, 1), (1, 6), (6, 1), (6, 6))


@dataclass(frozen=True)
class HardConfig:
    grid: int = 20
    n_colors: int = 4
    shapes: tuple = ("L", "T", "S", "cross")
    max_placement_tries: int = 1000


def encode_frames(frames: np.ndarray, n_colors: int) -> np.ndarray:
    """One-hot over ``n_colors + 1`` channels per cell: ``(..., G, G) -> (..., G*G*(n_colors+1))``."""
    frames = np.asarray(frames)
    onehot = (frames[..., None] == np.arange(n_colors + 1)).astype(np.uint8)
    return onehot.reshape(*frames.shape[:-2], -1)


def decode_frames(encoded: np.ndarray, grid: int, n_colors: int) -> np.ndarray:
    x = np.asarray(encoded).reshape(*np.shape(encoded)[:-1], grid, grid, n_colors + 1)
    return x.argmax(axis=-1).astype(np.uint8)


# --- easy ------------------------------------------------------------------


def easy_frames(colors0, seq_len: int, cfg: EasyConfig) -> np.ndarray:
    frames = np.zeros((seq_len, cfg.grid, cfg.grid), dtype=np.uint8)
    for t in range(seq_len):
        for (r, c), c0 in zip(cfg.positions, colors0):
            frames[t, r : r + cfg.square, c : c + cfg.square] = (int(c0) - 1 + t) % cfg.n_colors + 1
    return frames


def gen_reasoning_easy(n_sequences: int, seq_len: int, seed: int = 0, cfg: EasyConfig = EasyConfig()) -> Dataset:
    """Fixed squares whose colors advance one palette step per frame."""
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    k = len(cfg.positions)
    dt = np.dtype([("frames", "u1", (seq_len, cfg.grid, cfg.grid)), ("params", "u1", (k,))])
    records = np.zeros(n_sequences, dtype=dt)
    for i in range(n_sequences):
        colors0 = eca.make_rng(seed, 3, i).integers(1, cfg.n_colors + 1, size=k)
        records[i]["frames"] = easy_frames(colors0, seq_len, cfg)
        records[i]["params"] = colors0
    meta = {"task": "easy", "seed": int(seed), "seq_len": seq_len, "config": asdict(cfg)}
    return Dataset("easy", records, meta)


# --- hard ------------------------------------------------------------------


@dataclass
class ShapeState:
    shape: str
    row: int
    col: int
    rot: int
    color: int
    direction: int

    def advance(self, grid: int, n_colors: int) -> "ShapeState":
        dr, dc = DIRECTIONS[self.direction]
        return ShapeState(
            self.shape,
            (self.row + dr) % grid,
            (self.col + dc) % grid,
            (self.rot + 1) % 4,
            self.color % n_colors + 1,
            self.direction,
        )

    def cells(self, grid: int) -> tuple[np.ndarray, np.ndarray]:
        # rot counts clockwise quarter turns
        bitmap = np.rot90(shape_bitmap(self.shape), k=-self.rot)
        rr, cc = np.nonzero(bitmap)
        return (rr + self.row) % grid, (cc + self.col) % grid


def render(states: list[ShapeState], grid: int) -> np.ndarray:
    """Paint shapes in list order; later shapes cover earlier ones where they meet."""
    frame = np.zeros((grid, grid), dtype=np.uint8)
    for s in states:
        rr, cc = s.cells(grid)
        frame[rr, cc] = s.color
    return frame


def _place(rng: np.random.Generator, cfg: HardConfig) -> list[ShapeState]:
    for _ in range(cfg.max_placement_tries):
        occupied = np.zeros((cfg.grid, cfg.grid), dtype=bool)
        states = []
        ok = True
        for name in cfg.shapes:
            s = ShapeState(
                name,
                int(rng.integers(cfg.grid)),
                int(rng.integers(cfg.grid)),
                int(rng.integers(4)),
                int(rng.integers(1, cfg.n_colors + 1)),
                int(rng.integers(4)),
            )
            rr, cc = s.cells(cfg.grid)
            if occupied[rr, cc].any():
                ok = False
                break
            occupied[rr, cc] = True
            states.append(s)
        if ok:
            return states
    raise PlacementError(f"no overlap-free placement after {cfg.max_placement_tries} tries")


def hard_params(states: list[ShapeState]) -> np.ndarray:
    return np.array([[s.row, s.col, s.rot, s.color, s.direction] for s in states], dtype=np.uint8).ravel()


def states_from_params(params: np.ndarray, cfg: HardConfig) -> list[ShapeState]:
    p = np.asarray(params).reshape(len(cfg.shapes), 5)
    return [ShapeState(name, *map(int, row)) for name, row in zip(cfg.shapes, p)]


def hard_frames(states: list[ShapeState], seq_len: int, cfg: HardConfig) -> np.ndarray:
    frames = np.zeros((seq_len, cfg.grid, cfg.grid), dtype=np.uint8)
    for t in range(seq_len):
        frames[t] = render(states, cfg.grid)
        states = [s.advance(cfg.grid, cfg.n_colors) for s in states]
    return frames


def gen_reasoning_hard(n_sequences: int, seq_len: int, seed: int = 0, cfg: HardConfig = HardConfig()) -> Dataset:
    """Four shapes that recolor, rotate 90 degrees clockwise and shift one cell every frame."""
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    n_params = 5 * len(cfg.shapes)
    dt = np.dtype([("frames", "u1", (seq_len, cfg.grid, cfg.grid)), ("params", "u1", (n_params,))])
    records = np.zeros(n_sequences, dtype=dt)
    for i in range(n_sequences):
        states = _place(eca.make_rng(seed, 4, i), cfg)
        records[i]["frames"] = hard_frames(states, seq_len, cfg)
        records[i]["params"] = hard_params(states)
    meta = {"task": "hard", "seed": int(seed), "seq_len": seq_len, "config": asdict(cfg)}
    return Dataset("hard", records, meta)


def state_period(cfg: HardConfig) -> int:
    return math.lcm(4, cfg.grid, cfg.n_colors)


def reasoning_arrays(ds: Dataset) -> tuple[np.ndarray, int, int]:
    """``(encoded frames (n, seq_len, D), grid, n_colors)``."""
    cfg = ds.meta["config"]
    frames = ds.records["frames"]
    return encode_frames(frames, cfg["n_colors"]), cfg["grid"], cfg["n_colors"]
