"""Next-state pretraining windows cut from random ECA evolutions."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import eca
from .dataset import Dataset

_INIT_STREAM = 1
_ORIGIN_STREAM = 2


@dataclass(frozen=True)
class PretrainConfig:
    width: int = 256
    steps: int = 1000
    t_len: int = 60
    x_len: int = 100
    density: float = 0.5
    # "single": only the state `horizon` steps past the window; "all": every
    # intermediate state up to it.
    target: str = "single"


def _record_dtype(cfg: PretrainConfig, horizon: int) -> np.dtype:
    row = (cfg.x_len + 7) // 8
    n_target = horizon if cfg.target == "all" else 1
    return np.dtype(
        [
            ("input", "u1", (cfg.t_len, row)),
            ("target", "u1", (n_target, row)),
            ("init", "u1", ((cfg.width + 7) // 8,)),
            ("t0", "<u4"),
            ("x0", "<u4"),
        ]
    )


def gen_pretrain(
    rule: int, n_samples: int, horizon: int = 1, seed: int = 0, cfg: PretrainConfig = PretrainConfig()
) -> Dataset:
    """Sample ``n_samples`` windows, each from its own random initial state.

    Sample ``i`` depends only on ``(rule, seed, i)``.
    """
    rule = eca.check_rule(rule)
    if horizon not in (1, 5):
        raise ValueError("horizon must be 1 or 5")
    if cfg.target not in ("single", "all"):
        raise ValueError("target must be 'single' or 'all'")
    if cfg.x_len > cfg.width or cfg.t_len - 1 + horizon > cfg.steps:
        raise eca.WindowTooLargeError("window and horizon do not fit the evolution")

    n = n_samples
    init = np.stack([eca.random_state(cfg.width, cfg.density, seed, _INIT_STREAM, i) for i in range(n)]) if n else np.zeros((0, cfg.width), np.uint8)
    t0 = np.empty(n, dtype=np.int64)
    x0 = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = eca.make_rng(seed, _ORIGIN_STREAM, i)
        t0[i] = rng.integers(0, cfg.steps - (cfg.t_len - 1) - horizon + 1)
        x0[i] = rng.integers(0, cfg.width)
    cols = (x0[:, None] + np.arange(cfg.x_len)) % cfg.width

    n_target = horizon if cfg.target == "all" else 1
    inputs = np.zeros((n, cfg.t_len, cfg.x_len), dtype=np.uint8)
    targets = np.zeros((n, n_target, cfg.x_len), dtype=np.uint8)
    last = t0 + cfg.t_len - 1
    first_target = last + (1 if cfg.target == "all" else horizon)
    t_end = int((last + horizon).max()) if n else 0

    table = eca.rule_table(rule)
    state = init.copy()
    rows = np.arange(n)
    for t in range(t_end + 1):
        in_win = (t >= t0) & (t <= last)
        if in_win.any():
            sel = rows[in_win]
            inputs[sel, t - t0[sel]] = np.take_along_axis(state[sel], cols[sel], axis=1)
        in_tgt = (t >= first_target) & (t <= last + horizon)
        if in_tgt.any():
            sel = rows[in_tgt]
            targets[sel, t - first_target[sel]] = np.take_along_axis(state[sel], cols[sel], axis=1)
        idx = (np.roll(state, 1, axis=1) << 2) | (state << 1) | np.roll(state, -1, axis=1)
        state = table[idx]

    records = np.zeros(n, dtype=_record_dtype(cfg, horizon))
    records["input"] = np.packbits(inputs, axis=-1)
    records["target"] = np.packbits(targets, axis=-1)
    records["init"] = np.packbits(init, axis=-1)
    records["t0"] = t0
    records["x0"] = x0
    meta = {"rule": rule, "horizon": horizon, "seed": int(seed), "config": asdict(cfg)}
    return Dataset("pretrain", records, meta)


def pretrain_arrays(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Unpacked ``(inputs, targets)``: ``(n, t_len, x_len)`` and ``(n, n_target, x_len)``."""
    x_len = ds.meta["config"]["x_len"]
    x = np.unpackbits(ds.records["input"], axis=-1, count=x_len)
    y = np.unpackbits(ds.records["target"], axis=-1, count=x_len)
    return x, y


def initial_states(ds: Dataset) -> np.ndarray:
    return np.unpackbits(ds.records["init"], axis=-1, count=ds.meta["config"]["width"])
