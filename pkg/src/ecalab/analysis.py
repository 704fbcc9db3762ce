"""Aggregation of per-rule results: correlations, class means, attention, CKA."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from .model.checkpoint import ModelCheckpoint
from .model.transformer import Transformer

SIGNIFICANCE = 0.05


class UndefinedCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p: float
    n: int

    @property
    def significant(self) -> bool:
        return self.p < SIGNIFICANCE

    def label(self) -> str:
        return f"r={self.r:.2f}{'*' if self.significant else ''}"


def pearson(x, y) -> CorrelationResult:
    """Pearson r with a two-sided p-value from Student's t on n - 2 dof."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-D sequences of equal length")
    n = len(x)
    if n < 3:
        raise ValueError("pearson needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("zero variance")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return CorrelationResult(r, 0.0, n)
    t = r * math.sqrt((n - 2) / (1 - r * r))
    p = float(2 * stats.t.sf(abs(t), n - 2))
    return CorrelationResult(r, min(1.0, p), n)


# --- attention ---------------------------------------------------------------


@torch.no_grad()
def attention_trace(model: Transformer, x: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    """Attention of the final query over all keys: ``(layers, batch, heads, T)``."""
    model.eval()
    parts = []
    for start in range(0, len(x), batch_size):
        _, maps = model(x[start : start + batch_size], capture_attention=True)
        parts.append(torch.stack([m[:, :, -1, :] for m in maps]).numpy())
    return np.concatenate(parts, axis=1)


def attention_last_k(model: Transformer, x: torch.Tensor, k: int = 10) -> tuple[np.ndarray, float]:
    """Mean attention from the final position to each of the ``k`` preceding states.

    Entry ``j`` (0-based) is the weight on the state ``j + 1`` steps before the
    final one, averaged over layers, heads and probes.
    """
    if x.shape[1] < k + 1:
        raise ValueError(f"probe sequences need at least {k + 1} positions")
    trace = attention_trace(model, x)
    mean_row = trace.mean(axis=(0, 1, 2))
    t = mean_row.shape[0]
    per_offset = mean_row[[t - 1 - j for j in range(1, k + 1)]]
    return per_offset, float(per_offset.mean())


# --- CKA -----------------------------------------------------------------------


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA of two feature matrices with matching rows (columns centered)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("feature matrices need the same number of rows")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    num = np.linalg.norm(y.T @ x) ** 2
    den = np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y)
    if den == 0:
        return 0.0
    return float(np.clip(num / den, 0.0, 1.0))


@torch.no_grad()
def final_hidden(model: Transformer, x: torch.Tensor) -> np.ndarray:
    model.eval()
    h = model.hidden(x)
    return h.reshape(-1, h.shape[-1]).double().numpy()


def backbone_matrices(model: Transformer) -> dict[str, np.ndarray]:
    return {
        name: p.detach().double().numpy()
        for name, p in model.backbone.named_parameters()
        if p.ndim == 2
    }


def _as_model(m) -> Transformer:
    return m.model if isinstance(m, ModelCheckpoint) else m


def cka(a, b, mode: str = "activation", probe: torch.Tensor | None = None) -> float:
    a, b = _as_model(a), _as_model(b)
    if a.cfg.as_dict() | {"seed": 0} != b.cfg.as_dict() | {"seed": 0}:
        raise ValueError("CKA needs models with the same architecture")
    if mode == "activation":
        if probe is None:
            raise ValueError("activation CKA needs a probe batch")
        return linear_cka(final_hidden(a, probe), final_hidden(b, probe))
    if mode == "weight":
        wa, wb = backbone_matrices(a), backbone_matrices(b)
        return float(np.mean([linear_cka(wa[k], wb[k]) for k in sorted(wa)]))
    raise ValueError(f"unknown CKA mode {mode!r}")


@dataclass
class CKAMatrix:
    values: np.ndarray
    labels: list
    mode: str


def cka_matrix(models: dict, mode: str = "activation", probe: torch.Tensor | None = None) -> CKAMatrix:
    labels = list(models)
    n = len(labels)
    vals = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            vals[i, j] = vals[j, i] = cka(models[labels[i]], models[labels[j]], mode, probe)
    return CKAMatrix(vals, labels, mode)


def mds_embed(similarity, dims: int = 2) -> tuple[np.ndarray, str]:
    """Classical MDS on ``1 - similarity``.

    Returns ``(coords, note)``; each axis is flipped so its largest-magnitude
    coordinate is positive.  Falls back to fewer axes when the Gram matrix has
    rank below ``dims``.
    """
    s = similarity.values if isinstance(similarity, CKAMatrix) else np.asarray(similarity, dtype=np.float64)
    d = 1.0 - s
    n = d.shape[0]
    j = np.eye(n) - 1.0 / n
    gram = -0.5 * j @ (d**2) @ j
    w, v = np.linalg.eigh((gram + gram.T) / 2)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    tol = 1e-10 * max(1.0, abs(w[0]))
    rank = int((w > tol).sum())
    note = ""
    k = dims
    if rank < dims:
        k = max(rank, 1)
        note = f"rank {rank} < {dims}; returning {k} axis"
    coords = v[:, :k] * np.sqrt(np.clip(w[:k], 0.0, None))
    for c in range(k):
        i = np.argmax(np.abs(coords[:, c]))
        if coords[i, c] < 0:
            coords[:, c] *= -1
    return coords, note


# --- per-rule results ------------------------------------------------------------


@dataclass
class ExperimentResult:
    rule: int
    complexity: dict
    efficiency_easy: float = 0.0
    efficiency_hard: float = 0.0
    chess_accuracy: float = 0.0
    avg_attention_last10: float = 0.0
    seeds: list = field(default_factory=list)

    def row(self) -> dict:
        out = {"rule": self.rule}
        out.update({k: v for k, v in self.complexity.items() if k != "rule"})
        out.update(
            efficiency_easy=self.efficiency_easy,
            efficiency_hard=self.efficiency_hard,
            chess_accuracy=self.chess_accuracy,
            avg_attention_last10=self.avg_attention_last10,
            n_seeds=len(self.seeds),
        )
        return out


METRICS = ("efficiency_easy", "efficiency_hard", "chess_accuracy", "avg_attention_last10")
MEASURES = ("lempel_ziv", "compression", "lyapunov", "krylov")


def correlations(results: list[ExperimentResult], metrics=METRICS, measures=MEASURES) -> dict:
    """``{metric: {measure: {r, p, n, significant}}}``; undefined pairs map to None."""
    out: dict = {}
    for metric in metrics:
        ys = [getattr(r, metric) for r in results]
        out[metric] = {}
        for measure in measures:
            xs = [r.complexity[measure] for r in results]
            try:
                c = pearson(xs, ys)
                out[metric][measure] = {**asdict(c), "significant": c.significant}
            except ValueError:
                out[metric][measure] = None
    return out


def class_summary(results, metrics=METRICS) -> dict:
    """``{class: {metric: {mean, stderr, n}}}`` over the classes that have results."""
    groups = defaultdict(list)
    for r in results:
        cls = r.complexity["wolfram_class"] if isinstance(r, ExperimentResult) else r["wolfram_class"]
        groups[cls].append(r)
    out = {}
    for cls in sorted(groups):
        members = sorted(groups[cls], key=lambda r: r.rule if isinstance(r, ExperimentResult) else r["rule"])
        out[cls] = {}
        for m in metrics:
            v = np.array([getattr(r, m) if isinstance(r, ExperimentResult) else r[m] for r in members], dtype=np.float64)
            stderr = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
            out[cls][m] = {"mean": float(v.mean()), "stderr": stderr, "n": len(v)}
    return out


def compare_horizons(one_step: dict, five_step: dict, complexity: dict | None = None) -> list[dict]:
    """Pair per-rule metrics of 1-step and 5-step models; ``below_diagonal`` marks
    rules whose 5-step value is lower."""
    if set(one_step) != set(five_step):
        raise ValueError("1-step and 5-step results cover different rules")
    rows = []
    for rule in sorted(one_step):
        a, b = float(one_step[rule]), float(five_step[rule])
        rows.append(
            {
                "rule": rule,
                "one_step": a,
                "five_step": b,
                "lempel_ziv": float(complexity[rule]) if complexity else float("nan"),
                "below_diagonal": b < a,
                "on_diagonal": a == b,
            }
        )
    return rows


# --- CSV plumbing -------------------------------------------------------------------


def write_csv(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    fields = list(rows[0]) if rows else []
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    tmp.replace(path)


def _parse(v: str):
    if v in ("True", "False"):
        return v == "True"
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(f)]


def matrix_rows(m: CKAMatrix) -> list[dict]:
    return [{"model": lab, **{str(l2): float(m.values[i, j]) for j, l2 in enumerate(m.labels)}} for i, lab in enumerate(m.labels)]
