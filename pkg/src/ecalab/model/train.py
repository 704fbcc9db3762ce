"""Training loops: next-state pretraining and frozen-backbone finetuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .. import eca
from ..datagen import chess as chess_data
from ..datagen.dataset import Dataset
from ..datagen.pretrain import pretrain_arrays
from ..datagen.reasoning import reasoning_arrays
from .checkpoint import ModelCheckpoint
from .transformer import HeadSpec, ModelConfig, Transformer, backbone_hash

log = logging.getLogger(__name__)


class NumericalDivergenceError(RuntimeError):
    pass


class FrozenWeightDriftError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-6
    weight_decay: float = 0.01
    warmup_frac: float = 0.10
    lr_min: float = 0.0
    batch_size: int = 64
    grad_accum_steps: int = 1
    clip_norm: float = 1.0
    max_epochs: int = 10000
    patience: int = 20
    min_delta: float = 1e-4
    seed: int = 0
    # Stop as soon as validation accuracy reaches this value (None: never).
    stop_at_accuracy: float | None = None
    eval_batch_size: int = 256

    def __post_init__(self):
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if min(self.lr, self.batch_size, self.grad_accum_steps, self.clip_norm, self.max_epochs) <= 0:
            raise ValueError("lr, batch_size, grad_accum_steps, clip_norm and max_epochs must be positive")


# Downstream schedules; the chess learning rate is not pinned by the source experiments.
TASK_SCHEDULES = {
    "easy": TrainConfig(lr=1e-4, max_epochs=1000),
    "hard": TrainConfig(lr=1e-5, max_epochs=10000),
    "chess": TrainConfig(lr=1e-4, max_epochs=10000),
}


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` at ``warmup_frac * total``, then cosine down to
    ``cfg.lr_min`` at the last step ``total - 1``."""
    warm = int(round(cfg.warmup_frac * total))
    if warm > 0 and step <= warm:
        return cfg.lr * step / warm
    if total - 1 <= warm:
        return cfg.lr
    progress = min(1.0, (step - warm) / (total - 1 - warm))
    return cfg.lr_min + (cfg.lr - cfg.lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    val_metrics: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    def as_dict(self) -> dict:
        return asdict(self)


# --- objectives --------------------------------------------------------------


class FinalStateBCE:
    """Per-cell BCE on the logits of the last position against the target state(s)."""

    def outputs(self, model, x):
        return model(x)[:, -1]

    def loss(self, out, y):
        return F.binary_cross_entropy_with_logits(out, y)

    def stats(self, out, y):
        pred = (out > 0).to(y.dtype)
        hit = pred == y
        return {
            "loss": (F.binary_cross_entropy_with_logits(out, y, reduction="sum").item(), y.numel()),
            "accuracy": (hit.sum().item(), y.numel()),
            "state_accuracy": (hit.all(dim=-1).sum().item(), y.shape[0]),
        }


class FrameBCE:
    """Per-bit BCE at every position; accuracy counts grid cells whose argmax color is right."""

    def __init__(self, grid: int, n_colors: int):
        self.cells = grid * grid
        self.channels = n_colors + 1

    def outputs(self, model, x):
        return model(x)

    def loss(self, out, y):
        return F.binary_cross_entropy_with_logits(out, y)

    def stats(self, out, y):
        shape = (*out.shape[:-1], self.cells, self.channels)
        pred = out.reshape(shape).argmax(-1)
        true = y.reshape(shape).argmax(-1)
        hit = pred == true
        bits = ((out > 0).to(y.dtype) == y).sum().item()
        return {
            "loss": (F.binary_cross_entropy_with_logits(out, y, reduction="sum").item(), y.numel()),
            "accuracy": (hit.sum().item(), hit.numel()),
            "bit_accuracy": (bits, y.numel()),
            "frame_accuracy": (hit.all(dim=-1).sum().item(), hit[..., 0].numel()),
        }


class NextTokenCE:
    """Softmax cross-entropy on the next token, PAD targets excluded."""

    def outputs(self, model, x):
        return model(x)

    def loss(self, out, y):
        mask = y != chess_data.PAD
        total = F.cross_entropy(out.reshape(-1, out.shape[-1]), y.reshape(-1), ignore_index=chess_data.PAD, reduction="sum")
        return total / mask.sum().clamp(min=1)

    def stats(self, out, y):
        mask = y != chess_data.PAD
        total = F.cross_entropy(out.reshape(-1, out.shape[-1]), y.reshape(-1), ignore_index=chess_data.PAD, reduction="sum")
        n = int(mask.sum().item())
        hits = ((out.argmax(-1) == y) & mask).sum().item()
        return {"loss": (total.item(), n), "accuracy": (hits, n)}


def task_tensors(ds: Dataset):
    """``(inputs, targets, objective, head spec)`` for any dataset kind."""
    if ds.kind == "pretrain":
        x, y = pretrain_arrays(ds)
        xt = torch.from_numpy(x.astype(np.float32))
        yt = torch.from_numpy(y.reshape(len(y), -1).astype(np.float32))
        return xt, yt, FinalStateBCE(), HeadSpec("binary", x.shape[-1], yt.shape[-1])
    if ds.kind in ("easy", "hard"):
        enc, grid, n_colors = reasoning_arrays(ds)
        e = torch.from_numpy(enc.astype(np.float32))
        return e[:, :-1], e[:, 1:], FrameBCE(grid, n_colors), HeadSpec("binary", enc.shape[-1])
    if ds.kind == "chess":
        tok = torch.from_numpy(ds.records["tokens"].astype(np.int64))
        return tok[:, :-1], tok[:, 1:], NextTokenCE(), HeadSpec("tokens", len(ds.meta["vocab"]))
    raise ValueError(f"unknown dataset kind {ds.kind!r}")


@torch.no_grad()
def _evaluate(model, objective, x, y, batch_size: int) -> dict:
    was_training = model.training
    model.eval()
    sums: dict = {}
    for start in range(0, len(x), batch_size):
        out = objective.outputs(model, x[start : start + batch_size])
        for k, (s, n) in objective.stats(out, y[start : start + batch_size]).items():
            a, b = sums.get(k, (0.0, 0))
            sums[k] = (a + s, b + n)
    model.train(was_training)
    return {k: (s / n if n else float("nan")) for k, (s, n) in sums.items()}


def fit(model: Transformer, params, train, val, objective, cfg: TrainConfig) -> TrainHistory:
    """Optimize ``params`` of ``model``: AdamW, warmup+cosine, accumulation, clipping,
    early stopping on validation loss."""
    params = [p for p in params if p.requires_grad]
    x, y = train
    vx, vy = val
    n = len(x)
    if n == 0:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    starts = list(range(0, n, cfg.batch_size))
    groups = [starts[i : i + cfg.grad_accum_steps] for i in range(0, len(starts), cfg.grad_accum_steps)]
    total = cfg.max_epochs * len(groups)
    hist = TrainHistory()
    best = math.inf
    stale = 0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = torch.from_numpy(eca.make_rng(cfg.seed, 6, epoch).permutation(n))
        run_loss = 0.0
        for group in groups:
            group_n = sum(min(cfg.batch_size, n - s) for s in group)
            for s in group:
                idx = perm[s : s + cfg.batch_size]
                loss = objective.loss(objective.outputs(model, x[idx]), y[idx])
                if not torch.isfinite(loss):
                    raise NumericalDivergenceError(
                        f"non-finite loss {loss.item()} at epoch {epoch}, update {step}, lr {lr_at(step, total, cfg):.3g}"
                    )
                (loss * (len(idx) / group_n)).backward()
                run_loss += loss.item() * len(idx)
            lr = lr_at(step, total, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
            opt.step()
            opt.zero_grad(set_to_none=True)
            step += 1
        metrics = _evaluate(model, objective, vx, vy, cfg.eval_batch_size)
        if not math.isfinite(metrics["loss"]):
            raise NumericalDivergenceError(f"non-finite validation loss at epoch {epoch}")
        hist.train_loss.append(run_loss / n)
        hist.val_loss.append(metrics["loss"])
        hist.val_accuracy.append(metrics["accuracy"])
        hist.val_metrics.append(metrics)
        log.debug("epoch %d train %.4f val %.4f acc %.4f", epoch, hist.train_loss[-1], metrics["loss"], metrics["accuracy"])
        if cfg.stop_at_accuracy is not None and metrics["accuracy"] >= cfg.stop_at_accuracy:
            hist.stop_reason = "accuracy_reached"
            return hist
        if metrics["loss"] < best - cfg.min_delta:
            best = metrics["loss"]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                hist.stop_reason = "early_stopping"
                return hist
    hist.stop_reason = "max_epochs"
    return hist


def split_train_val(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = eca.make_rng(seed, 7).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_pretrain(
    ds: Dataset, model_cfg: ModelConfig = ModelConfig(), cfg: TrainConfig = TrainConfig(), val_fraction: float = 0.1
) -> tuple[ModelCheckpoint, TrainHistory]:
    if ds.kind != "pretrain":
        raise ValueError("train_pretrain needs a pretrain dataset")
    x, y, objective, spec = task_tensors(ds)
    if x.shape[-1] != model_cfg.input_width:
        model_cfg = replace(model_cfg, input_width=x.shape[-1])
    model = Transformer(model_cfg, spec)
    tr, va = split_train_val(len(x), val_fraction, cfg.seed)
    hist = fit(model, model.parameters(), (x[tr], y[tr]), (x[va], y[va]), objective, cfg)
    prov = {
        "stage": "pretrain",
        "rule": ds.meta.get("rule"),
        "horizon": ds.meta.get("horizon"),
        "dataset_hash": ds.content_hash,
        "train_config": asdict(cfg),
        "epochs": hist.epochs,
        "final_train_loss": hist.train_loss[-1],
        "final_val_loss": hist.val_loss[-1],
        "final_val_accuracy": hist.val_accuracy[-1],
    }
    return ModelCheckpoint(model, prov), hist


def finetune_frozen(
    ckpt: ModelCheckpoint, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, head_seed: int = 0
) -> tuple[ModelCheckpoint, TrainHistory]:
    """Train fresh input/output projections around the frozen pretrained backbone."""
    x, y, objective, spec = task_tensors(train_ds)
    vx, vy, _, vspec = task_tensors(val_ds)
    if vspec != spec:
        raise ValueError("train and validation datasets disagree on encoding")
    if x.shape[1] > ckpt.config.context_len:
        raise ValueError(f"sequences of {x.shape[1]} exceed the backbone context {ckpt.config.context_len}")
    model = copy.deepcopy(ckpt.model)
    before = backbone_hash(model)
    model.reset_head(spec, head_seed)
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    hist = fit(model, model.head.parameters(), (x, y), (vx, vy), objective, cfg)
    after = backbone_hash(model)
    if after != before:
        raise FrozenWeightDriftError("backbone weights changed during frozen finetuning")
    for p in model.backbone.parameters():
        p.requires_grad_(True)
    prov = {
        **ckpt.provenance,
        "stage": "finetune",
        "task": train_ds.kind,
        "backbone_sha256": before,
        "train_config": asdict(cfg),
        "epochs": hist.epochs,
        "final_val_accuracy": hist.val_accuracy[-1],
    }
    return ModelCheckpoint(model, prov), hist


def evaluate(ckpt: ModelCheckpoint, ds: Dataset, batch_size: int = 256) -> dict:
    x, y, objective, spec = task_tensors(ds)
    if spec != ckpt.model.head_spec:
        raise ValueError(f"dataset needs head {spec}, checkpoint has {ckpt.model.head_spec}")
    return _evaluate(ckpt.model, objective, x, y, batch_size)


def efficiency(history: TrainHistory, threshold: float = 0.8) -> float:
    """``1 / e`` for the first epoch ``e`` with validation accuracy >= threshold; 0 if never."""
    for epoch, acc in enumerate(history.val_accuracy, start=1):
        if acc >= threshold:
            return 1.0 / epoch
    return 0.0
