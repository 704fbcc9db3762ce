from __future__ import annotations

import torch

from .train import FinalStateBCE, NextTokenCE
from .transformer import HeadSpec, ModelConfig, Transformer

TINY = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, context_len=6, input_width=5, seed=3)


def probe_batch(cfg: ModelConfig, head: HeadSpec, batch: int = 3, length: int | None = None, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    t = length or cfg.context_len
    if head.kind == "binary":
        x = torch.randint(0, 2, (batch, t, head.size), generator=gen).double()
        y = torch.randint(0, 2, (batch, head.n_out), generator=gen).double()
    else:
        x = torch.randint(0, head.size, (batch, t), generator=gen)
        y = torch.randint(1, head.size, (batch, t), generator=gen)
        y[:, -1] = 0  # exercise PAD masking
    return x, y


def grad_check(
    cfg: ModelConfig = TINY,
    head: HeadSpec | None = None,
    batch=None,
    step: float = 1e-4,
    floor: float = 1e-6,
) -> float:
    """Max over every parameter entry of ``|g - g_fd| / max(|g|, |g_fd|, floor)``,
    comparing autograd against central differences in float64."""
    head = head or HeadSpec("binary", cfg.input_width)
    model = Transformer(cfg, head).double()
    # normal(0, 0.02) init leaves layer norms near-linear; widen it so every path carries gradient
    model.reset_parameters()
    with torch.no_grad():
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        for p in model.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    x, y = batch if batch is not None else probe_batch(cfg, head)
    objective = FinalStateBCE() if head.kind == "binary" else NextTokenCE()

    def loss_fn():
        return objective.loss(objective.outputs(model, x), y)

    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            analytic = p.grad.clone()
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = loss_fn().item()
                flat[i] = old - step
                down = loss_fn().item()
                flat[i] = old
                numeric = (up - down) / (2 * step)
                a = analytic.view(-1)[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
