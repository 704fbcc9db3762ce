"""GPT-2 style decoder with swappable input/output heads.

``Transformer.backbone`` holds the positional embeddings, the blocks and the
final layer norm; ``Transformer.head`` maps data in and out of the residual
stream.  Binary data uses linear projections on both sides (no token
vocabulary); chess uses a token embedding and a vocabulary projection.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    context_len: int = 60
    input_width: int = 100
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class HeadSpec:
    """``kind`` is "binary" (``size`` = bits per input row) or "tokens" (``size`` =
    vocabulary).  ``out_size`` defaults to ``size``."""

    kind: str
    size: int
    out_size: int | None = None

    @property
    def n_out(self) -> int:
        return self.size if self.out_size is None else self.out_size

    def __post_init__(self):
        if self.kind not in ("binary", "tokens"):
            raise ValueError(f"unknown head kind {self.kind!r}")


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        mask = torch.tril(torch.ones(cfg.context_len, cfg.context_len, dtype=torch.bool))
        self.register_buffer("mask", mask, persistent=False)

    def forward(self, x, capture: list | None = None):
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=2)
        q, k, v = (z.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2) for z in (q, k, v))
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // self.n_heads)
        scores = scores.masked_fill(~self.mask[:t, :t], float("-inf"))
        att = F.softmax(scores, dim=-1)
        if capture is not None:
            capture.append(att.detach())
        y = self.drop(att) @ v
        return self.drop(self.proj(y.transpose(1, 2).reshape(b, t, d)))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x, capture=None):
        x = x + self.attn(self.ln1(x), capture)
        return x + self.mlp(self.ln2(x))


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pos = nn.Parameter(torch.zeros(cfg.context_len, cfg.d_model))
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)

    def forward(self, h, capture=None):
        h = self.drop(h + self.pos[: h.shape[1]])
        for block in self.blocks:
            h = block(h, capture)
        return self.ln_f(h)


class Head(nn.Module):
    def __init__(self, spec: HeadSpec, d_model: int):
        super().__init__()
        self.spec = spec
        if spec.kind == "binary":
            self.embed = nn.Linear(spec.size, d_model)
        else:
            self.embed = nn.Embedding(spec.size, d_model)
        self.unembed = nn.Linear(d_model, spec.n_out)


class Transformer(nn.Module):
    def __init__(self, cfg: ModelConfig, head: HeadSpec):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.head = Head(head, cfg.d_model)
        self.reset_parameters()

    @property
    def head_spec(self) -> HeadSpec:
        return self.head.spec

    def reset_parameters(self, seed: int | None = None):
        gen = torch.Generator().manual_seed(self.cfg.seed if seed is None else seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name:
                    p.fill_(1.0)
                else:
                    p.normal_(0.0, 0.02, generator=gen)

    def reset_head(self, spec: HeadSpec, seed: int = 0):
        """Replace the input/output projections with freshly initialized ones."""
        self.head = Head(spec, self.cfg.d_model)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.head.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                else:
                    p.normal_(0.0, 0.02, generator=gen)

    def hidden(self, x, capture=None):
        if x.shape[1] > self.cfg.context_len:
            raise ValueError(f"sequence length {x.shape[1]} exceeds context {self.cfg.context_len}")
        if self.head.spec.kind == "binary":
            if x.shape[-1] != self.head.spec.size:
                raise ValueError(f"row width {x.shape[-1]} != head width {self.head.spec.size}")
            h = self.head.embed(x.to(self.head.embed.weight.dtype))
        else:
            h = self.head.embed(x.long())
        return self.backbone(h, capture)

    def forward(self, x, capture_attention: bool = False):
        """Per-position logits; with ``capture_attention`` also the per-layer
        attention maps, each ``(batch, heads, T, T)``."""
        capture = [] if capture_attention else None
        logits = self.head.unembed(self.hidden(x, capture))
        if capture_attention:
            return logits, capture
        return logits


def backbone_hash(model: Transformer) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.backbone.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
