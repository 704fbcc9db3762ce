import math

import numpy as np
import pytest
import torch

from ecalab.datagen import gen_pretrain, gen_reasoning_easy
from ecalab.datagen.pretrain import PretrainConfig
from ecalab.model import (
    CheckpointFormatError,
    HeadSpec,
    ModelCheckpoint,
    ModelConfig,
    NumericalDivergenceError,
    TrainConfig,
    TrainHistory,
    Transformer,
    backbone_hash,
    efficiency,
    evaluate,
    finetune_frozen,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train_pretrain,
)
from ecalab.model import train as train_mod
from ecalab.model.gradcheck import TINY, grad_check, probe_batch

SMALL_MODEL = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, context_len=12, input_width=20)
SMALL_DATA = PretrainConfig(width=64, steps=120, t_len=12, x_len=20)


def tiny_binary():
    return Transformer(TINY, HeadSpec("binary", 5))


# --- forward pass ----------------------------------------------------------------


def test_output_shapes():
    m = Transformer(SMALL_MODEL, HeadSpec("binary", 20, 7))
    assert m(torch.zeros(3, 12, 20)).shape == (3, 12, 7)
    c = Transformer(SMALL_MODEL, HeadSpec("tokens", 30))
    logits, maps = c(torch.zeros(2, 5, dtype=torch.long), capture_attention=True)
    assert logits.shape == (2, 5, 30)
    assert len(maps) == 2 and maps[0].shape == (2, 2, 5, 5)


def test_context_and_width_checked():
    m = tiny_binary()
    with pytest.raises(ValueError):
        m(torch.zeros(1, 7, 5))
    with pytest.raises(ValueError):
        m(torch.zeros(1, 3, 4))


def test_causal_mask_exact():
    torch.manual_seed(0)
    m = Transformer(SMALL_MODEL, HeadSpec("binary", 20))
    x = torch.randint(0, 2, (4, 12, 20)).float()
    base = m(x)
    for t in (0, 5, 10):
        y = x.clone()
        y[:, t + 1 :] = 1 - y[:, t + 1 :]
        assert torch.equal(m(y)[:, : t + 1], base[:, : t + 1])


def test_attention_rows_normalized():
    m = Transformer(SMALL_MODEL, HeadSpec("binary", 20))
    _, maps = m(torch.randint(0, 2, (8, 12, 20)).float(), capture_attention=True)
    for a in maps:
        assert (a >= 0).all()
        assert torch.allclose(a.sum(-1), torch.ones(a.shape[:-1]), atol=1e-5)
        assert (a.triu(1) == 0).all()


def test_zero_weights_give_zero_logits():
    m = tiny_binary()
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    assert not m(torch.ones(2, 6, 5)).any()


def test_golden_logits():
    m = tiny_binary()
    x, _ = probe_batch(TINY, HeadSpec("binary", 5))
    with torch.no_grad():
        out = m(x.float())
    expected = [0.026319429278373718, -0.07817213237285614, -0.025084085762500763, 0.03366464376449585, 0.08097413927316666]
    assert out[0, -1].tolist() == pytest.approx(expected, abs=1e-6)
    assert float(out.double().sum()) == pytest.approx(-1.3847117787227035, abs=1e-5)


def test_init_is_seeded():
    a, b = tiny_binary(), tiny_binary()
    assert backbone_hash(a) == backbone_hash(b)
    c = Transformer(ModelConfig(**{**TINY.as_dict(), "seed": 4}), HeadSpec("binary", 5))
    assert backbone_hash(a) != backbone_hash(c)


# --- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    for head in (HeadSpec("binary", 5, 3), HeadSpec("tokens", 11)):
        ck = ModelCheckpoint(Transformer(TINY, head), {"rule": 110})
        p = tmp_path / "m.eck"
        digest = save_checkpoint(ck, p)
        back = load_checkpoint(p)
        assert back.config == ck.config and back.model.head_spec == head
        assert back.provenance == {"rule": 110}
        for (n1, t1), (n2, t2) in zip(ck.model.state_dict().items(), back.model.state_dict().items()):
            assert n1 == n2 and torch.equal(t1, t2)
        assert back.to_bytes() == p.read_bytes()
        assert save_checkpoint(back, tmp_path / "n.eck") == digest


@pytest.mark.parametrize("damage", ["truncate", "flip", "magic", "header"])
def test_checkpoint_rejects_corruption(tmp_path, damage):
    p = tmp_path / "m.eck"
    save_checkpoint(ModelCheckpoint(tiny_binary()), p)
    data = bytearray(p.read_bytes())
    if damage == "truncate":
        data = data[:-8]
    elif damage == "flip":
        data[-2] ^= 0x40
    elif damage == "magic":
        data[:4] = b"ECKX"
    else:
        data[20] = ord("!")
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


# --- schedule, clipping ------------------------------------------------------------


def test_lr_schedule_shape():
    cfg = TrainConfig(lr=1e-3, lr_min=1e-5)
    total = 200
    lrs = [lr_at(s, total, cfg) for s in range(total)]
    assert lrs[20] == pytest.approx(1e-3)
    assert lrs[-1] == pytest.approx(1e-5)
    assert lrs[0] == 0.0
    assert all(b >= a for a, b in zip(lrs[:21], lrs[1:21]))
    assert all(b <= a for a, b in zip(lrs[20:], lrs[21:]))
    assert max(lrs) == pytest.approx(1e-3)


def test_lr_no_warmup():
    cfg = TrainConfig(lr=1.0, warmup_frac=0.0)
    assert lr_at(0, 10, cfg) == 1.0 and lr_at(9, 10, cfg) == pytest.approx(0.0, abs=1e-12)


def test_gradient_clipping_bounds_norm(monkeypatch):
    norms = []
    real = torch.nn.utils.clip_grad_norm_

    def spy(params, max_norm):
        params = list(params)
        real(params, max_norm)
        norms.append(math.sqrt(sum(float(p.grad.pow(2).sum()) for p in params if p.grad is not None)))

    monkeypatch.setattr(torch.nn.utils, "clip_grad_norm_", spy)
    ds = gen_pretrain(30, 64, 1, seed=0, cfg=SMALL_DATA)
    train_pretrain(ds, SMALL_MODEL, TrainConfig(lr=1e-2, max_epochs=2, batch_size=16, clip_norm=0.05))
    assert norms and max(norms) <= 0.05 + 1e-6


# --- gradient check ----------------------------------------------------------------


def test_grad_check_binary():
    assert grad_check() <= 1e-3


def test_grad_check_tokens():
    assert grad_check(TINY, HeadSpec("tokens", 7)) <= 1e-3


def test_grad_check_zero_loss_point():
    model = tiny_binary().double()
    x, _ = probe_batch(TINY, HeadSpec("binary", 5))
    with torch.no_grad():
        y = torch.sigmoid(model(x)[:, -1])
    loss = train_mod.FinalStateBCE().loss(model(x)[:, -1], y)
    loss.backward()
    assert max(float(p.grad.abs().max()) for p in model.parameters()) < 1e-12


# --- training ---------------------------------------------------------------------


def test_training_deterministic():
    ds = gen_pretrain(110, 96, 1, seed=1, cfg=SMALL_DATA)
    cfg = TrainConfig(lr=1e-3, max_epochs=3, batch_size=16, grad_accum_steps=2)
    ck1, h1 = train_pretrain(ds, SMALL_MODEL, cfg)
    ck2, h2 = train_pretrain(ds, SMALL_MODEL, cfg)
    assert h1.as_dict() == h2.as_dict()
    assert ck1.to_bytes() == ck2.to_bytes()


def test_early_stopping_and_accuracy_stop():
    ds = gen_pretrain(0, 64, 1, seed=1, cfg=SMALL_DATA)
    _, h = train_pretrain(ds, SMALL_MODEL, TrainConfig(lr=1e-2, max_epochs=200, batch_size=16, patience=2, min_delta=10.0))
    # the first epoch always improves on inf; two stale epochs follow
    assert h.stop_reason == "early_stopping" and h.epochs == 3
    _, h = train_pretrain(ds, SMALL_MODEL, TrainConfig(lr=1e-2, max_epochs=200, batch_size=16, stop_at_accuracy=0.99))
    assert h.stop_reason == "accuracy_reached" and h.val_accuracy[-1] >= 0.99


def test_divergence_raises():
    ds = gen_pretrain(30, 32, 1, seed=1, cfg=SMALL_DATA)
    ck, _ = train_pretrain(ds, SMALL_MODEL, TrainConfig(lr=1e-3, max_epochs=1, batch_size=16))
    with torch.no_grad():
        ck.model.head.embed.weight.fill_(float("nan"))
    params = list(ck.model.parameters())
    x, y, obj, _ = train_mod.task_tensors(ds)
    with pytest.raises(NumericalDivergenceError):
        train_mod.fit(ck.model, params, (x, y), (x, y), obj, TrainConfig(max_epochs=1))


def test_finetune_freezes_backbone():
    ds = gen_pretrain(110, 32, 1, seed=1, cfg=SMALL_DATA)
    ck, _ = train_pretrain(ds, SMALL_MODEL, TrainConfig(lr=1e-3, max_epochs=1, batch_size=16))
    before = {k: v.clone() for k, v in ck.model.backbone.state_dict().items()}
    tr, va = gen_reasoning_easy(8, 6, seed=1), gen_reasoning_easy(4, 6, seed=2)
    ft, hist = finetune_frozen(ck, tr, va, TrainConfig(lr=1e-2, max_epochs=2, batch_size=4))
    assert backbone_hash(ft.model) == backbone_hash(ck.model)
    for k, v in ft.model.backbone.state_dict().items():
        assert torch.equal(v, before[k])
    assert ft.model.head_spec == HeadSpec("binary", 500)
    assert hist.epochs == 2 and ft.provenance["task"] == "easy"
    # the source checkpoint keeps its own head
    assert ck.model.head_spec == HeadSpec("binary", 20, 20)


def test_finetune_rejects_long_sequences():
    ck = ModelCheckpoint(Transformer(SMALL_MODEL, HeadSpec("binary", 20)))
    with pytest.raises(ValueError):
        finetune_frozen(ck, gen_reasoning_easy(2, 20, 0), gen_reasoning_easy(2, 20, 1), TrainConfig(max_epochs=1))


# --- evaluation and efficiency -----------------------------------------------------


def test_efficiency_definition():
    assert efficiency(TrainHistory(val_accuracy=[0.1, 0.5, 0.7, 0.8, 0.9])) == 0.25
    assert efficiency(TrainHistory(val_accuracy=[0.1, 0.5])) == 0.0
    assert efficiency(TrainHistory(val_accuracy=[0.95])) == 1.0


def test_evaluate_chance_level():
    ds = gen_pretrain(30, 400, 1, seed=5, cfg=PretrainConfig())
    m = Transformer(ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=4), HeadSpec("binary", 100, 100))
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    # zero logits predict 0 everywhere, so accuracy is the fraction of zero cells
    acc = evaluate(ModelCheckpoint(m), ds)["accuracy"]
    assert acc == pytest.approx(0.5, abs=0.02)


def test_evaluate_perfect_copy():
    ds = gen_pretrain(204, 20, 1, seed=5, cfg=SMALL_DATA)
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=20, d_ff=4, context_len=12, input_width=20)
    m = Transformer(cfg, HeadSpec("binary", 20, 20))
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        # zeroed blocks leave the residual stream equal to the input row; the final
        # layer norm keeps the sign of (bit - row mean), which is the bit itself
        m.head.embed.weight.copy_(torch.eye(20))
        m.backbone.ln_f.weight.fill_(1.0)
        m.head.unembed.weight.copy_(torch.eye(20))
    metrics = evaluate(ModelCheckpoint(m), ds)
    assert metrics["accuracy"] == 1.0 and metrics["state_accuracy"] == 1.0


def test_evaluate_head_mismatch():
    ds = gen_pretrain(204, 4, 1, seed=5, cfg=SMALL_DATA)
    with pytest.raises(ValueError):
        evaluate(ModelCheckpoint(Transformer(SMALL_MODEL, HeadSpec("tokens", 9))), ds)


def test_pretrain_rule0_learns_quickly():
    ds = gen_pretrain(0, 256, 1, seed=0, cfg=SMALL_DATA)
    _, h = train_pretrain(ds, SMALL_MODEL, TrainConfig(lr=1e-2, max_epochs=30, batch_size=32, stop_at_accuracy=0.99))
    assert h.val_accuracy[-1] >= 0.99
    assert np.isfinite(h.train_loss).all()
