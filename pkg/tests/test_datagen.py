import math

import numpy as np
import pytest

from ecalab import eca
from ecalab.datagen import chess, reasoning
from ecalab.datagen.dataset import Dataset, DatasetFormatError, load_dataset, save_dataset
from ecalab.datagen.pretrain import PretrainConfig, gen_pretrain, initial_states, pretrain_arrays

SMALL = PretrainConfig(width=64, steps=120, t_len=12, x_len=20)


def resimulate(ds, i):
    """Targets of sample i from a full-width rollout of its stored initial state."""
    cfg = ds.meta["config"]
    h = ds.meta["horizon"]
    init = initial_states(ds)[i]
    t0, x0 = int(ds.records["t0"][i]), int(ds.records["x0"][i])
    rows = eca.evolve_bits(ds.meta["rule"], init, cfg["steps"])
    cols = (x0 + np.arange(cfg["x_len"])) % cfg["width"]
    last = t0 + cfg["t_len"] - 1
    window = rows[t0 : last + 1][:, cols]
    if cfg["target"] == "all":
        target = rows[last + 1 : last + h + 1][:, cols]
    else:
        target = rows[last + h][None, cols]
    return window, target


# --- pretraining windows ----------------------------------------------------------


def test_pretrain_shapes_default():
    ds = gen_pretrain(110, 3, horizon=1, seed=0)
    x, y = pretrain_arrays(ds)
    assert x.shape == (3, 60, 100) and y.shape == (3, 1, 100)


def test_pretrain_rule0_targets_zero():
    _, y = pretrain_arrays(gen_pretrain(0, 20, 5, seed=3, cfg=SMALL))
    assert not y.any()


def test_pretrain_identity_copies_last_row():
    x, y = pretrain_arrays(gen_pretrain(204, 20, 1, seed=3, cfg=SMALL))
    assert np.array_equal(y[:, 0], x[:, -1])


@pytest.mark.parametrize("rule,horizon,target", [(110, 1, "single"), (30, 5, "single"), (54, 5, "all")])
def test_pretrain_targets_match_full_width_rollout(rule, horizon, target):
    cfg = PretrainConfig(width=256, steps=1000, target=target)
    ds = gen_pretrain(rule, 4, horizon, seed=7, cfg=cfg)
    x, y = pretrain_arrays(ds)
    for i in range(4):
        window, tgt = resimulate(ds, i)
        assert np.array_equal(window, x[i])
        assert np.array_equal(tgt, y[i])


def test_pretrain_target_correctness_100_samples():
    for rule in (30, 90, 110):
        ds = gen_pretrain(rule, 100, 5, seed=11, cfg=SMALL)
        x, y = pretrain_arrays(ds)
        for i in range(100):
            window, tgt = resimulate(ds, i)
            assert np.array_equal(window, x[i]) and np.array_equal(tgt, y[i])


def test_pretrain_deterministic_and_index_keyed():
    a = gen_pretrain(110, 6, 1, seed=2, cfg=SMALL)
    b = gen_pretrain(110, 6, 1, seed=2, cfg=SMALL)
    c = gen_pretrain(110, 3, 1, seed=2, cfg=SMALL)
    assert a.content_hash == b.content_hash
    assert np.array_equal(a.records[:3], c.records)


def test_pretrain_horizon_checked():
    with pytest.raises(ValueError):
        gen_pretrain(30, 2, horizon=3)


# --- reasoning tasks ----------------------------------------------------------------


def test_easy_two_colors_alternate():
    cfg = reasoning.EasyConfig(n_colors=2, positions=((2, 2),))
    f = reasoning.gen_reasoning_easy(3, 7, seed=1, cfg=cfg).records["frames"]
    assert np.array_equal(f[:, 2:], f[:, :-2])
    assert not np.array_equal(f[:, 1], f[:, 0])


@pytest.mark.parametrize("k", [3, 4, 5])
def test_easy_periodicity(k):
    cfg = reasoning.EasyConfig(n_colors=k)
    f = reasoning.gen_reasoning_easy(5, 2 * k + 3, seed=4, cfg=cfg).records["frames"]
    assert np.array_equal(f[:, k:], f[:, :-k])


def test_easy_layout_and_determinism():
    a = reasoning.gen_reasoning_easy(4, 6, seed=9)
    assert a.content_hash == reasoning.gen_reasoning_easy(4, 6, seed=9).content_hash
    frame = a.records["frames"][0, 0]
    assert (frame > 0).sum() == 4 * 9
    assert set(np.unique(frame)) <= {0, 1, 2, 3, 4}


def test_encoding_invertible():
    ds = reasoning.gen_reasoning_hard(3, 5, seed=1)
    enc, grid, n_colors = reasoning.reasoning_arrays(ds)
    assert enc.shape == (3, 5, 20 * 20 * 5)
    assert (enc.reshape(3, 5, 400, 5).sum(-1) == 1).all()
    assert np.array_equal(reasoning.decode_frames(enc, grid, n_colors), ds.records["frames"])


def test_hard_single_shape_cycles():
    cfg = reasoning.HardConfig(grid=12, n_colors=3, shapes=("L",))
    s = reasoning.ShapeState("L", 3, 4, 0, 1, 1)
    states = [s]
    for _ in range(12):
        states.append(states[-1].advance(cfg.grid, cfg.n_colors))
    assert all(states[t + 4].rot == states[t].rot for t in range(8))
    assert states[12].col == states[0].col and states[12].row == states[0].row
    assert states[1].col == 5 and states[1].rot == 1 and states[1].color == 2


def test_hard_full_state_cycle_divides_lcm():
    cfg = reasoning.HardConfig(grid=6, n_colors=3)
    period = reasoning.state_period(cfg)
    assert period == math.lcm(4, 6, 3)
    ds = reasoning.gen_reasoning_hard(2, 2 * period + 1, seed=3, cfg=reasoning.HardConfig(grid=12, n_colors=3))
    p = reasoning.state_period(reasoning.HardConfig(grid=12, n_colors=3))
    for frames in ds.records["frames"]:
        # brute force: smallest shift with frame[t + c] == frame[t] for all t
        cycle = next(c for c in range(1, len(frames)) if all(np.array_equal(frames[t + c], frames[t]) for t in range(len(frames) - c)))
        assert p % cycle == 0


def test_hard_local_checkability():
    cfg = reasoning.HardConfig()
    ds = reasoning.gen_reasoning_hard(5, 10, seed=2, cfg=cfg)
    for rec in ds.records:
        states = reasoning.states_from_params(rec["params"], cfg)
        frames = rec["frames"]
        assert np.array_equal(reasoning.render(states, cfg.grid), frames[0])
        for t in range(len(frames) - 1):
            states = [s.advance(cfg.grid, cfg.n_colors) for s in states]
            assert np.array_equal(reasoning.render(states, cfg.grid), frames[t + 1])


def test_hard_initial_placement_has_no_overlap():
    cfg = reasoning.HardConfig()
    ds = reasoning.gen_reasoning_hard(10, 2, seed=5, cfg=cfg)
    for rec in ds.records:
        states = reasoning.states_from_params(rec["params"], cfg)
        total = sum(len(s.cells(cfg.grid)[0]) for s in states)
        assert (rec["frames"][0] > 0).sum() == total


def test_hard_placement_failure():
    cfg = reasoning.HardConfig(grid=5, max_placement_tries=20)
    with pytest.raises(reasoning.PlacementError):
        reasoning.gen_reasoning_hard(1, 2, seed=0, cfg=cfg)


# --- chess ----------------------------------------------------------------------------


def test_parse_movetext_strips_annotations():
    text = '1. e4 {best by test} e5 $1 2. Nf3 (2. f4 exf4 (2... d5) 3. Nf3) Nc6!? 3. Bb5 a6 ; note\n4. O-O 1-0'
    assert chess.parse_movetext(text) == ["e4", "e5", "Nf3", "Nc6", "Bb5", "a6", "O-O"]


def test_parse_movetext_rejects_garbage():
    with pytest.raises(chess.MalformedGameError):
        chess.parse_movetext("1. e4 e5 2. Zz9")
    with pytest.raises(chess.MalformedGameError):
        chess.parse_movetext("1. e4 (e5")


def test_chunking_67_tokens():
    ids = list(range(2, 69))
    chunks = chess.chunk(ids)
    assert len(chunks) == 2
    assert chunks[0] == ids[:60]
    assert chunks[1] == ids[60:] + [chess.PAD] * 53


def test_rating_filter(tmp_path):
    p = tmp_path / "g.pgn"
    p.write_text(
        '[WhiteElo "2100"]\n[BlackElo "2500"]\n\n1. e4 e5 1-0\n\n'
        '[WhiteElo "2200"]\n[BlackElo "2200"]\n\n1. d4 d5 1-0\n\n'
        '[WhiteElo "2600"]\n\n1. c4 c5 1-0\n'
    )
    games = chess.read_games([p], 2200)
    assert [g.moves for g in games] == [["d4", "d5"]]


def test_empty_corpus(tmp_path):
    p = tmp_path / "g.pgn"
    p.write_text('[WhiteElo "1500"]\n[BlackElo "1500"]\n\n1. e4 e5 1-0\n')
    with pytest.raises(chess.EmptyCorpusError):
        chess.ingest_chess([p])


def test_ingest_corpus(pgn_corpus):
    paths, rated = pgn_corpus
    train, val, test, vocab = chess.ingest_chess(paths, 2200, seed=1)
    n_games = len(train.meta["games"]) + len(val.meta["games"]) + len(test.meta["games"])
    assert n_games == len(rated)
    assert len(train.meta["games"]) == int(0.8 * n_games)
    ids = [set(d.meta["games"]) for d in (train, val, test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert vocab.tokens[:2] == ["<pad>", "<unk>"]
    # tokens that appear only in held-out games map to UNK
    held_out = {t for d in (val, test) for t in d.records["tokens"].ravel()}
    assert held_out <= set(range(len(vocab)))


def test_vocabulary_order_is_stable(pgn_corpus):
    paths, _ = pgn_corpus
    _, _, _, v1 = chess.ingest_chess(paths, seed=1)
    _, _, _, v2 = chess.ingest_chess(list(reversed(paths)), seed=1)
    assert v1.tokens == v2.tokens
    games = chess.read_games(paths)
    counts = {}
    for g in games:
        for m in g.moves:
            counts[m] = counts.get(m, 0) + 1
    assert len(set(v1.tokens)) == len(v1.tokens)


def test_chess_round_trip_and_segmentation(pgn_corpus):
    paths, _ = pgn_corpus
    games = {g.game_id: g.moves for g in chess.read_games(paths)}
    train, _, _, vocab = chess.ingest_chess(paths, seed=1)
    for gi, gid in enumerate(train.meta["games"]):
        ids = chess.game_tokens(train, gi)
        assert vocab.decode(ids) == games[gid]
        rows = train.records[train.records["game"] == gi]["tokens"]
        assert len(rows) == math.ceil(len(games[gid]) / 60)
        # padding only at the tail of the last chunk
        flat = rows.ravel()
        pad = np.nonzero(flat == chess.PAD)[0]
        assert pad.size == 0 or (pad == np.arange(flat.size - pad.size, flat.size)).all()


# --- .eds files ----------------------------------------------------------------------


def _datasets(pgn_corpus):
    train, *_ = chess.ingest_chess(pgn_corpus[0], seed=0)
    return [
        gen_pretrain(110, 5, 5, seed=1, cfg=SMALL),
        reasoning.gen_reasoning_easy(3, 5, seed=1),
        reasoning.gen_reasoning_hard(3, 5, seed=1),
        train,
    ]


def test_eds_round_trip(tmp_path, pgn_corpus):
    for i, ds in enumerate(_datasets(pgn_corpus)):
        p = tmp_path / f"d{i}.eds"
        h = save_dataset(ds, p)
        back = load_dataset(p)
        assert back.kind == ds.kind and back.content_hash == h
        assert back.records.dtype == ds.records.dtype
        assert np.array_equal(back.records, ds.records)
        assert back.to_bytes() == p.read_bytes()


@pytest.mark.parametrize("damage", ["truncate", "flip", "magic", "version"])
def test_eds_rejects_corruption(tmp_path, damage):
    p = tmp_path / "d.eds"
    save_dataset(gen_pretrain(30, 4, 1, seed=0, cfg=SMALL), p)
    data = bytearray(p.read_bytes())
    if damage == "truncate":
        data = data[:-10]
    elif damage == "flip":
        data[-3] ^= 1
    elif damage == "magic":
        data[:4] = b"NOPE"
    else:
        data[4] = 9
    p.write_bytes(bytes(data))
    with pytest.raises(DatasetFormatError):
        load_dataset(p)


def test_dataset_subset_keeps_meta():
    ds = gen_pretrain(30, 6, 1, seed=0, cfg=SMALL)
    sub = ds.subset(slice(0, 2))
    assert isinstance(sub, Dataset) and len(sub) == 2 and sub.meta == ds.meta
