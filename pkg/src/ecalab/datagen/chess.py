"""PGN ingestion for next-move prediction over SAN tokens.

Moves are treated as opaque strings; there is no board or legality tracking.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import eca
from .dataset import Dataset

log = logging.getLogger(__name__)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
SEQ_LEN = 60

_TAG = re.compile(r'^\[(\w+)\s+"((?:[^"\\]|\\.)*)"\]\s*$')
_SAN = re.compile(r"^(?:O-O(?:-O)?|[KQRBN][a-h]?[1-8]?x?[a-h][1-8]|[a-h](?:x[a-h])?[1-8](?:=[QRBN])?)[+#]?$")
_MOVE_NUMBER = re.compile(r"^\d+\.(?:\.\.)?")
_RESULTS = {"1-0", "0-1", "1/2-1/2", "*"}


class EmptyCorpusError(ValueError):
    pass


class MalformedGameError(ValueError):
    pass


@dataclass
class Game:
    tags: dict
    moves: list[str]
    game_id: str = ""


def split_games(text: str) -> list[tuple[dict, str]]:
    """Split PGN text into ``(tags, movetext)`` pairs."""
    games = []
    tags: dict = {}
    movetext: list[str] = []
    for line in text.splitlines():
        stripped = line.strip()
        m = _TAG.match(stripped)
        if m:
            if movetext:
                games.append((tags, "\n".join(movetext)))
                tags, movetext = {}, []
            tags[m.group(1)] = m.group(2)
        elif stripped.startswith("%"):
            continue
        elif stripped:
            movetext.append(line)
    if tags or movetext:
        games.append((tags, "\n".join(movetext)))
    return games


def _strip_nested(text: str) -> str:
    out = []
    depth = 0
    i = 0
    while i < len(text):
        ch = text[i]
        if depth == 0 and ch == "{":
            end = text.find("}", i)
            if end < 0:
                raise MalformedGameError("unterminated comment")
            out.append(" ")
            i = end + 1
            continue
        if depth == 0 and ch == ";":
            end = text.find("\n", i)
            i = len(text) if end < 0 else end
            continue
        if ch == "(":
            depth += 1
        elif ch == ")":
            if depth == 0:
                raise MalformedGameError("unbalanced ')'")
            depth -= 1
            out.append(" ")
        elif depth == 0:
            out.append(ch)
        elif ch == "{":
            end = text.find("}", i)
            if end < 0:
                raise MalformedGameError("unterminated comment")
            i = end
        i += 1
    if depth:
        raise MalformedGameError("unbalanced '('")
    return "".join(out)


def parse_movetext(movetext: str) -> list[str]:
    """SAN tokens of a movetext, with comments, variations, NAGs, numbers and results removed."""
    moves = []
    for tok in _strip_nested(movetext).split():
        tok = _MOVE_NUMBER.sub("", tok)
        if not tok or tok in _RESULTS or tok.startswith("$"):
            continue
        tok = tok.rstrip("!?")
        if not _SAN.match(tok):
            raise MalformedGameError(f"not a SAN move: {tok!r}")
        moves.append(tok)
    return moves


def _elo(tags: dict, key: str) -> int | None:
    try:
        return int(tags.get(key, ""))
    except ValueError:
        return None


def read_games(paths, min_rating: int = 2200) -> list[Game]:
    """Parse PGN files, keeping games where both players are rated ``>= min_rating``."""
    games = []
    for path in sorted(Path(p) for p in paths):
        text = path.read_text(encoding="utf-8", errors="replace")
        for n, (tags, movetext) in enumerate(split_games(text)):
            gid = f"{path.name}#{n}"
            try:
                moves = parse_movetext(movetext)
            except MalformedGameError as exc:
                log.warning("skipping game %s: %s", gid, exc)
                continue
            white, black = _elo(tags, "WhiteElo"), _elo(tags, "BlackElo")
            if white is None or black is None or min(white, black) < min_rating:
                continue
            if moves:
                games.append(Game(tags, moves, gid))
    return games


@dataclass
class Vocabulary:
    tokens: list[str] = field(default_factory=lambda: [PAD_TOKEN, UNK_TOKEN])

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary tokens")

    @classmethod
    def build(cls, games: list[Game]) -> "Vocabulary":
        counts = Counter(m for g in games for m in g.moves)
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls([PAD_TOKEN, UNK_TOKEN, *ordered])

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, moves: list[str]) -> list[int]:
        return [self.index.get(m, UNK) for m in moves]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


def chunk(ids: list[int], length: int = SEQ_LEN) -> list[list[int]]:
    """Non-overlapping ``length`` chunks; the last one is right-padded with PAD."""
    out = []
    for start in range(0, len(ids), length):
        piece = list(ids[start : start + length])
        out.append(piece + [PAD] * (length - len(piece)))
    return out


def split_indices(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = eca.make_rng(seed, 5).permutation(n)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def games_to_dataset(games: list[Game], vocab: Vocabulary, split: str, meta: dict) -> Dataset:
    dt = np.dtype([("tokens", "<u4", (SEQ_LEN,)), ("game", "<u4")])
    rows = []
    for gi, g in enumerate(games):
        for piece in chunk(vocab.encode(g.moves)):
            rows.append((piece, gi))
    records = np.zeros(len(rows), dtype=dt)
    for i, (piece, gi) in enumerate(rows):
        records[i] = (piece, gi)
    meta = {**meta, "split": split, "vocab": vocab.tokens, "games": [g.game_id for g in games]}
    return Dataset("chess", records, meta)


def ingest_chess(pgn_paths, min_rating: int = 2200, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Returns ``(train, val, test, vocab)``; the vocabulary comes from the train games only."""
    games = read_games(pgn_paths, min_rating)
    if not games:
        raise EmptyCorpusError(f"no games rated >= {min_rating} in the given PGN files")
    tr, va, te = split_indices(len(games), fractions, seed)
    train_games = [games[i] for i in tr]
    vocab = Vocabulary.build(train_games)
    meta = {"min_rating": min_rating, "fractions": list(fractions), "seed": int(seed)}
    return (
        games_to_dataset(train_games, vocab, "train", meta),
        games_to_dataset([games[i] for i in va], vocab, "val", meta),
        games_to_dataset([games[i] for i in te], vocab, "test", meta),
        vocab,
    )


def vocab_of(ds: Dataset) -> Vocabulary:
    return Vocabulary(list(ds.meta["vocab"]))


def game_tokens(ds: Dataset, game_index: int) -> list[int]:
    """Concatenated non-PAD tokens of one source game."""
    rows = ds.records[ds.records["game"] == game_index]["tokens"]
    return [int(t) for row in rows for t in row if t != PAD]
