import textwrap
from pathlib import Path

import numpy as np
import pytest

# criterion number -> (status, title, detail), filled by test_acceptance
ACCEPTANCE: dict = {}

FILES = "abcdefgh"
OPENINGS = [
    ["e4", "e5", "Nf3", "Nc6", "Bb5", "a6", "Ba4", "Nf6", "O-O", "Be7"],
    ["d4", "d5", "c4", "e6", "Nc3", "Nf6", "Bg5", "Be7", "e3", "O-O"],
    ["e4", "c5", "Nf3", "d6", "d4", "cxd4", "Nxd4", "Nf6", "Nc3", "a6"],
    ["c4", "e5", "Nc3", "Nf6", "g3", "d5", "cxd5", "Nxd5", "Bg2", "Nb6"],
]


def _random_san(rng) -> str:
    kind = rng.integers(6)
    sq = f"{FILES[rng.integers(8)]}{rng.integers(1, 9)}"
    if kind == 0:
        return sq
    if kind == 1:
        return f"{'NBRQK'[rng.integers(5)]}{sq}"
    if kind == 2:
        return f"{'NBRQ'[rng.integers(4)]}x{sq}+"
    if kind == 3:
        return f"{FILES[rng.integers(8)]}x{sq}"
    if kind == 4:
        return ["O-O", "O-O-O"][rng.integers(2)]
    return f"{FILES[rng.integers(8)]}8=Q"


def _movetext(moves, rng) -> str:
    parts = []
    for i, m in enumerate(moves):
        if i % 2 == 0:
            parts.append(f"{i // 2 + 1}.")
        parts.append(m)
        r = rng.random()
        if r < 0.05:
            parts.append("{a comment (with parens)}")
        elif r < 0.08:
            parts.append(f"({i // 2 + 1}... Nf6 {{side line}} (Nc6 $2) Bb4)")
        elif r < 0.11:
            parts.append(f"${rng.integers(1, 20)}")
    parts.append(["1-0", "0-1", "1/2-1/2"][rng.integers(3)])
    return textwrap.fill(" ".join(parts), 78)


def make_corpus(directory: Path, n_games: int = 160, n_low: int = 30, seed: int = 0):
    """Write a synthetic PGN corpus; returns ``(paths, rated_games)`` where
    ``rated_games`` lists the SAN move lists of games rated >= 2200."""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    kept = []
    files = []
    for f in range(2):
        chunks = []
        for g in range(n_games // 2 + n_low // 2):
            low = g < n_low // 2
            opening = OPENINGS[rng.integers(len(OPENINGS))]
            length = int(rng.integers(15, 140))
            moves = (opening + [_random_san(rng) for _ in range(length)])[:length]
            w = int(rng.integers(2000, 2190)) if low else int(rng.integers(2200, 2800))
            b = int(rng.integers(2200, 2800))
            tags = [
                f'[Event "Synthetic {f}-{g}"]',
                '[Site "local"]',
                f'[WhiteElo "{w}"]',
                f'[BlackElo "{b}"]',
                '[Result "*"]',
            ]
            chunks.append("\n".join(tags) + "\n\n" + _movetext(moves, rng) + "\n")
            if not low:
                kept.append(moves)
        # a malformed game that must be skipped
        chunks.append('[WhiteElo "2500"]\n[BlackElo "2500"]\n\n1. e4 ZZ9 2. Nf3 1-0\n')
        p = directory / f"corpus{f}.pgn"
        p.write_text("\n".join(chunks))
        files.append(p)
    return files, kept


@pytest.fixture(scope="session")
def pgn_corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp("pgn"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[number]
        label = f"{number:g}" if number == int(number) else f"{number:.1f}"
        terminalreporter.write_line(f"criterion {label:>4} {status}: {title} ({detail})")
