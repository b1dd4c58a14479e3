"""The symbolic universe over the integer grid.

A world-state maps grid positions to symbol indices.  Only non-empty cells
are stored, so memory is proportional to the number of occupied cells and
not to the number of steps an agent has taken.

Conventions (frozen so recorded trajectories stay reproducible):

* ``+col`` is right (``R``), ``+row`` is up (``U``);
* digit glyphs ``0..R-1`` take token indices ``0..R-1``, the empty symbol
  follows at index ``R`` and the operator glyph at ``R+1``;
* motion tokens are ``U=0, D=1, L=2, R=3, S=4``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, NamedTuple

from .errors import AmbiguousAnswerError, InvalidSymbolError, NoAnswerError

LAMBDA_GLYPH = "λ"
DIGIT_GLYPHS = "0123456789"


class Position(NamedTuple):
    col: int
    row: int


class Motion(IntEnum):
    U = 0
    D = 1
    L = 2
    R = 3
    S = 4


N_MOTIONS = len(Motion)

MOTION_DELTAS: tuple[tuple[int, int], ...] = ((0, 1), (0, -1), (-1, 0), (1, 0), (0, 0))


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple[str, ...]
    lambda_index: int
    radix: int
    operator_glyph: str

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be distinct")
        if not 0 <= self.lambda_index < len(self.symbols):
            raise ValueError("lambda index out of range")
        if self.symbols[self.lambda_index] != LAMBDA_GLYPH:
            raise ValueError("lambda index does not point at the empty symbol")
        if self.radix < 2 or tuple(self.symbols[: self.radix]) != tuple(DIGIT_GLYPHS[: self.radix]):
            raise ValueError("digit glyphs must occupy indices 0..R-1")

    @classmethod
    def for_task(cls, radix: int, operator_glyph: str) -> "Alphabet":
        if not 2 <= radix <= 10:
            raise ValueError(f"unsupported radix {radix}")
        symbols = tuple(DIGIT_GLYPHS[:radix]) + (LAMBDA_GLYPH, operator_glyph)
        return cls(symbols, radix, radix, operator_glyph)

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def operator_index(self) -> int:
        return self.symbols.index(self.operator_glyph)

    def index(self, glyph: str) -> int:
        try:
            return self.symbols.index(glyph)
        except ValueError:
            raise InvalidSymbolError(f"glyph {glyph!r} not in alphabet {self.symbols}") from None

    def glyph(self, index: int) -> str:
        if not 0 <= index < len(self.symbols):
            raise InvalidSymbolError(f"symbol index {index} out of range")
        return self.symbols[index]

    def encode(self, text: str) -> list[int]:
        return [self.index(g) for g in text]

    def decode(self, indices) -> str:
        return "".join(self.glyph(i) for i in indices)


class WorldState:
    """Sparse map from positions to symbol indices; absent cells hold λ."""

    __slots__ = ("alphabet", "cells")

    def __init__(self, alphabet: Alphabet, cells: dict | None = None):
        self.alphabet = alphabet
        self.cells: dict[tuple[int, int], int] = {}
        if cells:
            for p, s in cells.items():
                self.write(p, s)

    def copy(self) -> "WorldState":
        w = WorldState(self.alphabet)
        w.cells = dict(self.cells)
        return w

    def __eq__(self, other) -> bool:
        if not isinstance(other, WorldState):
            return NotImplemented
        return self.alphabet == other.alphabet and self.cells == other.cells

    def __len__(self) -> int:
        return len(self.cells)

    def __repr__(self) -> str:
        return f"WorldState({len(self.cells)} cells)"

    def read(self, p) -> int:
        return self.cells.get((p[0], p[1]), self.alphabet.lambda_index)

    def write(self, p, s: int) -> "WorldState":
        if not 0 <= s < len(self.alphabet.symbols):
            raise InvalidSymbolError(f"symbol index {s} out of range")
        key = (p[0], p[1])
        if s == self.alphabet.lambda_index:
            self.cells.pop(key, None)
        else:
            self.cells[key] = s
        return self

    def write_string(self, start, glyphs: str) -> "WorldState":
        indices = self.alphabet.encode(glyphs)
        for i, s in enumerate(indices):
            self.write((start[0] + i, start[1]), s)
        return self

    def occupied(self) -> Iterator[tuple[Position, int]]:
        for (c, r), s in self.cells.items():
            yield Position(c, r), s

    def render(self) -> str:
        """Multi-line picture of the occupied bounding box, top row first."""
        if not self.cells:
            return ""
        cols = [c for c, _ in self.cells]
        rows = [r for _, r in self.cells]
        lines = []
        for r in range(max(rows), min(rows) - 1, -1):
            line = "".join(
                self.alphabet.symbols[self.read((c, r))] if (c, r) in self.cells else "."
                for c in range(min(cols), max(cols) + 1)
            )
            lines.append(line)
        return "\n".join(lines)


def read(w: WorldState, p) -> int:
    return w.read(p)


def write(w: WorldState, p, s: int) -> WorldState:
    return w.write(p, s)


def write_string(w: WorldState, start, glyphs: str) -> WorldState:
    return w.write_string(start, glyphs)


def apply_motion(p, m: int) -> Position:
    dc, dr = MOTION_DELTAS[m]
    return Position(p[0] + dc, p[1] + dr)


def answer_span(w: WorldState) -> tuple[int, int, int]:
    """Return ``(row, first_col, last_col)`` of the single answer run."""
    if not w.cells:
        raise NoAnswerError("world is empty")
    rows = {r for _, r in w.cells}
    if len(rows) > 1:
        raise AmbiguousAnswerError(f"cells occupied on {len(rows)} rows")
    (row,) = rows
    cols = sorted(c for c, _ in w.cells)
    if cols[-1] - cols[0] + 1 != len(cols):
        raise AmbiguousAnswerError("answer row contains more than one run")
    return row, cols[0], cols[-1]


def read_answer(w: WorldState) -> str:
    row, lo, hi = answer_span(w)
    return "".join(w.alphabet.symbols[w.cells[(c, row)]] for c in range(lo, hi + 1))
