"""The nine combined vertical x horizontal advisories."""

from __future__ import annotations

import enum
from dataclasses import dataclass


class Vertical(enum.IntEnum):
    CLIMB = 0
    CLEAR = 1
    DESCEND = 2

    @property
    def sign(self) -> int:
        # altitude rate sign: CLIMB +, DESCEND -
        return 1 - int(self)


class Horizontal(enum.IntEnum):
    LEFT = 0
    CLEAR = 1
    RIGHT = 2

    @property
    def sign(self) -> int:
        # turn rate sign: LEFT negative (counter-clockwise), RIGHT positive
        return int(self) - 1


N_ACTIONS = 9


@dataclass(frozen=True, order=True)
class CombinedAction:
    """One advisory; ``index = 3 * vertical + horizontal``."""

    vertical: Vertical
    horizontal: Horizontal

    @property
    def index(self) -> int:
        return 3 * int(self.vertical) + int(self.horizontal)

    @classmethod
    def from_index(cls, index: int) -> "CombinedAction":
        index = int(index)
        if not 0 <= index < N_ACTIONS:
            raise ValueError(f"action index must be in 0..8, got {index}")
        return cls(Vertical(index // 3), Horizontal(index % 3))

    @property
    def is_clear(self) -> bool:
        return self.vertical is Vertical.CLEAR and self.horizontal is Horizontal.CLEAR

    @property
    def label(self) -> str:
        return f"{self.horizontal.name}/{self.vertical.name}"

    def __str__(self) -> str:
        return self.label


CLEAR_INDEX = CombinedAction(Vertical.CLEAR, Horizontal.CLEAR).index
ALL_ACTIONS = tuple(CombinedAction.from_index(i) for i in range(N_ACTIONS))
ACTION_LABELS = tuple(a.label for a in ALL_ACTIONS)


def vertical_of(index):
    """Vertical ordinal of an action index (works on numpy arrays)."""
    return index // 3


def horizontal_of(index):
    return index % 3
