# 5x9 lowercase bitmap glyphs. Rows 0-1 ascender, 2-6 x-height, 7-8 descender.
from __future__ import annotations

import numpy as np

_RAW = {
    "a": """
.....
.....
.###.
....#
.####
#...#
.####
.....
.....""",
    "b": """
#....
#....
####.
#...#
#...#
#...#
####.
.....
.....""",
    "c": """
.....
.....
.####
#....
#....
#....
.####
.....
.....""",
    "d": """
....#
....#
.####
#...#
#...#
#...#
.####
.....
.....""",
    "e": """
.....
.....
.###.
#...#
#####
#....
.####
.....
.....""",
    "f": """
..##.
.#...
####.
.#...
.#...
.#...
.#...
.....
.....""",
    "g": """
.....
.....
.####
#...#
#...#
.####
....#
....#
.###.""",
    "h": """
#....
#....
#.##.
##..#
#...#
#...#
#...#
.....
.....""",
    "i": """
..#..
.....
.##..
..#..
..#..
..#..
.###.
.....
.....""",
    "j": """
...#.
.....
..##.
...#.
...#.
...#.
...#.
#..#.
.##..""",
    "k": """
#....
#....
#..#.
#.#..
##...
#.#..
#..#.
.....
.....""",
    "l": """
.##..
..#..
..#..
..#..
..#..
..#..
.###.
.....
.....""",
    "m": """
.....
.....
##.#.
#.#.#
#.#.#
#.#.#
#.#.#
.....
.....""",
    "n": """
.....
.....
#.##.
##..#
#...#
#...#
#...#
.....
.....""",
    "o": """
.....
.....
.###.
#...#
#...#
#...#
.###.
.....
.....""",
    "p": """
.....
.....
####.
#...#
#...#
####.
#....
#....
#....""",
    "q": """
.....
.....
.####
#...#
#...#
.####
....#
....#
....#""",
    "r": """
.....
.....
#.##.
##...
#....
#....
#....
.....
.....""",
    "s": """
.....
.....
.####
#....
.###.
....#
####.
.....
.....""",
    "t": """
.#...
.#...
####.
.#...
.#...
.#...
..##.
.....
.....""",
    "u": """
.....
.....
#...#
#...#
#...#
#..##
.##.#
.....
.....""",
    "v": """
.....
.....
#...#
#...#
#...#
.#.#.
..#..
.....
.....""",
    "w": """
.....
.....
#...#
#...#
#.#.#
#.#.#
.#.#.
.....
.....""",
    "x": """
.....
.....
#...#
.#.#.
..#..
.#.#.
#...#
.....
.....""",
    "y": """
.....
.....
#...#
#...#
#...#
.####
....#
....#
.###.""",
    "z": """
.....
.....
#####
...#.
..#..
.#...
#####
.....
.....""",
    " ": """
...
...
...
...
...
...
...
...
...""",
}

GRID_HEIGHT = 9


def _parse(art: str) -> np.ndarray:
    rows = [r for r in art.strip("\n").splitlines()]
    return np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)


GLYPHS: dict[str, np.ndarray] = {ch: _parse(art) for ch, art in _RAW.items()}
assert all(g.shape[0] == GRID_HEIGHT for g in GLYPHS.values())
