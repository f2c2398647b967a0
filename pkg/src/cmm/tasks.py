"""Desk-scale puzzles: 4x4 Sudoku (shidoku) and small mazes.

Every generated instance is checked against a brute-force oracle before it
is emitted.
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

BLANK = 0
N4 = 4

# maze vocabulary
WALL, OPEN, START, GOAL, PATH = 0, 1, 2, 3, 4
MAZE_VOCAB_IN = 4
MAZE_VOCAB_OUT = 5
SHIDOKU_VOCAB = 5


@dataclass
class PuzzleInstance:
    task: str
    seed: int
    input: list[int]
    target: list[int]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"task": self.task, "seed": self.seed, "input": self.input, "target": self.target, "meta": self.meta},
            sort_keys=True,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "PuzzleInstance":
        return cls(d["task"], int(d["seed"]), list(d["input"]), list(d["target"]), dict(d.get("meta", {})))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps([self.task, self.input, self.target]).encode()).hexdigest()


# ---------------------------------------------------------------------------
# shidoku

_UNITS: list[list[int]] = (
    [[r * 4 + c for c in range(4)] for r in range(4)]
    + [[r * 4 + c for r in range(4)] for c in range(4)]
    + [[(br + r) * 4 + bc + c for r in range(2) for c in range(2)] for br in (0, 2) for bc in (0, 2)]
)
_PEERS: list[set[int]] = [set().union(*(u for u in _UNITS if i in u)) - {i} for i in range(16)]


def _clues_consistent(grid: list[int]) -> bool:
    for u in _UNITS:
        vals = [grid[i] for i in u if grid[i] != BLANK]
        if len(vals) != len(set(vals)):
            return False
    return True


def solve_shidoku(grid, limit: int | None = None) -> tuple[int, list[int] | None]:
    """Count completions of a 16-cell grid by exhaustive backtracking.

    Returns ``(count, first_solution)``.  Inconsistent clues give 0.  With
    ``limit`` the search stops once that many solutions were found.
    """
    g = [int(v) for v in grid]
    if len(g) != 16 or any(v < 0 or v > 4 for v in g):
        raise ValueError("shidoku grid must be 16 values in 0..4")
    if not _clues_consistent(g):
        return 0, None
    first: list[int] | None = None
    count = 0

    def rec() -> bool:
        nonlocal first, count
        try:
            i = g.index(BLANK)
        except ValueError:
            count += 1
            if first is None:
                first = list(g)
            return limit is not None and count >= limit
        used = {g[p] for p in _PEERS[i]}
        for v in range(1, 5):
            if v not in used:
                g[i] = v
                if rec():
                    g[i] = BLANK
                    return True
                g[i] = BLANK
        return False

    rec()
    return count, first


def all_shidoku_grids() -> list[tuple[int, ...]]:
    """Every valid complete 4x4 grid, by brute-force enumeration."""
    out = []
    g = [BLANK] * 16

    def rec(i):
        if i == 16:
            out.append(tuple(g))
            return
        used = {g[p] for p in _PEERS[i]}
        for v in range(1, 5):
            if v not in used:
                g[i] = v
                rec(i + 1)
                g[i] = BLANK

    rec(0)
    return out


def _random_full_grid(rng: random.Random) -> list[int]:
    g = [BLANK] * 16

    def rec(i):
        if i == 16:
            return True
        used = {g[p] for p in _PEERS[i]}
        vals = [v for v in range(1, 5) if v not in used]
        rng.shuffle(vals)
        for v in vals:
            g[i] = v
            if rec(i + 1):
                return True
        g[i] = BLANK
        return False

    rec(0)
    return g


def gen_shidoku(seed: int, clue_range: tuple[int, int] = (6, 10)) -> PuzzleInstance:
    """Unique-solution 4x4 puzzle with a clue count drawn from ``clue_range``.

    Cells are removed in random order, keeping a removal only while the
    puzzle stays uniquely solvable; if the target count is not reached the
    attempt is repeated with a fresh grid.
    """
    lo, hi = clue_range
    if not 4 <= lo <= hi <= 16:
        raise ValueError("clue_range must satisfy 4 <= lo <= hi <= 16")
    rng = random.Random(seed)
    while True:
        target = _random_full_grid(rng)
        want = rng.randint(lo, hi)
        puzzle = list(target)
        order = list(range(16))
        rng.shuffle(order)
        clues = 16
        for i in order:
            if clues == want:
                break
            v = puzzle[i]
            puzzle[i] = BLANK
            if solve_shidoku(puzzle, limit=2)[0] == 1:
                clues -= 1
            else:
                puzzle[i] = v
        if clues == want:
            return PuzzleInstance("shidoku", seed, puzzle, target, {"size": 4, "clues": clues})


# ---------------------------------------------------------------------------
# maze

_DIRS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _carve(n: int, rng: random.Random) -> np.ndarray:
    grid = np.full((n, n), WALL, dtype=np.int64)
    start = (2 * rng.randrange((n - 1) // 2) + 1, 2 * rng.randrange((n - 1) // 2) + 1)
    grid[start] = OPEN
    stack = [start]
    while stack:
        r, c = stack[-1]
        nbrs = []
        for dr, dc in _DIRS:
            rr, cc = r + 2 * dr, c + 2 * dc
            if 0 < rr < n - 1 and 0 < cc < n - 1 and grid[rr, cc] == WALL:
                nbrs.append((rr, cc, dr, dc))
        if not nbrs:
            stack.pop()
            continue
        rr, cc, dr, dc = rng.choice(nbrs)
        grid[r + dr, c + dc] = OPEN
        grid[rr, cc] = OPEN
        stack.append((rr, cc))
    return grid


def bfs_path(grid: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> list[tuple[int, int]] | None:
    """Shortest 4-connected path over non-wall cells, endpoints included."""
    n_r, n_c = grid.shape
    prev = {start: None}
    q = deque([start])
    while q:
        cur = q.popleft()
        if cur == goal:
            break
        for dr, dc in _DIRS:
            nxt = (cur[0] + dr, cur[1] + dc)
            if 0 <= nxt[0] < n_r and 0 <= nxt[1] < n_c and grid[nxt] != WALL and nxt not in prev:
                prev[nxt] = cur
                q.append(nxt)
    if goal not in prev:
        return None
    path = [goal]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return path[::-1]


def gen_maze(seed: int, n: int = 7) -> PuzzleInstance:
    """Perfect maze on an n x n grid with a BFS-marked shortest path."""
    if n % 2 == 0 or not 5 <= n <= 15:
        raise ValueError("maze size must be odd and in [5, 15]")
    rng = random.Random(seed)
    grid = _carve(n, rng)
    rooms = [(r, c) for r in range(1, n, 2) for c in range(1, n, 2)]
    start, goal = rng.sample(rooms, 2)
    path = bfs_path(grid, start, goal)
    assert path is not None
    inp = grid.copy()
    inp[start] = START
    inp[goal] = GOAL
    tgt = inp.copy()
    for cell in path[1:-1]:
        tgt[cell] = PATH
    return PuzzleInstance(
        "maze",
        seed,
        inp.reshape(-1).tolist(),
        tgt.reshape(-1).tolist(),
        {"n": n, "start": list(start), "goal": list(goal), "path_len": len(path) - 1},
    )


def maze_is_perfect(tokens, n: int) -> bool:
    """Open-cell graph is a tree: connected with exactly (cells - 1) edges."""
    g = np.asarray(tokens).reshape(n, n)
    cells = list(zip(*np.nonzero(g != WALL)))
    cell_set = set(cells)
    edges = sum(1 for (r, c) in cells for dr, dc in ((1, 0), (0, 1)) if (r + dr, c + dc) in cell_set)
    if not cells:
        return False
    seen = {cells[0]}
    q = deque([cells[0]])
    while q:
        r, c = q.popleft()
        for dr, dc in _DIRS:
            nb = (r + dr, c + dc)
            if nb in cell_set and nb not in seen:
                seen.add(nb)
                q.append(nb)
    return edges == len(cells) - 1 and len(seen) == len(cells)


# ---------------------------------------------------------------------------
# metrics and io


def exact_accuracy(pred, target) -> tuple[float, float]:
    """(fraction of fully correct samples, per-position match rate)."""
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {t.shape}")
    if p.ndim == 1:
        p, t = p[None], t[None]
    eq = p == t
    return float(eq.all(axis=1).mean()), float(eq.mean())


def generate(task: str, count: int, seed: int, exclude: set[str] | None = None, **kw) -> Iterator[PuzzleInstance]:
    """Instances for seeds ``seed, seed + 1, ...``.

    Seeds whose instance digest is in ``exclude`` are skipped (and further
    seeds consumed), which keeps a held-out split disjoint from training data.
    """
    made, s = 0, seed
    while made < count:
        if task == "shidoku":
            inst = gen_shidoku(s, tuple(kw.get("clue_range", (6, 10))))
        elif task == "maze":
            inst = gen_maze(s, kw.get("n", 7))
        else:
            raise ValueError(f"unknown task {task!r}")
        s += 1
        if exclude and inst.digest() in exclude:
            continue
        made += 1
        yield inst


def write_jsonl(instances: Iterable[PuzzleInstance], path: str | Path) -> int:
    n = 0
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(inst.to_json() + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> list[PuzzleInstance]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(PuzzleInstance.from_dict(json.loads(line)))
    return out


def as_arrays(instances: list[PuzzleInstance]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([i.input for i in instances], dtype=np.int64)
    Y = np.array([i.target for i in instances], dtype=np.int64)
    return X, Y
