from __future__ import annotations

import logging
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from add_curriculum.core.rng import component_rng
from add_curriculum.core.tensor import ContractError
from add_curriculum.services.artifacts import ArtifactError

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

# headings
NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
HEADING_NAMES = ("N", "E", "S", "W")

# actions
LEFT, RIGHT, FORWARD = 0, 1, 2
ACTION_COUNT = 3

WALL_THRESHOLD = 0.5
HEADING_MARK = 0.5
HEADING_MIN = 0.25
DATASET_HEADER = struct.Struct("<IQ")


class MazeBuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvMetrics:
    block_count: int
    shortest_path: Optional[int]
    solvable: bool


def param_dim(size: int) -> int:
    return 3 * size * size


def observation_width(window: int) -> int:
    return window * window * 3 + 4


def _inside(cell: Cell, size: int) -> bool:
    return 0 <= cell[0] < size and 0 <= cell[1] < size


def _ahead(cell: Cell, heading: int) -> Cell:
    dr, dc = MOVES[heading]
    return cell[0] + dr, cell[1] + dc


@dataclass
class MazeEnv:
    walls: np.ndarray
    start: Cell
    start_heading: int
    goal: Cell
    max_steps: int
    window: int = 5
    name: str = ""
    pos: Cell = field(init=False)
    heading: int = field(init=False)
    steps: int = field(default=0, init=False)
    done: bool = field(default=False, init=False)

    def __post_init__(self) -> None:
        self.walls = np.asarray(self.walls, dtype=bool)
        size = self.size
        if self.walls.shape != (size, size):
            raise ContractError(f"walls must be square, got {self.walls.shape}")
        if not (_inside(self.start, size) and _inside(self.goal, size)):
            raise ContractError("agent and goal must lie inside the grid")
        if self.start == self.goal:
            raise ContractError("agent and goal must occupy different cells")
        if self.walls[self.start] or self.walls[self.goal]:
            raise ContractError("agent and goal cells cannot be walls")
        if self.max_steps < 1:
            raise ContractError("episode cap must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ContractError("observation window must be odd and at least 3")
        if self.start_heading not in range(4):
            raise ContractError(f"heading must be 0..3, got {self.start_heading}")
        self.pos = self.start
        self.heading = self.start_heading

    @property
    def size(self) -> int:
        return int(self.walls.shape[0])

    def reset(self) -> np.ndarray:
        self.pos = self.start
        self.heading = self.start_heading
        self.steps = 0
        self.done = False
        return self.observe()

    def step(self, action: int) -> Tuple[np.ndarray, float, bool]:
        if self.done:
            raise ContractError("step() called on a finished episode; reset first")
        if action == LEFT:
            self.heading = (self.heading - 1) % 4
        elif action == RIGHT:
            self.heading = (self.heading + 1) % 4
        elif action == FORWARD:
            target = _ahead(self.pos, self.heading)
            if _inside(target, self.size) and not self.walls[target]:
                self.pos = target
        else:
            raise ContractError(f"unknown action {action}")
        self.steps += 1
        reward = 0.0
        if self.pos == self.goal:
            reward = 1.0 - self.steps / self.max_steps
            self.done = True
        elif self.steps >= self.max_steps:
            self.done = True
        return self.observe(), reward, self.done

    def observe(self) -> np.ndarray:
        """Egocentric window (wall/empty/goal one-hot) rotated so the agent faces up, plus heading."""
        half = self.window // 2
        cells = np.zeros((self.size + 2 * half, self.size + 2 * half), dtype=np.int8)
        cells[half:-half, half:-half] = np.where(self.walls, 0, 1)
        cells[self.goal[0] + half, self.goal[1] + half] = 2
        row, col = self.pos
        view = cells[row:row + self.window, col:col + self.window]
        view = np.rot90(view, k=self.heading)
        onehot = np.eye(3, dtype=np.float32)[view].reshape(-1)
        heading = np.eye(4, dtype=np.float32)[self.heading]
        return np.concatenate([onehot, heading])


def decode(theta: np.ndarray, max_steps: int, window: int = 5) -> MazeEnv:
    """Total decoding of an N×N×3 parameter tensor (flat input accepted)."""
    values = np.asarray(theta, dtype=np.float32)
    if values.ndim == 1:
        size = math.isqrt(values.size // 3)
        values = values.reshape(size, size, 3)
    size = values.shape[0]
    walls = values[..., 0] >= WALL_THRESHOLD

    agent_layer = values[..., 1].reshape(-1).astype(np.float64)
    agent_index = int(np.argmax(agent_layer))
    goal_layer = values[..., 2].reshape(-1).astype(np.float64)
    goal_layer[agent_index] = -np.inf
    goal_index = int(np.argmax(goal_layer))
    start, goal = divmod(agent_index, size), divmod(goal_index, size)
    walls[start] = False
    walls[goal] = False

    heading = EAST
    agent_layer[agent_index] = -np.inf
    runner = int(np.argmax(agent_layer))
    if agent_layer[runner] >= HEADING_MIN:
        offset = (runner // size - start[0], runner % size - start[1])
        if offset in MOVES:
            heading = MOVES.index(offset)
    return MazeEnv(walls=walls, start=start, start_heading=heading, goal=goal, max_steps=max_steps, window=window)


def encode(env: MazeEnv) -> np.ndarray:
    theta = np.zeros((env.size, env.size, 3), dtype=np.float32)
    theta[..., 0] = env.walls
    forward = _ahead(env.start, env.start_heading)
    if _inside(forward, env.size):
        theta[forward[0], forward[1], 1] = HEADING_MARK
    theta[env.start[0], env.start[1], 1] = 1.0
    theta[env.goal[0], env.goal[1], 2] = 1.0
    return theta


def random_param(size: int, block_budget_max: int, rng: np.random.Generator) -> np.ndarray:
    """Domain-randomised θ: up to ``block_budget_max`` walls, then distinct agent and goal cells."""
    if not 0 <= block_budget_max <= size * size - 2:
        raise ContractError(f"block budget {block_budget_max} exceeds {size * size - 2} for a {size}x{size} grid")
    theta = np.zeros((size, size, 3), dtype=np.float32)
    count = int(rng.integers(0, block_budget_max + 1))
    blocks = rng.choice(size * size, size=count, replace=False)
    layer = np.zeros(size * size, dtype=np.float32)
    layer[blocks] = 1.0
    theta[..., 0] = layer.reshape(size, size)
    agent, goal = (divmod(int(i), size) for i in rng.choice(size * size, size=2, replace=False))
    theta[agent[0], agent[1], 0] = 0.0
    theta[goal[0], goal[1], 0] = 0.0
    headings = [h for h in range(4) if _inside(_ahead(agent, h), size)]
    forward = _ahead(agent, headings[int(rng.integers(0, len(headings)))])
    theta[forward[0], forward[1], 1] = HEADING_MARK
    theta[agent[0], agent[1], 1] = 1.0
    theta[goal[0], goal[1], 2] = 1.0
    return theta


def shortest_path(walls: np.ndarray, start: Cell, goal: Cell) -> Optional[int]:
    size = walls.shape[0]
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        cell, distance = queue.popleft()
        if cell == goal:
            return distance
        for move in MOVES:
            nxt = (cell[0] + move[0], cell[1] + move[1])
            if _inside(nxt, size) and not walls[nxt] and nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, distance + 1))
    return None


def metrics(env: MazeEnv) -> EnvMetrics:
    path = shortest_path(env.walls, env.start, env.goal)
    return EnvMetrics(block_count=int(env.walls.sum()), shortest_path=path, solvable=path is not None)


def _suite_env(name: str, walls: np.ndarray, start: Cell, heading: int, goal: Cell, max_steps: int, window: int) -> MazeEnv:
    walls = walls.copy()
    walls[start] = False
    walls[goal] = False
    env = MazeEnv(walls=walls, start=start, start_heading=heading, goal=goal, max_steps=max_steps, window=window, name=name)
    if not metrics(env).solvable:
        raise MazeBuildError(f"test maze {name!r} is not solvable at size {env.size}")
    return env


def test_suite(size: int, max_steps: int, window: int = 5) -> List[MazeEnv]:
    """Five fixed evaluation mazes: empty, four-rooms, labyrinth, S-corridor, dense."""
    if size < 5:
        raise ContractError(f"test suite needs size >= 5, got {size}")
    last = size - 1
    envs = [_suite_env("empty", np.zeros((size, size), bool), (last, 0), EAST, (0, last), max_steps, window)]

    mid = size // 2
    rooms = np.zeros((size, size), bool)
    rooms[mid, :] = True
    rooms[:, mid] = True
    near, far = mid // 2, mid + 1 + (size - mid - 1) // 2
    for door in (near, far):
        rooms[mid, door] = False
        rooms[door, mid] = False
    envs.append(_suite_env("four_rooms", rooms, (0, 0), EAST, (last, last), max_steps, window))

    maze = np.zeros((size, size), bool)
    gap_right = True
    for row in range(1, last, 2):
        maze[row, :] = True
        maze[row, last if gap_right else 0] = False
        gap_right = not gap_right
    goal_col = last if gap_right else 0
    envs.append(_suite_env("labyrinth", maze, (0, 0), EAST, (last, goal_col), max_steps, window))

    corridor = np.zeros((size, size), bool)
    corridor[:last, size // 3] = True
    corridor[1:, 2 * size // 3] = True
    envs.append(_suite_env("s_corridor", corridor, (0, 0), SOUTH, (last, last), max_steps, window))

    for attempt in range(5000):
        rng = component_rng(0, f"suite/dense/{size}/{attempt}")
        dense = rng.random((size, size)) < 0.5
        dense[0, 0] = dense[last, last] = False
        if shortest_path(dense, (0, 0), (last, last)) is not None:
            envs.append(_suite_env("dense", dense, (0, 0), EAST, (last, last), max_steps, window))
            break
    else:
        raise MazeBuildError(f"no solvable dense maze found at size {size}")
    return envs


def save_dataset(path: Path, thetas: np.ndarray) -> None:
    values = np.asarray(thetas, dtype="<f4")
    if values.ndim != 4 or values.shape[1] != values.shape[2] or values.shape[3] != 3:
        raise ContractError(f"dataset must be (count, N, N, 3), got {values.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(DATASET_HEADER.pack(values.shape[1], values.shape[0]))
        handle.write(values.tobytes(order="C"))


def load_dataset(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"dataset not found: {path}")
    raw = path.read_bytes()
    if len(raw) < DATASET_HEADER.size:
        raise ArtifactError(f"dataset {path} is truncated at offset {len(raw)}")
    size, count = DATASET_HEADER.unpack_from(raw, 0)
    expected = DATASET_HEADER.size + count * size * size * 3 * 4
    if len(raw) != expected:
        raise ArtifactError(f"dataset {path} has {len(raw)} bytes, expected {expected}")
    if count == 0:
        return np.zeros((0, size, size, 3), dtype=np.float32)
    payload = np.frombuffer(raw, dtype="<f4", offset=DATASET_HEADER.size)
    return payload.reshape(count, size, size, 3).astype(np.float32)
