"""Colored-object grid world: scenes, expert demonstrations, splits, rollouts."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# action vocabulary, fixed order
ACTIONS = ("UP", "DOWN", "LEFT", "RIGHT", "GRASP", "STOP", "BOS", "EOS", "PAD")
A = {name: i for i, name in enumerate(ACTIONS)}
UP, DOWN, LEFT, RIGHT, GRASP, STOP, BOS, EOS, PAD = range(len(ACTIONS))
MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}

INSTR_SPECIALS = ("<pad>", "<bos>", "<eos>", "pick")
INSTR_LEN = 5  # <bos> pick color shape <eos>


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    grid_n: int = 7
    colors: tuple[str, ...] = ("red", "blue", "green", "yellow")
    shapes: tuple[str, ...] = ("cube", "ball")
    min_objects: int = 2
    max_objects: int = 4
    forget_fraction: float = 0.3
    share_prob: float = 0.5  # chance an episode reuses the previous scene with a new target
    max_action_len: int = 24

    @property
    def instr_vocab(self) -> tuple[str, ...]:
        return INSTR_SPECIALS + tuple(self.colors) + tuple(self.shapes)

    @property
    def n_channels(self) -> int:
        return len(self.colors) + len(self.shapes) + 1 + 2 * (2 * self.grid_n - 1)

    def validate(self) -> None:
        if self.grid_n < 3:
            raise ConfigError("grid_n must be at least 3")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.max_objects > len(self.colors) * len(self.shapes):
            raise ConfigError("not enough color/shape combinations for unique instruction targets")
        if self.max_objects > self.grid_n * self.grid_n - 1:
            raise ConfigError("grid too small for the requested object count")
        if 2 * (self.grid_n - 1) + 3 > self.max_action_len:
            raise ConfigError("max_action_len too short for the longest expert path")
        if not 0.0 <= self.forget_fraction <= 1.0:
            raise ConfigError("forget_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class GridObject:
    color: str
    shape: str
    cell: tuple[int, int]


@dataclass(frozen=True)
class GridScene:
    n: int
    objects: tuple[GridObject, ...]
    agent: tuple[int, int]

    def __post_init__(self):
        if not self.objects:
            raise ValueError("scene needs at least one object")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        for r, c in cells + [self.agent]:
            if not (0 <= r < self.n and 0 <= c < self.n):
                raise ValueError(f"cell {(r, c)} out of bounds for n={self.n}")

    def object_at(self, cell) -> GridObject | None:
        for o in self.objects:
            if o.cell == tuple(cell):
                return o
        return None

    def layout_key(self) -> tuple:
        return (self.n, self.agent, tuple(sorted((o.color, o.shape, o.cell) for o in self.objects)))

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "agent": list(self.agent),
            "objects": [{"color": o.color, "shape": o.shape, "cell": list(o.cell)} for o in self.objects],
        }

    @classmethod
    def from_json(cls, d: dict) -> GridScene:
        objs = tuple(GridObject(o["color"], o["shape"], tuple(o["cell"])) for o in d["objects"])
        return cls(int(d["n"]), objs, tuple(d["agent"]))


@dataclass(frozen=True)
class Instruction:
    color: str
    shape: str

    def words(self) -> tuple[str, ...]:
        return ("<bos>", "pick", self.color, self.shape, "<eos>")

    def tokens(self, cfg: WorldConfig) -> list[int]:
        vocab = cfg.instr_vocab
        return [vocab.index(w) for w in self.words()]

    def target(self, scene: GridScene) -> GridObject:
        hits = [o for o in scene.objects if o.color == self.color and o.shape == self.shape]
        if len(hits) != 1:
            raise ValueError(f"instruction {self} matches {len(hits)} objects")
        return hits[0]

    @classmethod
    def from_tokens(cls, tokens: Sequence[int], cfg: WorldConfig) -> Instruction:
        words = [cfg.instr_vocab[t] for t in tokens]
        return cls(words[2], words[3])


@dataclass
class Episode:
    index: int
    scene: GridScene
    instruction: Instruction
    expert_tokens: list[int]
    labels: dict = field(default_factory=dict)
    split: str = "train"

    def to_json(self, cfg: WorldConfig) -> dict:
        return {
            "index": self.index,
            "scene": self.scene.to_json(),
            "instruction_tokens": self.instruction.tokens(cfg),
            "expert_tokens": list(self.expert_tokens),
            "labels": dict(self.labels),
            "split": self.split,
        }

    @classmethod
    def from_json(cls, d: dict, cfg: WorldConfig) -> Episode:
        return cls(
            index=int(d["index"]),
            scene=GridScene.from_json(d["scene"]),
            instruction=Instruction.from_tokens(d["instruction_tokens"], cfg),
            expert_tokens=[int(t) for t in d["expert_tokens"]],
            labels=dict(d["labels"]),
            split=d.get("split", "train"),
        )


@dataclass(frozen=True)
class UnlearnRequest:
    """Which episodes to forget; default is every episode whose target is red."""

    key: str = "target_color"
    value: str = "red"

    @property
    def description(self) -> str:
        return f"{self.key}=={self.value}"

    def __call__(self, ep: Episode) -> bool:
        return ep.labels.get(self.key) == self.value

    def forbids(self, obj: GridObject) -> bool:
        """Whether grasping ``obj`` counts as a violation of this request."""
        if self.key == "target_color":
            return obj.color == self.value
        if self.key == "target_shape":
            return obj.shape == self.value
        return False


@dataclass
class DataSplits:
    forget: list[Episode]
    retain: list[Episode]
    boundary: list[Episode]
    mismatch_pairs: list[tuple[int, int]]  # (forget episode index, counterpart episode index)


@dataclass(frozen=True)
class RolloutOutcome:
    success: bool
    violation: bool
    steps: int
    grasped: GridObject | None = None


# ---------------------------------------------------------------- encoding

def scene_channels(scene: GridScene, cfg: WorldConfig) -> np.ndarray:
    """Per-cell features: color one-hot, shape one-hot, agent flag, one-hot row and column offset from the agent."""
    n = scene.n
    if n != cfg.grid_n:
        raise ValueError(f"scene is {n}x{n} but the encoding expects {cfg.grid_n}x{cfg.grid_n}")
    nc, ns = len(cfg.colors), len(cfg.shapes)
    out = np.zeros((n * n, cfg.n_channels), dtype=np.float32)
    for o in scene.objects:
        k = o.cell[0] * n + o.cell[1]
        out[k, cfg.colors.index(o.color)] = 1.0
        out[k, nc + cfg.shapes.index(o.shape)] = 1.0
    ar, ac = scene.agent
    out[ar * n + ac, nc + ns] = 1.0
    # offsets span -(n-1)..(n-1); one-hot keeps step counts linearly readable
    base = nc + ns + 1
    rows, cols = np.divmod(np.arange(n * n), n)
    k = np.arange(n * n)
    out[k, base + rows - ar + n - 1] = 1.0
    out[k, base + 2 * n - 1 + cols - ac + n - 1] = 1.0
    return out


# ---------------------------------------------------------------- expert

def expert_actions(scene: GridScene, instruction: Instruction) -> list[int]:
    """BOS, shortest path (lexicographically smallest under UP<DOWN<LEFT<RIGHT), GRASP, EOS."""
    goal = instruction.target(scene).cell
    n = scene.n
    start = tuple(scene.agent)
    parent: dict[tuple[int, int], tuple[tuple[int, int], int] | None] = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if cur == goal:
            break
        for move in (UP, DOWN, LEFT, RIGHT):
            dr, dc = MOVES[move]
            nxt = (cur[0] + dr, cur[1] + dc)
            if 0 <= nxt[0] < n and 0 <= nxt[1] < n and nxt not in parent:
                parent[nxt] = (cur, move)
                queue.append(nxt)
    if goal not in parent:
        raise ValueError(f"target cell {goal} unreachable")
    moves: list[int] = []
    node = goal
    while parent[node] is not None:
        node, move = parent[node]
        moves.append(move)
    return [BOS] + moves[::-1] + [GRASP, EOS]


# ---------------------------------------------------------------- generation

def _random_scene(rng: np.random.Generator, cfg: WorldConfig, need_color: str | None, avoid_color: str | None) -> GridScene:
    n = cfg.grid_n
    k = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    combos = [(c, s) for c in cfg.colors for s in cfg.shapes]
    while True:
        picks = rng.choice(len(combos), size=k, replace=False)
        chosen = [combos[i] for i in picks]
        colors = [c for c, _ in chosen]
        if need_color is not None and need_color not in colors:
            continue
        if avoid_color is not None and all(c == avoid_color for c in colors):
            continue
        break
    cells = rng.choice(n * n, size=k + 1, replace=False)
    objs = tuple(GridObject(c, s, (int(cell // n), int(cell % n))) for (c, s), cell in zip(chosen, cells[:k]))
    agent = (int(cells[k] // n), int(cells[k] % n))
    return GridScene(n, objs, agent)


def _pick_target(rng, scene: GridScene, want_red: bool, red: str, exclude: GridObject | None) -> GridObject | None:
    cands = [o for o in scene.objects if (o.color == red) == want_red and o != exclude]
    if not cands:
        return None
    return cands[int(rng.integers(len(cands)))]


def make_episode(index: int, scene: GridScene, target: GridObject, cfg: WorldConfig) -> Episode:
    instr = Instruction(target.color, target.shape)
    tokens = expert_actions(scene, instr)
    labels = {"target_color": target.color, "target_shape": target.shape}
    return Episode(index, scene, instr, tokens, labels)


def gen_episodes(seed: int, count: int, cfg: WorldConfig = WorldConfig(), forget_color: str = "red") -> list[Episode]:
    """Seeded corpus where exactly round(forget_fraction * count) targets have ``forget_color``."""
    if count < 1:
        raise ConfigError("count must be at least 1")
    cfg.validate()
    if forget_color not in cfg.colors or len(cfg.colors) < 2:
        raise ConfigError("forget color must be one of at least two colors")
    rng = np.random.default_rng(seed)
    n_red = int(round(cfg.forget_fraction * count))
    flags = np.zeros(count, dtype=bool)
    flags[:n_red] = True
    rng.shuffle(flags)
    episodes: list[Episode] = []
    for i, want_red in enumerate(flags):
        target = None
        if episodes and rng.random() < cfg.share_prob:
            prev = episodes[-1]
            scene = prev.scene
            target = _pick_target(rng, scene, bool(want_red), forget_color, prev.instruction.target(scene))
        if target is None:
            scene = _random_scene(
                rng, cfg, need_color=forget_color if want_red else None, avoid_color=None if want_red else forget_color
            )
            target = _pick_target(rng, scene, bool(want_red), forget_color, None)
        episodes.append(make_episode(i, scene, target, cfg))
    return episodes


def assign_splits(episodes: list[Episode], seed: int, fractions=(0.70, 0.15, 0.15)) -> None:
    """Tag each episode train/val/test in place with a seeded permutation."""
    n = len(episodes)
    order = np.random.default_rng(seed + 7919).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    for rank, idx in enumerate(order):
        episodes[idx].split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")


# ---------------------------------------------------------------- splits

def similarity(a: Episode, b: Episode) -> tuple[int, int, int]:
    """(shared objects incl. cell, same layout flag, instruction token overlap)."""
    sa = {(o.color, o.shape, o.cell) for o in a.scene.objects}
    sb = {(o.color, o.shape, o.cell) for o in b.scene.objects}
    shared = len(sa & sb)
    layout = int(a.scene.layout_key() == b.scene.layout_key())
    overlap = sum(x == y for x, y in zip(a.instruction.words(), b.instruction.words()))
    return shared, layout, overlap


def rank_neighbors(query: Episode, pool: Sequence[Episode]) -> list[int]:
    """Positions in ``pool`` sorted by descending similarity, ties by ascending position."""
    keyed = [(similarity(query, ep), i) for i, ep in enumerate(pool)]
    keyed.sort(key=lambda kv: (tuple(-x for x in kv[0]), kv[1]))
    return [i for _, i in keyed]


def build_splits(episodes: Sequence[Episode], request: UnlearnRequest, m_per_forget: int = 1) -> DataSplits:
    forget = [ep for ep in episodes if request(ep)]
    others = [ep for ep in episodes if not request(ep)]
    if not forget:
        raise ValueError(f"no episodes satisfy the request {request.description}")
    if not others:
        raise ValueError(f"every episode satisfies the request {request.description}; retain side is empty")
    boundary_pos: list[int] = []
    seen: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for ep in forget:
        ranked = rank_neighbors(ep, others)
        for pos in ranked[:m_per_forget]:
            if pos not in seen:
                seen.add(pos)
                boundary_pos.append(pos)
        # counterpart prefers the same layout, then shared objects, then instruction overlap
        best = min(
            range(len(others)),
            key=lambda i: (-similarity(ep, others[i])[1], -similarity(ep, others[i])[0], -similarity(ep, others[i])[2], i),
        )
        pairs.append((ep.index, others[best].index))
    boundary = [others[i] for i in sorted(boundary_pos)]
    retain = [ep for i, ep in enumerate(others) if i not in seen]
    if not retain:
        raise ValueError(f"retain set is empty after boundary selection for {request.description}")
    return DataSplits(forget, retain, boundary, pairs)


# ---------------------------------------------------------------- simulation

def execute(tokens: Iterable[int], scene: GridScene, instruction: Instruction, request: UnlearnRequest, max_steps: int) -> RolloutOutcome:
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    target = instruction.target(scene)
    r, c = scene.agent
    n = scene.n
    steps = 0
    for tok in tokens:
        if steps >= max_steps:
            break
        tok = int(tok)
        if tok in (BOS, PAD):
            continue
        steps += 1
        if tok in (STOP, EOS):
            break
        if tok in MOVES:
            dr, dc = MOVES[tok]
            r = min(max(r + dr, 0), n - 1)
            c = min(max(c + dc, 0), n - 1)
        elif tok == GRASP:
            obj = scene.object_at((r, c))
            if obj is not None:
                return RolloutOutcome(obj == target, request.forbids(obj), steps, obj)
    return RolloutOutcome(False, False, steps, None)


def simulate(policy_or_tokens, scene: GridScene, instruction: Instruction, max_steps: int = 24,
             request: UnlearnRequest = UnlearnRequest(), cfg: WorldConfig | None = None) -> RolloutOutcome:
    """Run a token list, or a policy exposing ``generate(scene, instruction, max_len)``, on the grid."""
    if callable(getattr(policy_or_tokens, "generate", None)):
        tokens = policy_or_tokens.generate(scene, instruction, max_len=max_steps)
    elif callable(policy_or_tokens) and not isinstance(policy_or_tokens, (list, tuple)):
        tokens = policy_or_tokens(scene, instruction)
    else:
        tokens = policy_or_tokens
    return execute(tokens, scene, instruction, request, max_steps)


# ---------------------------------------------------------------- dataset files

def write_dataset(episodes: Sequence[Episode], out_dir: Path, cfg: WorldConfig) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "episodes.jsonl", "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json(cfg), sort_keys=True, separators=(",", ":")) + "\n")
    vocab = {"actions": list(ACTIONS), "instruction": list(cfg.instr_vocab)}
    (out_dir / "vocab.json").write_text(json.dumps(vocab, indent=2, sort_keys=True) + "\n")


def read_dataset(path: Path, cfg: WorldConfig) -> list[Episode]:
    path = Path(path)
    if path.is_dir():
        path = path / "episodes.jsonl"
    with open(path) as fh:
        return [Episode.from_json(json.loads(line), cfg) for line in fh if line.strip()]


def filter_split(episodes: Iterable[Episode], split: str) -> list[Episode]:
    return [ep for ep in episodes if ep.split == split]

