"""Procedural gridworld stand-in for an embodied instruction-following benchmark.

Scenes are 8x8 grids (perimeter walls included) holding a few coloured
objects. Frames are allocentric top-down renders with an agent marker;
each grid cell is ``cell_px`` pixels square. Small object glyphs cover at
most 4 pixels, large glyphs at least 9.
"""
from __future__ import annotations

import base64
import hashlib
import json
import zlib
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# -- vocabularies -----------------------------------------------------------

ACTIONS = ("forward", "turn_left", "turn_right", "pickup", "put", "toggle", "stop")
ACTION_ID = {a: i for i, a in enumerate(ACTIONS)}
INTERACTIONS = frozenset({ACTION_ID["pickup"], ACTION_ID["put"], ACTION_ID["toggle"]})
STOP = ACTION_ID["stop"]

SMALL, LARGE = "small", "large"
# Glyph footprints below this many pixels count as small objects.
SMALL_AREA_THRESHOLD = 5

# name: (size class, capabilities, 4x4 glyph)
OBJECT_CLASSES = {
    "key": (SMALL, {"pickup"}, ("....", ".##.", "..#.", "....")),
    "pencil": (SMALL, {"pickup"}, (".#..", ".#..", ".#..", ".#..")),
    "apple": (SMALL, {"pickup"}, ("....", ".##.", ".##.", "....")),
    "phone": (SMALL, {"pickup", "toggle"}, ("....", ".#..", "..#.", "....")),
    "book": (LARGE, {"pickup"}, ("####", "####", "####", "....")),
    "pillow": (LARGE, {"pickup"}, ("####", "#..#", "#..#", "####")),
    "lamp": (LARGE, {"toggle"}, ("####", ".##.", ".##.", ".##.")),
    "tv": (LARGE, {"toggle"}, ("####", "####", "#..#", "#..#")),
    "chair": (LARGE, {"receptacle"}, ("#...", "#..#", "####", "#..#")),
    "table": (LARGE, {"receptacle"}, ("####", "#..#", "#..#", "#..#")),
}

# Low-frequency synonyms; their train-corpus count is held in [1, 29].
RARE_ALIASES = {
    "key": "fob", "pencil": "stylus", "apple": "pippin", "phone": "handset",
    "book": "tome", "pillow": "cushion", "lamp": "lantern", "tv": "telly",
    "chair": "armchair", "table": "desk",
}
ALIAS_TO_CLASS = {v: k for k, v in RARE_ALIASES.items()}

COLORS = {
    "red": (230, 25, 25), "green": (30, 200, 30), "blue": (40, 80, 240),
    "yellow": (240, 220, 30), "purple": (160, 40, 200), "orange": (250, 140, 20),
    "cyan": (30, 220, 220), "pink": (250, 120, 190),
}
AGENT_COLOR = (255, 255, 255)

# palette id -> (background, wall)
PALETTES = {
    0: ((0, 0, 0), (100, 100, 100)),
    1: ((20, 20, 40), (90, 90, 120)),
    2: ((40, 20, 20), (120, 90, 80)),
    3: ((20, 40, 20), (80, 110, 80)),
    4: ((30, 30, 30), (130, 130, 130)),
    5: ((10, 25, 35), (70, 100, 110)),
    6: ((45, 35, 10), (140, 120, 70)),
    7: ((35, 10, 40), (110, 70, 120)),
    8: ((15, 45, 45), (60, 130, 130)),
}

DIRS = ((-1, 0), (0, 1), (1, 0), (0, -1))  # N, E, S, W

TEMPLATES = {
    "pickup": (("pick", "up", "the", "A"), ("go", "to", "the", "A", "and", "pick", "it", "up"),
               ("grab", "the", "A")),
    "toggle": (("turn", "on", "the", "A"), ("walk", "to", "the", "A", "and", "switch", "it", "on")),
    "place": (("put", "the", "A", "on", "the", "B"),
              ("pick", "up", "the", "A", "then", "place", "it", "on", "the", "B")),
    "toggle_pickup": (("turn", "on", "the", "A", "then", "pick", "up", "the", "B"),
                      ("switch", "on", "the", "A", "and", "grab", "the", "B")),
}
CAPTION_WORDS = ("a", "and", "nothing")
SPECIAL_TOKENS = ("<pad>", "<unk>")


class ObjectVocab:
    """Ordered object class names; ``none`` is always the final entry."""

    def __init__(self, names: Sequence[str] = tuple(OBJECT_CLASSES)):
        names = [n for n in names if n != "none"]
        if len(set(names)) != len(names):
            raise ValueError("object names must be unique")
        self.names = tuple(names) + ("none",)
        self.index = {n: i for i, n in enumerate(self.names)}

    @property
    def none_id(self) -> int:
        return len(self.names) - 1

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i):
        return self.names[i]


OBJECT_VOCAB = ObjectVocab()


def build_token_vocab() -> list[str]:
    """Every token the generator can emit, specials first then sorted."""
    words = set(CAPTION_WORDS) | set(OBJECT_CLASSES) | set(RARE_ALIASES.values()) | set(COLORS)
    words.add("none")
    for temps in TEMPLATES.values():
        for t in temps:
            words.update(w for w in t if w not in ("A", "B"))
    return list(SPECIAL_TOKENS) + sorted(words)


class GenerationError(RuntimeError):
    pass


class PlanningError(RuntimeError):
    pass


# -- scenes -----------------------------------------------------------------

@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    color: str
    size_class: str
    position: tuple[int, int]

    @property
    def name(self) -> str:
        return OBJECT_VOCAB[self.class_id]


@dataclass(frozen=True)
class Scene:
    grid_size: int
    walls: tuple[tuple[int, int], ...]
    objects: tuple[ObjectSpec, ...]
    agent_start: tuple[int, int, int]
    palette_id: int

    @property
    def layout_hash(self) -> str:
        n = self.grid_size
        interior = sorted(w for w in self.walls if 0 < w[0] < n - 1 and 0 < w[1] < n - 1)
        return hashlib.sha1(json.dumps(interior).encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "walls": [list(w) for w in self.walls],
            "objects": [{"class_id": o.class_id, "color": o.color, "size_class": o.size_class,
                         "position": list(o.position)} for o in self.objects],
            "agent_start": list(self.agent_start),
            "palette_id": self.palette_id,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(
            grid_size=d["grid_size"],
            walls=tuple(tuple(w) for w in d["walls"]),
            objects=tuple(ObjectSpec(o["class_id"], o["color"], o["size_class"], tuple(o["position"]))
                          for o in d["objects"]),
            agent_start=tuple(d["agent_start"]),
            palette_id=d["palette_id"],
        )


# difficulty -> (object count, interior wall segments)
DIFFICULTY = {0: (2, 0), 1: (3, 1), 2: (4, 2), 3: (5, 3)}


def _flood(start, passable) -> set:
    seen = {start}
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for dr, dc in DIRS:
            nxt = (r + dr, c + dc)
            if nxt not in seen and passable(nxt):
                seen.add(nxt)
                queue.append(nxt)
    return seen


def generate_scene(rng_seed: int, palette_id: int, difficulty: int = 1, grid_size: int = 8,
                   max_tries: int = 200) -> Scene:
    """Random solvable scene: every object has a free neighbour reachable from the start."""
    if palette_id not in PALETTES:
        raise ValueError(f"unknown palette {palette_id}")
    if difficulty not in DIFFICULTY:
        raise ValueError(f"difficulty must be one of {sorted(DIFFICULTY)}")
    n_obj, n_seg = DIFFICULTY[difficulty]
    rng = np.random.default_rng(rng_seed)
    n = grid_size
    perimeter = {(r, c) for r in range(n) for c in range(n) if r in (0, n - 1) or c in (0, n - 1)}
    interior = [(r, c) for r in range(1, n - 1) for c in range(1, n - 1)]
    names = list(OBJECT_VOCAB.names[:-1])
    small = [i for i, nm in enumerate(names) if OBJECT_CLASSES[nm][0] == SMALL]
    large = [i for i, nm in enumerate(names) if OBJECT_CLASSES[nm][0] == LARGE]
    for _ in range(max_tries):
        walls = set(perimeter)
        for _ in range(n_seg):
            r, c = interior[rng.integers(len(interior))]
            dr, dc = DIRS[rng.integers(2) * 1 + 1]  # east or south
            for k in range(int(rng.integers(2, 4))):
                cell = (r + k * dr, c + k * dc)
                if cell in perimeter:
                    break
                walls.add(cell)
        free = [p for p in interior if p not in walls]
        if len(free) < n_obj + 2:
            continue
        if len(_flood(free[0], lambda p: p in free)) != len(free):
            continue
        classes = [int(rng.choice(small)), int(rng.choice(large))]
        rest = [i for i in small + large if i not in classes]
        classes += [int(x) for x in rng.choice(rest, size=n_obj - 2, replace=False)]
        cells = rng.choice(len(free), size=n_obj + 1, replace=False)
        objs = []
        for cid, ci in zip(classes, cells[:-1]):
            color = list(COLORS)[rng.integers(len(COLORS))]
            objs.append(ObjectSpec(cid, color, OBJECT_CLASSES[names[cid]][0], free[ci]))
        start = free[cells[-1]]
        occupied = {o.position for o in objs} | walls
        reach = _flood(start, lambda p: p not in occupied)
        if all(any((o.position[0] + dr, o.position[1] + dc) in reach for dr, dc in DIRS) for o in objs):
            order = sorted(objs, key=lambda o: o.position)
            return Scene(n, tuple(sorted(walls)), tuple(order),
                         (start[0], start[1], int(rng.integers(4))), palette_id)
    raise GenerationError(f"could not place scene after {max_tries} tries (seed {rng_seed})")


# -- simulator --------------------------------------------------------------

class Simulator:
    """Mutable world state for one episode."""

    def __init__(self, scene: Scene):
        self.scene = scene
        self.walls = set(scene.walls)
        self.positions: list[tuple[int, int] | None] = [o.position for o in scene.objects]
        self.toggled = [False] * len(scene.objects)
        self.holding: int | None = None
        r, c, d = scene.agent_start
        self.pose = (r, c, d)

    def front_cell(self) -> tuple[int, int]:
        r, c, d = self.pose
        return r + DIRS[d][0], c + DIRS[d][1]

    def objects_at(self, cell) -> list[int]:
        return [i for i, p in enumerate(self.positions) if p == cell]

    def step(self, action: int, object_id: int | None = None) -> bool:
        """Apply one action; returns whether it changed the world."""
        r, c, d = self.pose
        name = ACTIONS[action]
        if name == "forward":
            nxt = self.front_cell()
            if nxt in self.walls or self.objects_at(nxt):
                return False
            self.pose = (nxt[0], nxt[1], d)
            return True
        if name == "turn_left":
            self.pose = (r, c, (d - 1) % 4)
            return True
        if name == "turn_right":
            self.pose = (r, c, (d + 1) % 4)
            return True
        if name == "stop" or object_id is None:
            return False
        here = self.objects_at(self.front_cell())
        # topmost object first (a placed object sits on its receptacle)
        here = sorted(here, key=lambda i: self.scene.objects[i].class_id != object_id)
        objs = self.scene.objects
        if name == "pickup":
            if self.holding is None:
                for i in here:
                    if objs[i].class_id == object_id and "pickup" in OBJECT_CLASSES[objs[i].name][1]:
                        self.holding = i
                        self.positions[i] = None
                        return True
            return False
        if name == "put":
            if self.holding is not None:
                for i in here:
                    if objs[i].class_id == object_id and "receptacle" in OBJECT_CLASSES[objs[i].name][1]:
                        self.positions[self.holding] = self.positions[i]
                        self.holding = None
                        return True
            return False
        if name == "toggle":
            for i in here:
                if objs[i].class_id == object_id and "toggle" in OBJECT_CLASSES[objs[i].name][1]:
                    self.toggled[i] = not self.toggled[i]
                    return True
        return False

    def condition_met(self, cond: Sequence) -> bool:
        objs = self.scene.objects
        kind = cond[0]
        if kind == "holding":
            return self.holding is not None and objs[self.holding].class_id == cond[1]
        if kind == "toggled":
            return any(t and objs[i].class_id == cond[1] for i, t in enumerate(self.toggled))
        if kind == "object_at":
            cell = tuple(cond[2])
            return any(objs[i].class_id == cond[1] and p == cell for i, p in enumerate(self.positions))
        raise ValueError(f"unknown goal predicate {kind!r}")

    def goal_fraction(self, conditions: Sequence) -> float:
        if not conditions:
            return 1.0
        return sum(self.condition_met(c) for c in conditions) / len(conditions)

    def render(self, cell_px: int = 4) -> np.ndarray:
        return render_frame(self.scene, self.pose, cell_px=cell_px, positions=self.positions,
                            toggled=self.toggled, holding=self.holding)


def _glyph_mask(name: str, cell_px: int) -> np.ndarray:
    rows = OBJECT_CLASSES[name][2]
    g = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
    if cell_px != 4:
        out = np.zeros((cell_px, cell_px), dtype=bool)
        k = min(cell_px, 4)
        out[:k, :k] = g[:k, :k]
        return out
    return g


def _agent_mask(direction: int, cell_px: int) -> tuple[np.ndarray, np.ndarray]:
    body = np.zeros((cell_px, cell_px), dtype=bool)
    m = cell_px // 2
    body[m - 1:m + 1, m - 1:m + 1] = True
    nose = np.zeros_like(body)
    if direction == 0:
        nose[0, m - 1:m + 1] = True
    elif direction == 1:
        nose[m - 1:m + 1, -1] = True
    elif direction == 2:
        nose[-1, m - 1:m + 1] = True
    else:
        nose[m - 1:m + 1, 0] = True
    return body, nose


def render_frame(scene: Scene, agent_pose, cell_px: int = 4, positions=None, toggled=None,
                 holding: int | None = None, show_agent: bool = True) -> np.ndarray:
    """Top-down uint8 raster (H, W, 3); divide by 255 for the [0, 1] image."""
    n = scene.grid_size
    bg, wall = PALETTES[scene.palette_id]
    img = np.empty((n * cell_px, n * cell_px, 3), dtype=np.uint8)
    img[:] = bg
    for r, c in scene.walls:
        img[r * cell_px:(r + 1) * cell_px, c * cell_px:(c + 1) * cell_px] = wall
    positions = [o.position for o in scene.objects] if positions is None else positions
    toggled = [False] * len(scene.objects) if toggled is None else toggled
    # receptacles first so placed objects draw on top
    order = sorted(range(len(scene.objects)),
                   key=lambda i: "receptacle" not in OBJECT_CLASSES[scene.objects[i].name][1])
    for i in order:
        pos = positions[i]
        if pos is None:
            continue
        obj = scene.objects[i]
        mask = _glyph_mask(obj.name, cell_px)
        cell = img[pos[0] * cell_px:(pos[0] + 1) * cell_px, pos[1] * cell_px:(pos[1] + 1) * cell_px]
        cell[mask] = COLORS[obj.color]
        if toggled[i]:
            rr, cc = np.argwhere(mask)[0]
            cell[rr, cc] = AGENT_COLOR
    if show_agent and agent_pose is not None:
        r, c, d = agent_pose
        body, nose = _agent_mask(d, cell_px)
        cell = img[r * cell_px:(r + 1) * cell_px, c * cell_px:(c + 1) * cell_px]
        cell[body] = COLORS[scene.objects[holding].color] if holding is not None else AGENT_COLOR
        cell[nose] = AGENT_COLOR
    return img


def to_float(frames: np.ndarray) -> np.ndarray:
    return frames.astype(np.float32) / np.float32(255.0)


# -- goals, instructions, expert --------------------------------------------

@dataclass(frozen=True)
class Goal:
    kind: str
    targets: tuple[int, ...]  # object indices within the scene

    def conditions(self, scene: Scene) -> list[list]:
        objs = scene.objects
        if self.kind == "pickup":
            return [["holding", objs[self.targets[0]].class_id]]
        if self.kind == "toggle":
            return [["toggled", objs[self.targets[0]].class_id]]
        if self.kind == "place":
            o, r = self.targets
            return [["object_at", objs[o].class_id, list(objs[r].position)]]
        if self.kind == "toggle_pickup":
            a, b = self.targets
            return [["toggled", objs[a].class_id], ["holding", objs[b].class_id]]
        raise ValueError(f"unknown goal kind {self.kind!r}")

    @property
    def primary_target(self) -> int:
        """Index of the object the task manipulates (picked up, placed or toggled)."""
        if self.kind in ("place",):
            return self.targets[0]
        return self.targets[-1]


def feasible_goals(scene: Scene) -> list[Goal]:
    caps = [OBJECT_CLASSES[o.name][1] for o in scene.objects]
    pick = [i for i, c in enumerate(caps) if "pickup" in c]
    tog = [i for i, c in enumerate(caps) if "toggle" in c]
    rec = [i for i, c in enumerate(caps) if "receptacle" in c]
    goals = [Goal("pickup", (i,)) for i in pick]
    goals += [Goal("toggle", (i,)) for i in tog]
    goals += [Goal("place", (o, r)) for o in pick for r in rec]
    goals += [Goal("toggle_pickup", (a, b)) for a in tog for b in pick if a != b]
    return goals


def sample_goal(scene: Scene, rng: np.random.Generator) -> Goal:
    goals = feasible_goals(scene)
    kinds = sorted({g.kind for g in goals})
    kind = kinds[rng.integers(len(kinds))]
    pool = [g for g in goals if g.kind == kind]
    return pool[rng.integers(len(pool))]


def generate_instruction(scene: Scene, goal: Goal, rng_seed: int, modifier_prob: float = 0.3,
                         rare_prob: float = 0.0, force_rare: bool = False,
                         allow_rare: Iterable[str] | None = None) -> tuple[list[str], dict]:
    """Templated instruction tokens plus flags describing how mentions were realised.

    ``allow_rare`` restricts which classes may be replaced by their rare alias;
    ``force_rare`` replaces the first allowed mention regardless of ``rare_prob``.
    """
    rng = np.random.default_rng(rng_seed)
    temps = TEMPLATES[goal.kind]
    template = temps[rng.integers(len(temps))]
    allowed = set(OBJECT_CLASSES) if allow_rare is None else set(allow_rare)
    slots = {"A": goal.targets[0], "B": goal.targets[-1]}
    tokens: list[str] = []
    modifier = False
    aliases: list[str] = []
    for w in template:
        if w not in slots:
            tokens.append(w)
            continue
        obj = scene.objects[slots[w]]
        if rng.random() < modifier_prob:
            tokens.append(obj.color)
            modifier = True
        use_rare = rng.random() < rare_prob
        if obj.name in allowed and (use_rare or (force_rare and not aliases)):
            tokens.append(RARE_ALIASES[obj.name])
            aliases.append(RARE_ALIASES[obj.name])
        else:
            tokens.append(obj.name)
    return tokens, {"object_properties": modifier, "rare_aliases": aliases}


def _nav_plan(sim: Simulator, target_cell) -> list[int]:
    """Shortest forward/turn sequence ending adjacent to and facing ``target_cell``."""
    blocked = sim.walls | {p for p in sim.positions if p is not None}
    start = sim.pose
    prev = {start: None}
    queue = deque([start])
    while queue:
        state = queue.popleft()
        r, c, d = state
        if (r + DIRS[d][0], c + DIRS[d][1]) == tuple(target_cell):
            acts = []
            while prev[state] is not None:
                state, a = prev[state]
                acts.append(a)
            return acts[::-1]
        fr, fc = r + DIRS[d][0], c + DIRS[d][1]
        succ = [((r, c, (d - 1) % 4), ACTION_ID["turn_left"]),
                ((r, c, (d + 1) % 4), ACTION_ID["turn_right"])]
        if (fr, fc) not in blocked:
            succ.insert(0, ((fr, fc, d), ACTION_ID["forward"]))
        for nxt, a in succ:
            if nxt not in prev:
                prev[nxt] = (state, a)
                queue.append(nxt)
    raise PlanningError(f"cell {target_cell} unreachable from {start}")


def plan_expert(scene: Scene, goal: Goal) -> tuple[list[int], list[int]]:
    """Expert action ids and per-step gold object ids (``none`` off interactions)."""
    sim = Simulator(scene)
    objs = scene.objects
    if goal.kind == "pickup":
        steps = [("pickup", goal.targets[0])]
    elif goal.kind == "toggle":
        steps = [("toggle", goal.targets[0])]
    elif goal.kind == "place":
        steps = [("pickup", goal.targets[0]), ("put", goal.targets[1])]
    elif goal.kind == "toggle_pickup":
        steps = [("toggle", goal.targets[0]), ("pickup", goal.targets[1])]
    else:
        raise PlanningError(f"unknown goal kind {goal.kind!r}")
    actions: list[int] = []
    gold: list[int] = []
    none = OBJECT_VOCAB.none_id
    for verb, idx in steps:
        target_cell = sim.positions[idx]
        if target_cell is None:
            raise PlanningError(f"object {idx} not on the grid")
        for a in _nav_plan(sim, target_cell):
            sim.step(a)
            actions.append(a)
            gold.append(none)
        a = ACTION_ID[verb]
        if not sim.step(a, objs[idx].class_id):
            raise PlanningError(f"{verb} on {objs[idx].name} failed")
        actions.append(a)
        gold.append(objs[idx].class_id)
    actions.append(STOP)
    gold.append(none)
    return actions, gold


# -- episodes and datasets --------------------------------------------------

@dataclass
class Episode:
    episode_id: str
    scene: Scene
    goal: Goal
    instruction: list[str]
    frames: np.ndarray  # uint8 (T, H, W, 3)
    expert_actions: list[int]
    gold_objects: list[int]
    goal_conditions: list[list]
    flags: dict = field(default_factory=dict)

    @property
    def target(self) -> ObjectSpec:
        return self.scene.objects[self.goal.primary_target]

    def __len__(self):
        return len(self.expert_actions)

    def to_json(self) -> dict:
        t, h, w, _ = self.frames.shape
        return {
            "episode_id": self.episode_id,
            "scene": self.scene.to_json(),
            "goal": {"kind": self.goal.kind, "targets": list(self.goal.targets)},
            "instruction": self.instruction,
            "frames_shape": [t, h, w, 3],
            "frames_b64": base64.b64encode(zlib.compress(self.frames.tobytes(), 6)).decode("ascii"),
            "actions": self.expert_actions,
            "gold_objects": self.gold_objects,
            "goal_conditions": self.goal_conditions,
            "flags": self.flags,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Episode":
        raw = zlib.decompress(base64.b64decode(d["frames_b64"]))
        frames = np.frombuffer(raw, dtype=np.uint8).reshape(d["frames_shape"]).copy()
        return cls(d["episode_id"], Scene.from_json(d["scene"]),
                   Goal(d["goal"]["kind"], tuple(d["goal"]["targets"])), list(d["instruction"]),
                   frames, list(d["actions"]), list(d["gold_objects"]), d["goal_conditions"],
                   dict(d["flags"]))


def replay(scene: Scene, actions: Sequence[int], objects: Sequence[int], cell_px: int = 4):
    """Run an action/object sequence; returns (frames before each action, final simulator)."""
    sim = Simulator(scene)
    frames = []
    for a, o in zip(actions, objects):
        frames.append(sim.render(cell_px))
        sim.step(a, o)
    if not frames:
        n = scene.grid_size * cell_px
        return np.zeros((0, n, n, 3), dtype=np.uint8), sim
    return np.stack(frames), sim


@dataclass
class WorldConfig:
    n_train: int = 2000
    n_valid_seen: int = 100
    n_valid_unseen: int = 300
    grid_size: int = 8
    cell_px: int = 4
    difficulties: tuple = (1, 2)
    modifier_prob: float = 0.3
    rare_prob_train: float = 0.01
    rare_prob_eval: float = 0.15
    rare_cap: int = 29
    train_palettes: tuple = (0, 1, 2, 3, 4, 5)
    unseen_palettes: tuple = (6, 7, 8)
    max_episode_len: int = 40

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown worldgen config fields: {sorted(unknown)}")
        for k in ("difficulties", "train_palettes", "unseen_palettes"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)

    def validate(self):
        if set(self.train_palettes) & set(self.unseen_palettes):
            raise ValueError("train and unseen palettes must be disjoint")
        if not set(self.train_palettes) | set(self.unseen_palettes) <= set(PALETTES):
            raise ValueError("unknown palette id in config")
        if any(n < 0 for n in (self.n_train, self.n_valid_seen, self.n_valid_unseen)):
            raise ValueError("split sizes must be non-negative")


SPLITS = ("train", "valid_seen", "valid_unseen")


def episode_seed(master_seed: int, split: str, index: int, attempt: int = 0) -> int:
    ss = np.random.SeedSequence([master_seed, SPLITS.index(split), index, attempt])
    return int(ss.generate_state(1)[0])


def make_episode(split: str, index: int, master_seed: int, cfg: WorldConfig, palettes,
                 rare_prob: float, forbid_layouts=frozenset(), allow_rare=None,
                 force_rare: bool = False) -> Episode:
    for attempt in range(50):
        seed = episode_seed(master_seed, split, index, attempt)
        rng = np.random.default_rng(seed)
        palette = int(palettes[rng.integers(len(palettes))])
        difficulty = int(cfg.difficulties[rng.integers(len(cfg.difficulties))])
        scene = generate_scene(int(rng.integers(2**31)), palette, difficulty, cfg.grid_size)
        if scene.layout_hash in forbid_layouts:
            continue
        goal = sample_goal(scene, rng)
        actions, gold = plan_expert(scene, goal)
        if len(actions) > cfg.max_episode_len:
            continue
        tokens, gen_flags = generate_instruction(scene, goal, int(rng.integers(2**31)),
                                                 cfg.modifier_prob, rare_prob,
                                                 force_rare=force_rare, allow_rare=allow_rare)
        if force_rare and not gen_flags["rare_aliases"]:
            continue
        frames, _ = replay(scene, actions, gold, cfg.cell_px)
        target = scene.objects[goal.primary_target]
        flags = {
            "object_properties": gen_flags["object_properties"],
            "small_objects": target.size_class == SMALL,
            "rare_aliases": gen_flags["rare_aliases"],
        }
        return Episode(f"{split}-{index:05d}", scene, goal, tokens, frames, actions, gold,
                       goal.conditions(scene), flags)
    raise GenerationError(f"could not generate episode {split}/{index}")


@dataclass
class SplitSpec:
    train: list
    valid_seen: list
    valid_unseen: list

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    splits: dict[str, list[Episode]]
    vocab: list[str]
    frequencies: dict[str, int]
    split_spec: SplitSpec
    config: WorldConfig

    @property
    def token_id(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.vocab)}

    def encode(self, tokens: Sequence[str]) -> list[int]:
        ids = self.token_id
        return [ids.get(t, ids["<unk>"]) for t in tokens]


def frequency_table(episodes: Iterable[Episode]) -> dict[str, int]:
    counts = Counter()
    for ep in episodes:
        counts.update(ep.instruction)
    return dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


def _scene_record(ep: Episode) -> dict:
    return {"episode_id": ep.episode_id, "palette_id": ep.scene.palette_id,
            "layout_hash": ep.scene.layout_hash}


def generate_dataset(cfg: WorldConfig, rng_seed: int) -> Dataset:
    """Generate all splits in memory (see :func:`build_dataset` for files)."""
    cfg.validate()
    train: list[Episode] = []
    alias_counts = Counter()
    for i in range(cfg.n_train):
        allow = [c for c, a in RARE_ALIASES.items() if alias_counts[a] < cfg.rare_cap]
        ep = make_episode("train", i, rng_seed, cfg, cfg.train_palettes, cfg.rare_prob_train,
                          allow_rare=allow)
        alias_counts.update(t for t in ep.instruction if t in ALIAS_TO_CLASS)
        train.append(ep)
    # every alias must occur at least once in train
    for alias in [a for a in RARE_ALIASES.values() if alias_counts[a] == 0]:
        cls = ALIAS_TO_CLASS[alias]
        for j, ep in enumerate(train):
            names = {ep.scene.objects[t].name for t in ep.goal.targets}
            if cls in names and not ep.flags["rare_aliases"]:
                train[j] = _regenerate_with_alias(ep, cls, cfg, rng_seed, j)
                alias_counts[alias] += 1
                break
    if cfg.n_train >= 200:
        bad = {a: alias_counts[a] for a in RARE_ALIASES.values()
               if not 1 <= alias_counts[a] <= cfg.rare_cap}
        if bad:
            raise GenerationError(f"rare alias frequencies out of range: {bad}")
    train_layouts = frozenset(ep.scene.layout_hash for ep in train)
    seen = [make_episode("valid_seen", i, rng_seed, cfg, cfg.train_palettes, cfg.rare_prob_eval)
            for i in range(cfg.n_valid_seen)]
    unseen = [make_episode("valid_unseen", i, rng_seed, cfg, cfg.unseen_palettes, cfg.rare_prob_eval,
                           forbid_layouts=train_layouts) for i in range(cfg.n_valid_unseen)]
    freqs = frequency_table(train)
    from .evalkit import subset_flags  # local import: evalkit depends on worldgen
    splits = {"train": train, "valid_seen": seen, "valid_unseen": unseen}
    for eps in splits.values():
        for ep in eps:
            ep.flags.update(subset_flags(ep, freqs))
    spec = SplitSpec(*[[_scene_record(e) for e in splits[s]] for s in SPLITS])
    return Dataset(splits, build_token_vocab(), freqs, spec, cfg)


def _regenerate_with_alias(ep: Episode, cls: str, cfg: WorldConfig, seed: int, index: int):
    rng = np.random.default_rng(episode_seed(seed, "train", index, 999))
    tokens, gen_flags = generate_instruction(ep.scene, ep.goal, int(rng.integers(2**31)),
                                             cfg.modifier_prob, 0.0, force_rare=True,
                                             allow_rare=[cls])
    flags = dict(ep.flags, object_properties=gen_flags["object_properties"],
                 rare_aliases=gen_flags["rare_aliases"])
    return Episode(ep.episode_id, ep.scene, ep.goal, tokens, ep.frames, ep.expert_actions,
                   ep.gold_objects, ep.goal_conditions, flags)


def build_dataset(cfg: WorldConfig, rng_seed: int, out_dir) -> Dataset:
    """Generate every split and write episode, vocabulary and frequency files."""
    ds = generate_dataset(cfg, rng_seed)
    save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: Dataset, out_dir):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split, eps in ds.splits.items():
            with open(out / f"{split}.jsonl", "w", encoding="utf-8") as fh:
                for ep in eps:
                    fh.write(json.dumps(ep.to_json(), sort_keys=True) + "\n")
        (out / "vocab.txt").write_text("".join(t + "\n" for t in ds.vocab), encoding="utf-8")
        (out / "freq.tsv").write_text("".join(f"{t}\t{c}\n" for t, c in ds.frequencies.items()),
                                      encoding="utf-8")
        (out / "splits.json").write_text(json.dumps(ds.split_spec.to_json(), sort_keys=True),
                                         encoding="utf-8")
        cfg = asdict(ds.config)
        (out / "worldgen.json").write_text(json.dumps(cfg, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise OSError(f"failed writing dataset to {out}: {e}") from e


def load_dataset(path, splits: Sequence[str] = SPLITS) -> Dataset:
    root = Path(path)
    if not (root / "vocab.txt").exists():
        raise FileNotFoundError(f"no dataset at {root} (vocab.txt missing)")
    vocab = (root / "vocab.txt").read_text(encoding="utf-8").splitlines()
    freqs = {}
    for line in (root / "freq.tsv").read_text(encoding="utf-8").splitlines():
        tok, cnt = line.split("\t")
        freqs[tok] = int(cnt)
    data = {}
    for s in splits:
        with open(root / f"{s}.jsonl", encoding="utf-8") as fh:
            data[s] = [Episode.from_json(json.loads(line)) for line in fh if line.strip()]
    spec = SplitSpec(**json.loads((root / "splits.json").read_text(encoding="utf-8")))
    cfg = WorldConfig.from_dict(json.loads((root / "worldgen.json").read_text(encoding="utf-8")))
    return Dataset(data, vocab, freqs, spec, cfg)


# -- caption pairs for dual-encoder pretraining -----------------------------

def caption_for(scene: Scene, positions=None) -> str:
    positions = [o.position for o in scene.objects] if positions is None else positions
    visible = sorted(((p, o) for o, p in zip(scene.objects, positions) if p is not None),
                     key=lambda po: (po[0], po[1].class_id))
    if not visible:
        return "nothing"
    return " and ".join(f"a {o.color} {o.name}" for _, o in visible)


def _subset_scene(scene: Scene, keep: Sequence[int]) -> Scene:
    return Scene(scene.grid_size, scene.walls, tuple(scene.objects[i] for i in keep),
                 scene.agent_start, scene.palette_id)


def build_caption_pairs(episodes: Sequence[Episode], rng_seed: int, n_pairs: int = 3000,
                        single_frac: float = 0.3, empty_frac: float = 0.03,
                        cell_px: int = 4) -> list[tuple[np.ndarray, str]]:
    """(uint8 image, caption) pairs drawn from episode scenes.

    Most pairs are recorded episode frames captioned with every object still
    on the grid. A fraction re-render the scene with a single object kept, and
    a few with no objects, captioned ``nothing``.
    """
    if not episodes:
        raise ValueError("no episodes to caption")
    rng = np.random.default_rng(rng_seed)
    pairs = []
    for _ in range(n_pairs):
        ep = episodes[rng.integers(len(episodes))]
        u = rng.random()
        if u < empty_frac:
            scene = _subset_scene(ep.scene, [])
            pose = ep.scene.agent_start
            pairs.append((render_frame(scene, pose, cell_px), "nothing"))
        elif u < empty_frac + single_frac:
            k = int(rng.integers(len(ep.scene.objects)))
            scene = _subset_scene(ep.scene, [k])
            pairs.append((render_frame(scene, ep.scene.agent_start, cell_px), caption_for(scene)))
        else:
            t = int(rng.integers(len(ep)))
            _, sim = replay(ep.scene, ep.expert_actions[:t], ep.gold_objects[:t], cell_px)
            pairs.append((ep.frames[t], caption_for(ep.scene, sim.positions)))
    return pairs


def probe_frames(n: int, rng_seed: int, palettes: Sequence[int] = (0, 1, 2, 3, 4, 5),
                 grid_size: int = 8, cell_px: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Held-out single-object frames with their class ids (zero-shot probe set)."""
    rng = np.random.default_rng(rng_seed)
    images, labels = [], []
    for _ in range(n):
        scene = generate_scene(int(rng.integers(2**31)), int(palettes[rng.integers(len(palettes))]),
                               int(rng.integers(1, 3)), grid_size)
        k = int(rng.integers(len(scene.objects)))
        single = _subset_scene(scene, [k])
        images.append(render_frame(single, scene.agent_start, cell_px))
        labels.append(scene.objects[k].class_id)
    return np.stack(images), np.array(labels)
