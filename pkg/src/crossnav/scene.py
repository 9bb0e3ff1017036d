"""Procedural 2-D grid scenes and episode datasets.

Cells are 1 m squares addressed as ``(x, y)`` with ``grid[y, x]`` true when
navigable. Movement is 4-connected. Targets may sit on a navigable cell or on
a blocked cell next to one (a picture on a wall); geodesic distances treat
both endpoints as passable and everything in between as navigable-only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
CELL_SIZE = 1.0
KINDS = ("studio", "corridor", "apartment", "ranch", "maze")


class SceneGenerationError(RuntimeError):
    pass


class EpisodeGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SoundSignature:
    """Synthetic acoustic analog of a category: tonal partials under a repeating attack/decay envelope."""

    base_hz: float
    partials: tuple[float, ...]
    events_per_s: float
    decay_s: float


@dataclass(frozen=True)
class CategorySet:
    ids: tuple[str, ...]
    signatures: dict[str, SoundSignature]

    def index(self, category: str) -> int:
        try:
            return self.ids.index(category)
        except ValueError:
            raise KeyError(f"unknown category {category!r}") from None

    def __len__(self) -> int:
        return len(self.ids)

    def multi_hot(self, categories) -> np.ndarray:
        v = np.zeros(len(self.ids))
        for c in categories:
            v[self.index(c)] = 1.0
        return v


# Base frequencies sit in disjoint bands so every pair has a distinct dominant bin
# down to 62.5 Hz bin spacing.
CATEGORIES = CategorySet(
    ids=("picture", "sink", "bed", "counter", "table", "chair", "chest_of_drawers"),
    signatures={
        "picture": SoundSignature(3000.0, (1.0, 0.3), 4.0, 0.02),
        "sink": SoundSignature(1250.0, (1.0, 0.2), 3.0, 0.05),
        "bed": SoundSignature(375.0, (1.0, 0.5, 0.25), 1.5, 0.25),
        "counter": SoundSignature(3500.0, (1.0, 0.4), 5.0, 0.03),
        "table": SoundSignature(2250.0, (1.0, 0.35), 6.0, 0.04),
        "chair": SoundSignature(625.0, (1.0, 0.6, 0.3), 1.0, 0.4),
        "chest_of_drawers": SoundSignature(1750.0, (1.0, 0.3), 2.0, 0.15),
    },
)

SCENE_TARGETS = {
    "studio": ("picture",),
    "corridor": ("sink",),
    "apartment": ("bed", "counter"),
    "ranch": ("picture", "table"),
    "maze": ("chair", "table", "chest_of_drawers"),
}
DEFAULT_HORIZON = {"studio": 70, "corridor": 150, "apartment": 500, "ranch": 1000, "maze": 1500}
DEFAULT_EPISODES = {"studio": 220, "corridor": 218, "apartment": 230, "ranch": 228, "maze": 252}
ABSORPTION = {"studio": 0.05, "corridor": 0.08, "apartment": 0.1, "ranch": 0.1, "maze": 0.12}

# Categories mounted on walls (blocked cells); the rest stand on navigable floor.
WALL_MOUNTED = {"picture"}


@dataclass(frozen=True)
class Target:
    category: str
    cell: tuple[int, int]
    radius: float = 1.0


@dataclass
class Scene:
    name: str
    kind: str
    grid: np.ndarray
    targets: list[Target]
    absorption: float
    region: np.ndarray
    _fields: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def navigable_count(self) -> int:
        return int(self.grid.sum())

    @property
    def navigable_area(self) -> float:
        return self.navigable_count * CELL_SIZE * CELL_SIZE

    @property
    def categories(self) -> tuple[str, ...]:
        return SCENE_TARGETS[self.kind]

    def navigable(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and bool(self.grid[y, x])

    def in_bounds(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def region_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(self.region)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def distance_field(self, cell) -> np.ndarray:
        """Geodesic distance (m) from ``cell`` to every cell; ``inf`` if unreachable."""
        key = (int(cell[0]), int(cell[1]))
        f = self._fields.get(key)
        if f is None:
            if not self.in_bounds(key):
                raise IndexError(f"cell {key} outside {self.width}x{self.height} grid")
            f = _bfs_field(self.grid, key)
            self._fields[key] = f
        return f

    def geodesic(self, a, b) -> float:
        if not self.in_bounds(b):
            raise IndexError(f"cell {tuple(b)} outside {self.width}x{self.height} grid")
        return float(self.distance_field(a)[b[1], b[0]])

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "kind": self.kind,
            "absorption": self.absorption,
            "navigable_count": self.navigable_count,
            "navigable_area": self.navigable_area,
            "grid": ["".join("." if v else "#" for v in row) for row in self.grid],
            "region": ["".join("1" if v else "0" for v in row) for row in self.region],
            "targets": [{"category": t.category, "cell": list(t.cell), "radius": t.radius} for t in self.targets],
            "materials": {"absorption_model": "scalar-per-step"},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scene schema_version {d.get('schema_version')!r}")
        grid = np.array([[ch == "." for ch in row] for row in d["grid"]], dtype=bool)
        region = np.array([[ch == "1" for ch in row] for row in d["region"]], dtype=bool)
        targets = [Target(t["category"], tuple(t["cell"]), float(t["radius"])) for t in d["targets"]]
        return cls(d["name"], d["kind"], grid, targets, float(d["absorption"]), region)


def _bfs_field(grid: np.ndarray, source: tuple[int, int]) -> np.ndarray:
    h, w = grid.shape
    dist = np.full((h, w), np.inf)
    x0, y0 = source
    dist[y0, x0] = 0.0
    frontier = np.zeros((h, w), dtype=bool)
    frontier[y0, x0] = True
    d = 0
    while frontier.any():
        d += 1
        nb = _neighbours(frontier)
        nb &= grid & np.isinf(dist)
        dist[nb] = d
        frontier = nb
    # blocked cells are reachable as path endpoints from an adjacent navigable cell
    blocked = ~grid & np.isinf(dist)
    if blocked.any():
        near = np.full((h, w), np.inf)
        walk = np.where(grid, dist, np.inf)
        near[1:, :] = np.minimum(near[1:, :], walk[:-1, :])
        near[:-1, :] = np.minimum(near[:-1, :], walk[1:, :])
        near[:, 1:] = np.minimum(near[:, 1:], walk[:, :-1])
        near[:, :-1] = np.minimum(near[:, :-1], walk[:, 1:])
        dist[blocked] = near[blocked] + 1.0
    return dist


def _neighbours(mask: np.ndarray) -> np.ndarray:
    nb = np.zeros_like(mask)
    nb[1:, :] |= mask[:-1, :]
    nb[:-1, :] |= mask[1:, :]
    nb[:, 1:] |= mask[:, :-1]
    nb[:, :-1] |= mask[:, 1:]
    return nb


def connected_components(grid: np.ndarray) -> np.ndarray:
    """Label 4-connected components of navigable cells (0 = blocked)."""
    from scipy.ndimage import label

    labels, _ = label(grid, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    return labels


def largest_component(grid: np.ndarray) -> np.ndarray:
    labels = connected_components(grid)
    if labels.max() == 0:
        return np.zeros_like(grid)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == int(np.argmax(counts))


# -- generators -------------------------------------------------------------
@dataclass
class _Room:
    x: int
    y: int
    w: int
    h: int

    def overlaps(self, o: "_Room", margin: int = 1) -> bool:
        return not (self.x + self.w + margin <= o.x or o.x + o.w + margin <= self.x
                    or self.y + self.h + margin <= o.y or o.y + o.h + margin <= self.y)

    @property
    def center(self) -> tuple[int, int]:
        return self.x + self.w // 2, self.y + self.h // 2

    def cells(self) -> list[tuple[int, int]]:
        return [(x, y) for y in range(self.y, self.y + self.h) for x in range(self.x, self.x + self.w)]


def _place_rooms(rng, width, height, n_rooms, size_w, size_h, tries=400) -> list[_Room]:
    rooms: list[_Room] = []
    for _ in range(tries):
        if len(rooms) == n_rooms:
            break
        w = int(rng.integers(size_w[0], size_w[1] + 1))
        h = int(rng.integers(size_h[0], size_h[1] + 1))
        if w + 2 >= width or h + 2 >= height:
            continue
        x = int(rng.integers(1, width - w - 1))
        y = int(rng.integers(1, height - h - 1))
        r = _Room(x, y, w, h)
        if any(r.overlaps(o) for o in rooms):
            continue
        rooms.append(r)
    return rooms


def _carve_room(grid, r: _Room) -> None:
    grid[r.y:r.y + r.h, r.x:r.x + r.w] = True


def _carve_corridor(grid, rng, a, b, width: int = 1) -> None:
    (x0, y0), (x1, y1) = a, b
    horizontal_first = bool(rng.integers(2))
    path = []
    if horizontal_first:
        path += [(x, y0) for x in range(min(x0, x1), max(x0, x1) + 1)]
        path += [(x1, y) for y in range(min(y0, y1), max(y0, y1) + 1)]
    else:
        path += [(x0, y) for y in range(min(y0, y1), max(y0, y1) + 1)]
        path += [(x, y1) for x in range(min(x0, x1), max(x0, x1) + 1)]
    h, w = grid.shape
    for x, y in path:
        grid[y:min(y + width, h - 1), x:min(x + width, w - 1)] = True


def _connect_rooms(grid, rng, rooms: list[_Room], extra_links: int = 0) -> None:
    # greedy nearest-neighbour chain gives a spanning tree; extra links add loops
    order = sorted(range(len(rooms)), key=lambda i: rooms[i].center)
    for i, j in zip(order[:-1], order[1:]):
        _carve_corridor(grid, rng, rooms[i].center, rooms[j].center)
    for _ in range(extra_links):
        i, j = rng.choice(len(rooms), size=2, replace=False)
        _carve_corridor(grid, rng, rooms[i].center, rooms[j].center)


def _wall_slots(grid: np.ndarray, region: np.ndarray) -> list[tuple[int, int]]:
    """Blocked cells that have at least one 4-neighbour in ``region``."""
    nb = _neighbours(region)
    ys, xs = np.nonzero(nb & ~grid)
    return [(int(x), int(y)) for y, x in zip(ys, xs)]


def _place_targets(rng, grid, region, rooms, categories, per_category) -> list[Target]:
    targets: list[Target] = []
    used: set[tuple[int, int]] = set()
    floor = [c for r in rooms for c in r.cells() if region[c[1], c[0]]] if rooms else []
    if not floor:
        ys, xs = np.nonzero(region)
        floor = [(int(x), int(y)) for y, x in zip(ys, xs)]
    walls = _wall_slots(grid, region)
    for cat in categories:
        pool = walls if cat in WALL_MOUNTED else floor
        pool = [c for c in pool if c not in used]
        if len(pool) < per_category:
            raise SceneGenerationError(f"not enough free cells for {per_category} {cat} targets")
        picks = rng.choice(len(pool), size=per_category, replace=False)
        for p in sorted(int(i) for i in picks):
            cell = pool[p]
            used.add(cell)
            targets.append(Target(cat, cell))
    return targets


def _gen_studio(rng) -> tuple[np.ndarray, list[_Room]]:
    w, h = (5, 4) if rng.integers(2) else (4, 5)
    grid = np.zeros((h + 2, w + 2), dtype=bool)
    room = _Room(1, 1, w, h)
    _carve_room(grid, room)
    return grid, [room]


def _gen_corridor(rng) -> tuple[np.ndarray, list[_Room]]:
    length = int(rng.integers(22, 30))
    width = length + 16
    height = 16
    grid = np.zeros((height, width), dtype=bool)
    left = _Room(1, int(rng.integers(1, 5)), int(rng.integers(6, 8)), int(rng.integers(7, 10)))
    right = _Room(width - 9, int(rng.integers(1, 5)), int(rng.integers(6, 8)), int(rng.integers(7, 10)))
    _carve_room(grid, left)
    _carve_room(grid, right)
    # two-lane passage with a dog-leg joining the two areas
    ya, yb = left.center[1], right.center[1]
    xm = int(rng.integers(left.x + left.w + 3, right.x - 3))
    grid[ya:ya + 2, left.center[0]:xm + 2] = True
    grid[min(ya, yb):max(ya, yb) + 2, xm:xm + 2] = True
    grid[yb:yb + 2, xm:right.center[0] + 1] = True
    return grid, [left, right]


def _gen_rooms(rng, width, height, n_rooms, size_w, size_h, extra_links, islands=0):
    grid = np.zeros((height, width), dtype=bool)
    rooms = _place_rooms(rng, width, height, n_rooms + islands, size_w, size_h)
    if len(rooms) < n_rooms + islands:
        raise SceneGenerationError("room placement failed")
    main, isolated = rooms[:n_rooms], rooms[n_rooms:]
    for r in main:
        _carve_room(grid, r)
    _connect_rooms(grid, rng, main, extra_links)
    for r in isolated:
        # a pocket is kept only where no corridor passes within one cell of it
        inner = _Room(r.x + 1, r.y + 1, max(1, r.w - 2), max(1, r.h - 2))
        if not grid[inner.y - 1:inner.y + inner.h + 1, inner.x - 1:inner.x + inner.w + 1].any():
            _carve_room(grid, inner)
    return grid, main


_SPECS = {
    "apartment": dict(width=16, height=13, n_rooms=3, size_w=(3, 6), size_h=(3, 6), extra_links=0,
                      count=(60, 110)),
    "ranch": dict(width=28, height=20, n_rooms=7, size_w=(3, 6), size_h=(3, 6), extra_links=1,
                  count=(150, 260)),
    "maze": dict(width=44, height=40, n_rooms=16, size_w=(4, 8), size_h=(4, 8), extra_links=3,
                 count=(400, 900), islands=3),
}
_PER_CATEGORY = {"studio": 1, "corridor": 2, "apartment": 2, "ranch": 3, "maze": 8}


def generate_scene(kind: str, seed: int, max_tries: int = 50) -> Scene:
    """Build a connected scene analog of the given kind, deterministically from ``seed``."""
    if kind not in KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    last_err = "unknown"
    for _ in range(max_tries):
        try:
            if kind == "studio":
                grid, rooms = _gen_studio(rng)
            elif kind == "corridor":
                grid, rooms = _gen_corridor(rng)
            else:
                spec = dict(_SPECS[kind])
                lo, hi = spec.pop("count")
                grid, rooms = _gen_rooms(rng, **spec)
                n_region = int(largest_component(grid).sum())
                if not lo <= n_region <= hi:
                    raise SceneGenerationError(f"{kind}: region has {n_region} cells, wanted {lo}-{hi}")
            region = largest_component(grid)
            targets = _place_targets(rng, grid, region, rooms, SCENE_TARGETS[kind], _PER_CATEGORY[kind])
            scene = Scene(f"{kind}-{seed}", kind, grid, targets, ABSORPTION[kind], region)
            if _feasible_target_sets(scene) < min(4, _target_set_count(scene)):
                raise SceneGenerationError(f"{kind}: too few target sets satisfy the distance constraints")
        except SceneGenerationError as err:
            last_err = str(err)
            continue
        return scene
    raise SceneGenerationError(f"could not generate {kind} scene for seed {seed} after {max_tries} tries: {last_err}")


def _feasible_target_sets(scene: Scene) -> int:
    import itertools

    c = EpisodeConstraints.for_kind(scene.kind)
    pools = [[i for i, t in enumerate(scene.targets) if t.category == cat] for cat in scene.categories]
    return sum(_target_violation(scene, combo, c) is None for combo in itertools.product(*pools))


def _target_set_count(scene: Scene) -> int:
    counts = [sum(t.category == cat for t in scene.targets) for cat in scene.categories]
    return int(np.prod(counts))


def geodesic_distance(scene: Scene, a, b) -> float:
    """Shortest 4-connected path length in metres; ``inf`` when unreachable."""
    return scene.geodesic(a, b)


# -- episodes ---------------------------------------------------------------
@dataclass(frozen=True)
class EpisodeConstraints:
    min_start_goal: float = 0.0
    max_start_goal: float = float("inf")
    min_target_dist: float = 0.0
    max_target_dist: float = float("inf")
    min_agent_sep: float = 1.5
    n_agents: int = 2

    @classmethod
    def for_kind(cls, kind: str) -> "EpisodeConstraints":
        return {
            "studio": cls(min_start_goal=2.0),
            "corridor": cls(min_start_goal=2.0, max_start_goal=5.0),
            "apartment": cls(min_start_goal=4.0, min_target_dist=2.0),
            "ranch": cls(min_start_goal=4.0, min_target_dist=2.0),
            "maze": cls(min_start_goal=3.0, max_start_goal=10.0, min_target_dist=3.0, max_target_dist=10.0),
        }[kind]

    def to_dict(self) -> dict:
        return {k: (None if v == float("inf") else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConstraints":
        return cls(**{k: (float("inf") if v is None else v) for k, v in d.items()})


@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: int
    scene: str
    starts: tuple[tuple[int, int, int], ...]  # (x, y, heading index 0..3)
    targets: tuple[int, ...]  # indices into Scene.targets
    horizon: int
    seed: int
    split: str

    def to_dict(self) -> dict:
        return {"episode_id": self.episode_id, "scene": self.scene, "starts": [list(s) for s in self.starts],
                "targets": list(self.targets), "horizon": self.horizon, "seed": self.seed, "split": self.split}

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSpec":
        return cls(int(d["episode_id"]), d["scene"], tuple(tuple(int(v) for v in s) for s in d["starts"]),
                   tuple(int(t) for t in d["targets"]), int(d["horizon"]), int(d["seed"]), d["split"])


def _target_dist(scene: Scene, t: Target) -> np.ndarray:
    return scene.distance_field(t.cell)


def generate_episodes(scene: Scene, constraints: EpisodeConstraints | None = None, count: int | None = None,
                      seed: int = 0, horizon: int | None = None, max_attempts: int = 2000) -> list[EpisodeSpec]:
    """Sample episodes satisfying every distance constraint; every fourth one goes to validation."""
    constraints = constraints or EpisodeConstraints.for_kind(scene.kind)
    count = DEFAULT_EPISODES[scene.kind] if count is None else count
    horizon = DEFAULT_HORIZON[scene.kind] if horizon is None else horizon
    rng = np.random.default_rng([seed, 7919])
    by_cat: dict[str, list[int]] = {}
    for i, t in enumerate(scene.targets):
        by_cat.setdefault(t.category, []).append(i)
    cats = scene.categories
    region = scene.region
    episodes = []
    for eid in range(count):
        violations: dict[str, int] = {}
        for _ in range(max_attempts):
            chosen, bad = _sample_targets(scene, rng, by_cat, cats, constraints)
            if bad:
                violations[bad] = violations.get(bad, 0) + 1
                continue
            ok = region.copy()
            for ti in chosen:
                d = _target_dist(scene, scene.targets[ti])
                ok &= (d >= constraints.min_start_goal) & (d <= constraints.max_start_goal)
            ys, xs = np.nonzero(ok)
            if len(xs) == 0:
                violations["start-goal distance"] = violations.get("start-goal distance", 0) + 1
                continue
            starts = []
            for _agent in range(constraints.n_agents):
                cand = np.ones(len(xs), dtype=bool)
                for (sx, sy, _) in starts:
                    cand &= scene.distance_field((sx, sy))[ys, xs] >= constraints.min_agent_sep
                idx = np.flatnonzero(cand)
                if len(idx) == 0:
                    break
                k = int(rng.choice(idx))
                starts.append((int(xs[k]), int(ys[k]), int(rng.integers(4))))
            if len(starts) < constraints.n_agents:
                violations["agent separation"] = violations.get("agent separation", 0) + 1
                continue
            split = "val" if eid % 4 == 3 else "train"
            episodes.append(EpisodeSpec(eid, scene.name, tuple(starts), chosen, horizon,
                                        int(rng.integers(2**31 - 1)), split))
            break
        else:
            worst = max(violations, key=violations.get) if violations else "unknown"
            raise EpisodeGenerationError(
                f"{scene.name}: no feasible episode after {max_attempts} attempts; "
                f"most frequent violation: {worst} ({violations})")
    return episodes


def _sample_targets(scene: Scene, rng, by_cat, cats, c: EpisodeConstraints):
    # each category's instance is drawn among those compatible with the earlier picks
    chosen: list[int] = []
    for cat in cats:
        pool = [i for i in by_cat[cat] if _target_violation(scene, chosen + [i], c) is None]
        if not pool:
            return tuple(chosen), _target_violation(scene, chosen + [int(rng.choice(by_cat[cat]))], c)
        chosen.append(int(rng.choice(pool)))
    return tuple(chosen), None


def _target_violation(scene: Scene, chosen, c: EpisodeConstraints) -> str | None:
    for i, a in enumerate(chosen):
        for b in chosen[i + 1:]:
            d = scene.geodesic(scene.targets[a].cell, scene.targets[b].cell)
            if d < c.min_target_dist:
                return "min inter-target distance"
            if d > c.max_target_dist:
                return "max inter-target distance"
    return None


def check_episode(scene: Scene, spec: EpisodeSpec, c: EpisodeConstraints) -> list[str]:
    """Return the list of constraint violations for ``spec`` (empty when valid)."""
    problems = []
    for sx, sy, h in spec.starts:
        if not scene.region[sy, sx]:
            problems.append(f"start {(sx, sy)} not in episode region")
        if h not in range(4):
            problems.append(f"heading index {h} invalid")
        for ti in spec.targets:
            d = scene.geodesic((sx, sy), scene.targets[ti].cell)
            if not c.min_start_goal <= d <= c.max_start_goal:
                problems.append(f"start-goal distance {d} outside [{c.min_start_goal}, {c.max_start_goal}]")
    for i, a in enumerate(spec.starts):
        for b in spec.starts[i + 1:]:
            d = scene.geodesic(a[:2], b[:2])
            if d < c.min_agent_sep:
                problems.append(f"agent separation {d} < {c.min_agent_sep}")
    bad = _target_violation(scene, spec.targets, c)
    if bad:
        problems.append(bad)
    return problems


def split_episodes(episodes: list[EpisodeSpec], split: str) -> list[EpisodeSpec]:
    return [e for e in episodes if e.split == split]


def save_dataset(path, scene: Scene, episodes: list[EpisodeSpec], constraints: EpisodeConstraints) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "scene": scene.to_dict(), "constraints": constraints.to_dict(),
           "episodes": [e.to_dict() for e in episodes]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_dataset(path) -> tuple[Scene, list[EpisodeSpec], EpisodeConstraints]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported dataset schema_version {doc.get('schema_version')!r}")
    scene = Scene.from_dict(doc["scene"])
    return scene, [EpisodeSpec.from_dict(e) for e in doc["episodes"]], EpisodeConstraints.from_dict(doc["constraints"])
