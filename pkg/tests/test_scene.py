"""Scene generation, geodesic distances and episode datasets, checked against independent graph oracles."""

from collections import deque

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from crossnav.scene import (
    CATEGORIES,
    DEFAULT_EPISODES,
    KINDS,
    SCENE_TARGETS,
    EpisodeConstraints,
    EpisodeGenerationError,
    Scene,
    generate_episodes,
    generate_scene,
    geodesic_distance,
    load_dataset,
    save_dataset,
    split_episodes,
)


@pytest.fixture(scope="module")
def scenes():
    return {k: generate_scene(k, 0) for k in KINDS}


def grid_graph(scene: Scene) -> nx.Graph:
    g = nx.Graph()
    ys, xs = np.nonzero(scene.grid)
    for x, y in zip(xs, ys):
        g.add_node((int(x), int(y)))
        for nx_, ny in ((x + 1, y), (x, y + 1)):
            if ny < scene.grid.shape[0] and nx_ < scene.grid.shape[1] and scene.grid[ny, nx_]:
                g.add_edge((int(x), int(y)), (int(nx_), int(ny)))
    return g


def bfs_oracle(scene: Scene, src, dst) -> float:
    """Plain-deque BFS where the two endpoints are passable even if blocked."""
    if src == dst:
        return 0.0
    h, w = scene.grid.shape
    seen = {src}
    queue = deque([(src, 0)])
    while queue:
        (x, y), d = queue.popleft()
        for nxt in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if nxt == dst:
                return float(d + 1)
            if nxt in seen or not (0 <= nxt[0] < w and 0 <= nxt[1] < h) or not scene.grid[nxt[1], nxt[0]]:
                continue
            seen.add(nxt)
            queue.append((nxt, d + 1))
    return float("inf")


def test_studio_has_about_twenty_cells(scenes):
    assert 16 <= scenes["studio"].navigable_count <= 25
    assert scenes["studio"].navigable_count == 20


@pytest.mark.parametrize("kind", KINDS)
def test_targets_on_or_next_to_navigable_cells(kind):
    for seed in range(4):
        scene = generate_scene(kind, seed)
        for t in scene.targets:
            x, y = t.cell
            around = [(x, y), (x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)]
            assert any(scene.in_bounds(c) and scene.region[c[1], c[0]] for c in around)
            assert t.category in CATEGORIES.ids
            assert t.radius == 1.0


@pytest.mark.parametrize("kind", KINDS)
def test_episode_region_is_one_flood_fill_component(scenes, kind):
    labels, n = ndimage.label(scenes[kind].region)
    assert n == 1
    assert scenes[kind].navigable_area == scenes[kind].navigable_count * 1.0


def test_maze_is_large_and_multi_room(scenes):
    maze = scenes["maze"]
    assert maze.navigable_count >= 400
    assert nx.is_connected(grid_graph(maze).subgraph(
        [(int(x), int(y)) for y, x in zip(*np.nonzero(maze.region))]))
    assert len(maze.targets) >= 3 * len(SCENE_TARGETS["maze"])


def test_geodesic_basic_values(scenes):
    s = scenes["studio"]
    ys, xs = np.nonzero(s.region)
    a = (int(xs[0]), int(ys[0]))
    assert geodesic_distance(s, a, a) == 0.0
    nb = next(c for c in ((a[0] + 1, a[1]), (a[0], a[1] + 1)) if s.navigable(c))
    assert geodesic_distance(s, a, nb) == 1.0


def test_geodesic_matches_bfs_on_maze_for_random_pairs(scenes):
    maze = scenes["maze"]
    rng = np.random.default_rng(0)
    ys, xs = np.nonzero(maze.grid)
    cells = list(zip(xs.tolist(), ys.tolist()))
    g = grid_graph(maze)
    for _ in range(100):
        a = cells[rng.integers(len(cells))]
        b = cells[rng.integers(len(cells))]
        want = nx.shortest_path_length(g, a, b) if nx.has_path(g, a, b) else float("inf")
        assert maze.geodesic(a, b) == want
        assert maze.geodesic(b, a) == want


@pytest.mark.parametrize("kind", ["studio", "ranch"])
def test_geodesic_to_wall_targets_matches_endpoint_bfs(scenes, kind):
    scene = scenes[kind]
    ys, xs = np.nonzero(scene.region)
    for t in scene.targets:
        for x, y in list(zip(xs.tolist(), ys.tolist()))[::3]:
            assert scene.geodesic((x, y), t.cell) == bfs_oracle(scene, (x, y), t.cell)


@pytest.mark.parametrize("kind", KINDS)
def test_same_seed_gives_identical_dataset(kind, tmp_path):
    a, b = generate_scene(kind, 3), generate_scene(kind, 3)
    ea, eb = generate_episodes(a, count=20, seed=3), generate_episodes(b, count=20, seed=3)
    save_dataset(tmp_path / "a.json", a, ea, EpisodeConstraints.for_kind(kind))
    save_dataset(tmp_path / "b.json", b, eb, EpisodeConstraints.for_kind(kind))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def verify_episode(scene: Scene, spec, c: EpisodeConstraints) -> list[str]:
    """Independent verifier: every distance recomputed with the deque BFS oracle."""
    bad = []
    for sx, sy, h in spec.starts:
        if not scene.grid[sy, sx] or h not in range(4):
            bad.append("start")
        for ti in spec.targets:
            d = bfs_oracle(scene, (sx, sy), scene.targets[ti].cell)
            if not c.min_start_goal <= d <= c.max_start_goal:
                bad.append(f"start-goal {d}")
    for i, a in enumerate(spec.starts):
        for b in spec.starts[i + 1:]:
            if bfs_oracle(scene, a[:2], b[:2]) < c.min_agent_sep:
                bad.append("separation")
    for i, a in enumerate(spec.targets):
        for b in spec.targets[i + 1:]:
            d = bfs_oracle(scene, scene.targets[a].cell, scene.targets[b].cell)
            if not c.min_target_dist <= d <= c.max_target_dist:
                bad.append(f"target-target {d}")
    return bad


@pytest.mark.parametrize("kind", KINDS)
def test_every_episode_passes_independent_verifier(scenes, kind):
    scene = scenes[kind]
    c = EpisodeConstraints.for_kind(kind)
    eps = generate_episodes(scene, c, count=40 if kind != "maze" else 252, seed=1)
    for e in eps:
        assert verify_episode(scene, e, c) == [], e
        assert sorted(scene.targets[t].category for t in e.targets) == sorted(SCENE_TARGETS[kind])


def test_table_distance_bounds():
    assert EpisodeConstraints.for_kind("apartment").min_target_dist == 2.0
    assert EpisodeConstraints.for_kind("apartment").min_start_goal == 4.0
    maze = EpisodeConstraints.for_kind("maze")
    assert (maze.min_start_goal, maze.max_start_goal) == (3.0, 10.0)
    assert EpisodeConstraints().min_agent_sep == 1.5


@pytest.mark.parametrize("kind", KINDS)
def test_default_counts_and_three_to_one_split(scenes, kind):
    eps = generate_episodes(scenes[kind], seed=0)
    assert len(eps) == DEFAULT_EPISODES[kind]
    n_val = len(split_episodes(eps, "val"))
    assert abs(n_val - len(eps) / 4) <= 1
    assert n_val + len(split_episodes(eps, "train")) == len(eps)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 400))
def test_split_ratio_for_any_count(count):
    scene = generate_scene("corridor", 0)
    eps = generate_episodes(scene, count=count, seed=0)
    n_train = len(split_episodes(eps, "train"))
    assert abs(n_train - 3 * count / 4) <= 1


def test_infeasible_constraints_name_the_violation(scenes):
    with pytest.raises(EpisodeGenerationError, match="start-goal"):
        generate_episodes(scenes["studio"], EpisodeConstraints(min_start_goal=50.0), count=1, max_attempts=20)
    with pytest.raises(EpisodeGenerationError, match="separation"):
        generate_episodes(scenes["studio"], EpisodeConstraints(min_agent_sep=30.0), count=1, max_attempts=20)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        generate_scene("castle", 0)


def test_dataset_round_trip(scenes, tmp_path):
    scene = scenes["ranch"]
    eps = generate_episodes(scene, count=12, seed=2)
    c = EpisodeConstraints.for_kind("ranch")
    save_dataset(tmp_path / "d.json", scene, eps, c)
    s2, e2, c2 = load_dataset(tmp_path / "d.json")
    assert np.array_equal(s2.grid, scene.grid) and s2.targets == scene.targets
    assert e2 == eps and c2 == c


def test_dataset_schema_version_checked(scenes, tmp_path):
    path = tmp_path / "d.json"
    save_dataset(path, scenes["studio"], [], EpisodeConstraints())
    path.write_text(path.read_text().replace('"schema_version": 1', '"schema_version": 99'))
    with pytest.raises(ValueError, match="schema_version"):
        load_dataset(path)
