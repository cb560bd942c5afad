import heapq

import numpy as np
import pytest

from trailrl.envs import (DOWN, LEFT, RIGHT, UP, GoalQuery, InvalidQueryError,
                          make_continuous_rooms, make_discrete_rooms, make_double_spiral,
                          read_queries, write_queries)


def dijkstra(walls, src, dst):
    """Independent unit-weight Dijkstra over the raw wall map."""
    h, w = walls.shape
    dist = {src: 0}
    heap = [(0, src)]
    while heap:
        d, (r, c) = heapq.heappop(heap)
        if (r, c) == dst:
            return d
        if d > dist[(r, c)]:
            continue
        for nr, nc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if 0 <= nr < h and 0 <= nc < w and not walls[nr, nc]:
                if d + 1 < dist.get((nr, nc), 1 << 30):
                    dist[(nr, nc)] = d + 1
                    heapq.heappush(heap, (d + 1, (nr, nc)))
    return None


def moving_actions(env, cell):
    s = env.cell_to_obs(cell)
    far = env.cell_to_obs(env.free_cells[0]) if tuple(env.free_cells[0]) != tuple(cell) \
        else env.cell_to_obs(env.free_cells[1])
    return sum(
        not np.array_equal(env.transition(s[None], np.array([a]), far[None])[0], s)
        for a in range(4))


class TestDiscreteRooms:
    def test_nine_rooms(self):
        env = make_discrete_rooms(3, 3, 5, seed=7)
        assert env.walls.shape == (19, 19)
        assert len(env.doors) == 12
        assert len(env.free_cells) == 9 * 25 + 12

    def test_single_room(self):
        env = make_discrete_rooms(1, 1, 5, seed=3)
        assert len(env.doors) == 0
        assert len(env.free_cells) == 25
        assert len(env.bfs_distances(tuple(env.free_cells[0]))) == 25

    def test_large_rooms_connected(self):
        env = make_discrete_rooms(5, 5, 15, seed=3)
        free = {tuple(c) for c in env.free_cells}
        assert len(free) == 25 * 225 + 40
        # BFS from any cell reaches every free cell
        for cell in env.free_cells[[0, 1000, -1]]:
            assert set(env.bfs_distances(tuple(cell))) == free

    def test_rejects_small_room(self):
        with pytest.raises(ValueError):
            make_discrete_rooms(2, 2, 1, seed=0)

    def test_doors_not_on_corners(self):
        env = make_discrete_rooms(4, 3, 6, seed=11)
        for r, c in env.doors:
            assert (r % 7 == 0) != (c % 7 == 0)

    def test_layout_text(self):
        env = make_discrete_rooms(2, 2, 3, seed=1)
        text = env.to_text().splitlines()
        assert len(text) == 9 and all(len(row) == 9 for row in text)
        assert sum(row.count("D") for row in text) == 4
        assert text[0] == "#" * 9

    def test_wall_blocks_and_goal_absorbs(self):
        env = make_discrete_rooms(1, 1, 5, seed=0)
        corner = env.cell_to_obs((1, 1))
        goal = env.cell_to_obs((5, 5))
        env.reset(GoalQuery(corner, goal))
        assert np.array_equal(env.step(UP), corner)
        assert np.array_equal(env.step(LEFT), corner)
        assert np.array_equal(env.step(DOWN), env.cell_to_obs((2, 1)))
        env.reset(GoalQuery(env.cell_to_obs((5, 4)), goal))
        assert np.array_equal(env.step(RIGHT), goal)
        for a in range(4):
            assert np.array_equal(env.step(a), goal)

    def test_bad_action(self):
        env = make_discrete_rooms(1, 1, 5, seed=0)
        env.reset()
        with pytest.raises(ValueError):
            env.step(4)

    def test_reset_from_query(self):
        env = make_discrete_rooms(3, 3, 5, seed=7)
        q = env.sample_queries(1, seed=5)[0]
        a = env.reset(q)
        b = env.reset(q)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        with pytest.raises(InvalidQueryError):
            env.reset(GoalQuery(env.cell_to_obs((0, 0)), q.goal))
        with pytest.raises(InvalidQueryError):
            env.reset(GoalQuery(np.array([1.5, 0.0]), q.goal))

    def test_seeded_reset_stream(self):
        a = make_discrete_rooms(3, 3, 5, seed=7)
        b = make_discrete_rooms(3, 3, 5, seed=7)
        for _ in range(20):
            sa, ga = a.reset()
            sb, gb = b.reset()
            assert np.array_equal(sa, sb) and np.array_equal(ga, gb)
            assert not np.array_equal(sa, ga)


class TestShortestPath:
    def test_trivial(self):
        env = make_discrete_rooms(1, 1, 5, seed=0)
        s = env.cell_to_obs((2, 2))
        traj = env.shortest_path(s, s)
        assert len(traj) == 1 and len(traj.actions) == 0
        traj = env.shortest_path(s, env.cell_to_obs((2, 3)))
        assert len(traj) == 2 and traj.actions.tolist() == [RIGHT]

    @pytest.mark.parametrize("layout", [(3, 3, 5, 7), (2, 2, 5, 1), (4, 2, 3, 9)])
    def test_matches_dijkstra(self, layout):
        env = make_discrete_rooms(*layout)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            q = env.sample_query(rng)
            traj = env.shortest_path(q.start, q.goal)
            src, dst = tuple(env.obs_to_cell(q.start)), tuple(env.obs_to_cell(q.goal))
            assert len(traj.actions) == dijkstra(env.walls, src, dst)
            # the plan replays through the dynamics
            s = q.start
            for a, nxt in zip(traj.actions, traj.states[1:]):
                s = env.transition(s[None], np.array([a]), q.goal[None])[0]
                assert np.array_equal(s, nxt)
            assert env.is_success(s, q.goal)

    def test_deterministic_tie_break(self):
        env = make_discrete_rooms(1, 1, 5, seed=0)
        # up/down are expanded before left/right, so vertical moves come first
        traj = env.shortest_path(env.cell_to_obs((1, 1)), env.cell_to_obs((3, 3)))
        assert traj.actions.tolist() == [DOWN, DOWN, RIGHT, RIGHT]


class TestDoubleSpiral:
    def test_corridor_structure(self):
        env = make_double_spiral()
        assert env.walls.shape == (31, 31)
        counts = {tuple(c): moving_actions(env, tuple(c)) for c in env.free_cells}
        ends = [c for c, n in counts.items() if n == 1]
        assert len(ends) == 2
        assert all(n == 2 for c, n in counts.items() if c not in ends)

    def test_connected(self):
        env = make_double_spiral()
        dist = env.bfs_distances(tuple(env.free_cells[0]))
        assert len(dist) == len(env.free_cells)

    def test_ends_are_close_but_far_apart_in_path(self):
        env = make_double_spiral()
        ends = [tuple(c) for c in env.free_cells if moving_actions(env, tuple(c)) == 1]
        (r0, c0), (r1, c1) = ends
        assert abs(r0 - r1) + abs(c0 - c1) == 2
        assert env.bfs_distances(ends[0])[ends[1]] == len(env.free_cells) - 1


class TestContinuousRooms:
    def test_action_clip(self):
        env = make_continuous_rooms(0.0)
        s = np.array([-0.5, -0.5])
        env.reset(GoalQuery(s, np.array([0.5, 0.5])))
        nxt = env.step(np.array([0.15, 0.2]))
        disp = nxt - s
        assert np.linalg.norm(disp) == pytest.approx(0.1, abs=1e-12)
        assert np.allclose(disp / 0.1, np.array([0.6, 0.8]))

    def test_zero_action(self):
        env = make_continuous_rooms(0.0)
        s = np.array([0.3, -0.7])
        env.reset(GoalQuery(s, np.array([-0.5, 0.5])))
        assert np.array_equal(env.step(np.zeros(2)), s)

    def test_success_tolerance(self):
        env = make_continuous_rooms(0.0)
        o = np.zeros(2)
        assert env.is_success(o, np.array([0.2, 0.0]))
        assert env.is_success(o, np.array([0.1999, 0.0]))
        assert not env.is_success(o, np.array([0.2001, 0.0]))

    def test_wall_blocks_outside_door(self):
        env = make_continuous_rooms(0.0)
        s = np.array([-0.05, -0.1])
        env.reset(GoalQuery(s, np.array([0.5, 0.9])))
        nxt = env.step(np.array([0.1, 0.0]))
        assert np.array_equal(nxt, s)
        # sliding: the y component still applies
        nxt = env.step(np.array([0.06, 0.08]))
        assert nxt[0] == s[0] and nxt[1] == pytest.approx(s[1] + 0.08)

    def test_door_passes(self):
        env = make_continuous_rooms(0.0)
        s = np.array([-0.05, 0.5])
        env.reset(GoalQuery(s, np.array([0.9, -0.9])))
        assert env.step(np.array([0.1, 0.0]))[0] == pytest.approx(0.05)

    def test_noise_variance(self):
        env = make_continuous_rooms(0.1, seed=3)
        s = np.tile([-0.5, -0.5], (10_000, 1))
        g = np.tile([0.5, 0.5], (10_000, 1))
        disp = env.transition(s, np.zeros_like(s), g, np.random.default_rng(0)) - s
        var = disp.var(axis=0)
        # sampling sd of the variance estimate is sigma^2 * sqrt(2 / N) ~ 1.4e-4
        assert np.all(np.abs(var - 0.01) < 6e-4)

    def test_displacement_bound(self):
        sigma = 0.1
        env = make_continuous_rooms(sigma, seed=1)
        rng = np.random.default_rng(2)
        s = rng.uniform(-1, 1, (5000, 2))
        a = rng.normal(0, 1, (5000, 2))
        nxt = env.transition(s, a, -s, rng)
        assert np.all(np.linalg.norm(nxt - s, axis=1) <= 0.1 + 5 * sigma)
        assert np.all(np.abs(nxt) <= 1.0)

    def test_goal_absorbs(self):
        env = make_continuous_rooms(0.5, seed=0)
        s = np.array([0.5, 0.5])
        env.reset(GoalQuery(s, np.array([0.6, 0.5])))
        assert np.array_equal(env.step(np.array([0.1, 0.1])), s)

    def test_negative_noise(self):
        with pytest.raises(ValueError):
            make_continuous_rooms(-0.1)


def test_observations_normalized():
    rng = np.random.default_rng(0)
    for env in (make_discrete_rooms(3, 3, 5, 7), make_double_spiral(), make_continuous_rooms(0.5)):
        s, g = env.reset()
        for _ in range(300):
            if env.spec.action_space.discrete:
                a = rng.integers(4)
            else:
                a = rng.normal(0, 0.2, 2)
            s = env.step(a)
            assert np.all(np.abs(s) <= 1.0) and np.all(np.abs(g) <= 1.0)


def test_determinism_with_same_seed():
    runs = []
    for _ in range(2):
        env = make_continuous_rooms(0.0, seed=4)
        env.reset()
        runs.append([env.step(np.array([0.05, -0.03])) for _ in range(30)])
    assert all(np.array_equal(a, b) for a, b in zip(*runs))


def test_query_csv_round_trip(tmp_path):
    env = make_continuous_rooms(0.0)
    qs = env.sample_queries(25, seed=9)
    path = tmp_path / "q.csv"
    write_queries(path, qs)
    back = read_queries(path)
    assert [q.id for q in back] == list(range(25))
    for a, b in zip(qs, back):
        assert np.array_equal(a.start, b.start) and np.array_equal(a.goal, b.goal)
    assert path.read_text().splitlines()[0] == "id,start_0,start_1,goal_0,goal_1"
