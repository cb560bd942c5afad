import math

import numpy as np
import pytest

from oracles import (GRADIENT_CHECKS, brute_force_best_mode, check_policy_mdn,
                     interpolator_encoder, small_encoder)
from trailrl.envs import ActionSpaceSpec, make_discrete_rooms
from trailrl.gcsl import Policy, act, gcsl_train_step
from trailrl.nn import Adam, MdnOutput
from trailrl.replay import GcslBatch, ReplayBuffer, Trajectory, TrailBatch
from trailrl.trail import (TrailLossConfig, TrailRngs, TrajectoryEncoder, best_mode,
                           best_mode_from_outputs, edge_loss, get_action, predict_subgoal,
                           self_consistency_loss, subgoal_loss, subgoal_time,
                           trail_loss_and_grad, trail_train_step)

DISCRETE4 = ActionSpaceSpec("discrete", n_actions=4)
CONT2 = ActionSpaceSpec("continuous", dim=2, max_norm=0.1)


def zero_policy(space=DISCRETE4, bias=None, d=2, K=2):
    """Policy whose output is a constant bias regardless of input."""
    pol = Policy(d, space, hidden=(8,), K=K, rng=np.random.default_rng(0))
    pol.net.params[:] = 0.0
    if bias is not None:
        pol.net.layers[-1][1][:] = bias
    return pol


def random_batch(rng, n, d=2, A=4):
    return GcslBatch(rng.uniform(-1, 1, (n, d)), rng.integers(A, size=n),
                     rng.uniform(-1, 1, (n, d)), np.ones(n, dtype=int))


class TestPolicy:
    def test_uniform_loss_is_log_actions(self):
        pol = zero_policy()
        loss, _ = pol.loss_and_grad(random_batch(np.random.default_rng(0), 64))
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_memorizes_single_sample(self):
        pol = Policy(2, DISCRETE4, hidden=(16, 16), rng=np.random.default_rng(1))
        batch = random_batch(np.random.default_rng(2), 1)
        opt = Adam(lr=1e-2)
        losses = [gcsl_train_step(pol, batch, opt) for _ in range(300)]
        assert losses[-1] < 0.01 < losses[0]

    def test_greedy_argmax(self):
        pol = zero_policy(bias=[0.1, 2.0, -1.0, 0.0])
        assert act(pol, [0.0, 0.0], [0.5, 0.5]) == 1

    def test_saturated_sampling(self):
        pol = zero_policy(bias=[0.0, 0.0, 30.0, 0.0])
        rng = np.random.default_rng(0)
        a = pol.act(np.zeros((100_000, 2)), np.ones((100_000, 2)), rng, greedy=False)
        assert np.all(a == 2)

    def test_sampling_frequencies(self):
        pol = zero_policy(bias=np.log([0.1, 0.2, 0.3, 0.4]))
        a = pol.act(np.zeros((200_000, 2)), np.ones((200_000, 2)), np.random.default_rng(3),
                    greedy=False)
        freq = np.bincount(a, minlength=4) / len(a)
        assert np.allclose(freq, [0.1, 0.2, 0.3, 0.4], atol=0.005)

    def test_single_mode_greedy_is_mean(self):
        pol = zero_policy(CONT2, bias=[0.0, 0.03, -0.04, -1.0, -1.0], K=1)
        assert np.allclose(act(pol, [0.0, 0.0], [1.0, 1.0]), [0.03, -0.04])

    def test_greedy_uses_top_mode(self):
        # logits [0, 1]; offsets mode0 (0.5, 0.5), mode1 (0.02, 0.01)
        bias = [0.0, 1.0, 0.5, 0.5, 0.02, 0.01, 0.0, 0.0, 0.0, 0.0]
        pol = zero_policy(CONT2, bias=bias, K=2)
        assert np.allclose(act(pol, [0.0, 0.0], [1.0, 1.0]), [0.02, 0.01])

    def test_logit_shift_invariance(self):
        rng = np.random.default_rng(4)
        pol = Policy(2, DISCRETE4, hidden=(8, 8), rng=rng)
        batch = random_batch(rng, 32)
        loss_a, grad_a = pol.loss_and_grad(batch)
        pol.net.layers[-1][1][:] += 7.5
        loss_b, grad_b = pol.loss_and_grad(batch)
        assert loss_a == pytest.approx(loss_b, abs=1e-12)
        assert np.allclose(grad_a, grad_b, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_mdn_head_gradient(self, seed):
        assert check_policy_mdn(seed) < 1e-4

    def test_empty_batch(self):
        pol = zero_policy()
        empty = GcslBatch(np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros((0, 2)),
                          np.zeros(0, dtype=int))
        with pytest.raises(ValueError):
            gcsl_train_step(pol, empty, Adam())

    def test_learns_one_step_dataset(self):
        """Every adjacent (s, s') pair in a small maze has a unique action; the policy recovers it."""
        env = make_discrete_rooms(2, 2, 3, seed=0)
        s_list, a_list, g_list = [], [], []
        for cell in env.free_cells:
            s = env.cell_to_obs(cell)
            for a in range(4):
                nxt = env.transition(s[None], np.array([a]), -np.ones((1, 2)) * 9)[0]
                if not np.array_equal(nxt, s):
                    s_list.append(s), a_list.append(a), g_list.append(nxt)
        batch = GcslBatch(np.array(s_list), np.array(a_list), np.array(g_list),
                          np.ones(len(a_list), dtype=int))
        pol = Policy(2, DISCRETE4, hidden=(64, 64), rng=np.random.default_rng(0))
        opt = Adam(lr=3e-3)
        for _ in range(1500):
            gcsl_train_step(pol, batch, opt)
        acc = np.mean(pol.act(batch.s, batch.g) == batch.a)
        assert acc >= 0.99

    def test_checkpoint_round_trip(self, tmp_path):
        pol = Policy(3, CONT2, hidden=(8, 4), K=3, rng=np.random.default_rng(0))
        pol.save(tmp_path / "p.ckpt")
        back = Policy.load(tmp_path / "p.ckpt")
        assert back.K == 3 and back.head == "mdn"
        assert np.array_equal(back.net.params, pol.net.params)
        enc = small_encoder(0, 2, 2)
        enc.save(tmp_path / "e.ckpt")
        with pytest.raises(ValueError):
            Policy.load(tmp_path / "e.ckpt")
        assert np.array_equal(TrajectoryEncoder.load(tmp_path / "e.ckpt").net.params,
                              enc.net.params)


class TestGradients:
    @pytest.mark.parametrize("name", sorted(GRADIENT_CHECKS))
    @pytest.mark.parametrize("seed", range(4))
    def test_fd(self, name, seed):
        assert GRADIENT_CHECKS[name](100 + seed) < 1e-4


class TestEdgeLoss:
    def test_worked_example(self):
        """s = 0, g = (1, 0), top-mode offsets (0.1, 0) at t=0 and (0.9, 0.1) at t=1."""
        enc = TrajectoryEncoder(2, K=1, hidden=(4,), rng=np.random.default_rng(0))
        enc.net.params[:] = 0.0
        w, b = enc.net.layers[-1]
        # input is [s, g, t]: offsets = (0.1 + 0.8 t, 0.1 t)
        b[1] = 0.1
        hidden_w, hidden_b = enc.net.layers[0]
        hidden_w[4, 0] = 1.0  # relu(t) feeds hidden unit 0
        w[0, 1], w[0, 2] = 0.8, 0.1
        s, g = np.zeros((1, 2)), np.array([[1.0, 0.0]])
        loss, _ = edge_loss(enc, s, g)
        assert loss == pytest.approx(0.01 + 0.01 + 0.01, abs=1e-12)

    def test_only_top_mode_gets_gradient(self):
        enc = small_encoder(3, 2, 3)
        rng = np.random.default_rng(0)
        s, g = rng.uniform(-1, 1, (4, 2)), rng.uniform(-1, 1, (4, 2))
        from trailrl.trail import _edge_head
        n = len(s)
        raw = enc.net(np.concatenate([enc.inputs(s, g, 0.0), enc.inputs(s, g, 1.0)]))
        _, g0, g1 = _edge_head(enc, raw[:n], raw[n:], s, g)
        out0 = enc.mdn(raw[:n])
        d = 2
        for row in range(n):
            off = g0[row, 3:3 + 3 * d].reshape(3, d)
            k = out0.top_mode()[row]
            assert np.all(off[np.arange(3) != k] == 0)
            assert np.all(g0[row, :3] == 0) and np.all(g0[row, 3 + 3 * d:] == 0)


class TestInterpolatorNulls:
    @pytest.mark.parametrize("d", [1, 2, 4])
    def test_edge_and_consistency_vanish(self, d):
        enc = interpolator_encoder(d)
        rng = np.random.default_rng(d)
        s, g = rng.uniform(-1, 1, (500, d)), rng.uniform(-1, 1, (500, d))
        assert edge_loss(enc, s, g)[0] < 1e-12
        assert self_consistency_loss(enc, s, g, rng)[0] < 1e-12

    def test_means_interpolate(self):
        enc = interpolator_encoder(2)
        s, g = np.array([[-1.0, 0.0]]), np.array([[1.0, 0.5]])
        assert np.allclose(enc.means(s, g, 0.25)[0, 0], [-0.5, 0.125])


class TestBestMode:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        n, K, d = 400, 3, 2
        out0 = MdnOutput.from_raw(rng.normal(size=(n, K + 2 * K * d)), K, d)
        out1 = MdnOutput.from_raw(rng.normal(size=(n, K + 2 * K * d)), K, d)
        s, g = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        assert np.array_equal(best_mode_from_outputs(out0, out1, s, g),
                              brute_force_best_mode(out0, out1, s, g))

    def test_exact_tie_takes_lowest_index(self):
        K, d = 3, 2
        raw = np.zeros((1, K + 2 * K * d))
        raw[0, K:K + 2 * K] = [0.5, 0.0, 0.5, 0.0, 0.0, 0.5]  # modes 0,1 cost equal, mode 2 too
        out = MdnOutput.from_raw(raw, K, d)
        s, g = np.zeros((1, d)), np.zeros((1, d))
        assert best_mode_from_outputs(out, out, s, g)[0] == 0

    def test_single_mode(self):
        enc = small_encoder(0, 2, 1)
        rng = np.random.default_rng(1)
        assert np.all(best_mode(enc, rng.normal(size=(10, 2)), rng.normal(size=(10, 2))) == 0)

    def test_ignores_logits(self):
        K, d = 2, 1
        raw = np.array([[10.0, -10.0, 0.9, 0.0, 0.0, 0.0]])  # mode 0 far off, heavily weighted
        out = MdnOutput.from_raw(raw, K, d)
        assert best_mode_from_outputs(out, out, np.zeros((1, 1)), np.zeros((1, 1)))[0] == 1


class TestGetAction:
    def test_subgoal_time(self):
        assert subgoal_time(0, 50) == 0.5
        assert subgoal_time(39, 50) == pytest.approx(0.8)
        assert subgoal_time(49, 50) == 1.0
        assert np.allclose(subgoal_time(np.arange(3), 4), [0.5, 0.5, 0.75])

    def test_deterministic_and_toward_subgoal(self):
        enc = interpolator_encoder(2)
        pol = Policy(2, DISCRETE4, hidden=(8,), rng=np.random.default_rng(0))
        s, g = np.array([[-0.5, -0.5]]), np.array([[0.5, 0.5]])
        m = predict_subgoal(enc, s, g, 0.5)
        assert np.allclose(m, [[0.0, 0.0]])
        a = get_action(pol, enc, s, g, 0, 50)
        assert np.array_equal(a, pol.act(s, m)) and np.array_equal(a, get_action(pol, enc, s, g, 0, 50))

    def test_stochastic_draws_from_best_mode(self):
        K, d = 2, 2
        enc = TrajectoryEncoder(d, K=K, hidden=(4,), rng=np.random.default_rng(0))
        enc.net.params[:] = 0.0
        b = enc.net.layers[-1][1]
        b[:K] = [5.0, 0.0]  # mode 0 dominates the weights
        b[K:K + 2 * K] = [0.9, 0.9, 0.0, 0.0]  # but mode 1 sits on both s and g
        b[K + 2 * K:] = math.log(0.01)
        s = g = np.zeros((20_000, d))
        m = predict_subgoal(enc, s, g, 0.5, np.random.default_rng(1), stochastic=True)
        assert np.abs(m.mean(axis=0)).max() < 1e-3
        assert m.std(axis=0) == pytest.approx([0.01, 0.01], rel=0.03)


class TestCompositeLoss:
    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        buf = ReplayBuffer(max_states=10, state_dim=2)
        for _ in range(20):
            n = int(rng.integers(2, 11))
            buf.push(Trajectory(rng.uniform(-1, 1, (n, 2)), np.zeros(n - 1, dtype=int)))
        return buf

    def test_weighted_sum(self):
        buf = self._setup()
        enc = small_encoder(0, 2, 2, hidden=(16, 16))
        rngs = TrailRngs.from_seed(5)
        sub = buf.sample_trail(64, rngs.sub)
        losses, _ = trail_loss_and_grad(enc, sub, buf.sample_pairs(64, rngs.edge),
                                        buf.sample_pairs(64, rngs.sc), rngs.sc_t,
                                        TrailLossConfig())
        assert losses.total == pytest.approx(losses.sub + 0.01 * losses.edge + 0.01 * losses.sc,
                                             abs=1e-12)

    def test_zero_alphas_equal_subgoal_training(self):
        buf = self._setup()
        a = small_encoder(0, 2, 2, hidden=(16, 16))
        b = small_encoder(0, 2, 2, hidden=(16, 16))
        cfg = TrailLossConfig(0.0, 0.0)
        rngs = TrailRngs.from_seed(7)
        sub_rng = TrailRngs.from_seed(7).sub
        opt_a, opt_b = Adam(), Adam()
        for _ in range(20):
            la = trail_train_step(a, buf, cfg, opt_a, rngs, batch_size=32)
            loss_b, grad_b = subgoal_loss(b, buf.sample_trail(32, sub_rng))
            opt_b.step(b.net.params, grad_b)
            assert la.total == loss_b
        assert np.array_equal(a.net.params, b.net.params)

    def test_straight_line_midpoint(self):
        """Trajectories along a line: the single-mode encoder learns the interpolant."""
        buf = ReplayBuffer(max_states=11, state_dim=1)
        for _ in range(50):
            buf.push(Trajectory(np.linspace(-1, 1, 11)[:, None], np.zeros(10, dtype=int)))
        enc = small_encoder(0, 1, 1, hidden=(32, 32))
        opt = Adam(lr=3e-3)
        rngs = TrailRngs.from_seed(0)
        for _ in range(1500):
            trail_train_step(enc, buf, TrailLossConfig(K=1), opt, rngs, batch_size=128)
        mid = enc.means(np.array([[-1.0]]), np.array([[1.0]]), 0.5)[0, 0, 0]
        start = enc.means(np.array([[-0.6]]), np.array([[0.4]]), 0.0)[0, 0, 0]
        assert abs(mid) < 0.1 and abs(start + 0.6) < 0.1
