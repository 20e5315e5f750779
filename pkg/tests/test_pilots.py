import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskpilot.harness import collect_demos, run_episode
from deskpilot.pilots import (
    BcPilot,
    DemoDataset,
    DemoEpisode,
    GateNoiseConfig,
    GateState,
    KnnConfig,
    KnnPilot,
    ScriptedNoiseProfile,
    ScriptedPilot,
    action_distance,
    action_distances_to,
    bc_step,
    episode_success,
    fit_bc_pilot,
    fit_weights,
    gated_noise,
    wrap_laggy,
    wrap_noisy,
)
from deskpilot.se3 import BaseAction, Pose, axis_angle_to_quat, quat_normalize
from deskpilot.tasks import AssemblyEnv, DmrConfig, make_task_spec


def rand_action(rng) -> BaseAction:
    return BaseAction(
        Pose(rng.normal(0, 0.1, 3), quat_normalize(rng.normal(size=4))),
        rng.uniform(-1, 1),
    )


@pytest.fixture(scope="module")
def peg_demos() -> DemoDataset:
    spec = make_task_spec("peg")
    env = AssemblyEnv(spec)
    return collect_demos(env, ScriptedPilot(spec), episodes=8, seed=50)


class TestActionDistance:
    def test_identical_is_zero(self):
        a = rand_action(np.random.default_rng(0))
        assert action_distance(a, a) == 0.0

    def test_single_term_translation(self):
        a = BaseAction(Pose.identity(), 0.0)
        b = BaseAction(Pose(np.array([0.01, 0, 0]), np.array([1.0, 0, 0, 0])), 0.0)
        assert action_distance(a, b, (1.0, 1.0, 1.0)) == pytest.approx(0.01, abs=1e-12)

    def test_hand_summed_terms(self):
        a = BaseAction(Pose.identity(), 0.0)
        b = BaseAction(
            Pose(np.array([0.01, 0, 0]), axis_angle_to_quat(np.array([0, 0, np.pi / 2]))),
            0.5,
        )
        d = action_distance(a, b, (1.0, 1.0, 1.0))
        assert d == pytest.approx(0.01 + np.pi / 2 + 0.5, abs=1e-9)
        assert d == pytest.approx(2.08080, abs=1e-5)

    @given(st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_symmetry_and_nonnegativity(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rand_action(rng), rand_action(rng)
        w = tuple(rng.uniform(0.1, 3.0, 3))
        assert action_distance(a, b, w) >= 0
        assert action_distance(a, b, w) == pytest.approx(
            action_distance(b, a, w), abs=1e-9
        )

    @given(st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_triangle_inequality(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rand_action(rng), rand_action(rng), rand_action(rng)
        w = (1.0, 1.0, 1.0)
        assert action_distance(a, c, w) <= (
            action_distance(a, b, w) + action_distance(b, c, w) + 1e-9
        )

    def test_quaternion_sign_invariance(self):
        rng = np.random.default_rng(5)
        a = rand_action(rng)
        b = BaseAction(Pose(a.pose.p.copy(), -a.pose.q), a.gripper)
        assert action_distance(a, b) == pytest.approx(0.0, abs=1e-9)

    @given(st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_vectorized_agrees_with_scalar(self, seed):
        rng = np.random.default_rng(seed)
        q = rand_action(rng)
        others = [rand_action(rng) for _ in range(5)]
        p = np.array([o.pose.p for o in others])
        qq = np.array([o.pose.q for o in others])
        u = np.array([o.gripper for o in others])
        w = (1.0, 2.0, 0.5)
        vec = action_distances_to(q, p, qq, u, w)
        for i, o in enumerate(others):
            assert vec[i] == pytest.approx(action_distance(q, o, w), abs=1e-9)


class TestFitWeights:
    def make_synthetic(self, rot_noise: bool, n_eps=4, n=30, seed=0):
        """Position tracks a smooth path; actions = next position. If
        rot_noise, quaternions are pure noise (uninformative)."""
        rng = np.random.default_rng(seed)
        eps = []
        for e in range(n_eps):
            t = np.linspace(0, 1, n)
            path = np.stack(
                [0.1 * np.cos(2 * np.pi * t + e), 0.1 * np.sin(2 * np.pi * t + e),
                 0.05 + 0.02 * t], axis=1
            )
            states = np.zeros((n, 20))
            actions = np.zeros((n, 8))
            states[:, 0:3] = path
            actions[:, 0:3] = path + 0.003
            for i in range(n):
                q = (
                    quat_normalize(rng.normal(size=4))
                    if rot_noise
                    else np.array([1.0, 0, 0, 0])
                )
                states[i, 3:7] = q
                actions[i, 3:7] = (
                    quat_normalize(rng.normal(size=4))
                    if rot_noise
                    else np.array([1.0, 0, 0, 0])
                )
            states[:, 7] = 0.5
            actions[:, 7] = 0.5
            eps.append(
                DemoEpisode(e, e, states, actions, np.zeros(n, dtype=bool), np.arange(n))
            )
        return DemoDataset(eps)

    def test_noisy_rotation_gets_minimum_weight(self):
        data = self.make_synthetic(rot_noise=True)
        w = fit_weights(data, grid=(0.1, 1.0, 10.0))
        assert w[1] == 0.1

    def test_single_candidate_grid(self):
        data = self.make_synthetic(rot_noise=False)
        assert fit_weights(data, grid=(1.0,)) == (1.0, 1.0, 1.0)

    def test_scaling_grid_preserves_argmin_ranking(self):
        data = self.make_synthetic(rot_noise=True, seed=3)
        w1 = fit_weights(data, grid=(0.1, 1.0, 10.0))
        w2 = fit_weights(data, grid=(0.2, 2.0, 20.0))
        assert np.allclose(np.array(w2) / np.array(w1), 2.0)

    def test_requires_two_episodes(self):
        data = self.make_synthetic(rot_noise=False)
        data.episodes = data.episodes[:1]
        with pytest.raises(ValueError):
            fit_weights(data)


class TestGatedNoise:
    def test_geometric_decay_when_off(self):
        cfg = GateNoiseConfig(p_on=0.0)
        gate = GateState(m=1.0, rng=np.random.default_rng(0))
        for t in range(1, 20):
            gated_noise(gate, cfg)
            assert gate.m == pytest.approx(0.8**t, abs=1e-12)

    def test_long_run_mean_matches_bernoulli(self):
        cfg = GateNoiseConfig()
        gate = GateState(m=0.0, rng=np.random.default_rng(7))
        ms = np.empty(100_000)
        for i in range(len(ms)):
            gated_noise(gate, cfg)
            ms[i] = gate.m
        assert abs(ms.mean() - 0.5) < 0.02

    def test_zero_bounds_zero_perturbation(self):
        cfg = GateNoiseConfig(low=0.0, high=0.0)
        gate = GateState(m=0.5, rng=np.random.default_rng(0))
        for _ in range(10):
            assert gated_noise(gate, cfg).norm() == 0.0

    @given(st.floats(0.0, 1.0), st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_gate_stays_in_unit_interval(self, m0, seed):
        cfg = GateNoiseConfig()
        gate = GateState(m=m0, rng=np.random.default_rng(seed))
        for _ in range(50):
            gated_noise(gate, cfg)
            assert 0.0 <= gate.m <= 1.0

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            GateNoiseConfig(low=1.0, high=-1.0)


class TestKnnPilot:
    def synthetic_dataset(self, n_eps=3, n=20):
        """Actions equal the proprioceptive embedding of their states, so a
        query from a stored state matches exactly its own command."""
        rng = np.random.default_rng(4)
        eps = []
        for e in range(n_eps):
            states = np.zeros((n, 20))
            actions = np.zeros((n, 8))
            for i in range(n):
                p = rng.normal(0, 0.1, 3)
                q = quat_normalize(rng.normal(size=4))
                u = rng.uniform(-1, 1)
                states[i, 0:3] = p
                states[i, 3:7] = q
                states[i, 7] = u
                actions[i, 0:3] = p
                actions[i, 3:7] = q
                actions[i, 7] = u
            eps.append(
                DemoEpisode(e, e, states, actions, np.zeros(n, dtype=bool), np.arange(n))
            )
        return DemoDataset(eps)

    def replay_config(self, L=4):
        return KnnConfig(
            k=1, temperature=1e-6, chunk_min=L, chunk_max=L, noise_enabled=False
        )

    def test_exact_query_replays_episode_verbatim(self):
        data = self.synthetic_dataset()
        cfg = self.replay_config(L=5)
        pilot = KnnPilot(data, cfg, seed=0)
        ep = data.episodes[1]
        out = []
        for i in range(0, len(ep), 5):
            q = BaseAction.from_vector(ep.states[i, 0:8].copy())
            for _ in range(5):
                out.append(pilot.knn_step(q).to_vector())
        out = np.array(out[: len(ep)])
        np.testing.assert_array_equal(out, ep.actions)

    def test_emissions_are_stored_commands(self):
        data = self.synthetic_dataset()
        cfg = KnnConfig(k=3, temperature=0.1, chunk_min=2, chunk_max=6,
                        noise_enabled=False)
        pilot = KnnPilot(data, cfg, seed=1)
        stored = np.concatenate([e.actions for e in data.episodes])
        rng = np.random.default_rng(2)
        for _ in range(500):
            q = rand_action(rng)
            a = pilot.knn_step(q).to_vector()
            assert any(np.array_equal(a, row) for row in stored)

    def test_chunk_contiguity(self):
        data = self.synthetic_dataset()
        cfg = self.replay_config(L=6)
        pilot = KnnPilot(data, cfg, seed=0)
        q = BaseAction.from_vector(data.episodes[0].states[3, 0:8].copy())
        emitted = [pilot.knn_step(q).to_vector() for _ in range(6)]
        expect = data.episodes[0].actions[3:9]
        np.testing.assert_array_equal(np.array(emitted), expect)

    def test_chunk_truncated_at_episode_end(self):
        data = self.synthetic_dataset(n=8)
        cfg = self.replay_config(L=10)
        pilot = KnnPilot(data, cfg, seed=0)
        q = BaseAction.from_vector(data.episodes[0].states[5, 0:8].copy())
        chunk = [pilot.knn_step(q).to_vector() for _ in range(3)]
        np.testing.assert_array_equal(np.array(chunk), data.episodes[0].actions[5:8])
        # buffer exhausted: next call re-queries
        far = BaseAction.from_vector(data.episodes[1].states[0, 0:8].copy())
        nxt = pilot.knn_step(far).to_vector()
        np.testing.assert_array_equal(nxt, data.episodes[1].actions[0])

    def test_softmax_selection_frequencies(self):
        # two stored commands at distances 0.1 and 0.2 from the query
        states = np.zeros((2, 20))
        actions = np.zeros((2, 8))
        states[:, 3] = 1.0
        actions[:, 3] = 1.0
        actions[0, 0] = 0.1
        actions[1, 0] = 0.2
        data = DemoDataset(
            [DemoEpisode(0, 0, states, actions, np.zeros(2, dtype=bool), np.arange(2))]
        )
        cfg = KnnConfig(k=2, temperature=0.1, chunk_min=1, chunk_max=1,
                        noise_enabled=False)
        pilot = KnnPilot(data, cfg, seed=3)
        q = BaseAction(Pose.identity(), 0.0)
        hits = 0
        n = 10_000
        for _ in range(n):
            a = pilot.knn_step(q)
            hits += a.pose.p[0] == 0.1
        # exp(-1) / (exp(-1) + exp(-2)) = 0.73106
        assert abs(hits / n - 0.73106) < 0.02

    def test_k_exceeding_dataset_rejected(self):
        data = self.synthetic_dataset(n_eps=1, n=3)
        with pytest.raises(ValueError):
            KnnPilot(data, KnnConfig(k=10))

    def test_empty_dataset_rejected(self):
        data = DemoDataset([])
        with pytest.raises(ValueError):
            KnnPilot(data, KnnConfig(k=1))


class TestWrappers:
    class ConstantPilot:
        def __init__(self):
            self.calls = 0

        def reset(self, seed=0):
            pass

        def step(self, state):
            self.calls += 1
            return BaseAction(
                Pose(np.array([0.01 * self.calls, 0, 0]), np.array([1.0, 0, 0, 0])), 0.0
            )

    def test_zero_repeat_passthrough(self):
        inner = self.ConstantPilot()
        lag = wrap_laggy(inner, p_repeat=0.0, seed=0)
        outs = [lag.step(None).pose.p[0] for _ in range(5)]
        assert outs == [0.01, 0.02, 0.03, 0.04, 0.05]

    def test_full_repeat_constant_after_first(self):
        inner = self.ConstantPilot()
        lag = wrap_laggy(inner, p_repeat=1.0, seed=0)
        outs = [lag.step(None).pose.p[0] for _ in range(5)]
        assert outs == [0.01] * 5

    def test_empirical_repeat_frequency(self):
        inner = self.ConstantPilot()
        lag = wrap_laggy(inner, p_repeat=0.8, seed=11)
        n = 10_000
        repeats = 0
        prev = lag.step(None).pose.p[0]
        for _ in range(n):
            cur = lag.step(None).pose.p[0]
            repeats += cur == prev
            prev = cur
        assert abs(repeats / n - 0.8) < 0.02

    def test_noisy_wrapper_perturbs(self):
        inner = self.ConstantPilot()
        noisy = wrap_noisy(inner, GateNoiseConfig(p_on=1.0), seed=0)
        a = noisy.step(None)
        # the wrapped output deviates from the clean inner one
        assert a.pose.p[0] != pytest.approx(0.01, abs=1e-15) or a.gripper != 0.0


class TestScriptedPilot:
    @pytest.mark.parametrize("kind", ["peg", "gear", "nut"])
    def test_oracle_succeeds(self, kind):
        spec = make_task_spec(kind)
        env = AssemblyEnv(spec)
        r = run_episode(env, ScriptedPilot(spec, seed=0), seed=4)
        assert r.success, f"{kind} oracle failed: {r.events}"

    def test_waypoint_identity_above_pregrasp(self):
        spec = make_task_spec("peg")
        env = AssemblyEnv(spec, dmr=DmrConfig.zero())
        s = env.reset(0)
        pilot = ScriptedPilot(spec, seed=0)
        a = pilot.step(s)
        from deskpilot.tasks import grasp_point

        gp = grasp_point(s.held_pose, spec)
        # first command moves toward the waypoint above the part
        d = np.array([gp[0], gp[1], pilot.SAFE_Z]) - s.ee.pose.p
        step_vec = a.pose.p - s.ee.pose.p
        assert np.dot(step_vec, d) > 0

    def test_noise_seeds_differ(self):
        spec = make_task_spec("peg")
        prof = ScriptedNoiseProfile(aim_sigma=0.005, gate=GateNoiseConfig())
        traces = []
        for pilot_seed in (1, 2):
            env = AssemblyEnv(spec)
            s = env.reset(9)
            pilot = ScriptedPilot(spec, noise=prof, seed=pilot_seed)
            acts = []
            for _ in range(30):
                a = pilot.step(s)
                acts.append(a.to_vector())
                s, _, ev = env.step(a)
                if ev:
                    break
            traces.append(np.array(acts))
        n = min(len(traces[0]), len(traces[1]))
        assert not np.array_equal(traces[0][:n], traces[1][:n])

    def test_determinism_same_seed(self):
        spec = make_task_spec("peg")
        env = AssemblyEnv(spec)
        prof = ScriptedNoiseProfile(aim_sigma=0.005, gate=GateNoiseConfig())
        r1 = run_episode(env, ScriptedPilot(spec, noise=prof, seed=1), seed=9)
        r2 = run_episode(env, ScriptedPilot(spec, noise=prof, seed=1), seed=9)
        assert r1.progression == r2.progression and r1.steps == r2.steps


class TestBcPilot:
    def constant_dataset(self):
        n = 40
        rng = np.random.default_rng(0)
        states = rng.normal(0, 0.1, size=(n, 20))
        action = np.array([0.05, -0.02, 0.11, 1.0, 0, 0, 0, 0.3])
        actions = np.tile(action, (n, 1))
        return (
            DemoDataset(
                [DemoEpisode(0, 0, states, actions, np.zeros(n, dtype=bool), np.arange(n))]
            ),
            action,
        )

    def test_constant_dataset_fit(self):
        # the linear member of the regressor family has the unique optimum
        # W = 0, b = action, so the fit holds everywhere
        data, action = self.constant_dataset()
        pilot = fit_bc_pilot(data, hidden=(), epochs=2000, lr=1e-2, seed=0)
        rng = np.random.default_rng(1)
        for _ in range(5):
            out = bc_step(pilot, rng.normal(0, 0.1, 20)).to_vector()
            np.testing.assert_allclose(out, action, atol=1e-3)

    def test_linear_gd_loss_monotone(self):
        rng = np.random.default_rng(2)
        n = 50
        states = rng.normal(size=(n, 20))
        w_true = rng.normal(size=(20, 8)) * 0.1
        actions = states @ w_true
        data = DemoDataset(
            [DemoEpisode(0, 0, states, actions, np.zeros(n, dtype=bool), np.arange(n))]
        )
        pilot = fit_bc_pilot(data, hidden=(), epochs=200, lr=1e-2, optimizer="gd", seed=0)
        losses = pilot.report.losses
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_output_quaternion_unit_norm(self, peg_demos):
        pilot = fit_bc_pilot(peg_demos, epochs=50, seed=0)
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = bc_step(pilot, rng.normal(0, 0.2, 20))
            assert abs(np.linalg.norm(a.pose.q) - 1.0) < 1e-9
            assert -1.0 <= a.gripper <= 1.0

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            fit_bc_pilot(DemoDataset([]))


class TestDemoFile:
    def test_round_trip_bit_exact(self, peg_demos, tmp_path):
        path = tmp_path / "demos.jsonl"
        peg_demos.save(path)
        loaded = DemoDataset.load(path)
        assert loaded.task_kind == peg_demos.task_kind
        assert loaded.rate_hz == peg_demos.rate_hz
        for a, b in zip(peg_demos.episodes, loaded.episodes):
            np.testing.assert_array_equal(a.states, b.states)
            np.testing.assert_array_equal(a.actions, b.actions)
            np.testing.assert_array_equal(a.assisted, b.assisted)
            assert a.seed == b.seed

    def test_byte_identical_rewrites(self, peg_demos, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        peg_demos.save(p1)
        peg_demos.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_format_rejected(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"format": "something-else"}\n')
        with pytest.raises(ValueError):
            DemoDataset.load(p)

    def test_timestamps_must_increase(self):
        with pytest.raises(ValueError):
            DemoEpisode(
                0, 0, np.zeros((2, 20)), np.zeros((2, 8)),
                np.zeros(2, dtype=bool), np.array([3, 3]),
            )

    def test_episode_success_detection(self):
        # without observation noise the geometric screen is exact
        spec = make_task_spec("peg")
        env = AssemblyEnv(spec, dmr=DmrConfig(pose_noise_sigma=0.0))
        data = collect_demos(env, ScriptedPilot(spec), episodes=5, seed=50)
        flags = [episode_success(ep, spec) for ep in data.episodes]
        assert all(flags)  # oracle demos all succeed

    def test_episode_failure_detection(self):
        spec = make_task_spec("peg")
        env = AssemblyEnv(spec, dmr=DmrConfig(pose_noise_sigma=0.0))
        prof = ScriptedNoiseProfile(aim_sigma=0.02, gate=GateNoiseConfig())
        data = collect_demos(env, ScriptedPilot(spec, noise=prof, seed=0), 3, seed=77)
        flags = [episode_success(ep, spec) for ep in data.episodes]
        assert not all(flags)  # heavy aim bias must fail some
