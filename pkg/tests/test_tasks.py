import math

import numpy as np
import pytest

from deskpilot.admittance import AdmittanceState, Wrench
from deskpilot.se3 import BaseAction, Pose, ResidualAction, axis_angle_to_quat
from deskpilot.tasks import (
    OBS_DIM,
    STATE_DIM,
    AssemblyEnv,
    DmrConfig,
    RewardConfig,
    TaskSpec,
    compute_reward,
    contact_force_at_tip,
    grasp_point,
    make_task_spec,
    observe_copilot,
    observe_state,
    part_tip,
    progression,
    tilt_angle,
    unpack_obs,
    unpack_state,
)

IQ = np.array([1.0, 0, 0, 0])


def drive(env, state, goal, grip, max_steps=200, rate=0.012, yaw_rate=0.0):
    """Rate-limited waypoint tracking, the way a pilot streams targets."""
    cur = env._drive_cursor if hasattr(env, "_drive_cursor") else state.ee.pose.p.copy()
    yaw = getattr(env, "_drive_yaw", 0.0)
    goal = np.asarray(goal, dtype=float)
    events = []
    for _ in range(max_steps):
        d = goal - cur
        n = np.linalg.norm(d)
        cur = goal.copy() if n < rate else cur + d / n * rate
        yaw += yaw_rate
        q = axis_angle_to_quat(np.array([0, 0, yaw]))
        state, _, events = env.step(BaseAction(Pose(cur.copy(), q), grip))
        if events:
            break
        if n < 1e-9 and yaw_rate == 0.0 and np.linalg.norm(state.ee.xi_dot) < 1e-3:
            break
    env._drive_cursor = cur
    env._drive_yaw = yaw
    return state, events


def complete_peg_episode(env, seed=0):
    """Grasp + insert with clean commands; returns (state, all events)."""
    spec = env.spec
    state = env.reset(seed)
    env._drive_cursor = state.ee.pose.p.copy()
    env._drive_yaw = 0.0
    log = []
    gp = grasp_point(state.held_pose, spec)
    state, ev = drive(env, state, [gp[0], gp[1], 0.10], 1.0)
    log += ev
    state, ev = drive(env, state, gp, 1.0)
    log += ev
    state, ev = drive(env, state, gp, -1.0, max_steps=3)
    log += ev
    ax = spec.axis_xy
    state, ev = drive(env, state, [gp[0], gp[1], 0.10], -1.0)
    log += ev
    state, ev = drive(env, state, [ax[0], ax[1], 0.10], -1.0)
    log += ev
    insert_z = spec.bore_floor_z + spec.part_length
    state, ev = drive(env, state, [ax[0], ax[1], insert_z], -1.0, max_steps=300)
    log += ev
    return state, log


class TestReset:
    def test_same_seed_identical(self):
        env = AssemblyEnv(make_task_spec("peg"))
        a = env.reset(42)
        sa = observe_state(a).copy()
        held_a = a.held_pose.p.copy()
        b = env.reset(42)
        np.testing.assert_array_equal(observe_state(b), sa)
        np.testing.assert_array_equal(b.held_pose.p, held_a)
        np.testing.assert_array_equal(b.ctrl_scales, a.ctrl_scales)

    def test_zero_dmr_canonical(self):
        env = AssemblyEnv(make_task_spec("peg"), dmr=DmrConfig.zero())
        s = env.reset(123)
        np.testing.assert_array_equal(s.held_pose.p[:2], [-0.08, 0.0])
        np.testing.assert_array_equal(s.obs_noise_fixed, np.zeros(3))
        np.testing.assert_array_equal(s.ctrl_scales, np.ones(4))
        assert s.phase_offset == 0.0

    def test_init_position_std_matches_dmr(self):
        env = AssemblyEnv(make_task_spec("peg"))
        xs = []
        for seed in range(10000):
            s = env.reset(seed)
            xs.append(s.held_pose.p[:2] - np.array([-0.08, 0.0]))
        std = np.asarray(xs).std(axis=0)
        np.testing.assert_allclose(std, [0.02, 0.02], atol=0.002)

    def test_controller_scales_in_range(self):
        env = AssemblyEnv(make_task_spec("peg"))
        for seed in range(50):
            s = env.reset(seed)
            assert np.all(s.ctrl_scales >= 0.95) and np.all(s.ctrl_scales <= 1.05)


class TestStep:
    def test_hold_at_rest_no_motion_no_events(self):
        env = AssemblyEnv(make_task_spec("peg"), dmr=DmrConfig.zero())
        s = env.reset(0)
        p0 = s.ee.pose.p.copy()
        for _ in range(10):
            s, r, ev = env.step(BaseAction(Pose(p0.copy(), IQ), 1.0))
            assert ev == []
        np.testing.assert_allclose(s.ee.pose.p, p0, atol=1e-12)
        assert s.wrench.magnitude() == 0.0

    def test_terminated_episode_rejects_step(self):
        env = AssemblyEnv(make_task_spec("peg"), dmr=DmrConfig.zero(), timeout_steps=2)
        s = env.reset(0)
        a = BaseAction(Pose(s.ee.pose.p.copy(), IQ), 1.0)
        env.step(a)
        _, _, ev = env.step(a)
        assert "timeout" in ev
        with pytest.raises(RuntimeError):
            env.step(a)

    def test_trajectory_determinism_bit_exact(self):
        spec = make_task_spec("peg")
        rng = np.random.default_rng(5)
        actions = [
            BaseAction(
                Pose(np.array([0, 0, 0.16]) + rng.normal(0, 0.01, 3), IQ),
                rng.uniform(-1, 1),
            )
            for _ in range(40)
        ]
        results = []
        for _ in range(2):
            env = AssemblyEnv(spec)
            s = env.reset(9)
            traj, rews = [], []
            for a in actions:
                s, r, ev = env.step(a)
                traj.append(observe_state(s).copy())
                rews.append(r)
                if ev:
                    break
            results.append((np.asarray(traj), np.asarray(rews)))
        np.testing.assert_array_equal(results[0][0], results[1][0])
        np.testing.assert_array_equal(results[0][1], results[1][1])

    def test_attached_part_rigidity(self):
        env = AssemblyEnv(make_task_spec("peg"), dmr=DmrConfig.zero())
        s = env.reset(0)
        env._drive_cursor = s.ee.pose.p.copy()
        env._drive_yaw = 0.0
        gp = grasp_point(s.held_pose, env.spec)
        s, _ = drive(env, s, [gp[0], gp[1], 0.10], 1.0)
        s, _ = drive(env, s, gp, 1.0)
        s, _ = drive(env, s, gp, -1.0, max_steps=3)
        assert s.attached
        rel0 = s.ee.pose.inverse().compose(s.held_pose)
        s, _ = drive(env, s, [0.0, 0.04, 0.12], -1.0)
        rel1 = s.ee.pose.inverse().compose(s.held_pose)
        np.testing.assert_allclose(rel0.p, rel1.p, atol=1e-12)
        np.testing.assert_allclose(rel0.q, rel1.q, atol=1e-12)

    def test_drop_event_on_open(self):
        env = AssemblyEnv(make_task_spec("peg"), dmr=DmrConfig.zero())
        s = env.reset(0)
        env._drive_cursor = s.ee.pose.p.copy()
        env._drive_yaw = 0.0
        gp = grasp_point(s.held_pose, env.spec)
        s, _ = drive(env, s, [gp[0], gp[1], 0.10], 1.0)
        s, _ = drive(env, s, gp, 1.0)
        s, _ = drive(env, s, gp, -1.0, max_steps=3)
        s, _ = drive(env, s, [gp[0], gp[1], 0.10], -1.0)
        assert s.attached
        _, _, ev = env.step(BaseAction(Pose(s.ee.pose.p.copy(), IQ), 1.0))
        assert "drop" in ev
        assert env.state.terminated
        # part settled back to the table plane
        assert env.state.held_pose.p[2] == pytest.approx(
            env.spec.table_z + env.spec.part_length / 2
        )

    def test_grasp_requires_proximity(self):
        env = AssemblyEnv(make_task_spec("peg"), dmr=DmrConfig.zero())
        s = env.reset(0)
        # close the gripper far from the part
        _, _, ev = env.step(BaseAction(Pose(s.ee.pose.p.copy(), IQ), -1.0))
        assert not env.state.attached and ev == []

    def test_force_violation_after_sustained_push(self):
        spec = make_task_spec("peg")
        spec.force_limit = 0.5
        env = AssemblyEnv(spec, dmr=DmrConfig.zero())
        s = env.reset(0)
        # command the bare fingertip below the table plane and hold
        target = Pose(np.array([-0.15, 0.0, -0.02]), IQ)
        events = []
        for _ in range(60):
            s, r, ev = env.step(BaseAction(target, 1.0))
            events += ev
            if ev:
                break
        assert "force_violation" in events
        assert r <= -50.0 + 1.0  # termination penalty dominates

    def test_success_latch_and_termination(self):
        env = AssemblyEnv(make_task_spec("peg"), dmr=DmrConfig.zero())
        s, log = complete_peg_episode(env)
        assert log.count("success") == 1
        assert s.success_latched and s.terminated
        assert progression(s, env.spec) == 1.0


class TestContactModel:
    def test_wall_penetration_hand_computed(self):
        spec = make_task_spec("peg")
        w = spec.clearance
        depth = 0.0002
        # tip inside the bore, pressed into the +x wall by `depth`
        tip = np.array([spec.axis_xy[0] + w + depth, spec.axis_xy[1], 0.010])
        f = contact_force_at_tip(spec, tip, np.zeros(3), spec.bore_floor_z)
        expected = spec.contact_stiffness * depth
        np.testing.assert_allclose(f, [-expected, 0.0, 0.0], atol=1e-12)

    def test_floor_penetration_hand_computed(self):
        spec = make_task_spec("peg")
        tip = np.array([spec.axis_xy[0], spec.axis_xy[1], spec.bore_floor_z - 0.0003])
        f = contact_force_at_tip(spec, tip, np.zeros(3), spec.bore_floor_z)
        np.testing.assert_allclose(
            f, [0.0, 0.0, spec.contact_stiffness * 0.0003], atol=1e-12
        )

    def test_chamfer_funnels_inward(self):
        spec = make_task_spec("peg")
        w, c = spec.clearance, spec.chamfer
        rho = w + 0.5 * c
        tip = np.array(
            [spec.axis_xy[0] + rho, spec.axis_xy[1], spec.entry_z - c + 0.4 * c]
        )
        f = contact_force_at_tip(spec, tip, np.zeros(3), spec.bore_floor_z)
        assert f[0] < 0  # pushes toward the axis
        assert f[2] > 0  # and up along the 45 deg normal
        np.testing.assert_allclose(-f[0], f[2], atol=1e-12)

    def test_wrench_opposes_penetration(self):
        spec = make_task_spec("peg")
        rng = np.random.default_rng(11)
        for _ in range(300):
            tip = np.array(
                [
                    spec.axis_xy[0] + rng.uniform(-0.06, 0.06),
                    spec.axis_xy[1] + rng.uniform(-0.06, 0.06),
                    rng.uniform(-0.005, 0.03),
                ]
            )
            v = rng.uniform(-0.1, 0.1, 3)
            from deskpilot.tasks import insertion_surfaces

            f = contact_force_at_tip(spec, tip, v, spec.bore_floor_z)
            for pen, n in insertion_surfaces(spec, tip, spec.bore_floor_z):
                # force never points into the surface
                assert np.dot(f, n) >= -1e-9 or pen > spec.penetration_cap

    def test_friction_capped_by_coulomb(self):
        spec = make_task_spec("peg")
        tip = np.array([spec.axis_xy[0], spec.axis_xy[1], spec.bore_floor_z - 0.001])
        fast = contact_force_at_tip(spec, tip, np.array([10.0, 0, 0]), spec.bore_floor_z)
        fn = spec.contact_stiffness * 0.001
        assert abs(fast[0]) == pytest.approx(spec.mu * fn, abs=1e-9)


class TestNutKinematics:
    def engaged_env(self):
        spec = make_task_spec("nut")
        env = AssemblyEnv(spec, dmr=DmrConfig.zero())
        s = env.reset(0)
        env._drive_cursor = s.ee.pose.p.copy()
        env._drive_yaw = 0.0
        gp = grasp_point(s.held_pose, spec)
        s, _ = drive(env, s, [gp[0], gp[1], 0.12], 1.0)
        s, _ = drive(env, s, gp, 1.0)
        s, _ = drive(env, s, gp, -1.0, max_steps=3)
        ax = spec.axis_xy
        s, _ = drive(env, s, [gp[0], gp[1], 0.12], -1.0)
        s, _ = drive(env, s, [ax[0], ax[1], 0.12], -1.0)
        s, _ = drive(env, s, [ax[0], ax[1], 0.0602], -1.0)
        assert s.engaged
        return env, s

    def test_axial_advance_is_exactly_pitch_times_yaw(self):
        env, s = self.engaged_env()
        spec = env.spec
        ax = spec.axis_xy
        yaw = 0.0
        for _ in range(40):
            yaw += 0.03
            q = axis_angle_to_quat(np.array([0, 0, yaw]))
            zt = 0.0602 - spec.screw_pitch * yaw
            s, _, ev = env.step(BaseAction(Pose(np.array([ax[0], ax[1], zt]), q), -1.0))
            tip = part_tip(s.held_pose, spec)
            assert tip[2] == pytest.approx(
                s.engage_tip_z - spec.screw_pitch * s.cum_yaw, abs=1e-12
            )
            if ev:
                break

    def test_cum_yaw_never_negative(self):
        env, s = self.engaged_env()
        spec = env.spec
        ax = spec.axis_xy
        # command an untightening rotation
        for k in range(20):
            q = axis_angle_to_quat(np.array([0, 0, -0.02 * (k + 1)]))
            s, _, ev = env.step(
                BaseAction(Pose(np.array([ax[0], ax[1], 0.0602]), q), -1.0)
            )
            assert s.cum_yaw >= 0.0
            if ev:
                break

    def test_nut_success_via_cumulative_rotation(self):
        env, s = self.engaged_env()
        spec = env.spec
        ax = spec.axis_xy
        yaw = 0.0
        events = []
        for _ in range(300):
            yaw += 0.03
            zt = 0.0602 - spec.screw_pitch * min(yaw, math.pi)
            q = axis_angle_to_quat(np.array([0, 0, yaw]))
            s, _, ev = env.step(BaseAction(Pose(np.array([ax[0], ax[1], zt]), q), -1.0))
            events += ev
            if ev:
                break
        assert "success" in events
        assert s.cum_yaw >= math.pi

    def test_progression_zero_before_engagement(self):
        spec = make_task_spec("nut")
        env = AssemblyEnv(spec, dmr=DmrConfig.zero())
        s = env.reset(0)
        assert progression(s, spec) == 0.0


class TestGearPhase:
    def test_misaligned_phase_blocks_seating(self):
        spec = make_task_spec("gear")
        env = AssemblyEnv(spec, dmr=DmrConfig.zero())
        s = env.reset(0)
        # force a half-period phase offset: worst-case misalignment
        s.phase_offset = math.pi / spec.n_teeth
        env._drive_cursor = s.ee.pose.p.copy()
        env._drive_yaw = 0.0
        gp = grasp_point(s.held_pose, spec)
        s, _ = drive(env, s, [gp[0], gp[1], 0.12], 1.0)
        s, _ = drive(env, s, gp, 1.0)
        s, _ = drive(env, s, gp, -1.0, max_steps=3)
        ax = spec.axis_xy
        s, _ = drive(env, s, [gp[0], gp[1], 0.12], -1.0)
        s, _ = drive(env, s, [ax[0], ax[1], 0.12], -1.0)
        s, ev = drive(env, s, [ax[0], ax[1], spec.base_z + spec.part_length], -1.0)
        assert "success" not in ev
        assert not s.meshed
        tip = part_tip(s.held_pose, spec)
        assert tip[2] > spec.base_z + 0.5 * spec.tooth_height

    def test_yaw_dither_finds_mesh(self):
        spec = make_task_spec("gear")
        env = AssemblyEnv(spec, dmr=DmrConfig.zero())
        s = env.reset(0)
        s.phase_offset = math.pi / spec.n_teeth
        env._drive_cursor = s.ee.pose.p.copy()
        env._drive_yaw = 0.0
        gp = grasp_point(s.held_pose, spec)
        s, _ = drive(env, s, [gp[0], gp[1], 0.12], 1.0)
        s, _ = drive(env, s, gp, 1.0)
        s, _ = drive(env, s, gp, -1.0, max_steps=3)
        ax = spec.axis_xy
        s, _ = drive(env, s, [gp[0], gp[1], 0.12], -1.0)
        s, _ = drive(env, s, [ax[0], ax[1], 0.12], -1.0)
        seat_cmd = spec.base_z + spec.part_length - 0.0005
        s, ev = drive(
            env, s, [ax[0], ax[1], seat_cmd], -1.0, max_steps=400, yaw_rate=0.01
        )
        assert "success" in ev
        assert s.meshed


class TestReward:
    def make_state(self):
        env = AssemblyEnv(make_task_spec("peg"), dmr=DmrConfig.zero())
        return env.reset(0), env

    def test_all_terms_vanish(self):
        s, env = self.make_state()
        r = compute_reward(
            s, ResidualAction.zero(), ResidualAction.zero(), [], RewardConfig(), env.spec
        )
        assert r == 0.0

    def test_regularization_scale(self):
        s, env = self.make_state()
        res = ResidualAction(np.array([1.0, 0, 0]), np.zeros(3), 0.0)
        prev = res  # kill the smoothness term
        r = compute_reward(s, prev, res, [], RewardConfig(), env.spec)
        assert r == pytest.approx(-0.1, abs=1e-12)

    def test_smoothness_scale(self):
        s, env = self.make_state()
        res = ResidualAction(np.array([1.0, 0, 0]), np.zeros(3), 0.0)
        r = compute_reward(s, ResidualAction.zero(), res, [], RewardConfig(), env.spec)
        # regularization (0.1 * 1) + smoothness (0.1 * 1)
        assert r == pytest.approx(-0.2, abs=1e-12)

    def test_tilt_scale(self):
        s, env = self.make_state()
        s.ee.pose.q = axis_angle_to_quat(np.array([0.2, 0, 0]))
        r = compute_reward(
            s, ResidualAction.zero(), ResidualAction.zero(), [], RewardConfig(), env.spec
        )
        assert r == pytest.approx(-0.2, abs=1e-9)

    def test_force_penalty_clipped(self):
        s, env = self.make_state()
        s.wrench = Wrench(np.array([100.0, 0, 0]), np.zeros(3))
        r = compute_reward(
            s, ResidualAction.zero(), ResidualAction.zero(), [], RewardConfig(), env.spec
        )
        assert r == pytest.approx(-0.2, abs=1e-12)  # clipped at bound, scale 0.2

    def test_axis_align_bonus(self):
        s, env = self.make_state()
        s.held_pose = Pose(env.spec.success_pose.p + np.array([0.002, 0, 0.05]), IQ)
        r = compute_reward(
            s, ResidualAction.zero(), ResidualAction.zero(), [], RewardConfig(), env.spec
        )
        assert r == pytest.approx(0.05, abs=1e-12)

    def test_termination_penalty_on_each_failure(self):
        s, env = self.make_state()
        for ev in ("drop", "force_violation", "timeout"):
            r = compute_reward(
                s, ResidualAction.zero(), ResidualAction.zero(), [ev], RewardConfig(),
                env.spec,
            )
            assert r == pytest.approx(-50.0, abs=1e-12)

    def test_success_bonus_once(self):
        s, env = self.make_state()
        r = compute_reward(
            s, ResidualAction.zero(), ResidualAction.zero(), ["success"], RewardConfig(),
            env.spec,
        )
        assert r == pytest.approx(30.0, abs=1e-12)

    def test_success_fires_once_per_episode(self):
        env = AssemblyEnv(make_task_spec("peg"), dmr=DmrConfig.zero())
        _, log = complete_peg_episode(env)
        assert log.count("success") == 1


class TestProgression:
    def test_endpoints_and_midpoint(self):
        spec = make_task_spec("peg")
        env = AssemblyEnv(spec, dmr=DmrConfig.zero())
        s = env.reset(0)
        s.held_pose = Pose(spec.success_pose.p.copy(), IQ)
        s.success_latched = False
        assert progression(s, spec) == pytest.approx(1.0)
        s.held_pose = Pose(spec.success_pose.p + np.array([spec.e_max, 0, 0]), IQ)
        assert progression(s, spec) == pytest.approx(0.0)
        s.held_pose = Pose(spec.success_pose.p + np.array([spec.e_max * 2, 0, 0]), IQ)
        assert progression(s, spec) == pytest.approx(0.0)
        s.held_pose = Pose(spec.success_pose.p + np.array([spec.e_max / 2, 0, 0]), IQ)
        assert progression(s, spec) == pytest.approx(0.5)

    def test_bounded_on_random_states(self):
        spec = make_task_spec("peg")
        env = AssemblyEnv(spec)
        rng = np.random.default_rng(3)
        for seed in range(20):
            s = env.reset(seed)
            s.held_pose = Pose(rng.uniform(-0.5, 0.5, 3), IQ)
            assert 0.0 <= progression(s, spec) <= 1.0


class TestObservations:
    def test_dimensions(self):
        env = AssemblyEnv(make_task_spec("peg"))
        s = env.reset(0)
        assert observe_state(s).shape == (STATE_DIM,)
        obs = observe_copilot(s, BaseAction(Pose.identity(), 0.0), ResidualAction.zero())
        assert obs.shape == (OBS_DIM,)
        assert STATE_DIM == 20 and OBS_DIM == 35

    def test_relative_slots_zero_when_objects_at_ee(self):
        env = AssemblyEnv(make_task_spec("peg"), dmr=DmrConfig.zero())
        s = env.reset(0)
        s.fixed_pose = Pose(s.ee.pose.p.copy(), IQ)
        s.held_pose = Pose(s.ee.pose.p.copy(), IQ)
        d = unpack_state(observe_state(s))
        np.testing.assert_allclose(d["rel_fixed"], np.zeros(3), atol=1e-15)
        np.testing.assert_allclose(d["rel_held"], np.zeros(3), atol=1e-15)

    def test_pack_unpack_round_trip(self):
        env = AssemblyEnv(make_task_spec("peg"))
        s = env.reset(7)
        base = BaseAction(Pose(np.array([0.1, 0.2, 0.3]), IQ), -0.5)
        res = ResidualAction(np.array([0.1, -0.1, 0.2]), np.array([0, 0.3, 0]), 0.4)
        obs = observe_copilot(s, base, res)
        d = unpack_obs(obs)
        np.testing.assert_array_equal(d["base_action"], base.to_vector())
        np.testing.assert_array_equal(d["prev_residual"], res.to_vector())
        rebuilt = np.concatenate(
            [d["p"], d["q"], [d["gripper"]], d["rel_fixed"], d["rel_held"],
             d["v_lin"], d["v_ang"], d["base_action"], d["prev_residual"]]
        )
        np.testing.assert_array_equal(rebuilt, obs)

    def test_observation_noise_offsets_applied(self):
        env = AssemblyEnv(make_task_spec("peg"))
        s = env.reset(3)
        d = unpack_state(observe_state(s))
        true_rel_fixed = s.ee.pose.p - s.fixed_pose.p
        np.testing.assert_allclose(
            d["rel_fixed"], true_rel_fixed - s.obs_noise_fixed, atol=1e-15
        )


class TestSpecValidation:
    def test_part_must_fit_hole(self):
        with pytest.raises(ValueError):
            TaskSpec(
                kind="peg",
                hole_radius=0.004,
                part_radius=0.005,
                insertion_depth=0.01,
                part_length=0.04,
                success_pose=Pose.identity(),
            )

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_task_spec("bolt")

    def test_tilt_angle(self):
        assert tilt_angle(Pose.identity()) == 0.0
        tilted = Pose(np.zeros(3), axis_angle_to_quat(np.array([0.3, 0, 0])))
        assert tilt_angle(tilted) == pytest.approx(0.3, abs=1e-12)
