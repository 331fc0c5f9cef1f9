# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

import math

import numpy as np
import pytest

from kinedecode.kinematics.arm import (ArmModel, IKConvergenceError, JointTrajectory,
                                       forward_kinematics, interpolate_joints,
                                       inverse_kinematics, solve_trajectory, write_joint_csv)
from kinedecode.kinematics.metrics import (DegenerateCorrelationError, Trajectory3D, WorkspaceBox,
                                           map_to_workspace, metrics_table, midpoint, overall_pcc,
                                           pcc, per_axis_pcc, rmse, unmap_from_workspace)
from kinedecode.tables import read_matrix


@pytest.fixture(scope="module")
def arm():
    return ArmModel.load()


def test_pcc_examples():
    assert pcc([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-15)
    assert pcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    assert pcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)


def test_pcc_degenerate_cases():
    with pytest.raises(DegenerateCorrelationError):
        pcc([2, 2, 2], [5, 5, 5])
    with pytest.raises(DegenerateCorrelationError):
        pcc([1, 2, 3], [5, 5, 5])
    with pytest.raises(DegenerateCorrelationError):
        pcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateCorrelationError):
        overall_pcc(np.ones((4, 6)), np.arange(24.0).reshape(4, 6))
    with pytest.raises(ValueError):
        pcc([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        pcc([1], [1])


@pytest.mark.parametrize("seed", range(5))
def test_pcc_positive_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=50), rng.normal(size=50)
    base = pcc(a, b)
    assert -1.0 <= base <= 1.0
    assert pcc(a, 3.5 * b + 2.0) == pytest.approx(base, abs=1e-12)
    assert pcc(0.1 * a - 7.0, b) == pytest.approx(base, abs=1e-12)


def test_overall_pcc_matches_flattened_oracle():
    rng = np.random.default_rng(1)
    pred, truth = rng.normal(size=(7, 6)), rng.normal(size=(7, 6))
    oracle = np.corrcoef(pred.ravel(), truth.ravel())[0, 1]
    assert overall_pcc(pred, truth) == pytest.approx(oracle, abs=1e-12)
    assert overall_pcc(truth, truth) == pytest.approx(1.0, abs=1e-15)
    assert per_axis_pcc(pred, truth).shape == (6,)
    with pytest.raises(ValueError):
        overall_pcc(pred, truth[:, :5])


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-12)
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=20), rng.normal(size=20)
    assert rmse(-3.0 * a, -3.0 * b) == pytest.approx(3.0 * rmse(a, b), rel=1e-12)
    with pytest.raises(ValueError):
        rmse([], [])


def test_metrics_table_rows():
    rng = np.random.default_rng(3)
    truth = rng.uniform(size=(40, 6))
    rows = metrics_table(truth + 0.01 * rng.normal(size=truth.shape), truth)
    assert [r[0] for r in rows] == ["index_x", "index_y", "index_z", "thumb_x", "thumb_y",
                                    "thumb_z", "overall", "midpoint_x", "midpoint_y",
                                    "midpoint_z", "midpoint"]
    assert all(r[1] > 0.9 for r in rows)


def test_midpoint():
    t = np.arange(2) / 10.0
    index = Trajectory3D(t, [[0, 0, 0], [1, 1, 1]])
    thumb = Trajectory3D(t, [[2, 4, 6], [1, 1, 1]])
    np.testing.assert_array_equal(midpoint(index, thumb).points, [[1, 2, 3], [1, 1, 1]])
    np.testing.assert_array_equal(midpoint(thumb, index).points, midpoint(index, thumb).points)
    np.testing.assert_array_equal(midpoint(index, index).points, index.points)
    with pytest.raises(ValueError):
        midpoint(index, Trajectory3D(t + 1.0, thumb.points))
    with pytest.raises(ValueError):
        midpoint(index, Trajectory3D(t, thumb.points, metric=True))


def test_fingertips_split():
    six = np.arange(12.0).reshape(2, 6)
    index, thumb = Trajectory3D.fingertips([0.0, 0.1], six)
    np.testing.assert_array_equal(index.points, six[:, :3])
    np.testing.assert_array_equal(thumb.points, six[:, 3:])


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory3D([0.0, 0.0], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Trajectory3D([0.0], [[0.0, np.nan, 0.0]])
    with pytest.raises(ValueError):
        Trajectory3D([0.0, 1.0], np.zeros((2, 2)))


def test_workspace_mapping():
    box = WorkspaceBox()
    center = Trajectory3D([0.0], [[0.5, 0.5, 0.5]])
    np.testing.assert_allclose(map_to_workspace(center, box).points[0], box.center, atol=1e-15)

    rng = np.random.default_rng(4)
    t = Trajectory3D(np.arange(30) / 10.0, rng.uniform(size=(30, 3)))
    mapped = map_to_workspace(t, box)
    assert mapped.metric
    np.testing.assert_allclose(unmap_from_workspace(mapped, box).points, t.points, atol=1e-12)

    unit = WorkspaceBox((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    np.testing.assert_array_equal(map_to_workspace(t, unit).points, t.points)
    with pytest.raises(ValueError):
        map_to_workspace(mapped, box)
    with pytest.raises(ValueError):
        unmap_from_workspace(t, box)
    with pytest.raises(ValueError):
        WorkspaceBox((0.0, 0.0, 0.0), (1.0, 0.0, 1.0))


def test_home_pose(arm):
    position, rotation = forward_kinematics(arm, np.zeros(7))
    np.testing.assert_allclose(position, [0.088, 0.0, 0.926], atol=1e-12)
    np.testing.assert_allclose(rotation @ rotation.T, np.eye(3), atol=1e-12)


def test_wrist_roll_keeps_position(arm):
    q = arm.ready.copy()
    base, _ = forward_kinematics(arm, q)
    for angle in (-2.0, 0.3, 2.5):
        q[6] = angle
        np.testing.assert_allclose(forward_kinematics(arm, q)[0], base, atol=1e-12)


def test_jacobian_matches_finite_differences(arm):
    rng = np.random.default_rng(5)
    q = rng.uniform(arm.lower, arm.upper)
    h = 1e-6
    numeric = np.column_stack([
        (forward_kinematics(arm, q + h * e)[0] - forward_kinematics(arm, q - h * e)[0]) / (2 * h)
        for e in np.eye(7)])
    np.testing.assert_allclose(arm.position_jacobian(q), numeric, atol=1e-7)


def test_arm_file_errors(arm):
    with pytest.raises(ValueError, match="missing key"):
        ArmModel.from_text("joints = 7\njoint1.a = 0\n")
    with pytest.raises(ValueError, match="duplicate key"):
        ArmModel.from_text("name = a\nname = b\n")
    with pytest.raises(ValueError, match="key = value"):
        ArmModel.from_text("joints 7\n")
    link = arm.links[0]
    with pytest.raises(ValueError):
        ArmModel(arm.links[:6])
    with pytest.raises(ValueError):
        ArmModel((type(link)(0.0, 0.0, 0.0, 1.0, -1.0),) + arm.links[1:])


def test_ik_at_solution_needs_no_iterations(arm):
    target, _ = forward_kinematics(arm, arm.ready)
    result = inverse_kinematics(arm, target, arm.ready)
    assert result.iterations == 0
    np.testing.assert_array_equal(result.q, arm.ready)


@pytest.mark.slow
def test_ik_reaches_random_targets(arm):
    rng = np.random.default_rng(6)
    for _ in range(100):
        q_true = rng.uniform(arm.lower, arm.upper)
        target, _ = forward_kinematics(arm, q_true)
        result = inverse_kinematics(arm, target, max_iters=200, damping=0.05)
        assert np.linalg.norm(forward_kinematics(arm, result.q)[0] - target) <= 1e-3
        assert arm.within_limits(result.q)


def test_ik_unreachable_target(arm):
    with pytest.raises(IKConvergenceError) as e:
        inverse_kinematics(arm, [3.0, 3.0, 3.0], restarts=1)
    trace = e.value.residual_trace
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert e.value.best_residual == pytest.approx(trace[-1])
    assert e.value.best_residual > 1.0
    assert arm.within_limits(e.value.q_best)


def test_ik_argument_checks(arm):
    with pytest.raises(ValueError):
        inverse_kinematics(arm, [0.5, np.inf, 0.5])
    with pytest.raises(ValueError):
        inverse_kinematics(arm, [0.5, 0.0, 0.5], q_init=arm.upper + 1.0)


def test_interpolate_two_knots():
    jt = interpolate_joints(JointTrajectory([0.0, 1.0], [np.zeros(7), np.ones(7)]), 10.0)
    assert len(jt) == 11
    np.testing.assert_allclose(jt.q[5], 0.5, atol=1e-15)
    np.testing.assert_array_equal(jt.q[0], np.zeros(7))
    np.testing.assert_array_equal(jt.q[-1], np.ones(7))
    assert jt.timestamps[-1] == 1.0


def test_interpolate_uniform_input_is_unchanged():
    rng = np.random.default_rng(7)
    jt = JointTrajectory(np.arange(8) / 20.0, rng.normal(size=(8, 7)))
    out = interpolate_joints(jt, 20.0)
    np.testing.assert_allclose(out.timestamps, jt.timestamps, atol=1e-12)
    np.testing.assert_allclose(out.q, jt.q, atol=1e-9)
    with pytest.raises(ValueError):
        interpolate_joints(jt, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_interpolation_does_not_increase_steps(seed):
    rng = np.random.default_rng(seed)
    times = np.cumsum(rng.uniform(0.05, 0.2, size=12))
    jt = JointTrajectory(times, rng.normal(size=(12, 7)))
    out = interpolate_joints(jt, 50.0)
    assert out.max_step() <= jt.max_step() + 1e-12


def _circle(arm, n=20, radius=0.05):
    center, _ = forward_kinematics(arm, arm.ready)
    angle = np.linspace(0, np.pi, n)
    points = center + radius * np.column_stack([np.zeros(n), np.cos(angle) - 1, np.sin(angle)])
    return Trajectory3D(np.arange(n) / 10.0, points, metric=True)


def test_constant_trajectory_gives_constant_joints(arm):
    target, _ = forward_kinematics(arm, arm.ready)
    traj = Trajectory3D(np.arange(5) / 10.0, np.tile(target + [0.02, 0.0, -0.02], (5, 1)),
                        metric=True)
    jt = solve_trajectory(arm, traj)
    assert len(jt) == 5
    np.testing.assert_array_equal(jt.q, np.tile(jt.q[0], (5, 1)))


def test_solved_trajectory_tracks_input(arm):
    traj = _circle(arm)
    jt = solve_trajectory(arm, traj)
    assert len(jt) == len(traj)
    for q, point in zip(jt.q, traj.points):
        assert arm.within_limits(q)
        assert np.linalg.norm(forward_kinematics(arm, q)[0] - point) <= 1.5e-3


def test_solve_trajectory_needs_metric_units(arm):
    traj = Trajectory3D([0.0, 0.1], np.full((2, 3), 0.5))
    with pytest.raises(ValueError, match="workspace"):
        solve_trajectory(arm, traj)
    far = Trajectory3D([0.0, 0.1], np.full((2, 3), 3.0), metric=True)
    with pytest.raises(IKConvergenceError):
        solve_trajectory(arm, far, max_iters=20)


def test_write_joint_csv(tmp_path, arm):
    jt = solve_trajectory(arm, _circle(arm, n=6))
    assert write_joint_csv(tmp_path / "joints.csv", jt) == len(jt)
    header, data = read_matrix(tmp_path / "joints.csv")
    assert header == ["t", "q1", "q2", "q3", "q4", "q5", "q6", "q7"]
    np.testing.assert_allclose(data[:, 1:], jt.q, rtol=1e-8, atol=1e-9)
