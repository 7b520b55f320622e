import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imucoco import autodiff as ad
from imucoco.autodiff import Tensor
from imucoco.errors import ValidationError
from imucoco.losses import (
    KINEMATIC_TERMS,
    alignment_loss,
    joint_targets,
    kinematic_loss,
    pose_loss,
    root_velocity_multiframe_loss,
)
from imucoco.vimu import kinematics_ground_truth

seeds = st.integers(0, 2**32 - 1)
WIDTHS = {"velocity": 3, "position": 3, "global_orientation": 6, "local_orientation": 6, "root_velocity": 3}


def multiframe_oracle(pred, gt):
    total = 0.0
    frames = len(pred)
    for n in (1, 3, 9, 27):
        if n > frames:
            continue
        acc = 0.0
        for t in range(frames - n + 1):
            d = [sum(pred[t + i][c] - gt[t + i][c] for i in range(n)) for c in range(3)]
            acc += sum(x * x for x in d)
        total += acc / (frames - n + 1) / 3
    return total


def mse_oracle(a, b):
    a, b = np.asarray(a).ravel().tolist(), np.asarray(b).ravel().tolist()
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def random_kin(rng, frames, rows=1):
    return {k: rng.normal(size=(rows, frames, w)) for k, w in WIDTHS.items()}


# ----- root velocity over several horizons -----------------------------------------------


def test_multiframe_zero(rng):
    v = rng.normal(size=(30, 3))
    assert root_velocity_multiframe_loss(v, v).item() == 0.0


@pytest.mark.parametrize("frames", [27, 40, 64])
def test_multiframe_constant_bias(rng, frames):
    gt = rng.normal(size=(frames, 3))
    delta = np.array([0.3, -0.2, 0.5])
    got = root_velocity_multiframe_loss(gt + delta, gt).item()
    assert got == pytest.approx(820 * delta @ delta / 3, rel=1e-12)


@given(seeds)
def test_multiframe_window_sum_oracle(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
    assert root_velocity_multiframe_loss(pred, gt).item() == pytest.approx(multiframe_oracle(pred, gt), rel=1e-12, abs=1e-12)


def test_multiframe_short_sequences_drop_horizons(rng):
    pred, gt = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert root_velocity_multiframe_loss(pred, gt).item() == pytest.approx(multiframe_oracle(pred, gt), rel=1e-12)
    delta = np.ones(3) * 0.1
    assert root_velocity_multiframe_loss(gt + delta, gt).item() == pytest.approx((1 + 9) * 0.03 / 3, rel=1e-12)


def test_multiframe_errors():
    with pytest.raises(ValidationError):
        root_velocity_multiframe_loss(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        root_velocity_multiframe_loss(np.zeros((4, 3)), np.zeros((5, 3)))


def test_multiframe_batch_is_row_mean(rng):
    pred, gt = rng.normal(size=(3, 30, 3)), rng.normal(size=(3, 30, 3))
    rows = [multiframe_oracle(p, g) for p, g in zip(pred, gt)]
    assert root_velocity_multiframe_loss(pred, gt).item() == pytest.approx(np.mean(rows), rel=1e-12)


# ----- kinematic ------------------------------------------------------------------------


def test_kinematic_zero(rng):
    gt = random_kin(rng, 10)
    assert kinematic_loss({k: Tensor(v) for k, v in gt.items()}, gt).item() == 0.0


def test_kinematic_velocity_offset(rng):
    gt = random_kin(rng, 30)
    c = np.array([0.2, 0.4, -0.4])
    preds = {k: Tensor(v + c if k == "velocity" else v) for k, v in gt.items()}
    assert kinematic_loss(preds, gt).item() == pytest.approx(c @ c / 3, rel=1e-12)


@given(seeds)
def test_kinematic_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    preds, gt = random_kin(rng, 33), random_kin(rng, 33)
    expected = multiframe_oracle(preds["root_velocity"][0], gt["root_velocity"][0])
    expected += sum(mse_oracle(preds[k], gt[k]) for k in KINEMATIC_TERMS[:4])
    got = kinematic_loss({k: Tensor(v) for k, v in preds.items()}, gt).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_kinematic_length_mismatch(rng):
    preds, gt = random_kin(rng, 10), random_kin(rng, 11)
    with pytest.raises(ValidationError):
        kinematic_loss({k: Tensor(v) for k, v in preds.items()}, gt)


def test_joint_targets_layout(body, walk):
    gt = kinematics_ground_truth(body, walk)
    t = joint_targets(gt, [4, 9], 10, 20)
    assert t["velocity"].shape == (2, 10, 3) and t["local_orientation"].shape == (2, 10, 6)
    np.testing.assert_array_equal(t["position"][1], gt.position[10:20, 9])
    np.testing.assert_array_equal(t["root_velocity"][0], gt.root_velocity[10:20])


# ----- alignment ------------------------------------------------------------------------


def test_alignment_values(rng):
    z = rng.normal(size=(6, 4))
    assert alignment_loss(z, z).item() == pytest.approx(0.0, abs=1e-15)
    assert alignment_loss(-z, z).item() == pytest.approx(2.0, abs=1e-15)
    a = np.tile([1.0, 0, 0, 0], (6, 1))
    b = np.tile([0, 2.0, 0, 0], (6, 1))
    assert alignment_loss(a, b).item() == pytest.approx(1.0, abs=1e-15)


def test_alignment_skips_zero_frames(rng, caplog):
    z = rng.normal(size=(4, 3))
    ref = z.copy()
    z[1] = 0.0
    ref[2] = -ref[2]
    with caplog.at_level(logging.WARNING, logger="imucoco.losses"):
        value = alignment_loss(z, ref).item()
    assert value == pytest.approx(2.0 / 3.0)
    assert "skipped 1 zero-norm" in caplog.text


def test_alignment_reference_gets_no_gradient(rng):
    z = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    ref = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    ad.backward(alignment_loss(z, ref))
    assert ref.grad is None and z.grad is not None


@given(seeds)
def test_alignment_gradient(seed):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    ref = rng.normal(size=(2, 5, 3))
    assert ad.gradient_check(lambda: alignment_loss(z, ref), [z]) < 1e-4


# ----- pose -------------------------------------------------------------------------


def test_pose_block_offset(rng):
    gt = rng.normal(size=(7, 144))
    e = rng.normal(size=6)
    pred = gt.copy()
    pred[:, 30:36] += e
    assert pose_loss(pred, gt).item() == pytest.approx(e @ e / 144, rel=1e-12)
    assert pose_loss(gt, gt).item() == 0.0


@given(seeds)
def test_pose_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 144)), rng.normal(size=(4, 144))
    assert pose_loss(a, b).item() == pytest.approx(mse_oracle(a, b), rel=1e-12)


def test_pose_shape_errors(rng):
    with pytest.raises(ValidationError):
        pose_loss(rng.normal(size=(4, 143)), rng.normal(size=(4, 143)))
    with pytest.raises(ValidationError):
        pose_loss(rng.normal(size=(4, 144)), rng.normal(size=(5, 144)))
