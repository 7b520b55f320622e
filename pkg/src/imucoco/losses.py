"""Training losses.

All squared errors are mean-normalized (divided by the element count), so a
loss over a batch of equally long rows is the mean of the per-row losses.
"""
from __future__ import annotations

import functools
import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .body import NUM_JOINTS
from .errors import ValidationError
from .vimu import KinematicsGT

log = logging.getLogger(__name__)

HORIZONS = (1, 3, 9, 27)
KINEMATIC_TERMS = ("velocity", "position", "global_orientation", "local_orientation", "root_velocity")


@functools.lru_cache(maxsize=64)
def window_sum_matrix(frames: int, n: int) -> np.ndarray:
    """(frames - n + 1, frames) matrix summing each run of ``n`` consecutive frames."""
    starts = np.arange(frames - n + 1)[:, None]
    cols = np.arange(frames)[None, :]
    out = ((cols >= starts) & (cols < starts + n)).astype(np.float64)
    out.setflags(write=False)
    return out


def root_velocity_multiframe_loss(pred, gt) -> Tensor:
    """Squared error of root velocity summed over 1, 3, 9 and 27 frame runs.

    For each horizon ``n`` that fits: mean over run starts and the three
    components of the squared difference of run sums; horizons are added.
    """
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"root velocity: shapes {pred.shape} and {gt.shape} differ")
    frames = pred.shape[-2]
    if frames < 1:
        raise ValidationError("root velocity loss needs at least one frame")
    total = None
    for n in HORIZONS:
        if n > frames:
            break
        s = window_sum_matrix(frames, n)
        term = ad.sum_squared_error(ad.matmul(s, pred), ad.matmul(s, gt))
        total = term if total is None else ad.add(total, term)
    return total


def kinematic_loss(preds: dict, targets: dict) -> Tensor:
    """Equal-weight sum of the five kinematic terms."""
    for name in KINEMATIC_TERMS:
        if preds[name].shape != np.shape(targets[name]):
            raise ValidationError(f"kinematic {name}: prediction {preds[name].shape} vs target {np.shape(targets[name])}")
    total = root_velocity_multiframe_loss(preds["root_velocity"], targets["root_velocity"])
    for name in KINEMATIC_TERMS[:4]:
        total = ad.add(total, ad.sum_squared_error(preds[name], targets[name]))
    return total


def alignment_loss(z, z_ref) -> Tensor:
    """Mean over frames of ``1 - cos(z[t], z_ref[t])``; ``z_ref`` is a constant.

    Frames where either vector has zero norm are skipped (with a warning).
    """
    z = ad.as_tensor(z)
    ref = np.asarray(z_ref.data if isinstance(z_ref, Tensor) else z_ref, dtype=np.float64)
    if z.shape != ref.shape:
        raise ValidationError(f"alignment: shapes {z.shape} and {ref.shape} differ")
    valid = (np.linalg.norm(z.data, axis=-1) > 0) & (np.linalg.norm(ref, axis=-1) > 0)
    count = int(valid.sum())
    if count < valid.size:
        log.warning("alignment loss skipped %d zero-norm frame(s)", valid.size - count)
    if count == 0:
        return Tensor(0.0)
    cos = ad.cosine_similarity(z, Tensor(ref))
    return ad.scale(ad.sum(ad.mul(ad.sub(1.0, cos), valid.astype(np.float64))), 1.0 / count)


def pose_loss(pr_output, gt_pose) -> Tensor:
    pr_output = ad.as_tensor(pr_output)
    if pr_output.shape[-1] != NUM_JOINTS * 6:
        raise ValidationError(f"pose loss expects {NUM_JOINTS * 6} values per frame, got {pr_output.shape}")
    return ad.sum_squared_error(pr_output, gt_pose)


def joint_targets(gt: KinematicsGT, joints, start: int = 0, stop: int | None = None) -> dict[str, np.ndarray]:
    """Kinematic targets for batch rows: each (B, T, k)."""
    joints = np.asarray(joints, dtype=int).reshape(-1)
    sl = slice(start, stop)
    out = {
        name: np.ascontiguousarray(np.swapaxes(getattr(gt, name)[sl][:, joints], 0, 1))
        for name in KINEMATIC_TERMS[:4]
    }
    root = gt.root_velocity[sl]
    out["root_velocity"] = np.broadcast_to(root, (len(joints),) + root.shape)
    return out
