"""The committed desk-scale reference model and the fixtures it is judged on.

``demos/train_reference.py`` regenerates ``data/reference.ckpt`` and
``data/reference.losstable`` from the settings here; the acceptance tests
load them through :func:`load_reference`.
"""
from __future__ import annotations

from importlib import resources

import numpy as np

from .body import BodyModel, build_canonical_body
from .checkpoint import load_checkpoint
from .matchmaker import LossTable, read_table
from .motion import MotionSequence, generate_motion
from .network import Model, NetConfig
from .training import TrainConfig

REFERENCE_NET = NetConfig(d_in=16, d_h=16, d_e=8, n_freq=4, n_mfe=1, depth=2, d_kr=32, d_pr=64)
REFERENCE_TRAIN = TrainConfig(
    phase1_steps=3000,
    phase2_steps=1500,
    lr=2e-3,
    mesh_samples_per_sequence=48,
    plateau_window=0,
    seed=7,
)
REFERENCE_STRIDE = 4
SEQUENCE_SECONDS = 4.0
MOVING_KINDS = ("walk", "arm_swing", "squat", "mixed")

CHECKPOINT_FILE = "reference.ckpt"
TABLE_FILE = "reference.losstable"

# pelvis, head, both wrists, both knees (top of each shank)
CONVENTIONAL_JOINTS = (0, 15, 20, 21, 4, 5)
CONVENTIONAL_NAMES = ("pelvis", "head", "left_wrist", "right_wrist", "left_shank", "right_shank")


def training_corpus() -> list[MotionSequence]:
    seqs = [generate_motion(100 + i, SEQUENCE_SECONDS, "idle") for i in range(2)]
    for k, kind in enumerate(MOVING_KINDS):
        seqs += [generate_motion(100 + 10 * k + i, SEQUENCE_SECONDS, kind) for i in range(4)]
    return seqs


def validation_corpus() -> list[MotionSequence]:
    """Held-out sequences for the loss table."""
    return [generate_motion(200 + k, SEQUENCE_SECONDS, kind) for k, kind in enumerate(MOVING_KINDS)]


def evaluation_corpus() -> list[MotionSequence]:
    """Held-out sequences for sweeps and ablations."""
    return [generate_motion(300 + k, SEQUENCE_SECONDS, kind) for k, kind in enumerate(MOVING_KINDS)]


def conventional_coordinates(body: BodyModel) -> np.ndarray:
    """(6, 3) T-pose coordinates of the usual six-sensor layout."""
    return body.tpose_joint_pos[list(CONVENTIONAL_JOINTS)].copy()


def _toward(body: BodyModel, a: int, b: int, t: float) -> np.ndarray:
    p = body.tpose_joint_pos
    return (1.0 - t) * p[a] + t * p[b]


def sweep_variants(body: BodyModel) -> list[tuple[str, np.ndarray]]:
    """Ten six-device layouts, each moving one or more devices along a bone."""
    base = conventional_coordinates(body)
    moves = [
        ("base", {}),
        ("lwrist_forearm", {2: (20, 18, 1 / 3)}),
        ("lwrist_elbow", {2: (20, 18, 1.0)}),
        ("rwrist_forearm", {3: (21, 19, 2 / 3)}),
        ("lshank_mid", {4: (4, 7, 0.5)}),
        ("rthigh_mid", {5: (5, 2, 0.5)}),
        ("head_neck", {1: (15, 12, 1.0)}),
        ("pelvis_spine", {0: (0, 3, 1.0)}),
        ("lupperarm_rankle", {2: (18, 16, 0.5), 5: (5, 8, 1.0)}),
        ("limbs_halfway", {2: (20, 18, 0.5), 3: (21, 19, 0.5), 4: (4, 1, 0.5), 5: (5, 2, 0.5)}),
    ]
    out = []
    for label, changes in moves:
        coords = base.copy()
        for slot, (a, b, t) in changes.items():
            coords[slot] = _toward(body, a, b, t)
        out.append((label, coords))
    return out


def limb_stations(body: BodyModel) -> list[tuple[str, np.ndarray]]:
    """Five layouts sliding the left-wrist device from wrist to shoulder."""
    base = conventional_coordinates(body)
    stations = [
        ("wrist", _toward(body, 20, 18, 0.0)),
        ("forearm", _toward(body, 20, 18, 0.5)),
        ("elbow", _toward(body, 18, 16, 0.0)),
        ("upper_arm", _toward(body, 18, 16, 0.5)),
        ("shoulder", _toward(body, 18, 16, 1.0)),
    ]
    out = []
    for label, r in stations:
        coords = base.copy()
        coords[2] = r
        out.append((label, coords))
    return out


def data_path(name: str):
    return resources.files("imucoco") / "data" / name


def load_reference(body: BodyModel | None = None) -> tuple[BodyModel, Model, LossTable]:
    body = build_canonical_body() if body is None else body
    with resources.as_file(data_path(CHECKPOINT_FILE)) as p:
        model = load_checkpoint(p).model
    with resources.as_file(data_path(TABLE_FILE)) as p:
        table = read_table(p, body, model)
    return body, model, table
