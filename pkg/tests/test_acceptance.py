"""Acceptance suite: one test per headline criterion.

Each test is marked with ``criterion`` and shows up as a PASS/FAIL line in
the "acceptance criteria" section of the pytest summary.
"""
import itertools
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import TINY_NET
from imucoco import autodiff as ad
from imucoco import reference as ref
from imucoco.autodiff import Tensor, gradient_check
from imucoco.body import NUM_JOINTS, PoseFrame, forward_kinematics, skin_vertices
from imucoco.cli import main
from imucoco.evaluation import DEFAULT_MASK, global_angular_error, joint_angles, placement_sweep
from imucoco.losses import alignment_loss, joint_targets, kinematic_loss, pose_loss, root_velocity_multiframe_loss
from imucoco.matchmaker import LossTable, assign_devices, make_devices
from imucoco.motion import MotionSequence, generate_motion
from imucoco.network import forward_nodes, init_model, pr_forward_concat
from imucoco.rotations import axis_angle_to_quat, quat_mul, quat_to_matrix
from imucoco.training import (
    NodeBuffer,
    TrainConfig,
    evaluate_alignment,
    evaluate_phase1_loss,
    node_features,
    prepare_corpus,
    prepare_sequence,
    total_node_loss,
    train_phase1,
    train_phase2,
)
from imucoco.vimu import calibrate, encode_channels, synthesize_mesh_imu

# Frozen from src/imucoco/data/reference_metrics.txt, written by
# demos/train_reference.py for the committed reference checkpoint
# (limb_station_gae_range_deg 1.4093, rounded up to two decimals).
LIMB_STATION_GAE_RANGE_BOUND = 1.41


def homogeneous(rot, pos):
    m = np.eye(4)
    m[:3, :3], m[:3, 3] = rot, pos
    return m


# ----- dataset-scale numbers ----------------------------------------------------------


@pytest.mark.criterion("dataset-scale GAE figures (substituted by the property criteria below)", status="SUBSTITUTED")
def test_dataset_scale_numbers_substituted(record_property):
    """No real datasets or full body at desk scale: the substitute measurements must exist."""
    text = ref.data_path("reference_metrics.txt").read_text()
    keys = {line.split()[0] for line in text.splitlines() if line.strip()}
    for key in ("sweep_mean_gae_with_coordinates", "sweep_mean_gae_zeroed_coordinates", "limb_station_gae_range_deg"):
        assert key in keys
    record_property("reference_metrics", "present")


# ----- kinematics oracles ---------------------------------------------------------------


@pytest.mark.criterion("kinematics oracle suite (FK, skinning, central differences, calibration; 1e-9; < 10 s)")
def test_kinematics_oracles(body, record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    sk = body.skeleton
    for _ in range(20):
        frame = PoseFrame(axis_angle_to_quat(rng.normal(size=(NUM_JOINTS, 3))), rng.normal(size=3))
        g = forward_kinematics(sk, frame)
        chain = [None] * NUM_JOINTS
        for j in range(NUM_JOINTS):
            local = homogeneous(quat_to_matrix(frame.local_rotation[j]), np.zeros(3))
            parent = homogeneous(np.eye(3), frame.root_translation) if j == 0 else chain[sk.parent[j]] @ homogeneous(np.eye(3), sk.rest_offset[j])
            chain[j] = parent @ local
        chain = np.array(chain)
        worst = max(worst, np.abs(g.rotation - chain[:, :3, :3]).max(), np.abs(g.position - chain[:, :3, 3]).max())

        posed = skin_vertices(body, g)
        for v in rng.choice(body.vertex_count, 25, replace=False):
            acc = np.zeros(4)
            rest = np.append(body.mesh.vertices_rest[v], 1.0)
            for j in np.flatnonzero(body.mesh.skin_weights[v]):
                bind_inv = np.linalg.inv(homogeneous(np.eye(3), body.tpose_joint_pos[j]))
                acc += body.mesh.skin_weights[v, j] * (homogeneous(g.rotation[j], g.position[j]) @ bind_inv @ rest)
            worst = max(worst, np.abs(posed[v] - acc[:3]).max())

    a = np.array([0.7, -1.3, 2.1])
    t = np.arange(40) / 60.0
    still = MotionSequence(60, np.tile([1.0, 0.0, 0.0, 0.0], (40, NUM_JOINTS, 1)), 0.5 * t[:, None] ** 2 * a)
    for v in (0, 321, 1500):
        worst = max(worst, np.abs(synthesize_mesh_imu(body, still, v).accel - a).max())

    raw = axis_angle_to_quat(rng.normal(size=(200, 3)))
    q0 = axis_angle_to_quat(rng.normal(size=3))
    worst = max(worst, np.abs(quat_to_matrix(quat_mul(calibrate(raw, q0), q0)) - quat_to_matrix(raw)).max())

    elapsed = time.perf_counter() - start
    record_property("max_abs_error", f"{worst:.1e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst <= 1e-9
    assert elapsed < 10.0


# ----- autodiff -----------------------------------------------------------------------


def _weighted(out, seed):
    return ad.sum(ad.mul(out, np.random.default_rng(seed).normal(size=out.shape)))


PRIMITIVES = {
    "add": lambda a, b: ad.add(a, b),
    "add_broadcast": lambda a, b: ad.add(a, b[0]),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "neg": lambda a, b: ad.neg(a),
    "scale": lambda a, b: ad.scale(a, 0.3),
    "matmul": lambda a, b: ad.matmul(a, ad.reshape(b, (4, 3))),
    "concat": lambda a, b: ad.concat([a, b], axis=1),
    "stack": lambda a, b: ad.stack([a, b], axis=0),
    "getitem": lambda a, b: a[np.array([2, 0, 2]), 1:],
    "embedding": lambda a, b: ad.embedding_lookup(b, np.array([1, 1, 2])),
    "reshape": lambda a, b: ad.reshape(a, (2, 6)),
    "relu": lambda a, b: ad.relu(a),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "tanh": lambda a, b: ad.tanh(a),
    "sin": lambda a, b: ad.sin(a),
    "cos": lambda a, b: ad.cos(a),
    "sum": lambda a, b: ad.sum(a, axis=1),
    "mean": lambda a, b: ad.mean(a, axis=0, keepdims=True),
    "sse": lambda a, b: ad.sum_squared_error(a, b),
    "cosine": lambda a, b: ad.cosine_similarity(a, b),
}


@pytest.mark.criterion("autodiff gradient checks (every primitive + node pathway, d_h=8, T=5, <= 1e-4, < 60 s)")
def test_autodiff_gradient_checks(body, record_property):
    start = time.perf_counter()
    errors = {}
    for k, (name, fn) in enumerate(sorted(PRIMITIVES.items())):
        rng = np.random.default_rng(k)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        a.data = np.where(np.abs(a.data) < 0.05, 0.5, a.data)  # away from the relu kink
        errors[name] = gradient_check(lambda: _weighted(fn(a, b), k), [a, b])

    rng = np.random.default_rng(99)
    w = Tensor(rng.normal(scale=0.5, size=(7, 12)), requires_grad=True)
    bias = Tensor(rng.normal(size=12), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    h = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

    def cell():
        h1, c1 = ad.lstm_cell_step(w, bias, x, h, c)
        h2, c2 = ad.lstm_cell_step(w, bias, x, h1, c1)
        return ad.add(_weighted(h2, 1), _weighted(c2, 2))

    errors["lstm_cell"] = gradient_check(cell, [w, bias, x, h, c])

    model = init_model(TINY_NET, 4, body.fingerprint)
    assert model.config.d_h == 8
    motion = generate_motion(2, 1.0, "walk")
    seq = prepare_sequence(body, MotionSequence(60, motion.local_rotation[20:25], motion.root_translation[20:25]))
    assert seq.frame_count == 5
    buffer = NodeBuffer()
    buffer.fill_joint(node_features(model, body, np.arange(NUM_JOINTS), seq.channels, seq.placements))
    track = synthesize_mesh_imu(body, seq.motion, 1200)
    z_ref = buffer.stacked()[16]
    cfg = TrainConfig(lambda_align=0.5)
    params = list(model.nodes[16].values()) + list(model.pr.values())
    errors["node_forward+total_node_loss"] = gradient_check(
        lambda: total_node_loss(model, body, 16, track, seq.gt, buffer, z_ref, cfg).total, params, max_per_tensor=6
    )

    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    record_property("checks", len(errors))
    record_property("worst", f"{worst} {errors[worst]:.1e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert all(e <= 1e-4 for e in errors.values()), {k: v for k, v in errors.items() if v > 1e-4}
    assert elapsed < 60.0


# ----- loss identities -------------------------------------------------------------------


@pytest.mark.criterion("closed-form loss identities (820|d|^2/3 at 1e-9; alignment 0/1/2; decomposition at 1e-12)")
def test_loss_identities(body, record_property):
    rng = np.random.default_rng(5)
    gt = rng.normal(size=(60, 3))
    for delta in (np.array([0.3, -0.2, 0.5]), rng.normal(size=3), np.array([1e-3, 0.0, 0.0])):
        got = root_velocity_multiframe_loss(gt + delta, gt).item()
        assert abs(got - 820 * delta @ delta / 3) <= 1e-9 * max(1.0, 820 * delta @ delta / 3)

    e = np.eye(3)[None]
    assert alignment_loss(e[:, :1] * [1.0, 2.0, 0.0], e[:, :1] * [2.0, 4.0, 0.0]).item() == pytest.approx(0.0, abs=1e-15)
    assert alignment_loss(np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 3.0, 0.0]])).item() == pytest.approx(1.0, abs=1e-15)
    assert alignment_loss(np.array([[1.0, 1.0, 0.0]]), np.array([[-2.0, -2.0, 0.0]])).item() == pytest.approx(2.0, abs=1e-15)

    model = init_model(TINY_NET, 1, body.fingerprint)
    seq = prepare_sequence(body, generate_motion(6, 0.5, "arm_swing"))
    buffer = NodeBuffer()
    buffer.fill_joint(node_features(model, body, np.arange(NUM_JOINTS), seq.channels, seq.placements))
    z_ref = rng.normal(size=buffer.slots[0].shape)
    cfg = TrainConfig(lambda_kinematic=0.7, lambda_pose=1.3, lambda_align=0.4)
    worst = 0.0
    for joint, vertex in ((0, 10), (13, 640), (22, 1600)):
        track = synthesize_mesh_imu(body, seq.motion, vertex)
        got = total_node_loss(model, body, joint, track, seq.gt, buffer, z_ref, cfg).total.item()
        with ad.no_grad():
            out = forward_nodes(model, body, [joint], encode_channels(track)[None], [track.placement])
            kin = kinematic_loss(out.preds, joint_targets(seq.gt, [joint])).item()
            slots = buffer.stacked().copy()
            slots[joint] = out.z.data[0]
            pose = pose_loss(pr_forward_concat(model.pr, np.concatenate(list(slots), axis=-1)), seq.gt.pose).item()
            align = alignment_loss(out.z.data[0], z_ref).item()
        want = 0.7 * kin + 1.3 * pose + 0.4 * align
        worst = max(worst, abs(got - want) / abs(want))
    record_property("decomposition_rel_error", f"{worst:.1e}")
    assert worst <= 1e-12


# ----- matchmaker -------------------------------------------------------------------------


def _brute_assignment(values, body, coords, ids):
    rest = body.mesh.vertices_rest
    verts = [int(np.argmin(np.linalg.norm(rest - r, axis=1))) for r in coords]
    out = []
    for j in range(NUM_JOINTS):
        best = None
        for v, i in zip(verts, ids):
            if best is None or values[j, v] < best[0] or (values[j, v] == best[0] and i < best[1]):
                best = (values[j, v], i)
        out.append(best[1])
    return out


@pytest.mark.criterion("matchmaker equivalence (brute force x200 up to 24x50, single device, superset monotonicity)")
def test_matchmaker_equivalence(body, record_property):
    rng = np.random.default_rng(17)
    rest = body.mesh.vertices_rest
    for _ in range(200):
        d = int(rng.integers(1, 51))
        values = rng.integers(0, 5, size=(NUM_JOINTS, body.vertex_count)).astype(float)  # many ties
        table = LossTable(values, body.fingerprint, "x")
        coords = rest[rng.choice(body.vertex_count, d)] + rng.uniform(-0.004, 0.004, size=(d, 3))
        devices = make_devices(body, coords)
        order = rng.permutation(d)
        shuffled = [devices[i] for i in order]
        assert assign_devices(table, shuffled, body) == _brute_assignment(values, body, coords, list(range(d)))

    single = make_devices(body, rest[[700]])
    table = LossTable(rng.random((NUM_JOINTS, body.vertex_count)), body.fingerprint, "x")
    assert assign_devices(table, single, body) == [0] * NUM_JOINTS

    devices = make_devices(body, rest[rng.choice(body.vertex_count, 7, replace=False)])
    rows = np.arange(NUM_JOINTS)

    def chosen_cost(subset):
        picked = [devices[i] for i in subset]
        ids = assign_devices(table, picked, body)
        verts = {d.id: int(np.argmin(np.linalg.norm(rest - d.placement.r, axis=1))) for d in picked}
        return table.values[rows, [verts[i] for i in ids]]

    pairs = 0
    subsets = [s for k in range(1, 8) for s in itertools.combinations(range(7), k)]
    costs = {s: chosen_cost(s) for s in subsets}
    for s in subsets:
        for extra in set(range(7)) - set(s):
            assert np.all(costs[tuple(sorted(s + (extra,)))] <= costs[s])
            pairs += 1
    record_property("random_instances", 200)
    record_property("superset_pairs", pairs)


# ----- training smoke ------------------------------------------------------------------------


@pytest.mark.criterion("training smoke (phase 1 <= 50% loss in 200 steps; phase 2 KR frozen, alignment -30%; < 15 min)")
def test_training_smoke(body, record_property):
    start = time.perf_counter()
    corpus = [generate_motion(s, 2.0, "idle") for s in (0, 1)] + [generate_motion(s, 2.0, "walk") for s in (2, 3)]
    data = prepare_corpus(body, corpus)
    model = init_model(TINY_NET, 0, body.fingerprint)
    cfg = TrainConfig(phase1_steps=200, phase2_steps=40, lambda_align=10.0, mesh_samples_per_sequence=48, plateau_window=0, seed=0)
    before = evaluate_phase1_loss(model, body, data, cfg)
    train_phase1(model, body, corpus, cfg, data=data)
    after = evaluate_phase1_loss(model, body, data, cfg)

    heads = {n: t.data.copy() for n, t in model.named_parameters() if ".kr." in n}
    align0 = evaluate_alignment(model, body, data, 2, seed=(99, 1))
    train_phase2(model, body, corpus, cfg, data=data)
    align1 = evaluate_alignment(model, body, data, 2, seed=(99, 1))
    current = dict(model.named_parameters())
    frozen = all(np.array_equal(current[n].data, v) for n, v in heads.items())

    elapsed = time.perf_counter() - start
    record_property("phase1_ratio", f"{after / before:.3f}")
    record_property("alignment_ratio", f"{align1 / align0:.3f}")
    record_property("kr_bit_identical", frozen)
    record_property("seconds", f"{elapsed:.0f}")
    assert after <= 0.5 * before
    assert frozen and len(heads) > 0
    assert align1 <= 0.7 * align0
    assert elapsed < 15 * 60


# ----- ablation echo on the reference checkpoint ----------------------------------------------


@pytest.fixture(scope="module")
def reference(body):
    return ref.load_reference(body)


@pytest.mark.criterion("ablation echo (zeroed coordinates raise sweep GAE; limb-station GAE range within frozen bound)")
def test_ablation_echo(reference, record_property):
    body, model, table = reference
    corpus = ref.evaluation_corpus()
    variants = ref.sweep_variants(body)
    assert len(variants) == 10
    with_sc = np.mean([r.gae for r in placement_sweep(model, table, body, corpus, variants)])
    without_sc = np.mean([r.gae for r in placement_sweep(model, table, body, corpus, variants, zero_coordinates=True)])
    stations = [r.gae for r in placement_sweep(model, table, body, corpus, ref.limb_stations(body))]
    spread = max(stations) - min(stations)
    record_property("gae_with", f"{with_sc:.2f}")
    record_property("gae_zeroed", f"{without_sc:.2f}")
    record_property("station_range", f"{spread:.2f} <= {LIMB_STATION_GAE_RANGE_BOUND}")
    assert without_sc > with_sc
    assert spread <= LIMB_STATION_GAE_RANGE_BOUND


# ----- determinism -----------------------------------------------------------------------------

PIPELINE_SETTINGS = """\
d_in = 8
d_h = 8
d_e = 4
n_freq = 2
depth = 1
d_kr = 8
d_pr = 16
phase1_steps = 5
phase2_steps = 3
mesh_samples_per_sequence = 24
"""


def _pipeline(root):
    (root / "settings.cfg").write_text(PIPELINE_SETTINGS)
    (root / "devices.txt").write_text(
        "pelvis 0 0 0\nhead 0 0.55 0\nlwrist 0.72 0.33 0\nrwrist -0.72 0.33 0\nlknee 0.09 -0.48 0\nrknee -0.09 -0.48 0\n"
    )
    p = lambda name: str(root / name)  # noqa: E731
    names = ("pelvis", "head", "lwrist", "rwrist", "lknee", "rknee")
    steps = [
        ["genmotion", "--kind", "walk", "--duration", "1.5", "--seed", "11", "--out", p("train.motion")],
        ["genmotion", "--kind", "mixed", "--duration", "1.5", "--seed", "12", "--out", p("held.motion")],
        ["synth", "--motion", p("held.motion"), "--devices", p("devices.txt"), "--out", p("tracks")],
        ["train", "--phase", "1", "--config", p("settings.cfg"), "--seed", "3", "--corpus", p("train.motion"), "--out", p("p1.ckpt")],
        ["train", "--phase", "2", "--config", p("settings.cfg"), "--seed", "3", "--corpus", p("train.motion"),
         "--checkpoint", p("p1.ckpt"), "--out", p("p2.ckpt")],
        ["losstable", "--checkpoint", p("p2.ckpt"), "--corpus", p("held.motion"), "--stride", "32", "--out", p("table")],
        ["infer", "--checkpoint", p("p2.ckpt"), "--table", p("table"), "--devices", p("devices.txt"),
         "--tracks", *[p(f"tracks/{n}.imu") for n in names], "--out", p("est.pose")],
        ["eval", "--motion", p("held.motion"), "--pose", p("est.pose"), "--out", p("report.txt")],
    ]  # fmt: skip
    for argv in steps:
        assert main(argv) == 0, argv
    files = ["train.motion", "held.motion", "p1.ckpt", "p2.ckpt", "table", "est.pose", "report.txt"]
    files += [f"tracks/{n}.imu" for n in names]
    return {f: (root / f).read_bytes() for f in files}


@pytest.mark.criterion("determinism (genmotion -> synth -> train -> losstable -> infer -> eval bit-identical twice)")
def test_pipeline_determinism(tmp_path, monkeypatch, record_property):
    monkeypatch.delenv("IMUCOCO_WORKERS", raising=False)
    (tmp_path / "one").mkdir()
    (tmp_path / "two").mkdir()
    first = _pipeline(tmp_path / "one")
    second = _pipeline(tmp_path / "two")
    differing = sorted(k for k in first if first[k] != second[k])
    report = first["report.txt"].decode().splitlines()
    record_property("files_compared", len(first))
    record_property("report", report[1] if len(report) > 1 else "")
    assert not differing, differing
    assert report[0] == "placement gae_deg translation_m"


# ----- GAE metric ------------------------------------------------------------------------------


@pytest.mark.criterion("GAE metric (quaternion oracle within 1e-9 deg on 1e4 pairs; mask and mean vs scalar reference)")
def test_gae_metric(record_property):
    a = Rotation.random(10_000, random_state=7)
    b = Rotation.random(10_000, random_state=8)
    rel = (b.inv() * a).as_quat()  # scalar-last
    oracle = np.degrees(2.0 * np.arctan2(np.linalg.norm(rel[:, :3], axis=1), np.abs(rel[:, 3])))
    err = np.abs(joint_angles(a.as_matrix(), b.as_matrix()) - oracle).max()

    frames = 6
    pa = Rotation.random(frames * NUM_JOINTS, random_state=9).as_matrix().reshape(frames, NUM_JOINTS, 3, 3)
    pb = Rotation.random(frames * NUM_JOINTS, random_state=10).as_matrix().reshape(frames, NUM_JOINTS, 3, 3)
    for mask in (DEFAULT_MASK, (), (3, 7)):
        total, count = 0.0, 0
        for t in range(frames):
            for j in range(NUM_JOINTS):
                if j in mask:
                    continue
                q = (Rotation.from_matrix(pb[t, j]).inv() * Rotation.from_matrix(pa[t, j])).as_quat()
                total += np.degrees(2.0 * np.arctan2(np.linalg.norm(q[:3]), abs(q[3])))
                count += 1
        assert global_angular_error(pa, pb, mask=mask) == pytest.approx(total / count, abs=1e-9)
    record_property("max_oracle_error_deg", f"{err:.1e}")
    assert err <= 1e-9
