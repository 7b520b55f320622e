"""Transfer-loss table and test-time device assignment.

``M[j, v]`` estimates how well node ``j`` works when fed an IMU worn at
mesh vertex ``v``: the node's kinematic loss on the mesh virtual IMU plus
the alignment loss against the node's joint-IMU feature, averaged over a
held-out corpus.  At test time every node takes the device whose nearest
vertex has the lowest entry in its row.
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .body import NUM_JOINTS, BodyModel, nearest_vertex, region_of_point
from .errors import FingerprintError, ParseError, ValidationError
from .losses import alignment_loss, joint_targets, kinematic_loss
from .motion import MotionSequence
from .network import Model, forward_nodes
from .training import prepare_sequence
from .vimu import PlacementCoordinate, check_placement, encode_channels, synthesize_mesh_imus

TABLE_MAGIC = "# imucoco loss table v1"


def model_fingerprint(model: Model) -> str:
    """Hash of the network settings and every parameter's bytes."""
    h = hashlib.sha256()
    h.update(repr(sorted(vars(model.config).items())).encode())
    for name, t in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class LossTable:
    values: np.ndarray  # (24, V)
    body_fingerprint: str
    model_fingerprint: str
    stride: int = 1

    @property
    def vertex_count(self) -> int:
        return self.values.shape[1]

    def check(self, body: BodyModel | None = None, model: Model | None = None) -> None:
        if self.values.ndim != 2 or self.values.shape[0] != NUM_JOINTS:
            raise ValidationError(f"loss table must have {NUM_JOINTS} rows, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValidationError("loss table entries must be finite and non-negative")
        if body is not None:
            if self.body_fingerprint != body.fingerprint:
                raise FingerprintError(
                    f"loss table was built for body {self.body_fingerprint}, session body is {body.fingerprint}; rebuild with 'imucoco losstable'"
                )
            if self.vertex_count != body.vertex_count:
                raise ValidationError(f"loss table has {self.vertex_count} vertices, body has {body.vertex_count}")
        if model is not None and self.model_fingerprint != model_fingerprint(model):
            raise FingerprintError(
                f"loss table was built for model {self.model_fingerprint}, checkpoint is {model_fingerprint(model)}; rebuild with 'imucoco losstable'"
            )


def node_vertex_losses(
    model: Model, body: BodyModel, motion: MotionSequence, vertex_ids, joints=range(NUM_JOINTS), chunk: int = 256
) -> np.ndarray:
    """(len(joints), len(vertex_ids)) kinematic + alignment loss for one sequence."""
    vertex_ids = np.asarray(vertex_ids, dtype=int)
    joints = list(joints)
    seq = prepare_sequence(body, motion)
    tracks = synthesize_mesh_imus(body, motion, vertex_ids, seq.transforms)
    channels = np.stack([encode_channels(t) for t in tracks])
    placements = [t.placement for t in tracks]
    out = np.zeros((len(joints), len(vertex_ids)))
    with ad.no_grad():
        z_ref = forward_nodes(model, body, np.arange(NUM_JOINTS), seq.channels, seq.placements).z.data
        for a, j in enumerate(joints):
            targets = joint_targets(seq.gt, [j])
            for lo in range(0, len(vertex_ids), chunk):
                hi = min(lo + chunk, len(vertex_ids))
                res = forward_nodes(model, body, [j] * (hi - lo), channels[lo:hi], placements[lo:hi])
                for b in range(hi - lo):
                    preds = {k: v[b : b + 1] for k, v in res.preds.items()}
                    kin = kinematic_loss(preds, targets).item()
                    align = alignment_loss(res.z[b], z_ref[j]).item()
                    out[a, lo + b] = kin + align
    return out


def nearest_evaluated(body: BodyModel, evaluated: np.ndarray) -> np.ndarray:
    """For every vertex, the nearest evaluated vertex (ties to the lowest id)."""
    rest = body.mesh.vertices_rest
    d = np.linalg.norm(rest[:, None, :] - rest[evaluated][None, :, :], axis=-1)
    out = evaluated[np.argmin(d, axis=1)]
    out[evaluated] = evaluated  # coincident vertices keep their own value
    return out


def build_loss_table(
    model: Model, body: BodyModel, corpus: Sequence[MotionSequence], stride: int = 1, workers: int = 1
) -> LossTable:
    """Average node/vertex transfer losses over ``corpus`` (held-out sequences).

    With ``workers > 1`` sequences are evaluated in separate processes; the
    per-sequence results are summed in corpus order either way.
    """
    if len(corpus) == 0:
        raise ValidationError("loss table needs a non-empty validation corpus")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if model.body_fingerprint and model.body_fingerprint != body.fingerprint:
        raise FingerprintError(f"model was trained on body {model.body_fingerprint}, got body {body.fingerprint}")
    evaluated = np.arange(0, body.vertex_count, stride)
    if workers > 1 and len(corpus) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            n = len(corpus)
            parts = list(pool.map(node_vertex_losses, [model] * n, [body] * n, corpus, [evaluated] * n))
    else:
        parts = [node_vertex_losses(model, body, motion, evaluated) for motion in corpus]
    acc = np.zeros((NUM_JOINTS, len(evaluated)))
    for part in parts:
        acc += part
    acc /= len(corpus)
    values = np.empty((NUM_JOINTS, body.vertex_count))
    values[:, evaluated] = acc
    fill = nearest_evaluated(body, evaluated)
    values[:] = values[:, fill]
    table = LossTable(values, body.fingerprint, model_fingerprint(model), stride)
    table.check()
    return table


# ----- devices --------------------------------------------------------------------


class Device(NamedTuple):
    id: int
    name: str
    placement: PlacementCoordinate


def make_devices(body: BodyModel, coords, names: Sequence[str] | None = None) -> list[Device]:
    """Devices from raw T-pose coordinates; region is that of the nearest vertex."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if len(coords) == 0:
        raise ValidationError("at least one device is required")
    names = [f"d{i}" for i in range(len(coords))] if names is None else list(names)
    out = []
    for i, (r, name) in enumerate(zip(coords, names)):
        placement = PlacementCoordinate(r.copy(), region_of_point(body, r))
        check_placement(body, placement)
        out.append(Device(i, name, placement))
    return out


def assign_devices(table: LossTable, devices: Sequence[Device], body: BodyModel) -> list[int]:
    """Device id chosen by each of the 24 nodes (lowest table entry, ties to the lowest id)."""
    if len(devices) == 0:
        raise ValidationError("at least one device is required")
    table.check(body)
    ordered = sorted(devices, key=lambda d: d.id)
    verts = np.array([nearest_vertex(body, d.placement.r) for d in ordered])
    ids = np.array([d.id for d in ordered])
    return [int(i) for i in assign_from_costs(table.values[:, verts], ids)]


def assign_from_costs(costs: np.ndarray, device_ids) -> np.ndarray:
    """Row-wise argmin of a (24, D) cost matrix; ties go to the lowest device id."""
    device_ids = np.asarray(device_ids)
    order = np.argsort(device_ids, kind="stable")
    return device_ids[order][np.argmin(costs[:, order], axis=1)]


# ----- file format --------------------------------------------------------------------


def _checksum(header: str, body: str) -> str:
    return hashlib.sha256((header + body).encode()).hexdigest()[:16]


def write_table(table: LossTable, path) -> None:
    table.check()
    header = (
        f"body_fingerprint {table.body_fingerprint}\n"
        f"model_fingerprint {table.model_fingerprint}\n"
        f"stride {table.stride}\n"
        f"vertices {table.vertex_count}\n"
    )
    rows = "".join(" ".join(format(x, ".17g") for x in row) + "\n" for row in table.values)
    Path(path).write_text(f"{TABLE_MAGIC}\n{header}checksum {_checksum(header, rows)}\n{rows}")


def read_table(path, body: BodyModel | None = None, model: Model | None = None) -> LossTable:
    """Load a table; with ``body``/``model`` given, their fingerprints must match."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != TABLE_MAGIC:
        raise ParseError("not a loss table (missing header line)", path, 1)
    meta = {}
    for lineno, key in enumerate(("body_fingerprint", "model_fingerprint", "stride", "vertices", "checksum"), start=2):
        parts = lines[lineno - 1].split() if len(lines) >= lineno else []
        if len(parts) != 2 or parts[0] != key:
            raise ParseError(f"expected '{key} <value>'", path, lineno)
        meta[key] = parts[1]
    rows_text = lines[6:]
    if len(rows_text) != NUM_JOINTS:
        raise ParseError(f"expected {NUM_JOINTS} table rows, found {len(rows_text)}", path, 7 + len(rows_text))
    header = "".join(f"{k} {meta[k]}\n" for k in ("body_fingerprint", "model_fingerprint", "stride", "vertices"))
    body_text = "".join(r + "\n" for r in rows_text)
    if _checksum(header, body_text) != meta["checksum"]:
        raise FingerprintError(f"{path}: checksum mismatch; the table was modified after it was written")
    try:
        n_vert = int(meta["vertices"])
        stride = int(meta["stride"])
    except ValueError:
        raise ParseError("stride and vertices must be integers", path, 4) from None
    values = np.empty((NUM_JOINTS, n_vert))
    for i, row in enumerate(rows_text):
        try:
            vals = [float(x) for x in row.split()]
        except ValueError:
            raise ParseError("non-numeric table entry", path, 7 + i) from None
        if len(vals) != n_vert:
            raise ParseError(f"expected {n_vert} values, found {len(vals)}", path, 7 + i)
        values[i] = vals
    table = LossTable(values, meta["body_fingerprint"], meta["model_fingerprint"], stride)
    table.check(body, model)
    return table
