"""Procedural motion sequences and the ``.motion`` text format.

Joint angles are band-limited: every rotation-vector component is an
envelope times a sum of at most five sinusoids (a constant counts as a 0 Hz
term) with frequencies no higher than 2 Hz.  The envelope blends from T-pose
over the first 0.5 s and back to T-pose over the last 0.5 s, so the first
and last frames are always exact T-poses usable for calibration.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import NUM_JOINTS, PoseFrame
from .errors import ParseError, ValidationError
from .rotations import axis_angle_to_quat, check_unit

KINDS = ("idle", "walk", "arm_swing", "squat", "mixed")
DEFAULT_FPS = 60
BLEND_SECONDS = 0.5
MAX_FREQUENCY = 2.0
MAX_TERMS = 5
# per-frame angular change stays below 0.2 rad at 60 fps
_MAX_ANGULAR_RATE = 11.4


@dataclass(frozen=True, eq=False)
class MotionSequence:
    fps: int
    local_rotation: np.ndarray  # (T, 24, 4) wxyz
    root_translation: np.ndarray  # (T, 3)
    label: str = ""

    def __post_init__(self):
        if self.local_rotation.ndim != 3 or self.local_rotation.shape[1:] != (NUM_JOINTS, 4):
            raise ValidationError(f"local_rotation must be (T, 24, 4), got {self.local_rotation.shape}")
        if self.root_translation.shape != (len(self.local_rotation), 3):
            raise ValidationError("root_translation must be (T, 3) matching local_rotation")
        if len(self.local_rotation) < 3:
            raise ValidationError(f"motion needs >= 3 frames, got {len(self.local_rotation)}")
        if self.fps <= 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        check_unit(self.local_rotation, "motion quaternion")

    @property
    def frame_count(self) -> int:
        return len(self.local_rotation)

    @property
    def duration(self) -> float:
        return (self.frame_count - 1) / self.fps

    def frame(self, t: int) -> PoseFrame:
        return PoseFrame(self.local_rotation[t], self.root_translation[t])

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return (
            self.fps == other.fps
            and self.label == other.label
            and np.array_equal(self.local_rotation, other.local_rotation)
            and np.array_equal(self.root_translation, other.root_translation)
        )


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _smoothstep_integral(u):
    u = np.clip(u, 0.0, 1.0)
    return u**3 - 0.5 * u**4


def blend_time(duration: float) -> float:
    return min(BLEND_SECONDS, duration / 2.0)


def envelope(t, duration: float):
    """Amplitude envelope: 0 at both ends, 1 in the middle."""
    b = blend_time(duration)
    t = np.asarray(t, dtype=float)
    return np.minimum(_smoothstep(t / b), _smoothstep((duration - t) / b))


def envelope_integral(t, duration: float):
    """Closed-form ``int_0^t envelope(s) ds``."""
    b = blend_time(duration)
    t = np.asarray(t, dtype=float)
    rise = b * _smoothstep_integral(t / b)
    plateau = np.clip(t - b, 0.0, max(duration - 2 * b, 0.0))
    fall = b * (0.5 - _smoothstep_integral((duration - t) / b))
    return rise + plateau + np.where(t > duration - b, fall, 0.0)


class _Program:
    """Sinusoid terms per (joint, axis): lists of (amplitude, frequency, phase)."""

    def __init__(self):
        self.terms: dict[tuple[int, int], list[tuple[float, float, float]]] = {}

    def add(self, joint, axis, amplitude, freq, phase=0.0):
        key = (joint, axis)
        self.terms.setdefault(key, [])
        if len(self.terms[key]) >= MAX_TERMS:
            raise AssertionError("too many sinusoid terms")
        assert 0.0 <= freq <= MAX_FREQUENCY
        self.terms[key].append((float(amplitude), float(freq), float(phase)))

    def add_raised(self, joint, axis, amplitude, freq, phase=0.0):
        """``amplitude * (1 - cos(2 pi f t + phase)) / 2``: one-sided flexion."""
        self.add(joint, axis, amplitude / 2.0, 0.0, np.pi / 2)
        self.add(joint, axis, amplitude / 2.0, freq, phase - np.pi / 2)

    def rate_bound(self, duration: float) -> float:
        slope = 1.5 / blend_time(duration)
        worst = 0.0
        for joint in range(NUM_JOINTS):
            per_axis = []
            for axis in range(3):
                terms = self.terms.get((joint, axis), [])
                per_axis.append(sum(abs(a) * (2 * np.pi * f + slope) for a, f, _ in terms))
            worst = max(worst, float(np.linalg.norm(per_axis)))
        return worst

    def evaluate(self, t, duration, scale=1.0):
        rotvec = np.zeros((len(t), NUM_JOINTS, 3))
        for (joint, axis), terms in self.terms.items():
            for a, f, phase in terms:
                rotvec[:, joint, axis] += scale * a * np.sin(2 * np.pi * f * t + phase)
        return rotvec * envelope(t, duration)[:, None, None]


def _walk(rng, prog):
    f0 = rng.uniform(0.8, 1.0)
    phase = rng.uniform(0, 2 * np.pi)
    hip, knee = rng.uniform(0.3, 0.45), rng.uniform(0.5, 0.7)
    for side, joint in ((0.0, 1), (np.pi, 2)):
        prog.add(joint, 0, -hip, f0, phase + side)
        prog.add(joint + 3, 0, knee / 2, 0.0, np.pi / 2)
        prog.add(joint + 3, 0, knee / 2, f0, phase + side + np.pi / 3)
        prog.add(joint + 6, 0, 0.15, f0, phase + side + np.pi / 2)
    arm = rng.uniform(0.3, 0.5)
    for sign, side, joint in ((-1.0, np.pi, 16), (1.0, 0.0, 17)):
        prog.add(joint, 2, sign * 1.1, 0.0, np.pi / 2)
        prog.add(joint, 1, arm, f0, phase + side)
        prog.add(joint + 2, 1, sign * 0.2, 0.0, np.pi / 2)
        prog.add(joint + 2, 1, sign * 0.15, 2 * f0 if 2 * f0 <= MAX_FREQUENCY else f0, phase)
    prog.add(0, 1, 0.08, f0, phase)
    prog.add(3, 1, -0.05, f0, phase)
    return f0


def _arm_swing(rng, prog):
    for sign, joint in ((-1.0, 16), (1.0, 17)):
        f = rng.uniform(0.4, 1.2)
        ph = rng.uniform(0, 2 * np.pi)
        prog.add(joint, 1, rng.uniform(0.5, 0.8), f, ph)
        prog.add(joint, 2, sign * rng.uniform(0.2, 0.5), f, ph + rng.uniform(0, np.pi))
        prog.add(joint, 2, sign * 0.3, 0.0, np.pi / 2)
        prog.add_raised(joint + 2, 1, sign * rng.uniform(0.6, 1.2), f, ph)
        prog.add(joint + 4, 0, rng.uniform(0.1, 0.3), min(2 * f, MAX_FREQUENCY), ph)
    prog.add(6, 1, rng.uniform(0.1, 0.25), rng.uniform(0.3, 0.8), rng.uniform(0, 2 * np.pi))


def _squat(rng, prog):
    f = rng.uniform(0.3, 0.5)
    ph = -np.pi / 2
    depth = rng.uniform(0.6, 1.0)
    for joint in (1, 2):
        prog.add_raised(joint, 0, -1.1 * depth, f, ph + np.pi / 2)
        prog.add_raised(joint + 3, 0, 1.7 * depth, f, ph + np.pi / 2)
        prog.add_raised(joint + 6, 0, -0.6 * depth, f, ph + np.pi / 2)
    prog.add_raised(3, 0, 0.3 * depth, f, ph + np.pi / 2)
    for sign, joint in ((-1.0, 16), (1.0, 17)):
        prog.add(joint, 1, -0.6 * sign * depth, f, ph)
    return f, depth


def _mixed(rng, prog):
    for joint in range(NUM_JOINTS):
        for axis in range(3):
            n = int(rng.integers(1, MAX_TERMS + 1))
            for _ in range(n):
                prog.add(joint, axis, rng.uniform(-0.35, 0.35) / n, rng.uniform(0.1, MAX_FREQUENCY),
                         rng.uniform(0, 2 * np.pi))  # fmt: skip


def walk_speed(seed: int) -> float:
    """Forward speed (m/s) used by ``generate_motion(seed, ..., 'walk')``."""
    return float(np.random.default_rng([seed, 1]).uniform(0.8, 1.4))


def generate_motion(seed: int, duration_s: float, kind: str, fps: int = DEFAULT_FPS) -> MotionSequence:
    """Deterministic procedural motion of ``duration_s`` seconds."""
    if kind not in KINDS:
        raise ValidationError(f"unknown motion kind {kind!r}; expected one of {', '.join(KINDS)}")
    if not duration_s >= 0.1:
        raise ValidationError(f"duration_s must be >= 0.1, got {duration_s}")
    frames = max(3, int(round(duration_s * fps)) + 1)
    duration = (frames - 1) / fps
    t = np.arange(frames) / fps
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    prog = _Program()
    trans = np.zeros((frames, 3))
    if kind == "walk":
        _walk(rng, prog)
        trans[:, 2] = walk_speed(seed) * envelope_integral(t, duration)
    elif kind == "arm_swing":
        _arm_swing(rng, prog)
    elif kind == "squat":
        f, depth = _squat(rng, prog)
        trans[:, 1] = -0.3 * depth * envelope(t, duration) * (1 - np.cos(2 * np.pi * f * t)) / 2
    elif kind == "mixed":
        _mixed(rng, prog)
    rot = np.zeros((frames, NUM_JOINTS, 4))
    rot[..., 0] = 1.0
    if prog.terms:
        scale = min(1.0, _MAX_ANGULAR_RATE / prog.rate_bound(duration))
        rot = axis_angle_to_quat(prog.evaluate(t, duration, scale))
    return MotionSequence(fps=fps, local_rotation=rot, root_translation=trans, label=kind)


def walk_velocity(seed: int, duration: float, t):
    """Root velocity (m/s, world frame) of the walk generator at times ``t``."""
    v = np.zeros(np.shape(t) + (3,))
    v[..., 2] = walk_speed(seed) * envelope(t, duration)
    return v


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_motion(seq: MotionSequence, path) -> None:
    label = seq.label.replace("\n", " ")
    lines = [f"fps {seq.fps} frames {seq.frame_count} label {label}".rstrip()]
    for t in range(seq.frame_count):
        values = np.concatenate([seq.root_translation[t], seq.local_rotation[t].ravel()])
        lines.append(" ".join(_fmt(v) for v in values))
    Path(path).write_text("\n".join(lines) + "\n")


def read_motion(path) -> MotionSequence:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ParseError("empty file", path, 1)
    head = lines[0].split(maxsplit=5)
    if len(head) < 5 or head[0] != "fps" or head[2] != "frames" or head[4] != "label":
        raise ParseError("header must be 'fps <int> frames <int> label <text>'", path, 1)
    try:
        fps, frames = int(head[1]), int(head[3])
    except ValueError:
        raise ParseError("fps and frames must be integers", path, 1) from None
    label = head[5] if len(head) > 5 else ""
    width = 3 + 4 * NUM_JOINTS
    data = np.empty((frames, width))
    body = lines[1:]
    if len(body) < frames:
        raise ParseError(f"truncated: expected {frames} frame lines, found {len(body)}", path, len(lines) + 1)
    if any(line.strip() for line in body[frames:]):
        raise ParseError("trailing data after last frame", path, frames + 2)
    for i in range(frames):
        tokens = body[i].split()
        if len(tokens) != width:
            raise ParseError(f"expected {width} values, got {len(tokens)}", path, i + 2)
        try:
            data[i] = [float(x) for x in tokens]
        except ValueError:
            raise ParseError("non-numeric value", path, i + 2) from None
    try:
        return MotionSequence(
            fps=fps,
            local_rotation=data[:, 3:].reshape(frames, NUM_JOINTS, 4),
            root_translation=data[:, :3].copy(),
            label=label,
        )
    except ValidationError as exc:
        raise ParseError(str(exc), path) from exc
