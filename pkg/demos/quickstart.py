#!/usr/bin/env python3
"""Estimate a pose from six arbitrarily placed virtual IMUs.

Loads the committed reference model, puts six devices on the body (the
left-wrist one halfway up the forearm), synthesizes their readings for a
fresh motion, lets the matchmaker pick a device for every joint node and
scores the estimate.

    python demos/quickstart.py
"""
import numpy as np

from imucoco import reference as ref
from imucoco.body import JOINT_NAMES
from imucoco.evaluation import evaluate_sequence
from imucoco.matchmaker import make_devices
from imucoco.motion import generate_motion

body, model, table = ref.load_reference()
coords = ref.conventional_coordinates(body)
coords[2] = 0.5 * (body.tpose_joint_pos[20] + body.tpose_joint_pos[18])  # mid forearm
devices = make_devices(body, coords, ref.CONVENTIONAL_NAMES)
motion = generate_motion(2024, 4.0, "arm_swing")

for zero in (False, True):
    score = evaluate_sequence(model, table, body, motion, devices, zero_coordinates=zero)
    label = "coordinates withheld" if zero else "with coordinates"
    print(f"{label:>21}: GAE {score.gae:.2f} deg, final translation error {score.translation_error:.3f} m")

print("\nnode -> device")
for j, d in enumerate(score.assignment):
    print(f"  {JOINT_NAMES[j]:<15} {devices[d].name}")
print(f"\nroot path length {np.linalg.norm(np.diff(score.estimate.translation, axis=0), axis=1).sum():.2f} m (estimated)")
