#!/usr/bin/env python3
"""Train the desk-scale reference model and measure it.

Writes src/imucoco/data/reference.ckpt, reference.losstable and
reference_metrics.txt.  Takes roughly 15 minutes on one core.

    python demos/train_reference.py
"""
import sys
import time
from pathlib import Path

import numpy as np

from imucoco import reference as ref
from imucoco.body import build_canonical_body
from imucoco.checkpoint import save_checkpoint
from imucoco.evaluation import evaluate_sequence, format_report, placement_sweep
from imucoco.matchmaker import build_loss_table, make_devices, write_table
from imucoco.motion import generate_motion
from imucoco.network import init_model
from imucoco.training import evaluate_alignment, evaluate_phase1_loss, prepare_corpus, train_phase1, train_phase2

DATA = Path(__file__).resolve().parents[1] / "src" / "imucoco" / "data"
DATA.mkdir(exist_ok=True)
cfg = ref.REFERENCE_TRAIN
body = build_canonical_body()

# --- phase 1: every node learns from its own joint IMU
corpus = ref.training_corpus()
data = prepare_corpus(body, corpus)
model = init_model(ref.REFERENCE_NET, cfg.seed, body.fingerprint)
print(f"{model.parameter_count()} parameters, {len(corpus)} training sequences")
loss0 = evaluate_phase1_loss(model, body, data, cfg)
t0 = time.time()
phase1 = train_phase1(model, body, corpus, cfg, data=data)
loss1 = evaluate_phase1_loss(model, body, data, cfg)
print(f"phase 1: {phase1.steps} steps in {time.time() - t0:.0f} s, loss {loss0:.4f} -> {loss1:.4f}")

# --- phase 2: mesh IMUs, kinematics heads frozen
align0 = evaluate_alignment(model, body, data, 2, seed=(cfg.seed, 999))
t0 = time.time()
phase2 = train_phase2(model, body, corpus, cfg, data=data)
align1 = evaluate_alignment(model, body, data, 2, seed=(cfg.seed, 999))
print(f"phase 2: {phase2.steps} steps in {time.time() - t0:.0f} s, held-out alignment {align0:.4f} -> {align1:.4f}")
save_checkpoint(DATA / ref.CHECKPOINT_FILE, model, meta={"phase": 2, "step": phase2.steps, "train_config": cfg.to_dict()})

# --- loss table on held-out motions
t0 = time.time()
table = build_loss_table(model, body, ref.validation_corpus(), stride=ref.REFERENCE_STRIDE)
write_table(table, DATA / ref.TABLE_FILE)
print(f"loss table in {time.time() - t0:.0f} s")

# --- measurements the acceptance suite freezes
idle = generate_motion(400, ref.SEQUENCE_SECONDS, "idle")
devices = make_devices(body, ref.conventional_coordinates(body), ref.CONVENTIONAL_NAMES)
idle_gae = evaluate_sequence(model, table, body, idle, devices).gae

evaluation = ref.evaluation_corpus()
with_sc = placement_sweep(model, table, body, evaluation, ref.sweep_variants(body))
without_sc = placement_sweep(model, table, body, evaluation, ref.sweep_variants(body), zero_coordinates=True)
stations = placement_sweep(model, table, body, evaluation, ref.limb_stations(body))
station_gae = np.array([r.gae for r in stations])

lines = [
    f"phase1_loss {loss0:.6f} {loss1:.6f}",
    f"phase2_heldout_alignment {align0:.6f} {align1:.6f}",
    f"idle_six_device_gae_deg {idle_gae:.4f}",
    f"sweep_mean_gae_with_coordinates {np.mean([r.gae for r in with_sc]):.4f}",
    f"sweep_mean_gae_zeroed_coordinates {np.mean([r.gae for r in without_sc]):.4f}",
    f"limb_station_gae_range_deg {station_gae.max() - station_gae.min():.4f}",
]
report = "\n".join(lines) + "\n\n" + format_report(with_sc) + "\n" + format_report(without_sc) + "\n" + format_report(stations)
(DATA / "reference_metrics.txt").write_text(report)
sys.stdout.write(report)
