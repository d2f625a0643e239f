#!/usr/bin/env python3
"""Smoke test for the sinusnet_py extension module.

Build the extension first, then run this script from the repository root:

    cargo build -p sinusnet-python
    python3 python/smoke_test.py

The script stages the built cdylib under an importable name, exercises every
exported type and function, cross-checks the metrics against scikit-learn,
and drives the full pipeline once on the bundled smoke config.
"""

import math
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parents[1]


def import_extension():
    """Python imports extension modules by file name, so copy the cdylib
    into a scratch directory under the module's importable name."""
    candidates = [REPO / "target" / p / "libsinusnet_py.so" for p in ("release", "debug")]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit("libsinusnet_py.so not found; run `cargo build -p sinusnet-python` first")
    newest = max(built, key=lambda p: p.stat().st_mtime)
    stage = Path(tempfile.mkdtemp(prefix="sinusnet_py_"))
    shutil.copy2(newest, stage / "sinusnet_py.so")
    sys.path.insert(0, str(stage))
    import sinusnet_py

    return sinusnet_py


sn = import_extension()
checks = 0


def ok(name):
    global checks
    checks += 1
    print(f"ok: {name}")


# --- Volume type and transforms -------------------------------------------

rng = np.random.default_rng(11)
data = rng.random((16, 16, 16), dtype=np.float32) * 4.0 - 1.0
vol = sn.Volume(data, spacing=(0.5, 0.5, 0.5), id="smoke")
assert vol.shape == (16, 16, 16)
assert vol.id == "smoke"
assert vol.spacing == (0.5, 0.5, 0.5)
assert np.array_equal(vol.data, data)
ok("Volume wraps and returns numpy data unchanged")

norm = vol.normalize()
assert norm.data.min() == 0.0 and norm.data.max() == 1.0
ok("normalize maps onto [0, 1]")

assert np.array_equal(vol.flip_lr().flip_lr().data, data)
ok("flip_lr is an involution")

crop = vol.crop((8, 8, 8), (8, 8, 8))
assert crop.shape == (8, 8, 8)
med = norm.median_filter(3)
assert med.shape == (16, 16, 16)
center = np.median(norm.data[7:10, 7:10, 7:10])
assert abs(med.data[8, 8, 8] - center) < 1e-6
ok("crop and median_filter behave")

try:
    sn.Volume(np.full((4, 4, 4), np.nan, dtype=np.float32))
    raise AssertionError("non-finite volume accepted")
except RuntimeError:
    ok("non-finite voxels are rejected")

with tempfile.TemporaryDirectory() as td:
    path = Path(td) / "smoke.svol"
    vol.save(path)
    back = sn.Volume.load(path)
    # the loader names the volume after the file stem
    assert back.id == "smoke" and back.spacing == vol.spacing
    assert np.array_equal(back.data, vol.data)
ok("save/load round trip is exact")

a1 = sn.augment(norm, seed=5, p_affine=0.0, p_flip=0.0, p_noise=1.0, noise_std=0.1)
a2 = sn.augment(norm, seed=5, p_affine=0.0, p_flip=0.0, p_noise=1.0, noise_std=0.1)
a3 = sn.augment(norm, seed=6, p_affine=0.0, p_flip=0.0, p_noise=1.0, noise_std=0.1)
assert np.array_equal(a1.data, a2.data)
assert not np.array_equal(a1.data, a3.data)
ok("augment is deterministic per seed")

# --- Phantom generator ------------------------------------------------------

samples = sn.generate_dataset(12, anomaly_fraction=0.5, volume_size=16, seed=7)
assert len(samples) == 12
assert len({s.patient for s in samples}) == 6
for s in samples:
    assert s.side in ("left", "right")
    assert (s.label == "anomalous") == s.is_anomalous()
    assert (s.gt_mask is not None) == s.is_anomalous()
    if s.gt_mask is not None:
        assert s.gt_mask.sum() > 0
        assert s.anomaly_kind in ("blob", "wall_thickening", "polyp")
    v = s.volume.data
    assert v.min() >= 0.0 and v.max() <= 1.0
again = sn.generate_dataset(12, anomaly_fraction=0.5, volume_size=16, seed=7)
assert all(np.array_equal(a.volume.data, b.volume.data) for a, b in zip(samples, again))
ok("generate_dataset emits labelled, masked, deterministic samples")

# --- Metrics vs scikit-learn ------------------------------------------------

from sklearn.metrics import average_precision_score, f1_score, roc_auc_score

mrng = np.random.default_rng(3)
for trial in range(200):
    n = int(mrng.integers(2, 50))
    labels = mrng.random(n) < 0.5
    if labels.all() or not labels.any():
        continue
    # integer grid scores exercise tie handling
    scores = mrng.integers(0, 8, n) / 7.0 if trial % 2 else mrng.random(n)
    assert abs(sn.auroc(list(scores), list(labels)) - roc_auc_score(labels, scores)) < 1e-12
    assert abs(sn.auprc(list(scores), list(labels)) - average_precision_score(labels, scores)) < 1e-12
    preds = scores > 0.5
    assert abs(sn.f1_score(list(preds), list(labels)) - f1_score(labels, preds, zero_division=0)) < 1e-12
ok("auroc/auprc/f1 match scikit-learn on 200 random instances")

try:
    sn.auroc([0.5, 0.5], [True, True])
    raise AssertionError("single-class instance accepted")
except RuntimeError:
    ok("single-class auroc raises")

from scipy.stats import t as t_dist

values = [0.71, 0.78, 0.74, 0.81, 0.69]
agg = sn.aggregate_folds(values)
mean = float(np.mean(values))
half = t_dist.ppf(0.975, len(values) - 1) * np.std(values, ddof=1) / math.sqrt(len(values))
assert abs(agg["mean"] - mean) < 1e-12
assert abs(agg["ci95_low"] - (mean - half)) < 1e-9
assert abs(agg["ci95_high"] - (mean + half)) < 1e-9
assert agg["n_folds"] == 5 and agg["per_fold"] == values
ok("aggregate_folds matches the Student-t interval")

# --- Schedule ----------------------------------------------------------------

assert sn.lr_at(0.2, 20, 500, 0) == 0.0
assert abs(sn.lr_at(0.2, 20, 500, 20) - 0.2) < 1e-15
assert sn.lr_at(0.2, 20, 500, 499) < 1e-5
decaying = [sn.lr_at(0.2, 20, 500, e) for e in range(20, 500)]
assert all(x >= y for x, y in zip(decaying, decaying[1:]))
ok("lr_at warms up to the base rate then decays monotonically")

# --- Config validation --------------------------------------------------------

smoke_toml = (REPO / "configs" / "smoke.toml").read_text()
assert sn.validate_config_text(smoke_toml) == []
bad = smoke_toml.replace("epochs = 5", "epochs = 0", 1)
diags = sn.validate_config_text(bad)
assert diags and all(":" in d for d in diags)
try:
    sn.validate_config_text("this is not toml [")
    raise AssertionError("unparseable config accepted")
except ValueError:
    pass
ok("validate_config_text reports diagnostics and parse errors")

# --- End-to-end pipeline -------------------------------------------------------

workdir = Path(tempfile.mkdtemp(prefix="sinusnet_run_"))
(workdir / "data").mkdir()
os.chdir(workdir)
result = sn.run_experiment(REPO / "configs" / "smoke.toml")
assert result["executed"] == [
    "gen-data", "split", "train-cae", "gen-residuals", "pretrain", "finetune", "evaluate",
]
report = result["report"]
for metric in ("auroc", "auprc", "f1"):
    s = report[metric]
    assert s["n_folds"] == 2
    assert s["ci95_low"] <= s["mean"] <= s["ci95_high"]
    assert all(0.0 <= v <= 1.0 for v in s["per_fold"])
rerun = sn.run_experiment(REPO / "configs" / "smoke.toml")
assert rerun["executed"] == [] and len(rerun["skipped"]) == 7
ok("run_experiment completes all seven stages and reruns as a no-op")

print(f"all {checks} smoke checks passed")
