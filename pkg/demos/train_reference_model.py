"""
Training the desk-scale model
=============================

Renders the benchmark objects, holds out fold 0 (two naturally lit views
and one extreme-artificial view of every object), trains the desk network
and scores the held-out views.  The checkpoint this writes is the one
stored as ``tests/data/reference_model.c3dw``.  Takes about 7 minutes on
one CPU core.
"""

import logging
import sys
import tempfile
import time
from pathlib import Path

from watermark3d.evaluation import (DEV_OBJECTS, ExperimentConfig, build_benchmark, cv_folds,
                                    evaluate_records, fit_model)
from watermark3d.model import desk_config, save_checkpoint

logging.basicConfig(level=logging.INFO, format="%(message)s")
work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="bench_"))

t0 = time.perf_counter()
records = [r for r in build_benchmark(work / "data") if r["object_id"] in DEV_OBJECTS]
print("%d images rendered in %.0f s" % (len(records), time.perf_counter() - t0))

held_out = set(cv_folds(records, 5)[0])
train = [r for r in records if r["id"] not in held_out]
test = [r for r in records if r["id"] in held_out]
print("train on %d, test on %d" % (len(train), len(test)))

# 4 epochs, lr 1e-3 then 1e-4 after epoch 2, ten 128 px crops per image
cfg = ExperimentConfig(train=desk_config())
t0 = time.perf_counter()
model, losses = fit_model(train, cfg, "fold 0")
print("trained in %.0f s, epoch losses %s" % (time.perf_counter() - t0,
                                              ", ".join("%.5f" % v for v in losses)))
save_checkpoint(model, work / "reference_model.c3dw", epoch=len(losses))
print("checksum", model.checksum())

results = evaluate_records(model, test, cfg.retrieval)
for illum in ("natural", "extreme_artificial"):
    accs = [r.counts.accuracy for r in results if r.illumination == illum]
    print("%-18s mean bit accuracy %.4f over %d views" % (illum, sum(accs) / len(accs), len(accs)))
