"""
Reading a watermark with the trained network
============================================

Loads the stored desk model, photographs one plate from three angles under
harsh lamp light, decodes each view and combines them by majority vote.
"""

import math
from pathlib import Path

import numpy as np

from watermark3d.codec import LandmarkLayout, PlateSpec, generate_matrix, rasterize_plate
from watermark3d.model import load_checkpoint
from watermark3d.render import PALETTE, sample_condition, render
from watermark3d.retrieval import RetrievalConfig, majority_vote, retrieve

model = load_checkpoint(Path(__file__).parent.parent / "tests" / "data" / "reference_model.c3dw")[0]

m = 10
spec = PlateSpec()
M = generate_matrix(m, seed=2718)
hf = rasterize_plate(M, spec, LandmarkLayout.for_plate(m, spec), 16.0)
rng = np.random.default_rng(5)

decoded = []
for view in range(3):
    cond = sample_condition(rng, spec, m, PALETTE["wooden"], "extreme_artificial",
                            texture_seed=1, infill=(14.0, 0.6))
    image = render(hf, cond, 1024)
    D, diag = retrieve(image, model, RetrievalConfig(m=m))
    acc = (D.bits == M.bits).mean()
    print("view %d: lamp elevation %2.0f deg, bit accuracy %.2f" % (
        view, math.degrees(cond.illum_params.light_elevation), acc))
    decoded.append(D)

vote, ties = majority_vote(decoded)
print("majority vote accuracy %.2f" % (vote.bits == M.bits).mean())
