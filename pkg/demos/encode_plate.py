"""
Encoding a payload as a printable plate
=======================================

A random 20x20 bit matrix becomes a heightfield with one bump per set bit,
framed by four magenta corner landmarks, then a watertight STL mesh.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from watermark3d.codec import (LandmarkLayout, PlateSpec, export_stl, generate_matrix,
                               rasterize_plate)

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="plate_"))
out.mkdir(parents=True, exist_ok=True)

# the payload: same seed, same matrix
M = generate_matrix(20, seed=7)
print(M.to_text())
print("ones:", int(M.bits.sum()), "of", M.bits.size)

# plate geometry in millimetres; the landmark layout also carries the
# orientation dots (one to four per corner)
spec = PlateSpec()
layout = LandmarkLayout.for_plate(M.m, spec)
print("plate side %.1f mm, bump pitch %.1f mm" % (spec.plate_size(M.m), spec.grid_pitch))

# rasterise at 2.5 samples per mm
hf = rasterize_plate(M, spec, layout, 2.5)
print("heightfield", hf.elevation.shape, "max relief %.2f mm" % hf.elevation.max())

# masks say which samples belong to bumps and which to the landmarks
print("bump area %.3f, landmark area %.4f" % (hf.bump_mask.mean(), hf.landmark_mask.mean()))

stl = export_stl(hf, spec, step=2)
(out / "plate.stl").write_bytes(stl)
print("wrote", out / "plate.stl", len(stl) // 1024, "KiB")
np.savetxt(out / "matrix.txt", M.bits, fmt="%d")
