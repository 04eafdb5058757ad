"""
Decoding from a perfect confidence map
======================================

The classical half of the pipeline on its own: render a tilted photograph,
build the ideal confidence map from the known bump positions, then locate
the landmarks, register, threshold, label and cluster.  No network involved.
"""

import math

import numpy as np

from watermark3d.codec import LandmarkLayout, PlateSpec, generate_matrix, rasterize_plate
from watermark3d.render import (PALETTE, RenderCondition, camera_homography,
                                gaussian_ground_truth, kernel_peak, make_annotation, render)
from watermark3d.retrieval import Diagnostics, RetrievalConfig, decode_confidence_map

m, out, sigma = 10, 1024, 1.5
spec = PlateSpec()
M = generate_matrix(m, seed=42)
hf = rasterize_plate(M, spec, LandmarkLayout.for_plate(m, spec), 16.0)

# a 30 degree tilt, a 25 degree lean and an arbitrary roll
H = camera_homography(spec, m, out, math.radians(30), math.radians(-25), 2.1, 0.75)
blue = PALETTE["blue"]
cond = RenderCondition(homography=H, material_albedo=blue.albedo, noise_sigma=0.01,
                       infill_amplitude=blue.infill_amplitude, roughness=blue.roughness)
image = render(hf, cond, out)
print("image", image.shape, "mean level %.3f" % image.mean())

# one marked pixel per bump on the quarter-size map, blurred and scaled so a
# lone bump peaks at 1
A = make_annotation(M, spec, cond, out // 4)
Y = gaussian_ground_truth(A, sigma) / kernel_peak(sigma)
print("annotated bumps:", int(A.sum()), "map peak %.3f" % Y.max())

diag = Diagnostics()
D, _ = decode_confidence_map(Y, image, RetrievalConfig(m=m), diag)
print("landmarks (image px):")
print(np.round(diag.landmarks.points, 1))
print("OTSU-scaled threshold %.4f, %d components kept" % (diag.threshold, len(diag.centroids)))
print(D.to_text())
print("exact recovery:", D == M)
