"""Swap points between a sphere and a cube, at the input layer.

Shows the two mask builders side by side: a random subset (PMC-R) and a
contiguous neighbourhood of the partner (PMC-K). Writes text clouds that any
plotting tool can read.

    python demos/mix_two_clouds.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from pmcut import PointCloud, ShapeSpec, apply_pmc, build_mask_knn, build_mask_random, gen_shape, rng_stream
from pmcut.augment import mix_point_targets
from pmcut.data import write_pct

out = Path(sys.argv[1] if len(sys.argv) > 1 else "mix_demo")
out.mkdir(parents=True, exist_ok=True)

rng = rng_stream(7, "demo")
sphere = gen_shape(ShapeSpec("sphere", 512), rng)
cube = gen_shape(ShapeSpec("cube", 512), rng)

lam = 0.6  # keep 60% of the sphere
for name, mask in (("random", build_mask_random(512, lam, rng)),
                   ("knn", build_mask_knn(cube.points, lam, rng))):
    mixed = apply_pmc(sphere.points, cube.points, mask)
    parts = mix_point_targets(sphere.point_labels, cube.point_labels, mask)
    write_pct(out / f"mixed_{name}.pct", PointCloud(mixed, 0, parts),
              {"lambda": mask.lambda_realized, "kept": mask.kept})
    # the swapped-in cube points: scattered for PMC-R, one patch for PMC-K
    patch = cube.points[~mask.keep]
    spread = np.linalg.norm(patch - patch.mean(0), axis=1).mean()
    print(f"{name:6s} kept {mask.kept}/512 sphere points, lambda={mask.lambda_realized:.4f}, "
          f"mean spread of the swapped-in patch {spread:.3f}")

print(f"text clouds written to {out}/")
