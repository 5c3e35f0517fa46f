"""Fit an occlusion field to the plate scene and pull out its NLoS surface.

A short schedule (1500 steps) keeps this to about a minute and a half on one core. The
CLI pipeline and the acceptance suite use 4000.
"""

import sys
import time

from occfields.cli import DEMOS
from occfields.field import FitConfig, OcclusionField, fit
from occfields.geometry import save_mesh
from occfields.metrics import chamfer, fscore, label_iou
from occfields.occlusion import label_set, labeling_sensors, sample_points
from occfields.scene import ScenePlacement, build_scene, preset
from occfields.shapes import builtin_mesh
from occfields.surface import evaluate_grid, extract_surface, fermat_filter, wall_visible_faces

name = sys.argv[1] if len(sys.argv) > 1 else "plate"
cfg = preset("confocal-small")
cube = cfg.hidden_cube
mesh, bvh = build_scene(cfg, [ScenePlacement(m, xf) for m, xf in DEMOS[name]], builtin_mesh)
sensors = labeling_sensors(cfg.wall)

train = label_set(bvh, sample_points(mesh, cube, 200_000, rng=0), sensors)
test = label_set(bvh, sample_points(mesh, cube, 50_000, rng=1), sensors)
print(f"{name}: {train.global_label.mean():.2f} of training points occluded")

fld = OcclusionField.create(cube=cube)
t0 = time.perf_counter()
rep = fit(fld, train, FitConfig(steps=1500, batch=4096, eval_every=250))
for step, loss in zip(rep.steps, rep.val_loss):
    print(f"  step {step:5d}  val BCE {loss:.4f}")
print(f"fit in {time.perf_counter() - t0:.0f} s, held-out IoU "
      f"{label_iou(fld.predict(test.points) > 0.5, test.global_label):.3f}")

gt = wall_visible_faces(mesh, sensors)
bfc = fermat_filter(mesh, cfg.wall)
for res in (32, 64):
    ex = extract_surface(evaluate_grid(fld, res, cube), sensors)
    print(f"r={res}: closed {len(ex.closed_mesh)} tris, NLoS {len(ex.nlos_mesh)} tris, "
          f"Chamfer x1e3 {1e3 * chamfer(ex.nlos_mesh, gt, cube=cube):.3f}, "
          f"F {fscore(ex.nlos_mesh, gt, cube=cube):.3f}")
print(f"Fermat-filtered GT keeps {bfc.surface_area / gt.surface_area:.2f} of the wall-visible area")
save_mesh(ex.nlos_mesh, f"{name}_nlos.ply")
print(f"wrote {name}_nlos.ply")
