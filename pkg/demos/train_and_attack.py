"""Train a baseline and a mixed model, then attack both on the test split.

A reduced version of the desk-scale protocol (fewer clouds and epochs) so it
finishes in a few minutes on one core. Pass ``--full`` for 250 clouds per
class, 256 points and 50 epochs.

    python demos/train_and_attack.py [--full]
"""
import sys
import time

from pmcut import AugmentConfig, PointModel, TrainConfig, build_dataset, rng_stream, train
from pmcut.robustness import AttackSpec, attack_sweep, sweep_table

full = "--full" in sys.argv
per_class, n_points, epochs = (250, 256, 50) if full else (60, 128, 15)

ds = build_dataset(per_class=per_class, n_points=n_points, seed=0)
print(f"{len(ds.train_idx)} train / {len(ds.test_idx)} test clouds, {n_points} points each")

attacks = [AttackSpec.parse(a) for a in ("drop:0.2", "drop:0.4", "noise:0.002", "noise:0.003",
                                         "scale:1.2", "rotate:x:30")]
for name, aug in (("baseline", None), ("mixed", AugmentConfig(rho=0.5, beta=1.0, layer="random"))):
    model = PointModel("pointnet-mini", ds.num_classes, seed=0)
    t0 = time.perf_counter()
    report = train(model, ds, TrainConfig(epochs=epochs, batch_size=32, augment=aug, seed=0,
                                          eval_every=epochs))
    print(f"\n{name}: clean OA {report.final_metrics['oa']:.4f} after {time.perf_counter() - t0:.0f}s")
    print(sweep_table(attack_sweep(model, ds.test_clouds(), attacks, rng_stream(0, "attack"))), end="")
