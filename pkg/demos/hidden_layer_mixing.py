"""Mix two batches inside a network and check the gradients by hand.

The mixer is a callable handed to ``PointModel.forward``; it replaces rows of
the activations at the hooked layer with the same rows of a shuffled partner.
The soft target follows the realized kept fraction.

    python demos/hidden_layer_mixing.py
"""
import numpy as np

from pmcut import AugmentConfig, BatchMixer, PointModel, build_dataset, rng_stream
from pmcut.training import batch_objective, gradient_check

ds = build_dataset(("sphere", "cube", "torus"), per_class=4, n_points=32, seed=0)
points, labels, _ = ds.train_arrays()
points, labels = points[:6], labels[:6]

model = PointModel("edgeconv-mini", ds.num_classes, k_neighbors=4, seed=0)
rng = rng_stream(0, "mask")
print("eligible layers:", model.eligible_layers)

for layer in model.eligible_layers:
    mixer = BatchMixer(len(points), 32, AugmentConfig(mode="pmc-k"), rng)
    loss = batch_objective(model, points, labels, mixer=mixer, hook=layer, reg_weight=1e-3)
    kept = mixer.keep.sum(axis=1)
    print(f"layer {layer}: lambda={mixer.lambda_realized:.3f}, kept per cloud {kept.tolist()}, "
          f"partners {mixer.perm.tolist()}, loss {float(loss.data):.4f}")

# central differences against backprop, with the kNN graphs and masks frozen
mixer = BatchMixer(4, 16, AugmentConfig(fixed_lambda=0.5), rng)
small = rng_stream(1).normal(size=(4, 16, 3))
report = gradient_check(model, small, np.array([0, 1, 2, 0]), mixer=mixer, hook=2, n_params=200)
print(f"gradient check: {report.checked} parameters, {report.skipped_kinks} skipped at kinks, "
      f"max relative error {report.max_rel_error:.2e} (worst in {report.worst_param})")
