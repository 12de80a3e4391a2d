"""
Pruning by importance
=====================

If a filter's scale for task t is high, removing that filter should hurt t more
than the other tasks.  Zero each task's top-k filters in turn and measure every
task; a dominant diagonal in the relative-drop matrix supports the reading.
"""

import numpy as np

from mtlnorm import OptimConfig, build, prune_and_measure, reference_arch, reference_spec, synth_generate, train_run
from mtlnorm.analysis import default_prune_k, diagonal_dominance

ds = synth_generate(reference_spec(num_samples=1000, seed=1))
model = build(reference_arch([t.output_dim for t in ds.tasks]), "TSSigmaBN", seed=1)
train_run(model, ds, OptimConfig(epochs=5, batch_size=32, seed=1), validate=False)

k = default_prune_k(model.num_filters)
drops = prune_and_measure(model, ds, k=k)
print(f"k = {k} of {model.num_filters} filters")
print("rows: pruned for task, columns: measured task (positive = worse)")
print(np.round(drops, 3))
diag, off = diagonal_dominance(drops)
print(f"mean diagonal {diag:.3f}, mean off-diagonal {off:.3f}")
