"""
Gradient conflict on the shared weights
=======================================

For every batch, compare the gradients two tasks send to the shared convolution
weights.  Cosines near zero with little spread mean the tasks rarely fight over
the same parameters.
"""

import numpy as np

from mtlnorm import OptimConfig, build, interference_histogram, reference_arch, reference_spec, synth_generate, train_run

ds = synth_generate(reference_spec(num_samples=1000, seed=0))
arch = reference_arch([t.output_dim for t in ds.tasks])

for mode in ("HPS", "TSSigmaBN"):
    model = build(arch, mode, seed=0)
    train_run(model, ds, OptimConfig(epochs=1, batch_size=32, seed=0), validate=False)
    rep = interference_histogram(model, ds.batches("train", 32, np.random.default_rng(0)), ds.tasks)
    print(f"{mode:>9}: pooled variance {rep.pooled_variance():.5f}")
    for a, b in rep.pairs:
        print(f"           {ds.task_names[a]}/{ds.task_names[b]} mean {rep.mean((a, b)):+.3f}")
