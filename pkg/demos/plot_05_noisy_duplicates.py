"""
Noisy copies of a task
======================

Duplicate the regression task and corrupt the copy with noise of growing
variance.  At zero noise the two tasks are the same and should share their
importances; as the noise grows the copy has less in common with its source.
A single seed is noisy; the acceptance suite compares medians over three.
"""

from mtlnorm import (
    OptimConfig,
    build,
    decompose_capacity,
    importance_matrix,
    noisy_family,
    reference_arch,
    reference_spec,
    similarity_matrix,
    synth_generate,
    train_run,
)

base = synth_generate(reference_spec(num_samples=2000, seed=0))
print(" xi   S(source, copy)   independent capacity of the copy")
for xi in (0.0, 1.0, 3.0):
    ds = noisy_family(base, xi, seed=0)
    model = build(reference_arch([t.output_dim for t in ds.tasks]), "TSSigmaBN", seed=0)
    train_run(model, ds, OptimConfig(epochs=10, batch_size=32, seed=0), validate=False)
    I = importance_matrix(model, ds.task_names)
    print(f"{xi:4.1f}   {similarity_matrix(I).values[1, 2]:15.4f}   {decompose_capacity(I, 2).indep:10.4f}")
