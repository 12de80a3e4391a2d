"""
Bounded per-task scales
=======================

A sigmoid batch-norm layer standardizes each channel and multiplies it by
sigma(gamma), a scale in (0, 1).  With one gamma row per task the same
convolution weights can be turned up or down independently for every task.
"""

import numpy as np

from mtlnorm.autograd import Tensor
from mtlnorm.norm import NormState, convert_pretrained, norm_forward, sigmoid

rng = np.random.default_rng(0)
batches = [rng.normal(3.0, 2.0, size=(64, 4)), rng.normal(-1.0, 0.5, size=(64, 4))]

# Two tasks, four channels.  Raw scales start at zero, i.e. sigma = 0.5 everywhere.
layer = NormState("TSSigmaBN", num_tasks=2, num_features=4)
layer.gamma.data[1] = [-4.0, 0.0, 2.0, 8.0]

for task in (0, 1):
    y = norm_forward(Tensor(batches[task]), layer, task, mode="train").data
    print(f"task {task}: per-channel std after the layer {np.round(y.std(axis=0), 4)}")
    print(f"        sigma(gamma)                      {np.round(sigmoid(layer.gamma.data[task]), 4)}")

# Every task keeps its own running statistics for evaluation.
print("running means per task:\n", np.round(layer.running_mean, 3))

# Loading a pretrained affine BN layer: the scale is mapped through the logit
# (after clipping into the open interval) and the shift is copied and frozen.
gamma_pre = np.array([0.2, 0.9, 1.3, -0.1])
raw, beta, clamped = convert_pretrained(gamma_pre, np.array([0.1, 0.0, -0.2, 0.3]))
print("pretrained gamma", gamma_pre, "-> sigma(raw)", np.round(sigmoid(raw), 4), f"({clamped} clamped)")
