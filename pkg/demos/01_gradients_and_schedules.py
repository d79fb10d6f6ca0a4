"""
Gradients, schedules and the toy data
=====================================

A quick tour of the building blocks that need no trained model.
Run with ``python demos/01_gradients_and_schedules.py``.
"""
# %%
import numpy as np

from latent_purify import dataset, purifier
from latent_purify import ndgrad as nd
from latent_purify.ndgrad import Tensor

# %% [markdown]
# The autodiff engine records operations on a tape.  A softmax
# cross-entropy over a linear layer gives the familiar ``softmax - onehot``
# gradient, scaled by the batch size.

# %%
w = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
x = Tensor(np.eye(4)[:2])
with nd.Tape() as tape:
    loss = nd.softmax_cross_entropy(x @ w, [0, 2])
tape.backward(loss)
print("loss", float(loss.data))
print("dL/dw\n", np.round(w.grad, 4))

# %% [markdown]
# Purification blends each level's code with a prior draw.  The fixed
# schedules put little weight on the coarse (class-carrying) level and more
# on the fine ones.

# %%
for kind in purifier.INIT_KINDS:
    print(f"{kind:>18}", np.round(purifier.make_schedule(kind, 3, 0.7).values, 3))

# %% [markdown]
# The procedural dataset: sixteen-pixel glyphs with rotation, shift and
# texture noise.  Print one sample per class as ASCII art.

# %%
ds = dataset.generate(seed=0, classes=4, per_class=1)
for img, label in zip(ds.images, ds.labels):
    print(f"class {label}")
    for row in img[::2]:
        print("".join(" .:-=+*#%@"[min(9, int(v * 10))] for v in row))
