# %% [markdown]
# # The VilHub penalty on a toy problem
#
# Features are matched to a frozen table of class text embeddings by a
# temperature-scaled softmax. The VilHub term penalizes the squared distance
# between the batch-mean class preference and the uniform distribution.

# %%
import numpy as np

from vilhub.losses import LossConfig, class_preference, loss_and_grad, vilhub_loss

rng = np.random.default_rng(0)


def unit(m):
    return m / np.linalg.norm(m, axis=1, keepdims=True)


# %% [markdown]
# A long-tailed batch: most labels are class 0. Every feature starts near
# class 0's embedding, so one class soaks up the preference (a hub).

# %%
table = unit(rng.normal(size=(6, 16)))
labels = np.r_[np.zeros(40, int), rng.integers(1, 6, 10)]
feats = unit(table[0] + 0.8 * rng.normal(size=(50, 16)))

for gamma in (0.0, 1.0, 5.0):
    bd, probs, _ = loss_and_grad(feats, table, labels, LossConfig(0.07, gamma))
    print(f"gamma {gamma}: vl {bd.vl:.4f}  hub {bd.hub:.4f}  total {bd.total:.4f}")

# %% [markdown]
# Plain gradient descent on the features themselves, with and without the
# penalty. The preference variance is what the penalty drives down.

# %%
def descend(gamma, steps=300, lr=0.5):
    f = feats.copy()
    cfg = LossConfig(0.07, gamma)
    for _ in range(steps):
        _, _, g = loss_and_grad(f, table, labels, cfg)
        f = unit(f - lr * g)
    _, probs, _ = loss_and_grad(f, table, labels, cfg)
    pref = class_preference(probs)
    return pref, np.mean(probs.argmax(1) == labels)


for gamma in (0.0, 1.0):
    pref, acc = descend(gamma)
    print(f"gamma {gamma}: pref var {pref.var():.5f}  hub {vilhub_loss(pref):.5f}  acc {acc:.3f}")
    print("  pref", np.round(pref, 3))
