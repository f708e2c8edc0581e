"""
Fitting an unnormalised density by score matching
=================================================

The invariant prior is only known up to its normaliser, so it is trained by
score matching: minimise E[d2 log p + 0.5 (d1 log p)^2] over samples, which
never needs log Z. Here the model family is log p(z) = a z + b z^2 and the
data are N(1, 4), so the optimum is a = 1/4, b = -1/8.
"""

import numpy as np
import torch

from invae.losses import score_matching_objective
from invae.numerics import AdamState, ParamStore, adam_step

x = torch.from_numpy(np.random.default_rng(0).normal(1.0, 2.0, size=(20_000, 1)))

# for the standard normal kernel the objective is -1 + z^2 / 2, mean -1/2
z0 = torch.randn(100_000, 1, dtype=torch.float64)
kernel = score_matching_objective(lambda u: (-u ** 2 / 2).sum(-1), z0, 0.0).mean()
print("standard normal kernel:", float(kernel.detach()))

store = ParamStore({"a": torch.zeros(()), "b": torch.tensor(-0.5)})
opt = AdamState(lr=0.01)
for step in range(3001):
    a, b = store["a"], store["b"]
    loss = score_matching_objective(lambda u: (a * u + b * u ** 2).sum(-1), x, 0.0).mean()
    ga, gb = torch.autograd.grad(loss, [a, b])
    adam_step(opt, store, {"a": ga, "b": gb})
    if step % 500 == 0:
        print(f"step {step:4d}  loss {float(loss.detach()):+.4f}  a {float(a.detach()):+.4f}  b {float(b.detach()):+.4f}")

# adding a constant to log p changes nothing, which is why log Z can be ignored
z = x[:5]
f = lambda u: (store["a"] * u + store["b"] * u ** 2).sum(-1)
same = torch.equal(score_matching_objective(f, z, 0.0), score_matching_objective(lambda u: f(u) + 7.0, z, 0.0))
print("invariant to additive constants:", same)
