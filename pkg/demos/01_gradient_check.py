"""
Checking gradients against finite differences
=============================================

The optimizer only ever sees gradients from the tape, so the first thing
to convince ourselves of is that those gradients are right.
"""

import numpy as np

from reno import autodiff as ad
from reno.criteria import chi_norm_logpdf, default_criterion, full_objective
from reno.generators import embed_prompt, make_generator

# A tape records every operation on watched tensors; backward walks it in reverse.
with ad.Tape() as tape:
    eps = tape.watch(np.ones(4))
    k = chi_norm_logpdf(eps)
print("K(1,1,1,1) =", k.item())                       # 3 log 2 - 2
print("dK/de      =", tape.backward(k)[eps.node].data)  # -0.25 everywhere

# The same check for the whole objective: generator, four rewards and K.
g = make_generator("mlp", 32, (16, 16, 3), weight_seed=1)
p = embed_prompt("a red car")
crit = default_criterion(seed=0)
x = np.random.default_rng(0).normal(size=32)
err = ad.finite_diff_check(lambda e: full_objective(crit, g, e, p)[0], x, h=1e-5)
print(f"max relative error vs central differences: {err:.2e}")
