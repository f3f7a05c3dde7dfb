"""How latent weights turn into masks.

A latent tensor goes through three stages: a band-stop map that sends
small magnitudes to 0 and large ones to 1, four tied views of the result
(entry, row mean, column mean, block mean), and a gate that keeps an entry
if any of its views keeps it. Raising sigma makes the band-stop stage
crisp. The tied views are means, so a strong entry lifts its whole row and
column; the gated mask becomes binary only once training pushes whole
lines apart.
"""

import numpy as np

from semiprune import mask_param as mp

np.set_printoptions(precision=2, suppress=True)

rng = np.random.default_rng(0)
latent = rng.normal(scale=0.05, size=(4, 6))
latent[:2, :3] += 2.0          # a strong block in the top-left corner
latent[3, 5] = 2.5             # and one isolated strong weight

scheme = mp.GroupScheme.contiguous(latent.shape, 2, 3)
for sigma in (1.0, 10.0, 100.0):
    layer = mp.LatentLayer(latent, scheme, sigma)
    weights, stack = mp.compose(layer)
    print(f"sigma = {sigma:g}")
    print("  band-stop\n", stack.psi1)
    print("  block view\n", stack.head("b"))
    print("  gated mask\n", stack.psi3)
    print()

# The gate on crisp inputs: a connection survives if its block, column,
# row or own entry survives, checked in that order of priority.
for b, c, r, u in [(1, 0, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1), (0, 0, 0, 0)]:
    heads = {h: np.array([[float(v)]]) for h, v in zip("bcru", (b, c, r, u))}
    print(f"block={b} col={c} row={r} entry={u} -> gate {mp.gate(heads)[0, 0]:g}")

# Restricting the heads gives the two classical regimes.
for label, heads in (("structured", ("b",)), ("unstructured", ("u",))):
    layer = mp.LatentLayer(latent, scheme.with_heads(heads), 100.0)
    print(f"\n{label} mask\n", mp.compose(layer)[1].psi3)
