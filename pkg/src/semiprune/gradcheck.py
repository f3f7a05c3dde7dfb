"""Finite-difference checks of every hand-written backward pass.

Each check draws random inputs, evaluates a scalar probe ``<G, output>``
and compares the analytic gradient with central differences using the
norm-relative error ``|a - n| / max(|a|, |n|, tiny)``.
"""

from dataclasses import dataclass

import numpy as np

from . import gcn, mask_param
from .mask_param import HEADS, GroupScheme, LatentLayer
from .objectives import cross_entropy, surrogate_rank
from .tensor_core import finite_diff_grad

__all__ = ["CheckResult", "relative_error", "check_cascade", "check_gate", "check_gcn", "run_suite"]

SIGMAS = (1.0, 5.0, 25.0)
HEAD_SETS = (HEADS, ("b",), ("u",), ("r", "c"))


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float

    @property
    def ok(self):
        return self.error <= self.tol


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _random_scheme(rng, shape, heads):
    rs = int(rng.integers(1, shape[0] + 1))
    cs = int(rng.integers(1, shape[1] + 1))
    span = "block" if rng.random() < 0.5 else "full"
    return GroupScheme.contiguous(shape, rs, cs, heads=heads, tie_span=span)


def check_cascade(seed, sigma, heads=HEADS, max_side=8, tol=1e-4):
    """Latent gradient of ``<G, W> + <H, psi3>`` for one random layer."""
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, max_side + 1, size=2))
    scheme = _random_scheme(rng, shape, heads)
    latent = rng.normal(0.0, 0.5, size=shape)
    g_w = rng.normal(size=shape)
    g_m = rng.normal(size=shape)

    def f(x):
        w, st = mask_param.compose(LatentLayer(x, scheme, sigma))
        return float((g_w * w).sum() + (g_m * st.psi3).sum())

    layer = LatentLayer(latent, scheme, sigma)
    _, stack = mask_param.compose(layer)
    analytic = mask_param.backward(layer, stack, g_w, g_m)
    numeric = finite_diff_grad(f, latent, eps=1e-6)
    name = f"cascade[{''.join(heads)},{shape[0]}x{shape[1]},sigma={sigma:g}]"
    return CheckResult(name, seed, relative_error(analytic, numeric), tol)


def check_gate(seed, tol=1e-4):
    """Partial derivative of the gate with respect to each head."""
    rng = np.random.default_rng(seed)
    heads = {h: rng.uniform(0.05, 0.95, size=(3, 4)) for h in HEADS}
    partials = mask_param.gate_partials(heads, HEADS)
    worst = 0.0
    for h in HEADS:
        def f(x, h=h):
            return float(mask_param.gate({**heads, h: x}).sum())
        worst = max(worst, relative_error(partials[h], finite_diff_grad(f, heads[h], eps=1e-6)))
    return CheckResult("gate-partials", seed, worst, tol)


def check_gcn(seed, tol=1e-4):
    """End-to-end latent gradients of cross entropy plus a rank term through the network."""
    rng = np.random.default_rng(seed)
    n, s, k, c, q, b = 4, 3, 2, 3, 3, 5
    adj = gcn.skeleton_adjacency(n, [(0, 1), (1, 2), (2, 3)])
    model = gcn.init_model(adj, s, k, c, q, rng, sigma=float(rng.choice(SIGMAS[:2])), init_scale=0.5)
    x = rng.normal(size=(b, n, s))
    y = rng.integers(0, q, size=b)
    gamma = 0.7

    def objective(m):
        logits, cache = gcn.gcn_forward(m, x)
        ce, d = cross_entropy(logits, y)
        rank = {name: surrogate_rank(cache.stacks[name].psi3, gamma) for name in m.prunable}
        return ce + sum(r for r, _ in rank.values()), cache, d, {k_: g for k_, (_, g) in rank.items()}

    _, cache, d, mg = objective(model)
    grads = gcn.gcn_backward(model, cache, d, mg)
    worst = 0.0
    for name in gcn.LAYERS:
        base = model.layers[name].latent.copy()

        def f(v, name=name):
            model.layers[name].latent[...] = v
            model.touch()
            return objective(model)[0]

        num = finite_diff_grad(f, base, eps=1e-6)
        model.layers[name].latent[...] = base
        model.touch()
        worst = max(worst, relative_error(grads[name], num))
    return CheckResult("gcn-end-to-end", seed, worst, tol)


def run_suite(seeds=range(20), tol=1e-4):
    """Every check on every seed; returns a list of :class:`CheckResult`."""
    out = []
    for seed in seeds:
        seed = int(seed)
        for sigma in SIGMAS:
            for hs in HEAD_SETS:
                out.append(check_cascade(seed, sigma, hs, tol=tol))
        out.append(check_gate(seed, tol))
        out.append(check_gcn(seed, tol))
    return out
