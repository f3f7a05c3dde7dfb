"""Skeleton graphs and a single-block multi-head GCN.

For a graph signal ``U`` (``s x n``) the hidden representation is

    H = relu(sum_k A^k U^T W^k)        (n x C)

followed by a dense layer on ``flatten(H)``. The K attention matrices are
stored side by side in one ``n x (n K)`` tensor and the K filter banks in
one ``s x (C K)`` tensor, so each is a single prunable matrix.
"""

from dataclasses import dataclass, field

import numpy as np

from . import mask_param
from .errors import DataError, ParameterError, ShapeError, UsageError
from .mask_param import GroupScheme, LatentLayer

__all__ = [
    "SkeletonSequence",
    "TrajectoryGraph",
    "GcnModel",
    "SBU_BONES",
    "FPHA_BONES",
    "temporal_chunking",
    "skeleton_adjacency",
    "default_schemes",
    "init_model",
    "forward_weights",
    "gcn_forward",
    "gcn_backward",
    "predict",
    "accuracy",
]

# Kinect skeleton, 15 joints: head, neck, torso, left shoulder/elbow/hand,
# right shoulder/elbow/hand, left hip/knee/foot, right hip/knee/foot.
SBU_BONES = (
    (0, 1), (1, 2), (1, 3), (3, 4), (4, 5), (1, 6), (6, 7), (7, 8),
    (2, 9), (9, 10), (10, 11), (2, 12), (12, 13), (13, 14),
)

# Hand skeleton, 21 joints: wrist, five MCPs (thumb..pinky), then
# PIP/DIP/TIP triplets per finger.
FPHA_BONES = (
    (0, 1), (0, 2), (0, 3), (0, 4), (0, 5),
    (1, 6), (6, 7), (7, 8),
    (2, 9), (9, 10), (10, 11),
    (3, 12), (12, 13), (13, 14),
    (4, 15), (15, 16), (16, 17),
    (5, 18), (18, 19), (19, 20),
)

LAYERS = ("attention", "conv", "dense")


@dataclass
class SkeletonSequence:
    """Per-frame joint coordinates, shape ``(frames, joints, 3)``."""

    frames: np.ndarray
    label: int = 0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 3:
            raise DataError(f"frames must have shape (frames, joints, 3), got {f.shape}")
        if f.shape[0] < 1:
            raise DataError("sequence has no frames")
        if not np.isfinite(f).all():
            raise DataError("sequence contains non-finite coordinates")
        self.frames = f

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def n_joints(self):
        return self.frames.shape[1]


@dataclass
class TrajectoryGraph:
    signal: np.ndarray      # s x n, column j describes joint j
    adjacency: np.ndarray   # n x n
    label: int = 0

    @property
    def n(self):
        return self.signal.shape[1]


def chunk_bounds(frame_count, chunks):
    """Start/stop frame of every chunk; earlier chunks get the extra frames."""
    base, extra = divmod(frame_count, chunks)
    sizes = np.full(chunks, base)
    sizes[:extra] += 1
    stops = np.cumsum(sizes)
    return np.column_stack([stops - sizes, stops])


def temporal_chunking(seq, chunks, adjacency=None):
    """Describe every joint trajectory by its per-chunk mean positions.

    The frames are split into `chunks` consecutive chunks of near-equal
    size, the mean 3-D position of each chunk is taken, and the means are
    concatenated into a ``3 * chunks`` descriptor per joint. A chunk left
    empty because the sequence is shorter than `chunks` takes the frame at
    its proportional timestamp.
    """
    if chunks < 1:
        raise DataError("number of chunks must be positive")
    if not isinstance(seq, SkeletonSequence):
        seq = SkeletonSequence(seq)
    frames = seq.frames
    t = seq.frame_count
    parts = []
    for c, (lo, hi) in enumerate(chunk_bounds(t, chunks)):
        if hi > lo:
            parts.append(frames[lo:hi].mean(axis=0))
        else:
            parts.append(frames[(c * t) // chunks])
    signal = np.concatenate(parts, axis=1).T  # (3M, n)
    if adjacency is None:
        adjacency = np.eye(seq.n_joints)
    return TrajectoryGraph(np.ascontiguousarray(signal), np.asarray(adjacency, dtype=np.float64), seq.label)


def skeleton_adjacency(n, bones):
    """Binary symmetric adjacency with unit diagonal from a bone list."""
    a = np.eye(n)
    for i, j in bones:
        if not (0 <= i < n and 0 <= j < n):
            raise DataError(f"bone ({i}, {j}) references a joint outside 0..{n - 1}")
        a[i, j] = a[j, i] = 1.0
    return a


def default_schemes(n, s, heads, filters, classes, chunks=None, mode="semi", tie_span="full"):
    """Group schemes for the three stacked tensors.

    Attention blocks are one head each (``n x n``); conv blocks are one
    temporal chunk (3 feature rows) by one head's filters; dense blocks are
    one node's filters by one class.
    """
    allowed = {"semi": mask_param.HEADS, "structured": ("b",), "unstructured": ("u",)}
    if mode not in allowed:
        raise ParameterError(f"unknown pruning mode {mode!r}")
    kw = {"heads": allowed[mode], "tie_span": tie_span}
    chunk_rows = 3 if chunks is not None and s == 3 * chunks else s
    return {
        "attention": GroupScheme.contiguous((n, n * heads), None, n, **kw),
        "conv": GroupScheme.contiguous((s, filters * heads), chunk_rows, filters, **kw),
        "dense": GroupScheme.contiguous((n * filters, classes), filters, 1, **kw),
    }


@dataclass
class GcnModel:
    """Multi-head GCN with optionally mask-parametrized tensors.

    `layers` maps ``"attention"``, ``"conv"`` and ``"dense"`` to
    :class:`LatentLayer` objects; only names listed in `prunable` go
    through the mask parametrization, the others use their latent values
    directly.
    """

    n_nodes: int
    n_features: int
    heads: int
    filters: int
    n_classes: int
    layers: dict
    prunable: tuple = LAYERS
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        expected = {
            "attention": (self.n_nodes, self.n_nodes * self.heads),
            "conv": (self.n_features, self.filters * self.heads),
            "dense": (self.n_nodes * self.filters, self.n_classes),
        }
        for name, shape in expected.items():
            if name not in self.layers:
                raise ShapeError(f"model is missing the {name} tensor")
            if self.layers[name].latent.shape != shape:
                raise ShapeError(f"{name} tensor has shape {self.layers[name].latent.shape}, expected {shape}")
        self.prunable = tuple(p for p in LAYERS if p in self.prunable)

    def touch(self):
        """Mark parameters as changed; invalidates cached forward passes."""
        self.version += 1

    def effective(self, name):
        """Effective weights of one tensor and its mask stack (or None)."""
        layer = self.layers[name]
        if layer.frozen_mask is not None:
            return layer.latent * layer.frozen_mask, None
        if name in self.prunable:
            return mask_param.compose(layer)
        return layer.latent, None

    def masks(self):
        """Current (soft or frozen) masks of the prunable tensors."""
        out = {}
        for name in self.prunable:
            layer = self.layers[name]
            if layer.frozen_mask is not None:
                out[name] = layer.frozen_mask
            else:
                out[name] = mask_param.compose(layer)[1].psi3
        return out

    def set_sigma(self, sigma):
        for layer in self.layers.values():
            layer.sigma = float(sigma)

    def copy(self):
        layers = {
            k: LatentLayer(
                v.latent.copy(), v.scheme, v.sigma, v.name,
                None if v.frozen_mask is None else v.frozen_mask.copy(),
            )
            for k, v in self.layers.items()
        }
        return GcnModel(self.n_nodes, self.n_features, self.heads, self.filters, self.n_classes, layers, self.prunable)


def init_model(adjacency, n_features, heads, filters, n_classes, rng, schemes=None,
               prunable=LAYERS, sigma=1.0, init_scale=1.0, attention_noise=0.01):
    """Random model; attention heads start at the skeleton adjacency plus noise."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    n = adjacency.shape[0]
    if schemes is None:
        schemes = default_schemes(n, n_features, heads, filters, n_classes)
    att = np.tile(adjacency, (1, heads)) + attention_noise * rng.standard_normal((n, n * heads))
    conv = init_scale * rng.standard_normal((n_features, filters * heads))
    dense = init_scale * rng.standard_normal((n * filters, n_classes))
    layers = {
        name: LatentLayer(value, schemes[name], sigma, name)
        for name, value in (("attention", att), ("conv", conv), ("dense", dense))
    }
    return GcnModel(n, n_features, heads, filters, n_classes, layers, prunable)


def _as_signals(graph):
    """Batch of transposed signals, shape ``(batch, n, s)``."""
    if isinstance(graph, TrajectoryGraph):
        return graph.signal.T[None]
    if isinstance(graph, (list, tuple)):
        return np.stack([g.signal.T for g in graph])
    x = np.asarray(graph, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return x


def forward_weights(att, conv, dense, x, heads, filters):
    """Forward pass on explicit weights; returns logits and intermediates.

    `x` has shape ``(batch, n, s)`` and holds ``U^T`` for every sample.
    """
    b, n, _ = x.shape
    p = x @ conv                                                   # (b, n, K C)
    y = p.reshape(b, n, heads, filters).transpose(0, 2, 1, 3).reshape(b, heads * n, filters)
    z = att @ y                                                    # (b, n, C)
    h = np.maximum(z, 0.0)
    logits = h.reshape(b, n * filters) @ dense
    return logits, (y, z, h)


@dataclass
class ForwardCache:
    x: np.ndarray
    weights: dict
    stacks: dict
    y: np.ndarray
    z: np.ndarray
    h: np.ndarray
    version: int


def gcn_forward(model, graph):
    """Logits for one graph, a list of graphs, or a ``(batch, n, s)`` array."""
    x = _as_signals(graph)
    if x.shape[1:] != (model.n_nodes, model.n_features):
        raise ShapeError(f"signal batch has shape {x.shape[1:]}, model expects ({model.n_nodes}, {model.n_features})")
    weights, stacks = {}, {}
    for name in LAYERS:
        weights[name], stacks[name] = model.effective(name)
    logits, (y, z, h) = forward_weights(
        weights["attention"], weights["conv"], weights["dense"], x, model.heads, model.filters
    )
    return logits, ForwardCache(x, weights, stacks, y, z, h, model.version)


def gcn_backward(model, cache, grad_logits, mask_grads=None):
    """Reverse-mode gradients for every tensor of the model.

    Parameters
    ----------
    model : GcnModel
    cache : ForwardCache
        From :func:`gcn_forward` on the same, unchanged model.
    grad_logits : ndarray
        dL/d logits, shape ``(batch, classes)``.
    mask_grads : dict, optional
        Extra gradients on the masks of prunable tensors, keyed by name.

    Returns
    -------
    dict
        Gradient with respect to each tensor's latent values (or its
        weights for unwrapped and frozen tensors).
    """
    if cache.version != model.version:
        raise UsageError("forward cache is stale: the model changed after the forward pass")
    g = np.asarray(grad_logits, dtype=np.float64)
    b = cache.x.shape[0]
    n, k, c = model.n_nodes, model.heads, model.filters
    if g.shape != (b, model.n_classes):
        raise ShapeError(f"grad_logits has shape {g.shape}, expected {(b, model.n_classes)}")
    w = cache.weights
    d_dense = cache.h.reshape(b, n * c).T @ g
    d_h = (g @ w["dense"].T).reshape(b, n, c)
    d_z = d_h * (cache.z > 0)
    d_att = np.tensordot(d_z, cache.y, axes=([0, 2], [0, 2]))     # (n, K n)
    d_y = np.swapaxes(w["attention"], 0, 1) @ d_z                 # (b, K n, C)
    d_p = d_y.reshape(b, k, n, c).transpose(0, 2, 1, 3).reshape(b * n, k * c)
    d_conv = cache.x.reshape(b * n, -1).T @ d_p
    grads = {"attention": d_att, "conv": d_conv, "dense": d_dense}
    mask_grads = mask_grads or {}
    out = {}
    for name in LAYERS:
        layer = model.layers[name]
        stack = cache.stacks[name]
        if stack is None:
            if layer.frozen_mask is not None:
                out[name] = grads[name] * layer.frozen_mask
            else:
                out[name] = grads[name]
        else:
            out[name] = mask_param.backward(layer, stack, grads[name], mask_grads.get(name))
    return out


def predict(model, x):
    logits, _ = gcn_forward(model, x)
    return logits.argmax(axis=1)


def accuracy(model, x, labels):
    """Fraction of correctly classified samples."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float((predict(model, x) == labels).mean())
