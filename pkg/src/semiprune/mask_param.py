"""Cascaded mask parametrization: band-stop, weight sharing and gating.

A latent tensor ``What`` is turned into effective weights

    W = What * psi3(psi2(psi1(What)))

where ``psi1`` is an entry-wise band-stop function of the latent magnitude,
``psi2`` produces four candidate masks (entry, row, column and block tied)
and ``psi3`` gates them with priority block > column > row > entry.

Tying is an arithmetic mean over the group, so the tying operators are
symmetric and act as their own adjoints in :func:`backward`. They are never
materialized as ``(rows*cols)**2`` matrices.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParameterError, ShapeError
from .tensor_core import as_matrix

__all__ = [
    "HEADS",
    "GroupScheme",
    "LatentLayer",
    "MaskStack",
    "band_stop",
    "band_stop_diag_jacobian",
    "share",
    "gate",
    "gate_partials",
    "compose",
    "backward",
]

#: Head names in gating priority order, lowest first.
HEADS = ("u", "r", "c", "b")


def _labels_from_groups(groups, size, what):
    labels = np.full(size, -1, dtype=np.int64)
    for g, members in enumerate(groups):
        for idx in members:
            if not 0 <= idx < size:
                raise ShapeError(f"{what} index {idx} outside 0..{size - 1}")
            if labels[idx] != -1:
                raise ShapeError(f"{what} index {idx} belongs to two groups")
            labels[idx] = g
    if (labels < 0).any():
        missing = np.flatnonzero(labels < 0).tolist()
        raise ShapeError(f"{what} indices {missing} are not covered by any group")
    return labels


def _relabel(labels):
    # dense 0..G-1 ids in order of first appearance
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv].astype(np.int64)


@dataclass(frozen=True, eq=False)
class GroupScheme:
    """Row/column partitions of a tensor and the heads allowed to gate it.

    Blocks are the grid product of row groups and column groups. Row and
    column tying span the full tensor row/column (``tie_span="full"``) or
    only the part of it inside the current block (``tie_span="block"``).

    `heads` restricts gating to a subset of ``("u", "r", "c", "b")``:
    ``("b",)`` gives purely structured pruning, ``("u",)`` purely
    unstructured pruning.
    """

    row_labels: np.ndarray
    col_labels: np.ndarray
    heads: tuple = HEADS
    tie_span: str = "full"

    def __post_init__(self):
        rl = _relabel(np.asarray(self.row_labels, dtype=np.int64).ravel())
        cl = _relabel(np.asarray(self.col_labels, dtype=np.int64).ravel())
        if rl.size == 0 or cl.size == 0:
            raise ShapeError("group scheme needs at least one row and one column")
        heads = tuple(h for h in HEADS if h in set(self.heads))
        if not heads or len(heads) != len(set(self.heads)):
            raise ParameterError(f"heads must be a non-empty subset of {HEADS}, got {self.heads!r}")
        if self.tie_span not in ("full", "block"):
            raise ParameterError(f"tie_span must be 'full' or 'block', got {self.tie_span!r}")
        object.__setattr__(self, "row_labels", rl)
        object.__setattr__(self, "col_labels", cl)
        object.__setattr__(self, "heads", heads)

    @classmethod
    def from_groups(cls, row_groups, col_groups, n_rows, n_cols, **kwargs):
        """Build a scheme from explicit lists of member indices."""
        return cls(
            _labels_from_groups(row_groups, n_rows, "row"),
            _labels_from_groups(col_groups, n_cols, "column"),
            **kwargs,
        )

    @classmethod
    def contiguous(cls, shape, row_size=None, col_size=None, **kwargs):
        """Equal contiguous groups of `row_size` rows and `col_size` columns.

        ``None`` means a single group spanning the whole axis.
        """
        n_rows, n_cols = shape
        row_size = n_rows if row_size is None else row_size
        col_size = n_cols if col_size is None else col_size
        if row_size < 1 or col_size < 1:
            raise ParameterError("group sizes must be positive")
        return cls(np.arange(n_rows) // row_size, np.arange(n_cols) // col_size, **kwargs)

    @property
    def shape(self):
        return (self.row_labels.size, self.col_labels.size)

    @property
    def n_row_groups(self):
        return int(self.row_labels.max()) + 1

    @property
    def n_col_groups(self):
        return int(self.col_labels.max()) + 1

    def block_of(self, i, j):
        return int(self.row_labels[i]) * self.n_col_groups + int(self.col_labels[j])

    def block_ids(self):
        """Matrix of block ids, same shape as the tensor."""
        return self.row_labels[:, None] * self.n_col_groups + self.col_labels[None, :]

    def with_heads(self, heads):
        return GroupScheme(self.row_labels, self.col_labels, heads=heads, tie_span=self.tie_span)

    def check(self, shape):
        if tuple(shape) != self.shape:
            raise ShapeError(f"group scheme is {self.shape[0]}x{self.shape[1]} but tensor is {shape[0]}x{shape[1]}")

    # tying labels per head: (row labels, col labels) defining the mean groups
    def _tie_labels(self, head):
        n_rows, n_cols = self.shape
        rows, cols = np.arange(n_rows), np.arange(n_cols)
        if head == "r":
            return rows, (self.col_labels if self.tie_span == "block" else np.zeros(n_cols, np.int64))
        if head == "c":
            return (self.row_labels if self.tie_span == "block" else np.zeros(n_rows, np.int64)), cols
        if head == "b":
            return self.row_labels, self.col_labels
        raise ValueError(head)


def _group_mean(x, row_labels, col_labels):
    """Replace every entry by the mean of its (row group x column group) cell.

    The operator is symmetric, so it is also its own adjoint.
    """
    n_rg = int(row_labels.max()) + 1
    n_cg = int(col_labels.max()) + 1
    if n_rg == x.shape[0] and n_cg == 1:
        return np.broadcast_to(x.mean(axis=1, keepdims=True), x.shape).copy()
    if n_cg == x.shape[1] and n_rg == 1:
        return np.broadcast_to(x.mean(axis=0, keepdims=True), x.shape).copy()
    r1 = np.zeros((n_rg, x.shape[0]))
    r1[row_labels, np.arange(x.shape[0])] = 1.0
    c1 = np.zeros((x.shape[1], n_cg))
    c1[np.arange(x.shape[1]), col_labels] = 1.0
    sums = r1 @ x @ c1
    counts = np.outer(r1.sum(axis=1), c1.sum(axis=0))
    means = sums / counts
    return means[row_labels][:, col_labels]


@dataclass
class LatentLayer:
    """A prunable tensor: latent values, grouping and band-stop crispness.

    `sigma` is owned by the training schedule; nothing in this module
    changes it. When `frozen_mask` is set the layer has been finalized and
    its effective weights are ``latent * frozen_mask``.
    """

    latent: np.ndarray
    scheme: GroupScheme
    sigma: float = 1.0
    name: str = "layer"
    frozen_mask: np.ndarray = None

    def __post_init__(self):
        self.latent = as_matrix(self.latent, self.name)
        self.scheme.check(self.latent.shape)
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")


@dataclass
class MaskStack:
    """Forward intermediates of one layer, consumed by :func:`backward`."""

    psi1: np.ndarray
    psi2_u: np.ndarray
    psi2_r: np.ndarray
    psi2_c: np.ndarray
    psi2_b: np.ndarray
    psi3: np.ndarray
    heads: tuple = field(default=HEADS)

    def head(self, name):
        return getattr(self, "psi2_" + name)


def band_stop(latent, sigma):
    """Entry-wise band-stop mask ``2 / (1 + exp(-sigma w**2)) - 1``.

    Computed as the identical ``tanh(sigma w**2 / 2)``, which does not
    overflow for large arguments. Values lie in ``[0, 1)`` mathematically;
    in float64 they round to exactly 1 once ``sigma w**2`` exceeds ~38.
    """
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    w = np.asarray(latent, dtype=np.float64)
    return np.tanh(0.5 * sigma * w * w)


def band_stop_diag_jacobian(latent, sigma):
    """Entry-wise derivative of :func:`band_stop` with respect to the latent."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    w = np.asarray(latent, dtype=np.float64)
    t = np.tanh(0.5 * sigma * w * w)
    return (1.0 - t * t) * sigma * w


def share(psi1, scheme):
    """The four weight-sharing heads of a band-stop mask.

    Returns a dict with keys ``"u"`` (identity), ``"r"`` (row mean),
    ``"c"`` (column mean) and ``"b"`` (block mean).
    """
    psi1 = as_matrix(psi1, "psi1")
    scheme.check(psi1.shape)
    heads = {"u": psi1.copy()}
    for h in ("r", "c", "b"):
        heads[h] = _group_mean(psi1, *scheme._tie_labels(h))
    return heads


def _check_heads(heads):
    shape = None
    for h in HEADS:
        if h not in heads:
            raise ShapeError(f"missing head {h!r}")
        v = np.asarray(heads[h], dtype=np.float64)
        if shape is None:
            shape = v.shape
        elif v.shape != shape:
            raise ShapeError(f"head {h!r} has shape {v.shape}, expected {shape}")
        if (v < 0).any() or (v > 1).any() or not np.isfinite(v).all():
            raise DomainError(f"head {h!r} has entries outside [0, 1]")


def gate(heads, enabled=HEADS):
    """Priority gate over the sharing heads.

    ``b + (1-b) c + (1-b)(1-c) r + (1-b)(1-c)(1-r) u``, restricted to the
    `enabled` heads (a disabled head contributes as if it were 0).
    """
    _check_heads(heads)
    out = np.zeros_like(np.asarray(heads["u"], dtype=np.float64))
    carry = np.ones_like(out)
    for h in reversed(HEADS):
        if h not in enabled:
            continue
        v = np.asarray(heads[h], dtype=np.float64)
        out = out + carry * v
        carry = carry * (1.0 - v)
    return out


def gate_partials(heads, enabled=HEADS):
    """Diagonal of d psi3 / d psi2^x for each head x.

    For an enabled head this is the product of the complements of the
    other enabled heads; disabled heads get zeros.
    """
    comp = {h: 1.0 - np.asarray(heads[h], dtype=np.float64) for h in HEADS}
    out = {}
    for h in HEADS:
        if h not in enabled:
            out[h] = np.zeros_like(comp[h])
            continue
        p = np.ones_like(comp[h])
        for other in enabled:
            if other != h:
                p = p * comp[other]
        out[h] = p
    return out


def compose(layer):
    """Effective weights of a layer and the cached mask intermediates."""
    psi1 = band_stop(layer.latent, layer.sigma)
    heads = share(psi1, layer.scheme)
    psi3 = gate(heads, layer.scheme.heads)
    stack = MaskStack(psi1, heads["u"], heads["r"], heads["c"], heads["b"], psi3, layer.scheme.heads)
    return layer.latent * psi3, stack


def backward(layer, stack, grad_weights, grad_mask=None):
    """Gradient of the loss with respect to the latent tensor.

    Parameters
    ----------
    layer : LatentLayer
    stack : MaskStack
        Output of :func:`compose` for `layer`.
    grad_weights : ndarray
        dL/dW for the effective weights ``W = latent * psi3``.
    grad_mask : ndarray, optional
        Extra gradient arriving directly at ``psi3`` (budget and rank
        terms of the objective).

    Returns
    -------
    ndarray
        dL/d latent. This is ``grad_weights * psi3`` (product rule term)
        plus the chain through gate, sharing and band-stop of
        ``grad_weights * latent + grad_mask``.
    """
    g = as_matrix(grad_weights, "grad_weights")
    if g.shape != layer.latent.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match latent shape {layer.latent.shape}")
    g_psi3 = g * layer.latent
    if grad_mask is not None:
        grad_mask = np.asarray(grad_mask, dtype=np.float64)
        if grad_mask.shape != g.shape:
            raise ShapeError(f"mask gradient shape {grad_mask.shape} does not match {g.shape}")
        g_psi3 = g_psi3 + grad_mask
    heads = {h: stack.head(h) for h in HEADS}
    partials = gate_partials(heads, stack.heads)
    g_psi1 = np.zeros_like(g)
    for h in stack.heads:
        g_head = g_psi3 * partials[h]
        if h == "u":
            g_psi1 += g_head
        else:
            g_psi1 += _group_mean(g_head, *layer.scheme._tie_labels(h))
    return g * stack.psi3 + g_psi1 * band_stop_diag_jacobian(layer.latent, layer.sigma)
