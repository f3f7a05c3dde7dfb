"""Structure analysis, compaction and timing of pruned GCNs.

A pruned tensor is executed as a dense *core* (the rows and columns that
carry most survivors, packed contiguously) plus a coordinate-list
*remainder* holding the stragglers outside the core. The split minimizes

    core_rows * core_cols + straggler_cost * remainder_size

where `straggler_cost` is the price of one sparse multiply-add relative to
a dense one.
"""

import hashlib
import json
import statistics
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from threadpoolctl import threadpool_limits

from . import gcn
from .errors import DomainError, ParameterError, StructureError

__all__ = [
    "MaskStructure",
    "analyze",
    "TensorPlan",
    "plan_tensor",
    "GcnPlan",
    "propagate_liveness",
    "plan_compaction",
    "compact_forward",
    "BenchResult",
    "bench",
    "export_mask_image",
    "read_pgm",
]

DEFAULT_STRAGGLER_COST = 4.0


def _binary(mask):
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise DomainError(f"mask must be 2-D, got shape {m.shape}")
    if not np.isin(m, (0.0, 1.0)).all():
        raise DomainError("mask must be binary (entries 0 or 1)")
    return m.astype(bool)


@dataclass
class MaskStructure:
    zero_rows: int
    zero_cols: int
    zero_blocks: int
    live_blocks: int
    full_blocks: int
    survivors: int
    structured_survivors: int
    unstructured_survivors: int


def analyze(mask, scheme=None):
    """Count empty lines and blocks of a binary mask.

    Survivors lying in a fully kept row, column or block are counted as
    structured; the others as unstructured (entry-wise). Without a
    `scheme` the whole tensor is a single block.
    """
    m = _binary(mask)
    if scheme is not None:
        scheme.check(m.shape)
        blocks = scheme.block_ids()
    else:
        blocks = np.zeros(m.shape, dtype=np.int64)
    n_blocks = int(blocks.max()) + 1
    block_size = np.bincount(blocks.ravel(), minlength=n_blocks)
    block_live = np.bincount(blocks.ravel(), weights=m.ravel().astype(float), minlength=n_blocks)
    full_rows = m.all(axis=1)
    full_cols = m.all(axis=0)
    full_block = block_live == block_size
    structured = m & (full_rows[:, None] | full_cols[None, :] | full_block[blocks])
    survivors = int(m.sum())
    return MaskStructure(
        zero_rows=int((~m.any(axis=1)).sum()),
        zero_cols=int((~m.any(axis=0)).sum()),
        zero_blocks=int((block_live == 0).sum()),
        live_blocks=int((block_live > 0).sum()),
        full_blocks=int(full_block.sum()),
        survivors=survivors,
        structured_survivors=int(structured.sum()),
        unstructured_survivors=survivors - int(structured.sum()),
    )


@dataclass
class TensorPlan:
    """Packing of one pruned tensor into a dense core and a remainder.

    `row_perm` lists core rows, then rows that only carry stragglers, then
    dead rows (likewise `col_perm`). The remainder is given as coordinate
    arrays in the original index space.
    """

    shape: tuple
    row_perm: np.ndarray
    col_perm: np.ndarray
    core_rows: int
    core_cols: int
    live_rows: int
    live_cols: int
    rem_rows: np.ndarray
    rem_cols: np.ndarray
    rem_values: np.ndarray
    core: np.ndarray = None

    @property
    def core_shape(self):
        return (self.core_rows, self.core_cols)

    @property
    def remainder_size(self):
        return int(self.rem_rows.size)

    def cost(self, straggler_cost=DEFAULT_STRAGGLER_COST):
        """Dense-equivalent multiply-adds per unit of the other operand dimension."""
        return self.core_rows * self.core_cols + straggler_cost * self.remainder_size

    def unpack(self):
        """Rebuild the full weight tensor from the core and remainder."""
        out = np.zeros(self.shape)
        r = self.row_perm[:self.core_rows]
        c = self.col_perm[:self.core_cols]
        if self.core is not None:
            out[np.ix_(r, c)] = self.core
        out[self.rem_rows, self.rem_cols] = self.rem_values
        return out

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "core"}
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        d["shape"] = list(self.shape)
        return d


def _peel(m, straggler_cost):
    """Choose core rows/cols of a boolean mask by greedy line peeling.

    Starting from all live rows and columns, the line with the lowest
    survivor density inside the current core is removed repeatedly until
    the core is empty; the prefix of that sequence with the lowest cost is
    kept.
    """
    rows = m.any(axis=1)
    cols = m.any(axis=0)
    total = int(m.sum())
    mi = m.astype(np.int64)
    row_cnt = (mi * cols[None, :]).sum(axis=1)
    col_cnt = (mi * rows[:, None]).sum(axis=0)
    n_r, n_c = int(rows.sum()), int(cols.sum())
    inside = total
    best_cost = n_r * n_c
    best_k = 0
    removed = []
    r_alive, c_alive = rows.copy(), cols.copy()
    while n_r > 0 and n_c > 0:
        r_idx = np.flatnonzero(r_alive)
        c_idx = np.flatnonzero(c_alive)
        r_dens = row_cnt[r_idx] / n_c
        c_dens = col_cnt[c_idx] / n_r
        ri, ci = int(np.argmin(r_dens)), int(np.argmin(c_dens))
        if r_dens[ri] <= c_dens[ci]:
            i = r_idx[ri]
            r_alive[i] = False
            n_r -= 1
            inside -= row_cnt[i]
            col_cnt -= mi[i]
            removed.append(("r", i))
        else:
            j = c_idx[ci]
            c_alive[j] = False
            n_c -= 1
            inside -= col_cnt[j]
            row_cnt -= mi[:, j]
            removed.append(("c", j))
        cost = n_r * n_c + straggler_cost * (total - inside)
        if cost < best_cost:
            best_cost, best_k = cost, len(removed)
    core_r, core_c = rows.copy(), cols.copy()
    for axis, idx in removed[:best_k]:
        (core_r if axis == "r" else core_c)[idx] = False
    if not core_r.any() or not core_c.any():
        core_r[:] = False
        core_c[:] = False
    return core_r, core_c


def plan_tensor(mask, weights=None, straggler_cost=DEFAULT_STRAGGLER_COST):
    """Split one binary mask into a packed dense core and a remainder.

    Parameters
    ----------
    mask : array_like
        Binary mask.
    weights : array_like, optional
        Effective weights; their surviving values fill the core and the
        remainder. Without weights the mask values (ones) are used.
    straggler_cost : float
        Relative cost of one remainder entry against one core entry.
    """
    m = _binary(mask)
    w = m.astype(np.float64) if weights is None else np.asarray(weights, dtype=np.float64) * m
    core_r, core_c = _peel(m, straggler_cost)
    live_r, live_c = m.any(axis=1), m.any(axis=0)
    rem = m & ~(core_r[:, None] & core_c[None, :])
    rem_r, rem_c = np.nonzero(rem)
    rem_only_r = live_r & ~core_r
    rem_only_c = live_c & ~core_c

    def perm(core, rem_only, live):
        return np.concatenate([np.flatnonzero(core), np.flatnonzero(rem_only), np.flatnonzero(~live & ~core)])

    row_perm = perm(core_r, rem_only_r, live_r)
    col_perm = perm(core_c, rem_only_c, live_c)
    n_cr, n_cc = int(core_r.sum()), int(core_c.sum())
    return TensorPlan(
        shape=m.shape,
        row_perm=row_perm,
        col_perm=col_perm,
        core_rows=n_cr,
        core_cols=n_cc,
        live_rows=int((core_r | rem_only_r).sum()),
        live_cols=int((core_c | rem_only_c).sum()),
        rem_rows=rem_r,
        rem_cols=rem_c,
        rem_values=w[rem_r, rem_c],
        core=w[np.ix_(row_perm[:n_cr], col_perm[:n_cc])],
    )


class _Packed:
    """Right multiplication ``x[..., in_lines] @ W[in_lines, out_lines]``."""

    def __init__(self, plan, transpose=False):
        if transpose:
            rp, cp = plan.col_perm, plan.row_perm
            n_ci, n_co = plan.core_cols, plan.core_rows
            n_li, n_lo = plan.live_cols, plan.live_rows
            core = plan.core.T
            ri, ci = plan.rem_cols, plan.rem_rows
        else:
            rp, cp = plan.row_perm, plan.col_perm
            n_ci, n_co = plan.core_rows, plan.core_cols
            n_li, n_lo = plan.live_rows, plan.live_cols
            core = plan.core
            ri, ci = plan.rem_rows, plan.rem_cols
        self.in_lines = rp[:n_li]
        self.out_lines = cp[:n_lo]
        self.n_core_in, self.n_core_out = n_ci, n_co
        self.core = np.ascontiguousarray(core)
        self.rem_t = None
        if ri.size:
            in_pos = np.empty(plan.shape[1] if transpose else plan.shape[0], dtype=np.int64)
            in_pos[self.in_lines] = np.arange(self.in_lines.size)
            out_pos = np.empty(plan.shape[0] if transpose else plan.shape[1], dtype=np.int64)
            out_pos[self.out_lines] = np.arange(self.out_lines.size)
            self.rem_t = sp.csr_matrix(
                (plan.rem_values, (out_pos[ci], in_pos[ri])), shape=(n_lo, n_li)
            )

    def __call__(self, xg):
        lead = xg.shape[:-1]
        x2 = xg.reshape(int(np.prod(lead)), xg.shape[-1])
        out = np.zeros((x2.shape[0], self.out_lines.size))
        if self.n_core_in and self.n_core_out:
            out[:, :self.n_core_out] = x2[:, :self.n_core_in] @ self.core
        if self.rem_t is not None:
            out += (self.rem_t @ x2.T).T
        return out.reshape(lead + (self.out_lines.size,))


def propagate_liveness(masks, heads, filters):
    """Drop mask entries that cannot influence the logits.

    A conv filter column feeds the attention stage only through heads with
    live attention entries, an attention entry matters only if some filter
    it combines with reaches a live dense row, and a dense row is useless
    when its hidden unit is identically zero. Iterates to a fixed point
    and returns boolean masks.
    """
    att = _binary(masks["attention"]).copy()
    conv = _binary(masks["conv"]).copy()
    dense = _binary(masks["dense"]).copy()
    n = att.shape[0]
    k, c = heads, filters
    if att.shape != (n, n * k) or conv.shape[1] != k * c or dense.shape[0] != n * c:
        raise StructureError(
            f"inconsistent tensor chain: attention {att.shape}, conv {conv.shape}, dense {dense.shape} "
            f"for {k} heads and {c} filters"
        )
    while True:
        before = (att.sum(), conv.sum(), dense.sum())
        conv_live = conv.any(axis=0).reshape(k, c)                  # head x filter
        att_hr = att.reshape(n, k, n).any(axis=2)                    # node i x head
        z_possible = (att_hr.astype(int) @ conv_live.astype(int)) > 0    # i x c
        dense &= z_possible.reshape(n * c, 1)
        z_needed = dense.any(axis=1).reshape(n, c)
        att_need = (z_needed.astype(int) @ conv_live.T.astype(int)) > 0  # i x head
        att &= np.repeat(att_need, n, axis=1)
        att_hr = att.reshape(n, k, n).any(axis=2)
        conv_need = (att_hr.T.astype(int) @ z_needed.astype(int)) > 0    # head x filter
        conv &= conv_need.reshape(1, k * c)
        if (att.sum(), conv.sum(), dense.sum()) == before:
            return {"attention": att, "conv": conv, "dense": dense}


def _mask_digest(masks):
    h = hashlib.sha256()
    for name in gcn.LAYERS:
        h.update(name.encode())
        h.update(np.ascontiguousarray(masks[name], dtype=np.float64).tobytes())
    return h.hexdigest()


def _binary_masks(model):
    out = {}
    for name in gcn.LAYERS:
        layer = model.layers[name]
        if layer.frozen_mask is not None:
            out[name] = layer.frozen_mask
        elif name in model.prunable:
            raise StructureError(f"tensor {name!r} has no binary mask; finalize the model first")
        else:
            out[name] = np.ones_like(layer.latent)
    return out


@dataclass
class GcnPlan:
    """Compacted execution plan for a finalized GCN.

    `tensors` holds the :class:`TensorPlan` of each stacked tensor, built
    on masks cleaned by :func:`propagate_liveness`. `links` records how the
    live output lines of one stage feed the next: live conv columns as
    ``(head, filter)`` pairs, live hidden units as ``(node, filter)``.
    """

    n_nodes: int
    n_features: int
    heads: int
    filters: int
    n_classes: int
    tensors: dict
    links: dict
    digest: str
    straggler_cost: float = DEFAULT_STRAGGLER_COST
    identity: bool = False
    dense_weights: dict = field(default=None, repr=False)

    def __post_init__(self):
        self._build()

    def _build(self):
        n, k, c = self.n_nodes, self.heads, self.filters
        self._conv = _Packed(self.tensors["conv"])
        self._att = _Packed(self.tensors["attention"], transpose=True)
        self._dense = _Packed(self.tensors["dense"])
        conv_out = self._conv.out_lines                # (head, filter) as k*C + c
        att_in = self._att.in_lines                    # (head, node) as k*n + j
        self.nodes = np.unique(att_in % n)
        self.hidden_filters = np.unique(conv_out % c)
        node_pos = np.full(n, -1)
        node_pos[self.nodes] = np.arange(self.nodes.size)
        conv_pos = np.full(k * c, conv_out.size)       # default: zero slot
        conv_pos[conv_out] = np.arange(conv_out.size)
        width = conv_out.size + 1
        a_head, a_node = att_in // n, att_in % n
        cols = conv_pos[a_head[None, :] * c + self.hidden_filters[:, None]]
        rows = node_pos[a_node][None, :]
        self._y_index = rows * width + cols            # (|filters|, |att_in|)
        att_out = self._att.out_lines                  # node i
        i_pos = np.full(n, -1)
        i_pos[att_out] = np.arange(att_out.size)
        f_pos = np.full(c, -1)
        f_pos[self.hidden_filters] = np.arange(self.hidden_filters.size)
        d_in = self._dense.in_lines                    # hidden unit i*C + c
        hi, hc = i_pos[d_in // c], f_pos[d_in % c]
        if ((hi < 0) | (hc < 0)).any():
            raise StructureError("dense rows reference hidden units that the plan never computes")
        self._h_index = hc * att_out.size + hi

    def forward(self, x):
        """Logits for a ``(batch, n, s)`` signal batch."""
        x = np.asarray(x, dtype=np.float64)
        if self.identity:
            w = self.dense_weights
            return gcn.forward_weights(w["attention"], w["conv"], w["dense"], x, self.heads, self.filters)[0]
        b = x.shape[0]
        xg = x[:, self.nodes[:, None], self._conv.in_lines[None, :]]
        p = self._conv(xg)                                           # (b, nodes, conv_out)
        p_ext = np.concatenate([p, np.zeros((b, p.shape[1], 1))], axis=2).reshape(b, -1)
        yt = p_ext[:, self._y_index]                                 # (b, filters, att_in)
        z = self._att(yt)                                            # (b, filters, att_out)
        h = np.maximum(z, 0.0).reshape(b, -1)
        out = self._dense(h[:, self._h_index])
        logits = np.zeros((b, self.n_classes))
        logits[:, self._dense.out_lines] = out
        return logits

    def flops(self):
        """Dense-equivalent flops per sample: (dense model, compact plan).

        A multiply-add counts as two flops; remainder multiply-adds are
        charged `straggler_cost` times a core one.
        """
        n, s, k, c, q = self.n_nodes, self.n_features, self.heads, self.filters, self.n_classes
        dense = 2.0 * (n * s * k * c + n * (n * k) * c + n * c * q)
        a = self.straggler_cost
        t = self.tensors
        compact = 2.0 * (
            self.nodes.size * t["conv"].cost(a)
            + self.hidden_filters.size * t["attention"].cost(a)
            + t["dense"].cost(a)
        )
        return dense, compact

    def to_dict(self):
        return {
            "format_version": 1,
            "arch": [self.n_nodes, self.n_features, self.heads, self.filters, self.n_classes],
            "straggler_cost": self.straggler_cost,
            "identity": self.identity,
            "digest": self.digest,
            "tensors": {k: v.to_dict() for k, v in self.tensors.items()},
            "links": {k: v.tolist() for k, v in self.links.items()},
        }


def plan_compaction(model, straggler_cost=DEFAULT_STRAGGLER_COST):
    """Build the compacted execution plan of a finalized model."""
    masks = _binary_masks(model)
    live = propagate_liveness(masks, model.heads, model.filters)
    weights = {name: model.effective(name)[0] for name in gcn.LAYERS}
    tensors = {name: plan_tensor(live[name].astype(float), weights[name], straggler_cost) for name in gcn.LAYERS}
    identity = all(np.asarray(masks[name]).all() for name in gcn.LAYERS)
    links = {
        "conv_to_attention": np.flatnonzero(live["conv"].any(axis=0)),
        "attention_to_dense": np.flatnonzero(live["dense"].any(axis=1)),
    }
    return GcnPlan(
        model.n_nodes, model.n_features, model.heads, model.filters, model.n_classes,
        tensors, links, _mask_digest(masks), straggler_cost, identity,
        {name: weights[name].copy() for name in gcn.LAYERS},
    )


def compact_forward(plan, model, graph):
    """Logits of the compacted network; `plan` must come from `model`."""
    arch = (model.n_nodes, model.n_features, model.heads, model.filters, model.n_classes)
    if arch != (plan.n_nodes, plan.n_features, plan.heads, plan.filters, plan.n_classes):
        raise StructureError(f"plan was built for architecture {plan.n_nodes, plan.n_features, plan.heads, plan.filters, plan.n_classes}, model is {arch}")
    if _mask_digest(_binary_masks(model)) != plan.digest:
        raise StructureError("plan masks do not match the model masks")
    return plan.forward(gcn._as_signals(graph))


@dataclass
class BenchResult:
    dense_time: float
    compact_time: float
    speedup: float
    flops_dense: float
    flops_compact: float
    repeats: int
    inner: int
    batch: int
    noise: float

    def to_json(self):
        return json.dumps({
            "dense_ms": 1e3 * self.dense_time,
            "compact_ms": 1e3 * self.compact_time,
            "speedup": self.speedup,
            "flops_dense": self.flops_dense,
            "flops_compact": self.flops_compact,
        })


def _time(fn, repeats, inner):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        times.append((time.perf_counter() - t0) / inner)
    return times


def _spread(times):
    q = statistics.quantiles(times, n=4)
    return (q[2] - q[0]) / statistics.median(times)


def bench(plan, model, graph, repeats=20, warmup=3):
    """Median wall time of the masked dense forward against the compact one.

    Runs single-threaded. `noise` in the result is the summed relative
    inter-quartile range of both timings, a band within which a speedup of
    1 is indistinguishable.
    """
    if repeats < 5:
        raise ParameterError("bench needs at least 5 repeats")
    x = gcn._as_signals(graph)
    compact_forward(plan, model, x)
    w = {name: model.effective(name)[0] for name in gcn.LAYERS}

    def dense():
        return gcn.forward_weights(w["attention"], w["conv"], w["dense"], x, model.heads, model.filters)

    def compact():
        return plan.forward(x)

    resolution = time.get_clock_info("perf_counter").resolution
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            dense()
            compact()
        inner = 1
        while min(_time(compact, 3, inner)) < 10 * resolution:
            warnings.warn("compact forward is close to the timer resolution; increasing inner iterations")
            inner *= 10
        d_times = _time(dense, repeats, inner)
        c_times = _time(compact, repeats, inner)
    d_med, c_med = statistics.median(d_times), statistics.median(c_times)
    f_dense, f_compact = plan.flops()
    b = x.shape[0]
    return BenchResult(
        dense_time=d_med, compact_time=c_med, speedup=d_med / c_med,
        flops_dense=b * f_dense, flops_compact=b * f_compact,
        repeats=repeats, inner=inner, batch=b, noise=_spread(d_times) + _spread(c_times),
    )


def export_mask_image(mask, path, scheme=None):
    """Write a mask as an ASCII PGM (P2) image.

    One pixel per entry, 0 black (pruned) to 255 white (kept). With a
    `scheme`, one-pixel mid-gray separators are inserted between blocks.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2 or (m < 0).any() or (m > 1).any():
        raise DomainError("mask entries must lie in [0, 1]")
    img = np.rint(255 * m).astype(np.int64)
    if scheme is not None:
        scheme.check(m.shape)
        row_cuts = np.flatnonzero(np.diff(scheme.row_labels)) + 1
        col_cuts = np.flatnonzero(np.diff(scheme.col_labels)) + 1
        img = np.insert(img, row_cuts, 128, axis=0)
        img = np.insert(img, col_cuts, 128, axis=1)
    lines = ["P2", f"{img.shape[1]} {img.shape[0]}", "255"]
    lines += [" ".join(map(str, row)) for row in img]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_pgm(path):
    """Parse an ASCII PGM written by :func:`export_mask_image`."""
    with open(path) as fh:
        tokens = [t for line in fh for t in line.split("#")[0].split()]
    if tokens[0] != "P2":
        raise DomainError("not a P2 PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4:4 + w * h], dtype=np.int64)
    if data.size != w * h or maxval != 255:
        raise DomainError("truncated or unsupported PGM")
    return data.reshape(h, w)
