"""Budget-aware training of the latent tensors and mask finalization."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gcn
from .errors import ParameterError, ShapeError, TrainingError
from .objectives import AnnealSchedule, LossWeights, cross_entropy, rate_to_cost, surrogate_rank, total_loss

log = logging.getLogger(__name__)

__all__ = [
    "Adam",
    "LrState",
    "lr_update",
    "AnnealSpec",
    "TrainConfig",
    "TrainState",
    "Dataset",
    "train",
    "finalize_masks",
    "TensorStats",
    "PruneReport",
    "prune_report",
]


class Adam:
    """Adam with bias correction over a dict of named arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr):
        """Update `params` in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {k!r} has shape {g.shape}, parameter has {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    @classmethod
    def from_state(cls, state):
        opt = cls(state["beta1"], state["beta2"], state["eps"])
        opt.t = int(state["t"])
        opt.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        opt.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}
        return opt


@dataclass
class LrState:
    lr: float
    prev_loss: float = math.nan
    prev_speed: float = 0.0


def lr_update(state, new_loss, factor=0.99):
    """Adapt the learning rate to the speed of change of the loss.

    The speed is the absolute change of the loss since the previous call.
    When it exceeds the previous speed the rate is multiplied by `factor`,
    otherwise (ties included) divided by it. A state without a previous
    loss only records `new_loss`.
    """
    if math.isnan(state.prev_loss):
        return LrState(state.lr, new_loss, state.prev_speed)
    speed = abs(new_loss - state.prev_loss)
    lr = state.lr * factor if speed > state.prev_speed else state.lr / factor
    return LrState(lr, new_loss, speed)


@dataclass
class AnnealSpec:
    """Schedule endpoints; the length is a fraction of all optimizer steps."""

    start: float
    end: float
    shape: str = "exponential"
    fraction: float = 0.8

    def build(self, total_steps):
        return AnnealSchedule(self.start, self.end, max(1, round(self.fraction * total_steps)), self.shape)


@dataclass
class TrainConfig:
    """Hyper-parameters of one training run.

    `target_rate` is the fraction of prunable weights to remove; it is
    converted to the surviving-weight count of the budget loss. ``None``
    disables the budget (the lambda weight is then ignored).

    With ``budget_scale="fraction"`` the budget gap is measured as a
    fraction of all prunable entries, i.e. lambda is divided by the squared
    entry count. With ``"count"`` the gap is a raw number of entries.

    With ``budget_target="binary"`` the surviving-weight target is shifted
    after every epoch by the difference between the soft mask mass and the
    number of entries at or above `threshold`, so that the thresholded
    count (not the soft mass) settles on the target. ``"soft"`` keeps the
    target fixed.
    """

    epochs: int = 2700
    batch_size: int = 200
    lr_init: float = 0.01
    lr_factor: float = 0.99
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_: float = 1000.0
    beta: float = 0.1
    target_rate: float = 0.9
    sigma: AnnealSpec = field(default_factory=lambda: AnnealSpec(1.0, 100.0))
    gamma: AnnealSpec = field(default_factory=lambda: AnnealSpec(0.1, 10.0))
    threshold: float = 0.5
    budget_scale: str = "fraction"
    budget_target: str = "binary"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.sigma, dict):
            self.sigma = AnnealSpec(**self.sigma)
        if isinstance(self.gamma, dict):
            self.gamma = AnnealSpec(**self.gamma)
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be positive")
        if not self.lr_init > 0:
            raise ParameterError("lr_init must be positive")
        if not 0 < self.threshold < 1:
            raise ParameterError("threshold must lie in (0, 1)")
        if self.budget_scale not in ("fraction", "count"):
            raise ParameterError(f"budget_scale must be 'fraction' or 'count', got {self.budget_scale!r}")
        if self.budget_target not in ("binary", "soft"):
            raise ParameterError(f"budget_target must be 'binary' or 'soft', got {self.budget_target!r}")
        if self.target_rate is not None and not 0 <= self.target_rate < 1:
            raise ParameterError("target_rate must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    """Transposed graph signals ``(N, n, s)`` and integer labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3 or self.x.shape[0] != self.y.shape[0]:
            raise ShapeError("dataset signals must be (N, n, s) with one label per sample")

    def __len__(self):
        return self.y.shape[0]

    @classmethod
    def from_graphs(cls, graphs):
        return cls(np.stack([g.signal.T for g in graphs]), np.array([g.label for g in graphs]))


@dataclass
class TrainState:
    """Everything needed to resume training bit-exactly."""

    epoch: int
    step: int
    optimizer: Adam
    lr: LrState
    rng: np.random.Generator
    history: list
    budget_offset: float = 0.0


def _budget_target(model, config):
    total = sum(model.layers[n].latent.size for n in model.prunable)
    if config.target_rate is None:
        return LossWeights(0.0, config.beta, 0.0)
    lam = config.lambda_ / total**2 if config.budget_scale == "fraction" else config.lambda_
    return LossWeights(lam, config.beta, rate_to_cost(config.target_rate, total))


def new_state(config):
    return TrainState(
        epoch=0, step=0,
        optimizer=Adam(config.adam_beta1, config.adam_beta2, config.adam_eps),
        lr=LrState(config.lr_init),
        rng=np.random.default_rng(config.seed),
        history=[],
    )


def train(model, data, config, state=None, test=None, stop_after=None, on_epoch=None):
    """Train `model` in place under the budget-aware objective.

    Parameters
    ----------
    model : GcnModel
    data : Dataset
        Training set; mini-batches are drawn from a permutation per epoch.
    config : TrainConfig
    state : TrainState, optional
        Resume from this state instead of starting fresh.
    test : Dataset, optional
        Evaluated after each epoch and logged as ``test_accuracy``.
    stop_after : int, optional
        Stop once this many epochs are complete (for checkpointing).
    on_epoch : callable, optional
        Called with each history record.

    Returns
    -------
    TrainState
        Final optimizer/lr/rng state; ``state.history`` has one record per
        epoch with the loss components, learning rate, mask mass and
        training accuracy measured after the epoch.
    """
    if len(data) == 0:
        raise ShapeError("training set is empty")
    if data.x.shape[1:] != (model.n_nodes, model.n_features):
        raise ShapeError(f"data signals are {data.x.shape[1:]}, model expects ({model.n_nodes}, {model.n_features})")
    state = state or new_state(config)
    weights = _budget_target(model, config)
    base_cost = weights.target_cost
    n = len(data)
    bs = min(config.batch_size, n)
    n_batches = math.ceil(n / bs)
    total_steps = config.epochs * n_batches
    sigma_sched = config.sigma.build(total_steps)
    gamma_sched = config.gamma.build(total_steps)
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    params = {name: model.layers[name].latent for name in gcn.LAYERS}

    while state.epoch < last:
        order = state.rng.permutation(n)
        if config.target_rate is not None and config.budget_target == "binary":
            weights.target_cost = max(0.0, base_cost + state.budget_offset)
        sums = {"loss": 0.0, "ce": 0.0, "budget": 0.0, "rank": 0.0}
        for bi in range(n_batches):
            idx = order[bi * bs:(bi + 1) * bs]
            sigma = sigma_sched.value(state.step)
            gamma = gamma_sched.value(state.step)
            model.set_sigma(sigma)
            model.touch()
            logits, cache = gcn.gcn_forward(model, data.x[idx])
            ce, d_logits = cross_entropy(logits, data.y[idx])
            masks = [cache.stacks[name].psi3 for name in model.prunable if cache.stacks[name] is not None]
            names = [name for name in model.prunable if cache.stacks[name] is not None]
            loss, m_grads, parts = total_loss(ce, masks, weights, gamma)
            if not math.isfinite(loss):
                raise TrainingError("objective became non-finite", state.step)
            grads = gcn.gcn_backward(model, cache, d_logits, dict(zip(names, m_grads)))
            state.optimizer.step(params, grads, state.lr.lr)
            state.step += 1
            sums["loss"] += loss
            for k in ("ce", "budget", "rank"):
                sums[k] += parts[k]
        state.epoch += 1
        model.touch()
        epoch_loss = sums["loss"] / n_batches
        state.lr = lr_update(state.lr, epoch_loss, config.lr_factor)
        masks_now = model.masks()
        mass = float(sum(m.sum() for m in masks_now.values()))
        kept = int(sum((m >= config.threshold).sum() for m in masks_now.values()))
        if config.budget_target == "binary":
            state.budget_offset = mass - kept
        record = {
            "epoch": state.epoch,
            "loss": epoch_loss,
            "ce": sums["ce"] / n_batches,
            "budget": sums["budget"] / n_batches,
            "rank": sums["rank"] / n_batches,
            "lr": state.lr.lr,
            "sigma": sigma_sched.value(state.step),
            "gamma": gamma_sched.value(state.step),
            "mask_mass": mass,
            "kept": kept,
            "target_cost": weights.target_cost,
            "accuracy": gcn.accuracy(model, data.x, data.y),
        }
        if test is not None and len(test):
            record["test_accuracy"] = gcn.accuracy(model, test.x, test.y)
        state.history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if state.epoch % 100 == 0:
            log.info("epoch %d loss %.4g ce %.4g mass %.1f acc %.3f",
                     state.epoch, epoch_loss, record["ce"], record["mask_mass"], record["accuracy"])
    return state


def finalize_masks(model, threshold=0.5):
    """Binarize the gated masks and return them with a frozen copy of the model.

    Mask entries at or above `threshold` are kept. The returned model
    computes its weights as ``latent * binary_mask``.
    """
    if not 0 < threshold < 1:
        raise ParameterError("threshold must lie in (0, 1)")
    frozen = model.copy()
    binary = {}
    for name, soft in model.masks().items():
        binary[name] = (soft >= threshold).astype(np.float64)
        frozen.layers[name].frozen_mask = binary[name]
    return binary, frozen


@dataclass
class TensorStats:
    rows: int
    cols: int
    total: int
    surviving: int
    zero_rows: int
    zero_cols: int
    zero_blocks: int
    surrogate_rank: float
    effective_lines: int = None

    @property
    def live_lines(self):
        """Non-empty rows plus non-empty columns."""
        return self.rows - self.zero_rows + self.cols - self.zero_cols


@dataclass
class PruneReport:
    """Per-tensor structure and global results of a pruned model."""

    tensors: dict
    target_rate: float = None
    soft_mass: float = None
    accuracy_soft: float = None
    accuracy_hard: float = None
    speedup: float = None
    flops_ratio: float = None
    setting: str = ""

    @property
    def total(self):
        return sum(t.total for t in self.tensors.values())

    @property
    def surviving(self):
        return sum(t.surviving for t in self.tensors.values())

    @property
    def achieved_rate(self):
        return 1.0 - self.surviving / self.total

    def to_dict(self):
        out = {
            "tensors": {k: asdict(v) for k, v in self.tensors.items()},
            "achieved_rate": self.achieved_rate,
        }
        for k in ("target_rate", "soft_mass", "accuracy_soft", "accuracy_hard", "speedup", "flops_ratio", "setting"):
            out[k] = getattr(self, k)
        return out


def prune_report(model, binary_masks, gamma=10.0, **fields):
    """Structure statistics of binary masks, one entry per prunable tensor.

    ``effective_lines`` counts the non-empty rows and columns left after
    entries that cannot reach the logits are dropped (a conv filter of a
    head whose attention block is empty, a dense row of a hidden unit that
    is always zero, and so on); this is the structure the compacted network
    keeps.
    """
    from .compaction import analyze, propagate_liveness

    full = {name: binary_masks.get(name, np.ones_like(model.layers[name].latent)) for name in gcn.LAYERS}
    live = propagate_liveness(full, model.heads, model.filters)
    tensors = {}
    for name, mask in binary_masks.items():
        st = analyze(mask, model.layers[name].scheme)
        tensors[name] = TensorStats(
            rows=mask.shape[0],
            cols=mask.shape[1],
            total=int(mask.size),
            surviving=st.survivors,
            zero_rows=st.zero_rows,
            zero_cols=st.zero_cols,
            zero_blocks=st.zero_blocks,
            surrogate_rank=surrogate_rank(mask, gamma)[0],
            effective_lines=int(live[name].any(axis=1).sum() + live[name].any(axis=0).sum()),
        )
    return PruneReport(tensors, **fields)
