"""Skeleton sequence files, dataset manifests, configs and checkpoints.

Sequence files are CSV with the header ``frame,joint,x,y,z`` (zero-based
indices, LF line endings, ``.`` decimal separator, no quoting). Manifests,
configs and checkpoints are JSON.
"""

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gcn
from .errors import DataError, ParameterError
from .mask_param import GroupScheme, LatentLayer
from .trainer import Adam, AnnealSpec, Dataset, LrState, TrainConfig, TrainState

__all__ = [
    "load_sequence",
    "save_sequence",
    "format_sequence",
    "DatasetManifest",
    "load_manifest",
    "synth_sequences",
    "synth_dataset",
    "build_datasets",
    "ArchConfig",
    "RunConfig",
    "load_config",
    "save_checkpoint",
    "load_checkpoint",
    "write_history",
    "build_model",
    "SAMPLE_SEQUENCE",
    "DESK_CONFIG",
]

HEADER = ["frame", "joint", "x", "y", "z"]
SAMPLE_SEQUENCE = Path(__file__).with_name("data") / "sample_sequence.csv"
DESK_CONFIG = Path(__file__).with_name("data") / "desk_config.json"
CHECKPOINT_VERSION = 1


def load_sequence(path, n_joints=None, label=0):
    """Read a CSV sequence file into a :class:`~semiprune.gcn.SkeletonSequence`.

    Frames are sorted by index. Every frame must list the same joints
    ``0..n-1``; `n_joints`, when given, must match.
    """
    path = Path(path)
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise DataError(f"{path}:1: expected header {','.join(HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                frame, joint = int(row[0]), int(row[1])
                xyz = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed row ({exc})") from None
            if not all(math.isfinite(v) for v in xyz):
                raise DataError(f"{path}:{lineno}: non-finite coordinate")
            if frame < 0 or joint < 0:
                raise DataError(f"{path}:{lineno}: negative index")
            if (frame, joint) in rows:
                raise DataError(f"{path}:{lineno}: duplicate frame {frame} joint {joint}")
            rows[(frame, joint)] = (xyz, lineno)
    if not rows:
        raise DataError(f"{path}: sequence has no frames")
    frames = sorted({f for f, _ in rows})
    n = max(j for _, j in rows) + 1 if n_joints is None else n_joints
    out = np.empty((len(frames), n, 3))
    for fi, f in enumerate(frames):
        for j in range(n):
            if (f, j) not in rows:
                raise DataError(f"{path}: frame {f} is missing joint {j}")
            out[fi, j] = rows[(f, j)][0]
    extra = [(f, j) for f, j in rows if j >= n]
    if extra:
        f, j = extra[0]
        raise DataError(f"{path}:{rows[(f, j)][1]}: joint {j} outside 0..{n - 1}")
    return gcn.SkeletonSequence(out, label)


def format_sequence(seq):
    """CSV text of a sequence, floats in shortest round-trip form."""
    frames = seq.frames if isinstance(seq, gcn.SkeletonSequence) else np.asarray(seq)
    buf = io.StringIO()
    buf.write(",".join(HEADER) + "\n")
    for f in range(frames.shape[0]):
        for j in range(frames.shape[1]):
            x, y, z = (repr(float(v)) for v in frames[f, j])
            buf.write(f"{f},{j},{x},{y},{z}\n")
    return buf.getvalue()


def save_sequence(seq, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(format_sequence(seq))
    return Path(path)


@dataclass
class DatasetManifest:
    name: str
    n_joints: int
    bones: list
    classes: list
    entries: list = field(default_factory=list)
    root: Path = None

    def to_dict(self):
        return {
            "name": self.name,
            "n_joints": self.n_joints,
            "bones": [list(b) for b in self.bones],
            "classes": list(self.classes),
            "entries": self.entries,
        }

    def save(self, path):
        with open(path, "w", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    def adjacency(self):
        return gcn.skeleton_adjacency(self.n_joints, self.bones)

    def sequences(self, split):
        """Yield ``SkeletonSequence`` objects of one split, labels as class indices."""
        for e in self.entries:
            if e["split"] != split:
                continue
            path = Path(e["path"])
            if not path.is_absolute() and self.root is not None:
                path = self.root / path
            yield load_sequence(path, self.n_joints, self.classes.index(e["label"]))


def load_manifest(path):
    """Read and validate a dataset manifest (a JSON file or a directory holding ``manifest.json``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from None
    for key in ("name", "n_joints", "bones", "classes", "entries"):
        if key not in d:
            raise DataError(f"{path}: manifest lacks {key!r}")
    m = DatasetManifest(d["name"], int(d["n_joints"]), [tuple(b) for b in d["bones"]], list(d["classes"]),
                        list(d["entries"]), path.parent)
    gcn.skeleton_adjacency(m.n_joints, m.bones)
    for e in m.entries:
        if e.get("label") not in m.classes:
            raise DataError(f"{path}: entry {e.get('path')} has unknown label {e.get('label')!r}")
        if e.get("split") not in ("train", "test"):
            raise DataError(f"{path}: entry {e.get('path')} has split {e.get('split')!r}")
        p = Path(e["path"])
        if not (p if p.is_absolute() else m.root / p).exists():
            raise DataError(f"{path}: sequence file {e['path']} does not exist")
    return m


def _chain_bones(n):
    return [(j, j + 1) for j in range(n - 1)]


def synth_sequences(classes=8, joints=15, frames=32, samples_per_class=20, noise=0.05, seed=0, bones=None):
    """Synthetic skeleton sequences with one motion template per class.

    Every joint oscillates around a rest pose shared by all classes; the
    frequency and phase of the oscillation (per joint and axis) depend on
    the class. Gaussian noise of scale `noise` is added per coordinate and
    frame. Half of each class goes to the train split.

    Returns
    -------
    list of (SkeletonSequence, split)
    """
    if classes < 2 or joints < 2:
        raise ParameterError("need at least 2 classes and 2 joints")
    rng = np.random.default_rng(seed)
    rest = rng.uniform(-1.0, 1.0, size=(joints, 3))
    freq = rng.integers(1, 4, size=(classes, joints, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(classes, joints, 3))
    amp = 0.3
    t = np.arange(frames)[:, None, None] / frames
    out = []
    n_train = samples_per_class - samples_per_class // 2
    for k in range(classes):
        template = rest[None] + amp * np.sin(2 * np.pi * freq[k][None] * t + phase[k][None])
        for i in range(samples_per_class):
            x = template + noise * rng.standard_normal(template.shape)
            out.append((gcn.SkeletonSequence(x, k), "train" if i < n_train else "test"))
    return out


def synth_dataset(out_dir, classes=8, joints=15, frames=32, samples_per_class=20, noise=0.05, seed=0):
    """Write a synthetic dataset (CSV files and ``manifest.json``) to `out_dir`."""
    out_dir = Path(out_dir)
    (out_dir / "sequences").mkdir(parents=True, exist_ok=True)
    bones = list(gcn.SBU_BONES) if joints == 15 else list(gcn.FPHA_BONES) if joints == 21 else _chain_bones(joints)
    names = [f"class_{k}" for k in range(classes)]
    manifest = DatasetManifest(f"synthetic-{classes}x{joints}", joints, bones, names, [], out_dir)
    for idx, (seq, split) in enumerate(synth_sequences(classes, joints, frames, samples_per_class, noise, seed)):
        rel = f"sequences/{idx:05d}.csv"
        save_sequence(seq, out_dir / rel)
        manifest.entries.append({"path": rel, "label": names[seq.label], "split": split})
    manifest.save(out_dir / "manifest.json")
    return manifest


def build_datasets(manifest, chunks):
    """Temporal-chunk every sequence; returns ``(train, test)`` datasets."""
    adj = manifest.adjacency()
    out = []
    for split in ("train", "test"):
        graphs = [gcn.temporal_chunking(s, chunks, adj) for s in manifest.sequences(split)]
        if graphs:
            out.append(Dataset.from_graphs(graphs))
        else:
            out.append(Dataset(np.zeros((0, manifest.n_joints, 3 * chunks)), np.zeros(0, dtype=np.int64)))
    return tuple(out)


@dataclass
class ArchConfig:
    heads: int = 8
    filters: int = 16
    chunks: int = 4


@dataclass
class RunConfig:
    """A full run description: architecture, pruning and training settings.

    Serialized as ``{"arch": {...}, "prune": {...}, "train": {...}}``.
    """

    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "semi"
    tie_span: str = "full"
    init_scale: float = 1.0

    def to_dict(self):
        t = self.train
        return {
            "arch": {"heads": self.arch.heads, "filters": self.arch.filters, "chunks": self.arch.chunks,
                     "init_scale": self.init_scale},
            "prune": {
                "target_rate": t.target_rate,
                "lambda": t.lambda_,
                "beta": t.beta,
                "sigma": vars(t.sigma).copy(),
                "gamma": vars(t.gamma).copy(),
                "threshold": t.threshold,
                "mode": self.mode,
                "tie_span": self.tie_span,
                "budget_scale": t.budget_scale,
                "budget_target": t.budget_target,
            },
            "train": {
                "epochs": t.epochs,
                "batch_size": t.batch_size,
                "lr_init": t.lr_init,
                "lr_factor": t.lr_factor,
                "adam_beta1": t.adam_beta1,
                "adam_beta2": t.adam_beta2,
                "adam_eps": t.adam_eps,
                "seed": t.seed,
            },
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"arch", "prune", "train"}
        if unknown:
            raise ParameterError(f"unknown config sections: {sorted(unknown)}")
        arch = dict(d.get("arch", {}))
        prune = dict(d.get("prune", {}))
        tr = dict(d.get("train", {}))
        init_scale = arch.pop("init_scale", 1.0)
        mode = prune.pop("mode", "semi")
        tie_span = prune.pop("tie_span", "full")
        kw = {}
        rename = {"lambda": "lambda_"}
        for key, value in list(prune.items()) + list(tr.items()):
            kw[rename.get(key, key)] = value
        for key in ("sigma", "gamma"):
            if key in kw:
                kw[key] = AnnealSpec(**{**vars(getattr(TrainConfig(), key)), **kw[key]})
        try:
            return cls(ArchConfig(**arch), TrainConfig(**kw), mode, tie_span, init_scale)
        except TypeError as exc:
            raise ParameterError(f"bad config: {exc}") from None


def load_config(path):
    try:
        with open(path) as fh:
            return RunConfig.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read config ({exc})") from None


def _scheme_dict(s):
    return {"row_labels": s.row_labels.tolist(), "col_labels": s.col_labels.tolist(),
            "heads": list(s.heads), "tie_span": s.tie_span}


def model_to_dict(model):
    return {
        "arch": [model.n_nodes, model.n_features, model.heads, model.filters, model.n_classes],
        "prunable": list(model.prunable),
        "layers": {
            name: {
                "latent": layer.latent.tolist(),
                "scheme": _scheme_dict(layer.scheme),
                "sigma": layer.sigma,
                "frozen_mask": None if layer.frozen_mask is None else layer.frozen_mask.tolist(),
            }
            for name, layer in model.layers.items()
        },
    }


def model_from_dict(d):
    layers = {}
    for name, ld in d["layers"].items():
        scheme = GroupScheme(np.array(ld["scheme"]["row_labels"]), np.array(ld["scheme"]["col_labels"]),
                             tuple(ld["scheme"]["heads"]), ld["scheme"]["tie_span"])
        fm = ld.get("frozen_mask")
        layers[name] = LatentLayer(np.array(ld["latent"], dtype=np.float64), scheme, ld["sigma"], name,
                                   None if fm is None else np.array(fm, dtype=np.float64))
    n, s, k, c, q = d["arch"]
    return gcn.GcnModel(n, s, k, c, q, layers, tuple(d["prunable"]))


def save_checkpoint(path, model, config, state=None, extra=None):
    """Write model, config and (optionally) optimizer/rng state as one JSON document."""
    doc = {"format_version": CHECKPOINT_VERSION, "config": config.to_dict(), "model": model_to_dict(model)}
    if state is not None:
        doc["state"] = {
            "epoch": state.epoch,
            "step": state.step,
            "optimizer": state.optimizer.state_dict(),
            "lr": vars(state.lr).copy(),
            "rng": state.rng.bit_generator.state,
            "history": state.history,
            "budget_offset": state.budget_offset,
        }
    if extra:
        doc.update(extra)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="\n") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)
    return Path(path)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(model, config, state_or_None, document)``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from None
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {doc.get('format_version')!r}")
    model = model_from_dict(doc["model"])
    config = RunConfig.from_dict(doc["config"])
    state = None
    if "state" in doc:
        st = doc["state"]
        rng = np.random.default_rng()
        rng.bit_generator.state = st["rng"]
        state = TrainState(st["epoch"], st["step"], Adam.from_state(st["optimizer"]), LrState(**st["lr"]), rng,
                           list(st["history"]), st.get("budget_offset", 0.0))
    return model, config, state, doc


def write_history(path, history):
    """One JSON object per epoch, one per line."""
    with open(path, "w", newline="\n") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


def build_model(config, adjacency, n_classes):
    """Fresh model for a run config; the init rng is seeded from ``config.train.seed``."""
    n = np.asarray(adjacency).shape[0]
    a = config.arch
    s = 3 * a.chunks
    schemes = gcn.default_schemes(n, s, a.heads, a.filters, n_classes, a.chunks, config.mode, config.tie_span)
    rng = np.random.default_rng([config.train.seed, 1])
    return gcn.init_model(adjacency, s, a.heads, a.filters, n_classes, rng, schemes,
                          sigma=config.train.sigma.start, init_scale=config.init_scale)
