"""``semiprune`` command line.

Every failure prints one line ``semiprune: <kind>: <message>`` to stderr.
Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
"""

import argparse
import json
import logging
import secrets
import sys
from pathlib import Path

import numpy as np

from . import compaction, data, gcn, gradcheck, report, trainer
from .errors import SemiPruneError, StructureError

PROG = "semiprune"


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageExit(message)


def _fail(kind, message):
    print(f"{PROG}: {kind}: {' '.join(str(message).split())}", file=sys.stderr)


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_synth(args):
    m = data.synth_dataset(args.out, args.classes, args.joints, args.frames, args.samples, args.noise, args.seed)
    print(f"wrote {len(m.entries)} sequences to {args.out}")
    return 0


def _datasets(data_dir, cfg):
    manifest = data.load_manifest(data_dir)
    train_set, test_set = data.build_datasets(manifest, cfg.arch.chunks)
    return manifest, train_set, test_set


def _setting(cfg):
    name = {"semi": "Semi-structured", "structured": "Structured", "unstructured": "Unstructured"}[cfg.mode]
    if cfg.train.target_rate is None:
        return "No budget"
    if cfg.train.beta > 0:
        name += " (+ rank optimization)"
    return name


def cmd_train(args):
    cfg = data.load_config(args.config)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    manifest, train_set, test_set = _datasets(args.data, cfg)
    out = _out_dir(args.out)
    if args.resume:
        model, saved_cfg, state, _ = data.load_checkpoint(args.resume)
        if saved_cfg.to_dict() != cfg.to_dict():
            raise StructureError("checkpoint was written with a different config")
    else:
        model = data.build_model(cfg, manifest.adjacency(), len(manifest.classes))
        state = None
    state = trainer.train(model, train_set, cfg.train, state, test_set, stop_after=args.stop_after)
    data.write_history(out / "history.jsonl", state.history)
    data.save_checkpoint(out / "checkpoint.json", model, cfg, state)
    if state.epoch < cfg.train.epochs:
        print(f"stopped after epoch {state.epoch}; resume with --resume {out / 'checkpoint.json'}")
        return 0
    binary, frozen = trainer.finalize_masks(model, cfg.train.threshold)
    acc_soft = gcn.accuracy(model, test_set.x, test_set.y) if len(test_set) else None
    acc_hard = gcn.accuracy(frozen, test_set.x, test_set.y) if len(test_set) else None
    flops_ratio = speedup = None
    if binary:
        plan = compaction.plan_compaction(frozen)
        fd, fc = plan.flops()
        flops_ratio = fc / fd
        if len(test_set):
            speedup = compaction.bench(plan, frozen, test_set.x, repeats=10).speedup
    rep = trainer.prune_report(
        model, binary, target_rate=cfg.train.target_rate, soft_mass=state.history[-1]["mask_mass"],
        accuracy_soft=acc_soft, accuracy_hard=acc_hard, flops_ratio=flops_ratio, speedup=speedup,
        setting=_setting(cfg),
    )
    data.save_checkpoint(out / "pruned.json", frozen, cfg)
    with open(out / "report.json", "w", newline="\n") as fh:
        json.dump(rep.to_dict(), fh, indent=1)
        fh.write("\n")
    table = report.render_table([report.row_from_report(rep)])
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_eval(args):
    model, cfg, _, _ = data.load_checkpoint(args.checkpoint)
    manifest = data.load_manifest(args.data)
    sets = dict(zip(("train", "test"), data.build_datasets(manifest, cfg.arch.chunks)))
    ds = sets[args.split]
    if len(ds) == 0:
        raise StructureError(f"split {args.split!r} is empty")
    print(json.dumps({"split": args.split, "accuracy": gcn.accuracy(model, ds.x, ds.y)}))
    return 0


def _check_inputs(model, count, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((count, model.n_nodes, model.n_features))


def cmd_compact(args):
    model, _, _, _ = data.load_checkpoint(args.checkpoint)
    plan = compaction.plan_compaction(model, args.straggler_cost)
    x = _check_inputs(model, args.check, args.seed)
    w = {name: model.effective(name)[0] for name in gcn.LAYERS}
    dense = gcn.forward_weights(w["attention"], w["conv"], w["dense"], x, model.heads, model.filters)[0]
    diff = float(np.abs(compaction.compact_forward(plan, model, x) - dense).max())
    if diff > args.tol:
        raise StructureError(f"compact logits differ from dense ones by {diff:.3g} > {args.tol:g}")
    with open(args.out, "w", newline="\n") as fh:
        json.dump(plan.to_dict(), fh)
    fd, fc = plan.flops()
    print(json.dumps({"max_abs_diff": diff, "flops_dense": fd, "flops_compact": fc}))
    return 0


def cmd_bench(args):
    model, _, _, _ = data.load_checkpoint(args.checkpoint)
    with open(args.plan) as fh:
        saved = json.load(fh)
    plan = compaction.plan_compaction(model, saved.get("straggler_cost", compaction.DEFAULT_STRAGGLER_COST))
    if plan.to_dict() != saved:
        raise StructureError("plan file does not belong to this checkpoint")
    x = _check_inputs(model, args.batch, args.seed)
    res = compaction.bench(plan, model, x, repeats=args.repeats)
    print(res.to_json())
    return 0


def cmd_gradcheck(args):
    base = args.seed if args.seed is not None else secrets.randbits(32)
    results = gradcheck.run_suite(range(base, base + args.seeds), args.tol)
    bad = [r for r in results if not r.ok]
    worst = max(results, key=lambda r: r.error)
    print(json.dumps({"checks": len(results), "failed": len(bad), "seed_base": base,
                      "worst": {"name": worst.name, "seed": worst.seed, "error": worst.error}}))
    if bad:
        r = bad[0]
        _fail("gradcheck-failed", f"{len(bad)} checks above {args.tol:g}; first {r.name} seed {r.seed} error {r.error:.3g}")
        return 1
    return 0


def cmd_maskimg(args):
    model, _, _, _ = data.load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    for name, mask in model.masks().items():
        scheme = model.layers[name].scheme if args.grid else None
        path = compaction.export_mask_image(mask, out / f"{name}.pgm", scheme)
        print(path)
    return 0


def build_parser():
    p = _Parser(prog=PROG, description="Semi-structured pruning of skeleton GCNs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic skeleton dataset")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--joints", type=int, default=15)
    s.add_argument("--frames", type=int, default=32)
    s.add_argument("--samples", type=int, default=20, help="sequences per class (half go to test)")
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train and prune a model")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, help="override the configured epoch count")
    s.add_argument("--stop-after", type=int, help="checkpoint and stop after this many epochs")
    s.add_argument("--resume", help="continue from a checkpoint written by --stop-after")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy of a checkpoint on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compact", help="build and verify a compacted plan")
    s.add_argument("--checkpoint", required=True, help="finalized model (pruned.json)")
    s.add_argument("--out", required=True)
    s.add_argument("--straggler-cost", type=float, default=compaction.DEFAULT_STRAGGLER_COST)
    s.add_argument("--check", type=int, default=100, help="random inputs used for the equivalence check")
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_compact)

    s = sub.add_parser("bench", help="time dense against compact inference")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--seed", type=int, help="first seed (random when omitted)")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("maskimg", help="export masks as PGM images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", action="store_true", help="draw block separators")
    s.set_defaults(func=cmd_maskimg)
    return p


def run_cli(argv=None):
    """Run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as exc:
        _fail("usage", exc)
        return 2
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except SemiPruneError as exc:
        _fail(exc.kind, exc)
    except OSError as exc:
        _fail("io-error", exc)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        _fail("data-error", f"malformed input ({exc!r})")
    return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
