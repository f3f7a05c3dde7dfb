"""Structured, semi-structured and unstructured pruning side by side.

The same network and budget (90% of the weights removed) are trained three
times, once per tying regime. Structured masks keep whole blocks and are
cheapest to run but may lose the task. Unstructured masks keep accuracy
but scatter the survivors. Semi-structured masks sit in between: dense
cores with a few stragglers. One run with the line-count regularizer
switched off shows how much structure it buys.

Takes about half a minute.
"""

import numpy as np

from semiprune import compaction, data, gcn, report, trainer

adj = gcn.skeleton_adjacency(15, gcn.SBU_BONES)
graphs = {"train": [], "test": []}
for seq, split in data.synth_sequences(classes=8, joints=15, frames=32, samples_per_class=20, noise=0.05):
    graphs[split].append(gcn.temporal_chunking(seq, 4, adj))
train = trainer.Dataset.from_graphs(graphs["train"])
test = trainer.Dataset.from_graphs(graphs["test"])

rows, details = [], []
for mode, beta in (("structured", 0.1), ("semi", 0.1), ("semi", 0.0), ("unstructured", 0.1)):
    d = data.load_config(data.DESK_CONFIG).to_dict()
    d["prune"].update(mode=mode, beta=beta)
    cfg = data.RunConfig.from_dict(d)
    model = data.build_model(cfg, adj, n_classes=8)
    trainer.train(model, train, cfg.train)
    binary, frozen = trainer.finalize_masks(model)
    rep = trainer.prune_report(model, binary, accuracy_hard=gcn.accuracy(frozen, test.x, test.y))
    fd, fc = compaction.plan_compaction(frozen).flops()
    label = {"structured": "Structured", "semi": "Semi-structured", "unstructured": "Unstructured"}[mode]
    if mode == "semi":
        label += " (+ rank optimization)" if beta else " (budget only)"
    # a network with nothing left has no meaningful speedup
    rows.append(report.ReportRow(rep.achieved_rate, rep.accuracy_hard, fd / fc if fc else None, label))
    lines = sum(t.effective_lines for t in rep.tensors.values())
    details.append(f"{label:40s} flops kept {100 * fc / fd:5.1f}%  live rows+cols {lines}")

print("SpeedUp column: dense-equivalent flop ratio\n")
print(report.render_table(rows))
print()
print("\n".join(details))
