"""Plain-text result tables: pruning rate, accuracy, speedup and a remark."""

__all__ = ["ReportRow", "render_table", "row_from_report"]

COLUMNS = ("Pruning rate", "Accuracy (%)", "SpeedUp", "Observation")


class ReportRow:
    def __init__(self, rate, accuracy, speedup, observation=""):
        self.rate = rate
        self.accuracy = accuracy
        self.speedup = speedup
        self.observation = observation

    def cells(self):
        rate = f"{round(100 * self.rate):d}%" if self.rate is not None else "-"
        acc = f"{100 * self.accuracy:.2f}" if self.accuracy is not None else "-"
        if self.speedup is None:
            sp = "-"
        elif self.speedup >= 10:
            sp = f"{self.speedup:.0f}×"
        else:
            sp = f"{self.speedup:.2f}×"
        return rate, acc, sp, self.observation


def row_from_report(report, observation=None):
    """Build a row from a :class:`~semiprune.trainer.PruneReport`."""
    acc = report.accuracy_hard if report.accuracy_hard is not None else report.accuracy_soft
    return ReportRow(report.achieved_rate, acc, report.speedup, observation or report.setting)


def render_table(rows):
    """Pipe-separated table with a header and a dashed rule.

    >>> print(render_table([ReportRow(0.98, 0.8615, 607, "Semi-structured")]))
    Pruning rate | Accuracy (%) | SpeedUp | Observation
    -------------+--------------+---------+----------------
    98%          | 86.15        | 607×    | Semi-structured
    """
    body = [r.cells() for r in rows]
    widths = [max(len(c) for c in col) for col in zip(COLUMNS, *body)]

    def line(cells):
        return " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([line(COLUMNS), rule] + [line(c) for c in body])
