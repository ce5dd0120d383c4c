"""Threshold-free evaluation of membership scores: ROC, AUC, TPR at low FPR."""
from __future__ import annotations

import csv
import dataclasses
import io
from collections.abc import Sequence

import numpy as np
from scipy.stats import rankdata

from .core import DegenerateEvaluation, ScoredExample

FPR_GRID = (0.001, 0.01, 0.05)


def _split(scored: Sequence[ScoredExample]) -> tuple[np.ndarray, np.ndarray]:
    pos = np.array([s.score for s in scored if s.member], dtype=np.float64)
    neg = np.array([s.score for s in scored if not s.member], dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise DegenerateEvaluation(
            f"need both classes, got {pos.size} members and {neg.size} non-members")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise DegenerateEvaluation("scores must be finite")
    return pos, neg


def auc_from_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann-Whitney AUC via average ranks (ties count one half)."""
    ranks = rankdata(np.concatenate([pos, neg]))
    m, n = pos.size, neg.size
    return float((ranks[:m].sum() - m * (m + 1) / 2) / (m * n))


def auc(scored: Sequence[ScoredExample]) -> float:
    return auc_from_scores(*_split(scored))


def _roc_points(pos: np.ndarray, neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # One operating point per distinct score, decision rule score >= threshold.
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    tp = pos.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg_sorted, thresholds, side="left")
    fpr = np.concatenate([[0.0], fp / neg.size])
    tpr = np.concatenate([[0.0], tp / pos.size])
    return fpr, tpr


def roc_curve(scored: Sequence[ScoredExample]) -> list[tuple[float, float]]:
    """``(fpr, tpr)`` points from ``(0, 0)`` to ``(1, 1)``; tied scores share one point."""
    fpr, tpr = _roc_points(*_split(scored))
    return list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(points: Sequence[tuple[float, float]]) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def tpr_at_fpr_from_scores(pos: np.ndarray, neg: np.ndarray, target: float) -> float:
    if not 0.0 < target < 1.0:
        raise ValueError("fpr target must lie in (0, 1)")
    fpr, tpr = _roc_points(pos, neg)
    ok = fpr <= target
    return float(tpr[ok].max()) if np.any(ok) else 0.0


def tpr_at_fpr(scored: Sequence[ScoredExample], fpr_target: float) -> float:
    """Best TPR over operating points whose empirical FPR is at most the target.

    No interpolation: with ``N`` non-members any target below ``1/N`` reports
    the FPR = 0 operating point.
    """
    return tpr_at_fpr_from_scores(*_split(scored), fpr_target)


@dataclasses.dataclass(frozen=True)
class RocSummary:
    attack_name: str
    n_members: int
    n_nonmembers: int
    auc: float
    tpr_at: dict[float, float]
    digests: dict[str, dict[str, float]] | None = None
    dataset: str = ""

    def row(self) -> ReportRow:
        return ReportRow(self.dataset, self.attack_name, self.n_members, self.n_nonmembers,
                         self.auc, tuple(self.tpr_at[f] for f in FPR_GRID))


def summarize(scored: Sequence[ScoredExample], attack_name: str | None = None,
              dataset: str = "") -> RocSummary:
    pos, neg = _split(scored)
    if attack_name is None:
        names = {s.attack_name for s in scored}
        attack_name = names.pop() if len(names) == 1 else "mixed"

    def digest(x):
        return {"min": float(x.min()), "max": float(x.max()), "mean": float(x.mean())}

    return RocSummary(
        attack_name=attack_name, n_members=pos.size, n_nonmembers=neg.size,
        auc=auc_from_scores(pos, neg),
        tpr_at={f: tpr_at_fpr_from_scores(pos, neg, f) for f in FPR_GRID},
        digests={"member": digest(pos), "nonmember": digest(neg)}, dataset=dataset)


# --------------------------------------------------------------------------
# reports

@dataclasses.dataclass(frozen=True)
class ReportRow:
    dataset: str
    attack: str
    n_members: int
    n_nonmembers: int
    auc: float
    tpr: tuple[float, ...]

    @property
    def values(self) -> tuple[float, ...]:
        return (self.auc,) + self.tpr


CSV_COLUMNS = ("dataset", "attack", "n_members", "n_nonmembers", "auc",
               "tpr@0.1%", "tpr@1%", "tpr@5%")
_METRIC_HEADERS = ("AUC", "TPR@0.1%", "TPR@1%", "TPR@5%")


def _attack_order(name: str) -> int:
    from .attacks import AttackName
    names = [a.value for a in AttackName]
    return names.index(name) if name in names else len(names)


def _ordered(rows: Sequence[ReportRow]) -> list[ReportRow]:
    return sorted(rows, key=lambda r: (r.dataset, _attack_order(r.attack), r.attack))


def block_maxima(rows: Sequence[ReportRow]) -> set[tuple[int, int]]:
    """``(row index, metric column)`` cells holding the maximum of their dataset block."""
    marked = set()
    blocks: dict[str, list[int]] = {}
    for i, r in enumerate(rows):
        blocks.setdefault(r.dataset, []).append(i)
    for idx in blocks.values():
        for col in range(len(_METRIC_HEADERS)):
            best = max(rows[i].values[col] for i in idx)
            marked.update((i, col) for i in idx if rows[i].values[col] == best)
    return marked


def build_report(summaries: Sequence[RocSummary | ReportRow], format: str = "csv") -> str:
    """Tables of AUC and TPR at 0.1%, 1% and 5% FPR, one row per (dataset, attack).

    ``csv`` keeps full precision and parses back with :func:`parse_report_csv`;
    ``text`` and ``markdown`` print four decimals and mark the best value of
    each column within a dataset block.
    """
    rows = _ordered([s.row() if isinstance(s, RocSummary) else s for s in summaries])
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([r.dataset, r.attack, r.n_members, r.n_nonmembers]
                            + [repr(v) for v in r.values])
        return buf.getvalue()
    if format not in ("text", "markdown"):
        raise ValueError(f"unknown report format {format!r}")

    best = block_maxima(rows)
    header = ["Dataset", "Attack", "M", "N", *_METRIC_HEADERS]
    body = []
    for i, r in enumerate(rows):
        cells = []
        for col, v in enumerate(r.values):
            txt = f"{v:.4f}"
            if (i, col) in best:
                txt = f"**{txt}**" if format == "markdown" else f"{txt}*"
            cells.append(txt)
        body.append([r.dataset, r.attack, str(r.n_members), str(r.n_nonmembers), *cells])

    if format == "markdown":
        lines = ["| " + " | ".join(header) + " |",
                 "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(b) + " |" for b in body]
    else:
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        fmt = lambda cells: "  ".join(c.ljust(w) if k < 2 else c.rjust(w)  # noqa: E731
                                      for k, (c, w) in enumerate(zip(cells, widths)))
        lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
        lines.append("* best value in its dataset block")
    small = sorted({r.n_nonmembers for r in rows if r.n_nonmembers * min(FPR_GRID) < 1})
    if small:
        lines.append(f"Note: with {'/'.join(map(str, small))} non-members, TPR at FPR "
                     "targets below 1/N is the FPR=0 operating point.")
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> list[ReportRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_COLUMNS:
        raise ValueError("not a report CSV")
    out = []
    for rec in reader:
        vals = [float(x) for x in rec[4:]]
        out.append(ReportRow(rec[0], rec[1], int(rec[2]), int(rec[3]), vals[0],
                             tuple(vals[1:])))
    return out


def roc_points_csv(scored: Sequence[ScoredExample]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fpr", "tpr"])
    for f, t in roc_curve(scored):
        writer.writerow([repr(f), repr(t)])
    return buf.getvalue()
