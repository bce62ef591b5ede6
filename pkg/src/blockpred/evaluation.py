"""Classification metrics and sweep reporting.

The blocked state (1) is the positive class for precision/recall/F1.
Zero-denominator metrics are defined as 0.0.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import EmptyError, LengthError, MissingSplitError

COMBINED_ID = "combined"


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def as_dict(self) -> dict:
        return {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp}


@dataclass(frozen=True)
class MetricsReport:
    scenario_id: str  # a scenario id or "combined"
    r_prime: int
    top1_accuracy: float
    f1: float
    precision: float
    recall: float
    confusion: ConfusionMatrix
    U: int

    def as_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "r_prime": self.r_prime,
            "top1_accuracy": self.top1_accuracy,
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "confusion": self.confusion.as_dict(),
            "U": self.U,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(
            scenario_id=d["scenario_id"],
            r_prime=int(d["r_prime"]),
            top1_accuracy=float(d["top1_accuracy"]),
            f1=float(d["f1"]),
            precision=float(d["precision"]),
            recall=float(d["recall"]),
            confusion=ConfusionMatrix(**d["confusion"]),
            U=int(d["U"]),
        )


def top1_accuracy(preds: Sequence[int], truths: Sequence[int]) -> float:
    """Fraction of predictions equal to ground truth."""
    if len(preds) != len(truths):
        raise LengthError(f"{len(preds)} predictions vs {len(truths)} truths")
    if not preds:
        raise EmptyError("cannot compute accuracy of an empty set")
    return sum(1 for p, t in zip(preds, truths) if int(p) == int(t)) / len(preds)


def confusion(preds: Sequence[int], truths: Sequence[int]) -> ConfusionMatrix:
    if len(preds) != len(truths):
        raise LengthError(f"{len(preds)} predictions vs {len(truths)} truths")
    tn = fp = fn = tp = 0
    for p, t in zip(preds, truths):
        p, t = int(p), int(t)
        if t == 1:
            tp += p
            fn += 1 - p
        else:
            fp += p
            tn += 1 - p
    return ConfusionMatrix(tn=tn, fp=fp, fn=fn, tp=tp)


def precision(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fp
    return cm.tp / denom if denom else 0.0


def recall(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fn
    return cm.tp / denom if denom else 0.0


def f1(cm: ConfusionMatrix) -> float:
    denom = 2 * cm.tp + cm.fp + cm.fn
    return 2 * cm.tp / denom if denom else 0.0


def report_from_predictions(
    scenario_id: str, r_prime: int, preds: Sequence[int], truths: Sequence[int]
) -> MetricsReport:
    cm = confusion(preds, truths)
    return MetricsReport(
        scenario_id=scenario_id,
        r_prime=r_prime,
        top1_accuracy=top1_accuracy(preds, truths),
        f1=f1(cm),
        precision=precision(cm),
        recall=recall(cm),
        confusion=cm,
        U=cm.total,
    )


def evaluate_sweep(
    ckpts: Mapping[int, "Checkpoint"],
    splits: Mapping[int, "DatasetSplit"],
    features: Callable[["SequenceSample"], np.ndarray],
    out_dir: str | Path | None = None,
    *,
    make_plots: bool = True,
) -> list[MetricsReport]:
    """Test-split metrics per (scenario, future window), plus a combined row
    when several scenarios are present. Optionally writes report.json and the
    bar/line/heat-map plot files next to it.
    """
    from .predictor import predict  # local import to avoid a module cycle

    reports: list[MetricsReport] = []
    for r_prime in sorted(ckpts):
        if r_prime not in splits:
            raise MissingSplitError(f"no dataset split for future window {r_prime}")
        test_seqs = splits[r_prime].test
        if not test_seqs:
            raise MissingSplitError(f"empty test split for future window {r_prime}")
        feats = np.stack([features(s) for s in test_seqs])
        pairs = predict(ckpts[r_prime], feats)
        preds = [p for p, _ in pairs]
        truths = [int(s.label) for s in test_seqs]

        by_scenario: dict[str, list[int]] = defaultdict(list)
        for i, s in enumerate(test_seqs):
            by_scenario[s.scenario_id].append(i)
        for sid in sorted(by_scenario):
            idx = by_scenario[sid]
            reports.append(
                report_from_predictions(
                    sid, r_prime, [preds[i] for i in idx], [truths[i] for i in idx]
                )
            )
        if len(by_scenario) > 1:
            reports.append(report_from_predictions(COMBINED_ID, r_prime, preds, truths))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report(reports, out_dir / "report.json")
        if make_plots:
            render_plots(reports, out_dir)
    return reports


def write_report(reports: Sequence[MetricsReport], path: str | Path) -> None:
    payload = json.dumps([r.as_dict() for r in reports], indent=2)
    Path(path).write_text(payload + "\n", encoding="utf-8")


def load_report(path: str | Path) -> list[MetricsReport]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [MetricsReport.from_dict(d) for d in data]


def _headline_rows(reports: Sequence[MetricsReport]) -> list[MetricsReport]:
    """One row per future window: the combined row if present, else the sole scenario."""
    by_rp: dict[int, list[MetricsReport]] = defaultdict(list)
    for r in reports:
        by_rp[r.r_prime].append(r)
    rows = []
    for rp in sorted(by_rp):
        combined = [r for r in by_rp[rp] if r.scenario_id == COMBINED_ID]
        rows.append(combined[0] if combined else by_rp[rp][0])
    return rows


def render_plots(reports: Sequence[MetricsReport], out_dir: str | Path) -> list[Path]:
    """Static result plots: per-scenario F1 bars, the future-window sweep, and
    one confusion heat map per future window."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written: list[Path] = []

    by_rp: dict[int, list[MetricsReport]] = defaultdict(list)
    for r in reports:
        by_rp[r.r_prime].append(r)

    for rp in sorted(by_rp):
        scen = [r for r in by_rp[rp] if r.scenario_id != COMBINED_ID]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar([r.scenario_id for r in scen], [r.f1 for r in scen], color="#3b6ea5")
        ax.set_ylim(0, 1)
        ax.set_ylabel("F1")
        ax.set_title(f"F1 by scenario, future window {rp}")
        fig.tight_layout()
        path = out_dir / f"f1_by_scenario_{rp}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    rows = _headline_rows(reports)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = [r.r_prime for r in rows]
    ax.plot(xs, [r.top1_accuracy for r in rows], marker="o", label="top-1 accuracy")
    ax.plot(xs, [r.f1 for r in rows], marker="s", label="F1")
    ax.set_xlabel("future window length")
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out_dir / "sweep_combined.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    for row in rows:
        cm = row.confusion
        grid = np.array([[cm.tn, cm.fp], [cm.fn, cm.tp]], dtype=float)
        fig, ax = plt.subplots(figsize=(4, 3.5))
        ax.imshow(grid, cmap="Blues")
        for (i, j), v in np.ndenumerate(grid):
            ax.text(j, i, f"{int(v)}", ha="center", va="center")
        ax.set_xticks([0, 1], ["pred LOS", "pred blocked"])
        ax.set_yticks([0, 1], ["true LOS", "true blocked"])
        ax.set_title(f"future window {row.r_prime}")
        fig.tight_layout()
        path = out_dir / f"confusion_{row.r_prime}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
