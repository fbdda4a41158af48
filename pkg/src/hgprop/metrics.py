"""Multi-label evaluation: subset accuracy and micro precision/recall/F1."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class EvalReport:
    subset_accuracy: float
    precision: float
    recall: float
    f1: float
    node_count: int

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def render(self, name: str = "") -> str:
        """Aligned text table: Acc. / Prec. / Rec. / F1. (percent)."""
        header = f"{'Method':<10} {'Acc.':>7} {'Prec.':>7} {'Rec.':>7} {'F1.':>7}"
        row = (f"{name:<10} {100 * self.subset_accuracy:7.2f} {100 * self.precision:7.2f} "
               f"{100 * self.recall:7.2f} {100 * self.f1:7.2f}")
        return f"{header}\n{row}"


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def evaluate(predicted: Sequence[Iterable[int]], truth: Sequence[Iterable[int]]) -> EvalReport:
    if len(predicted) != len(truth):
        raise ValueError(f"{len(predicted)} predictions for {len(truth)} nodes")
    exact = tp = fp = fn = 0
    for pred, true in zip(predicted, truth):
        p, t = set(pred), set(true)
        exact += p == t
        hit = len(p & t)
        tp += hit
        fp += len(p) - hit
        fn += len(t) - hit
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return EvalReport(
        subset_accuracy=_ratio(exact, len(truth)),
        precision=precision,
        recall=recall,
        f1=f1,
        node_count=len(truth),
    )
