"""Pixel-level precision, recall and F1 for binary hand masks."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError


@dataclass
class F1Report:
    true_pos: int
    false_pos: int
    false_neg: int
    precision: float
    recall: float
    f1: float
    per_frame: list = field(default_factory=list)

    @classmethod
    def from_counts(cls, tp, fp, fn, per_frame=None):
        tp, fp, fn = int(tp), int(fp), int(fn)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(tp, fp, fn, precision, recall, f1, list(per_frame or []))

    def to_dict(self):
        return {"true_pos": self.true_pos, "false_pos": self.false_pos,
                "false_neg": self.false_neg, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "per_frame": list(self.per_frame)}


def _counts(pred, truth, threshold):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"prediction {pred.shape} and truth {truth.shape} differ")
    p = pred >= threshold
    t = truth > 0.5
    return np.count_nonzero(p & t), np.count_nonzero(p & ~t), np.count_nonzero(~p & t)


def f1_score(pred, truth, threshold=0.5):
    """Micro-averaged pixel F1 of probability map(s) against binary truth.

    ``pred`` and ``truth`` may be single maps or equal-length sequences of
    maps; counts are pooled over every pixel of every frame and the
    per-frame F1 values are kept in ``per_frame``.
    """
    if not 0 < threshold < 1:
        raise InvalidInputError("threshold must lie in (0, 1)")
    if isinstance(pred, (list, tuple)) or isinstance(truth, (list, tuple)):
        if len(pred) != len(truth):
            raise InvalidInputError(f"{len(pred)} predictions but {len(truth)} truth masks")
        if not len(pred):
            raise InvalidInputError("empty evaluation set")
        pairs = list(zip(pred, truth))
    else:
        pairs = [(pred, truth)]
    tp = fp = fn = 0
    per_frame = []
    for p, t in pairs:
        a, b, c = _counts(p, t, threshold)
        tp, fp, fn = tp + a, fp + b, fn + c
        per_frame.append(F1Report.from_counts(a, b, c).f1)
    return F1Report.from_counts(tp, fp, fn, per_frame)
