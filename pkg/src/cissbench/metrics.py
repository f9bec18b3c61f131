"""Confusion matrices and mean IoU."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .segnet import predict


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions, in catalog id order."""

    counts: np.ndarray
    class_names: list = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ValueError("negative counts")
        if self.class_names is None:
            self.class_names = [str(c) for c in range(len(self.counts))]

    @classmethod
    def from_arrays(cls, truth, pred, num_classes, ignore_id=255, class_names=None):
        return cls(kernels.confusion_counts(truth, pred, num_classes, ignore_id), class_names)

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    @property
    def total(self):
        return int(self.counts.sum())

    def background_rate(self, classes, background_id=0):
        """Fraction of pixels of ``classes`` that were predicted as background."""
        rows = self.counts[list(classes)]
        tot = rows.sum()
        return float(rows[:, background_id].sum() / tot) if tot else 0.0

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["truth\\pred"] + list(self.class_names))
        for name, row in zip(self.class_names, self.counts):
            w.writerow([name] + [int(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        names = rows[0][1:]
        counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
        return cls(counts, names)


@dataclass
class MeanIoU:
    value: float
    per_class: dict = field(default_factory=dict)
    defined: bool = True

    def __float__(self):
        return self.value


def miou(cm, class_subset=None):
    """Mean IoU over ``class_subset``.

    Classes with an empty row and column (absent from truth and prediction)
    are excluded from the mean.  If every class is excluded the result has
    ``defined=False`` and ``value=0.0``.
    """
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.int64)
    n = len(counts)
    subset = range(n) if class_subset is None else sorted(int(c) for c in class_subset)
    per_class = {}
    for c in subset:
        if c < 0 or c >= n:
            raise ValueError(f"class {c} outside the confusion matrix")
        tp = counts[c, c]
        denom = counts[c, :].sum() + counts[:, c].sum() - tp
        if counts[c, :].sum() + counts[:, c].sum() == 0:
            continue
        per_class[c] = float(tp / denom)
    if not per_class:
        return MeanIoU(0.0, {}, False)
    return MeanIoU(float(np.mean(list(per_class.values()))), per_class, True)


def confusion_matrix(model, dataset, catalog, batch_size=32):
    """Tally arg-max predictions of ``model`` against ``dataset`` labels."""
    pred = predict(model, dataset.images, batch_size)
    names = [catalog.name(c) for c in catalog.class_ids]
    return ConfusionMatrix.from_arrays(dataset.labels, pred, len(catalog), catalog.ignore_id, names)


def group_mious(cm, old_classes, new_classes):
    """Old / new / all mIoU in percent (``None`` when undefined)."""

    def pct(res):
        return round(100.0 * res.value, 6) if res.defined else None

    all_classes = sorted(set(old_classes) | set(new_classes))
    return {
        "old": pct(miou(cm, old_classes)),
        "new": pct(miou(cm, new_classes)),
        "all": pct(miou(cm, all_classes)),
    }
