"""Fold planning (leave-one-subject-out and cross-database) and the exact
aggregate metrics: accuracy, unweighted F1, unweighted average recall.

Per-class true/false positives and false negatives are summed over folds
before the per-class scores are formed (micro aggregation), then averaged
over classes without weighting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError

# experiment number -> (source database, target database)
CDMER_EXPERIMENTS = {
    1: ("SMIC-HS", "SMIC-VIS"),
    2: ("SMIC-VIS", "SMIC-HS"),
    3: ("SMIC-HS", "SMIC-NIR"),
    4: ("SMIC-NIR", "SMIC-HS"),
    5: ("SMIC-VIS", "SMIC-NIR"),
    6: ("SMIC-NIR", "SMIC-VIS"),
    7: ("CASME2", "SMIC-HS"),
    8: ("SMIC-HS", "CASME2"),
    9: ("CASME2", "SMIC-VIS"),
    10: ("SMIC-VIS", "CASME2"),
    11: ("CASME2", "SMIC-NIR"),
    12: ("SMIC-NIR", "CASME2"),
}

CDMER_FOLDS = 5


@dataclass(frozen=True)
class Fold:
    key: str
    train_ids: tuple
    test_ids: tuple


@dataclass(frozen=True)
class FoldPlan:
    protocol: str
    folds: tuple


def plan_loso(samples, protocol: str = "single") -> FoldPlan:
    """One fold per subject, ordered lexicographically by subject id; the
    fold's test set is exactly that subject's clips."""
    subjects = {}
    for s in samples:
        subjects.setdefault(s.subject_id, []).append(s.clip_id)
    if len(subjects) < 2:
        raise ProtocolError(
            f"leave-one-subject-out needs at least 2 subjects, got {len(subjects)}")
    folds = []
    for subj in sorted(subjects):
        test = tuple(subjects[subj])
        train = tuple(s.clip_id for s in samples if s.subject_id != subj)
        folds.append(Fold(key=subj, train_ids=train, test_ids=test))
    return FoldPlan(protocol=protocol, folds=tuple(folds))


def plan_cdmer(source_samples, target_samples, experiment: int) -> FoldPlan:
    """Train on the full source database; the target splits into five
    deterministic folds by round-robin over sorted clip ids."""
    if experiment not in CDMER_EXPERIMENTS:
        raise ProtocolError(f"cross-database experiment must be 1..12, got {experiment}")
    src_db, tgt_db = CDMER_EXPERIMENTS[experiment]
    for s in source_samples:
        if s.database != src_db:
            raise ProtocolError(
                f"experiment {experiment} trains on {src_db}, but source clip "
                f"'{s.clip_id}' is from {s.database}")
    for s in target_samples:
        if s.database != tgt_db:
            raise ProtocolError(
                f"experiment {experiment} tests on {tgt_db}, but target clip "
                f"'{s.clip_id}' is from {s.database}")
    if not source_samples:
        raise ProtocolError(f"experiment {experiment}: no source samples")
    if len(target_samples) < CDMER_FOLDS:
        raise ProtocolError(
            f"experiment {experiment}: need at least {CDMER_FOLDS} target samples, "
            f"got {len(target_samples)}")
    train = tuple(s.clip_id for s in source_samples)
    ordered = sorted(s.clip_id for s in target_samples)
    folds = []
    for i in range(CDMER_FOLDS):
        folds.append(Fold(key=f"fold{i + 1}", train_ids=train,
                          test_ids=tuple(ordered[i::CDMER_FOLDS])))
    return FoldPlan(protocol="cdmer", folds=tuple(folds))


# ---------------------------------------------------------------------------
# confusion matrices and metrics


def confusion_from_predictions(truth, predictions, n_classes: int) -> np.ndarray:
    """K x K counts, rows are ground truth, columns are predictions."""
    truth = np.asarray(truth, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if truth.shape != predictions.shape:
        raise ProtocolError(
            f"truth shape {truth.shape} does not match predictions {predictions.shape}")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (truth, predictions), 1)
    return m


def confusion_to_csv(matrix: np.ndarray, classes=None) -> str:
    k = matrix.shape[0]
    names = list(classes) if classes is not None else [f"class{i}" for i in range(k)]
    lines = ["truth\\pred," + ",".join(names)]
    for i in range(k):
        lines.append(names[i] + "," + ",".join(str(int(v)) for v in matrix[i]))
    return "\n".join(lines) + "\n"


def confusion_from_csv(text: str):
    lines = [ln for ln in text.strip().splitlines() if ln]
    names = lines[0].split(",")[1:]
    rows = []
    for ln in lines[1:]:
        rows.append([int(v) for v in ln.split(",")[1:]])
    return np.asarray(rows, dtype=np.int64), names


@dataclass
class MetricsReport:
    acc: float
    uf1: float
    uar: float
    per_class_f1: tuple   # nan for classes absent from the ground truth
    per_class_acc: tuple
    classes: tuple | None
    fold_count: int

    def to_dict(self) -> dict:
        def clean(v):
            return None if np.isnan(v) else float(v)
        return {
            "acc": float(self.acc),
            "uf1": float(self.uf1),
            "uar": float(self.uar),
            "per_class_f1": [clean(v) for v in self.per_class_f1],
            "per_class_acc": [clean(v) for v in self.per_class_acc],
            "classes": list(self.classes) if self.classes is not None else None,
            "fold_count": self.fold_count,
        }


def compute_metrics(per_fold_confusions, classes=None) -> MetricsReport:
    """Aggregate per-fold confusions into the protocol metrics.

    Per class k: F1_k = 2*TP_k / (2*TP_k + FP_k + FN_k) and Acc_k = TP_k/n_k
    with counts summed over folds. UF1 and UAR are plain means over the
    classes present in the ground truth; Acc is total TP over predictions.
    """
    mats = [np.asarray(m, dtype=np.int64) for m in per_fold_confusions]
    if not mats:
        raise ProtocolError("compute_metrics needs at least one confusion matrix")
    k = mats[0].shape[0]
    for m in mats:
        if m.shape != (k, k):
            raise ProtocolError(f"confusion shapes disagree: {m.shape} vs {(k, k)}")
        if np.any(m < 0):
            raise ProtocolError("confusion counts must be non-negative")
    total = np.zeros((k, k), dtype=np.int64)
    for m in mats:
        total += m
    if total.sum() == 0:
        raise ProtocolError("all confusion matrices are empty")

    tp = np.diag(total).astype(np.float64)
    fp = total.sum(axis=0) - tp
    fn = total.sum(axis=1) - tp
    n_k = total.sum(axis=1).astype(np.float64)
    present = n_k > 0

    f1 = np.full(k, np.nan)
    acc_k = np.full(k, np.nan)
    denom = 2 * tp + fp + fn
    live = present & (denom > 0)
    f1[live] = 2 * tp[live] / denom[live]
    acc_k[present] = tp[present] / n_k[present]

    acc = float(tp.sum() / (tp.sum() + fp.sum()))
    uf1 = float(np.mean(f1[present]))
    uar = float(np.mean(acc_k[present]))
    return MetricsReport(acc=acc, uf1=uf1, uar=uar,
                         per_class_f1=tuple(f1), per_class_acc=tuple(acc_k),
                         classes=tuple(classes) if classes is not None else None,
                         fold_count=len(mats))
