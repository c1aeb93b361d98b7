"""Confusion-matrix evaluation and classification-map rendering.

Accuracy figures are reported as percentages with four decimal places.
Overall accuracy (OA) is the correctly classified share of all evaluated
samples; average accuracy (AA) is the unweighted mean of per-class
accuracies over classes that actually have samples; kappa rescales OA by
the agreement expected from the marginals alone, so chance-level
prediction scores 0 and perfect agreement 100.

Classification maps are binary portable pixmaps (P6): one palette color
per class, black for background, a format simple enough to compare byte
for byte in tests.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError

# background + 16 class colors, chosen for pairwise distinctness
PALETTE = np.array([
    (0, 0, 0),
    (255, 225, 25),
    (0, 130, 200),
    (60, 180, 75),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
    (0, 128, 128),
    (220, 190, 255),
    (170, 110, 40),
    (255, 250, 200),
    (128, 0, 0),
    (170, 255, 195),
    (230, 25, 75),
], dtype=np.uint8)


@dataclass
class ConfusionMatrix:
    """counts[t - 1, p - 1] = samples of true class t predicted as p."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ContractError(f"counts must be square, got {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer) or counts.min() < 0:
            raise ContractError("counts must be nonnegative integers")
        self.counts = counts.astype(np.int64)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())


def confusion(true, pred, num_classes=None):
    """Tally (true, predicted) label pairs; labels are 1-based class ids."""
    true = np.asarray(true)
    pred = np.asarray(pred)
    if true.shape != pred.shape or true.ndim != 1:
        raise ContractError(f"label vectors must be equal-length 1-d, got "
                            f"{true.shape} and {pred.shape}")
    if true.size == 0:
        raise ContractError("no samples to evaluate")
    c = int(num_classes) if num_classes else int(max(true.max(), pred.max()))
    for name, arr in (("true", true), ("predicted", pred)):
        if arr.min() < 1 or arr.max() > c:
            raise DataError(f"{name} labels must lie in [1, {c}]")
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (true - 1, pred - 1), 1)
    return ConfusionMatrix(counts)


def per_class_accuracy(cm):
    """Percent correct per true class; classes with no samples give nan."""
    rows = cm.counts.sum(axis=1)
    diag = np.diagonal(cm.counts)
    out = np.full(cm.num_classes, np.nan)
    live = rows > 0
    out[live] = 100.0 * diag[live] / rows[live]
    return out


def overall_accuracy(cm):
    if cm.total == 0:
        raise ContractError("confusion matrix is empty")
    return 100.0 * np.trace(cm.counts) / cm.total


def average_accuracy(cm):
    """Mean of per-class accuracies, skipping classes with no samples."""
    if cm.total == 0:
        raise ContractError("confusion matrix is empty")
    accs = per_class_accuracy(cm)
    return float(np.mean(accs[~np.isnan(accs)]))


def kappa(cm):
    """Chance-corrected agreement, as a percent in [-100, 100].

    With p_o the observed agreement and p_e the agreement expected from
    the row/column marginals, kappa = 100 * (p_o - p_e) / (1 - p_e).  A
    matrix concentrated in one cell makes p_e exactly 1; that degenerate
    case scores 100 when the cell is diagonal (perfect agreement on a
    single class) and 0 otherwise.
    """
    total = cm.total
    if total == 0:
        raise ContractError("confusion matrix is empty")
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    trace = int(np.trace(cm.counts))
    pe_num = int(rows @ cols)
    pe_den = total * total
    if pe_num == pe_den:
        return 100.0 if trace == total else 0.0
    # (p_o - p_e) / (1 - p_e) over a common denominator: one rounding,
    # so count ratios that are exact in binary stay exact
    return 100.0 * (total * trace - pe_num) / (pe_den - pe_num)


@dataclass
class MetricReport:
    """Everything a results table needs, all percentages."""

    confusion_matrix: ConfusionMatrix
    per_class: np.ndarray
    class_counts: np.ndarray
    oa: float
    aa: float
    kappa: float


def evaluate(true, pred, num_classes=None):
    cm = confusion(true, pred, num_classes)
    return MetricReport(
        confusion_matrix=cm,
        per_class=per_class_accuracy(cm),
        class_counts=cm.counts.sum(axis=1),
        oa=overall_accuracy(cm),
        aa=average_accuracy(cm),
        kappa=kappa(cm))


def format_report(report, class_names=None):
    """Human-readable table, one row per class, summary lines last."""
    lines = [f"{'class':>20}  {'count':>7}  {'accuracy':>9}"]
    for idx in range(report.confusion_matrix.num_classes):
        name = class_names[idx] if class_names else str(idx + 1)
        n = int(report.class_counts[idx])
        acc = report.per_class[idx]
        cell = f"{acc:9.4f}" if not np.isnan(acc) else f"{'absent':>9}"
        lines.append(f"{name:>20}  {n:>7}  {cell}")
    lines.append("")
    lines.append(f"{'overall accuracy':>20}  {report.oa:9.4f}")
    lines.append(f"{'average accuracy':>20}  {report.aa:9.4f}")
    lines.append(f"{'kappa':>20}  {report.kappa:9.4f}")
    return "\n".join(lines) + "\n"


def keyvalue_report(report):
    """Machine-readable `key=value` lines, one metric per line."""
    lines = [f"classes={report.confusion_matrix.num_classes}",
             f"samples={report.confusion_matrix.total}",
             f"oa={report.oa:.4f}",
             f"aa={report.aa:.4f}",
             f"kappa={report.kappa:.4f}"]
    for idx in range(report.confusion_matrix.num_classes):
        acc = report.per_class[idx]
        shown = f"{acc:.4f}" if not np.isnan(acc) else "absent"
        lines.append(f"class_{idx + 1}_count={int(report.class_counts[idx])}")
        lines.append(f"class_{idx + 1}_accuracy={shown}")
    return "\n".join(lines) + "\n"


def render_map(labels, predictions, palette=PALETTE):
    """Color every pixel: palette[predicted class] where labeled, black
    elsewhere.  Returns an [M, N, 3] uint8 image."""
    grid = labels.labels
    predictions = np.asarray(predictions)
    if predictions.shape != grid.shape:
        raise ContractError(f"prediction grid {predictions.shape} does not "
                            f"match label grid {grid.shape}")
    labeled = grid > 0
    if np.any(labeled & (predictions < 1)):
        raise DataError("every labeled pixel needs a prediction in [1, C]")
    if int(predictions.max(initial=0)) > len(palette) - 1:
        raise DataError(f"palette has {len(palette) - 1} class colors, "
                        f"prediction uses class {int(predictions.max())}")
    shown = np.where(labeled, predictions, 0)
    return palette[shown]


def save_ppm(path, image):
    """Write an [M, N, 3] uint8 image as a binary P6 pixmap."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ContractError(f"image must be [M, N, 3] uint8, got "
                            f"{image.shape} {image.dtype}")
    height, width = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def emit_map(path, labels, predictions, palette=PALETTE):
    """Render and write the classification map; returns the image."""
    image = render_map(labels, predictions, palette)
    save_ppm(path, image)
    return image
