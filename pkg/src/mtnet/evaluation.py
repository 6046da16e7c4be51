"""Image-quality, agreement and classification statistics, plus report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .losses import SSIMConstants, psnr_value, ssim_value
from .networks import ClassLabel, MultiTaskModel, load_checkpoint, predict

REPORT_SCHEMA_VERSION = 1
CLASS_NAMES = [c.name for c in ClassLabel]
METRIC_NAMES = ("acc", "sens", "spec", "prec", "fpr", "fnr", "mcc")


# ---------------------------------------------------------------------------
# image metrics


def nrmse(x, y, mask=None, normalization: str = "mean") -> float:
    """RMSE of ``y`` against reference ``x`` over ``mask``, normalised by the reference.

    ``normalization="mean"`` divides by the in-mask reference mean,
    ``"range"`` by its in-mask max minus min.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if mask is None:
        xs, ys = x.ravel(), y.ravel()
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any():
            raise ValueError("empty mask")
        xs, ys = x[mask], y[mask]
    rmse = math.sqrt(np.mean((xs - ys) ** 2))
    if normalization == "mean":
        denom = xs.mean()
        if denom <= 0:
            raise ValueError("reference mean must be positive")
    elif normalization == "range":
        denom = xs.max() - xs.min()
        if denom <= 0:
            raise ValueError("reference range must be positive")
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return rmse / denom


def windowed_ssim(x, y, c_max: float | None = None, window: int = 11) -> float:
    """Mean of local SSIM over a sliding cubic box window (evaluation only)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c = SSIMConstants(float(x.max()) if c_max is None else c_max)
    size = [min(window, s) for s in x.shape]
    mu_x = ndimage.uniform_filter(x, size, mode="reflect")
    mu_y = ndimage.uniform_filter(y, size, mode="reflect")
    vx = ndimage.uniform_filter(x * x, size, mode="reflect") - mu_x**2
    vy = ndimage.uniform_filter(y * y, size, mode="reflect") - mu_y**2
    cov = ndimage.uniform_filter(x * y, size, mode="reflect") - mu_x * mu_y
    s = ((2 * mu_x * mu_y + c.c1) * (2 * cov + c.c2)) / ((mu_x**2 + mu_y**2 + c.c1) * (vx + vy + c.c2))
    return float(s.mean())


def image_metrics(true, pred, mask=None, psnr_squared: bool = False, normalization: str = "mean",
                  ssim_mode: str = "global") -> dict:
    """SSIM, PSNR and NRMSE of one scan, restricted to ``mask`` when given."""
    true = np.asarray(true, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), true.shape)
        t, p = true[m], pred[m]
    else:
        t, p = true.ravel(), pred.ravel()
    c_max = float(t.max())
    if ssim_mode == "global":
        s = ssim_value(t, p, c_max)
    elif ssim_mode == "windowed":
        s = windowed_ssim(true.squeeze(), pred.squeeze(), c_max)
    else:
        raise ValueError(f"unknown ssim_mode {ssim_mode!r}")
    return {
        "ssim": s,
        "psnr": psnr_value(t, p, c_max, squared=psnr_squared),
        "nrmse": nrmse(t, p, None, normalization),
    }


# ---------------------------------------------------------------------------
# classification


class ConfusionMatrix4:
    """Counts with rows = true class and columns = predicted class."""

    def __init__(self, counts):
        counts = np.asarray(counts)
        if counts.shape != (4, 4):
            raise ValueError(f"confusion matrix must be 4x4, got {counts.shape}")
        if np.any(counts < 0) or not np.all(counts == np.round(counts)):
            raise ValueError("confusion matrix counts must be non-negative integers")
        self.counts = counts.astype(int)

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionMatrix4":
        counts = np.zeros((4, 4), dtype=int)
        np.add.at(counts, (np.asarray(y_true, int), np.asarray(y_pred, int)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tolist(self) -> list[list[int]]:
        return self.counts.tolist()


@dataclass
class ClassMetrics:
    """Per-class one-vs-rest metrics; acc/sens/spec/prec in percent, the rest as rates."""

    per_class: dict[str, dict[str, float]]
    average: dict[str, float]
    undefined: list[str] = field(default_factory=list)


def _ratio(num, den, flag: str, undefined: list) -> float:
    if den == 0:
        undefined.append(flag)
        return 0.0
    return num / den


def classification_metrics(cm: ConfusionMatrix4 | np.ndarray) -> ClassMetrics:
    if not isinstance(cm, ConfusionMatrix4):
        cm = ConfusionMatrix4(cm)
    c = cm.counts
    total = cm.total
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    per_class: dict[str, dict[str, float]] = {}
    undefined: list[str] = []
    for i, name in enumerate(CLASS_NAMES):
        tp = c[i, i]
        fn = c[i].sum() - tp
        fp = c[:, i].sum() - tp
        tn = total - tp - fn - fp
        den = math.sqrt(float((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)))
        per_class[name] = {
            "acc": 100.0 * (tp + tn) / total,
            "sens": 100.0 * _ratio(tp, tp + fn, f"{name}.sens", undefined),
            "spec": 100.0 * _ratio(tn, tn + fp, f"{name}.spec", undefined),
            "prec": 100.0 * _ratio(tp, tp + fp, f"{name}.prec", undefined),
            "fpr": _ratio(fp, fp + tn, f"{name}.fpr", undefined),
            "fnr": _ratio(fn, fn + tp, f"{name}.fnr", undefined),
            "mcc": _ratio(float(tp * tn - fp * fn), den, f"{name}.mcc", undefined),
        }
    average = {m: float(np.mean([per_class[n][m] for n in CLASS_NAMES])) for m in METRIC_NAMES}
    return ClassMetrics(per_class, average, undefined)


# ---------------------------------------------------------------------------
# agreement


@dataclass
class AgreementStats:
    bias: float
    sd: float
    loa_low: float
    loa_high: float
    pearson_r: float
    n: int

    def formatted(self, unit: str = "ml/100g/min") -> str:
        return f"bias {self.bias:.1f} {unit}, 95% LoA ({self.loa_low:+.1f}, {self.loa_high:+.1f})"


def _pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pairs, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError("pairs must be a sequence of (true, predicted) tuples")
    if a.shape[0] < 2:
        raise ValueError("at least 2 pairs are required")
    return a[:, 0], a[:, 1]


def pearson(pairs) -> float:
    x, y = _pairs(pairs)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson correlation undefined for zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def bland_altman(pairs) -> AgreementStats:
    """Bias and 95% limits of agreement of ``true - predicted``."""
    x, y = _pairs(pairs)
    diff = x - y
    bias = float(diff.mean())
    sd = float(diff.std(ddof=1))
    try:
        r = pearson(pairs)
    except ValueError:
        r = float("nan")
    return AgreementStats(bias, sd, bias - 1.96 * sd, bias + 1.96 * sd, r, len(diff))


# ---------------------------------------------------------------------------
# fold evaluation


@dataclass
class FoldResult:
    per_scan: list[dict]
    image: dict[str, float]
    confusion: ConfusionMatrix4
    classes: ClassMetrics
    agreement: AgreementStats | None

    def summary(self) -> dict:
        return {
            "n_scans": len(self.per_scan),
            "image": self.image,
            "confusion_matrix": self.confusion.tolist(),
            "classification": {"per_class": self.classes.per_class, "average": self.classes.average,
                               "undefined": self.classes.undefined},
            "agreement": asdict(self.agreement) if self.agreement else None,
        }


def evaluate_predictions(samples, cbf_pred: np.ndarray, probs: np.ndarray, masked: bool = True,
                         psnr_squared: bool = False, normalization: str = "mean") -> FoldResult:
    """Score predictions for ``samples`` (each carrying ``pet``, ``mask``, ``label``, ``pet_scale``)."""
    if len(samples) == 0:
        raise ValueError("empty test set")
    if len(cbf_pred) != len(samples) or len(probs) != len(samples):
        raise ValueError("prediction count does not match sample count")
    rows = []
    pairs = []
    y_true, y_pred = [], []
    for s, pred, p in zip(samples, cbf_pred, probs):
        mask = s.mask if masked else None
        m = image_metrics(s.pet[0], pred[0], mask, psnr_squared, normalization)
        label_pred = int(np.argmax(p))  # first maximum wins ties
        region = s.mask if s.mask is not None else np.ones(s.pet.shape[1:], bool)
        scale = s.pet_scale if np.isfinite(s.pet_scale) else 1.0
        true_mean = scale * float(s.pet[0][region].mean())
        pred_mean = scale * float(pred[0][region].mean())
        pairs.append((true_mean, pred_mean))
        y_true.append(s.label)
        y_pred.append(label_pred)
        rec = s.record
        rows.append({
            "scan_id": rec.scan_id if rec is not None else str(len(rows)),
            "subject_id": rec.subject_id if rec is not None else "",
            "true_label": CLASS_NAMES[s.label],
            "pred_label": CLASS_NAMES[label_pred],
            **{f"p_{n}": float(v) for n, v in zip(CLASS_NAMES, p)},
            **m,
            "true_mean_cbf": true_mean,
            "pred_mean_cbf": pred_mean,
        })
    image = {k: float(np.mean([r[k] for r in rows])) for k in ("ssim", "psnr", "nrmse")}
    cm = ConfusionMatrix4.from_labels(y_true, y_pred)
    agreement = bland_altman(pairs) if len(pairs) >= 2 else None
    return FoldResult(rows, image, cm, classification_metrics(cm), agreement)


def evaluate_fold(model: MultiTaskModel | str | Path, samples, batch_size: int = 4, **kwargs) -> FoldResult:
    """Run a model (or an MTCK checkpoint path) over ``samples`` and score it."""
    if not isinstance(model, MultiTaskModel):
        model = load_checkpoint(model)
    if samples and samples[0].mri.shape[0] != model.config.mri_channels:
        raise ValueError("test samples do not match the checkpoint's input channels")
    cbf, probs = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        c, p = predict(model, np.stack([s.mri for s in chunk]))
        cbf.append(c)
        probs.append(p)
    return evaluate_predictions(samples, np.concatenate(cbf), np.concatenate(probs), **kwargs)


# ---------------------------------------------------------------------------
# reports

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "n_scans", "image", "confusion_matrix", "classification", "agreement"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "n_scans": {"type": "integer", "minimum": 1},
        "image": {
            "type": "object",
            "required": ["ssim", "psnr", "nrmse"],
            "properties": {"ssim": {"type": "number"}, "psnr": {"type": ["number", "string"]},
                           "nrmse": {"type": "number", "minimum": 0}},
        },
        "confusion_matrix": {
            "type": "array", "minItems": 4, "maxItems": 4,
            "items": {"type": "array", "minItems": 4, "maxItems": 4,
                      "items": {"type": "integer", "minimum": 0}},
        },
        "classification": {
            "type": "object",
            "required": ["per_class", "average"],
            "properties": {
                "per_class": {"type": "object", "required": CLASS_NAMES},
                "average": {"type": "object", "required": list(METRIC_NAMES)},
            },
        },
        "agreement": {
            "type": ["object", "null"],
            "required": ["bias", "sd", "loa_low", "loa_high", "pearson_r", "n"],
        },
        "config": {"type": "object"},
    },
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, REPORT_SCHEMA)


def emit_report(result: FoldResult, out_dir, config: dict | None = None) -> dict[str, Path]:
    """Write metrics.json, per_scan.csv and the three SVG figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": REPORT_SCHEMA_VERSION, **_jsonable(result.summary())}
    if config is not None:
        doc["config"] = _jsonable(config)
    validate_report(doc)
    paths = {"metrics": out / "metrics.json", "per_scan": out / "per_scan.csv"}
    paths["metrics"].write_text(json.dumps(doc, indent=2))
    with open(paths["per_scan"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(result.per_scan[0].keys()))
        writer.writeheader()
        writer.writerows(result.per_scan)
    from . import plots

    paths["bland_altman"] = plots.bland_altman_plot(result, out / "bland_altman.svg")
    paths["joint_plot"] = plots.joint_plot(result, out / "joint_plot.svg")
    paths["confusion_matrix"] = plots.confusion_matrix_plot(result, out / "confusion_matrix.svg")
    return paths
