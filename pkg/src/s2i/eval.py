"""Translation quality: informativity classifiers, rates, smoothing and reports."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .models import (AudioEncoder, Generator, InformativityClassifier, ModelSchema, build_classifier,
                     encode_audio, generate_image)
from .nn import Context, OptimizerState, RngState, sgd_step

INFORMATIVE, NON_INFORMATIVE = 1, 0


class TranslationLabel(enum.Enum):
    DEFECTIVE = "Defective"
    INCOMPLETE = "Incomplete"
    ARTIFACTUAL = "Artifactual"
    IMPLAUSIBLE = "Implausible"
    SURREAL = "Surreal"
    CREEPY = "Creepy"
    MULTI_INFORMATIVE = "MultiInformative"


@dataclass(frozen=True)
class Annotation:
    image: str
    label: TranslationLabel
    note: str = ""


def write_annotations(path, annotations: Sequence[Annotation]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "label", "note"])
        for a in annotations:
            writer.writerow([a.image, a.label.value, a.note])


def read_annotations(path) -> list[Annotation]:
    """Raises ``ValueError`` on labels outside the closed set."""
    with open(path, newline="") as fh:
        return [Annotation(row["image"], TranslationLabel(row["label"]), row.get("note") or "")
                for row in csv.DictReader(fh)]


# -- informativity classifiers ----------------------------------------------


@dataclass
class InformativityDataset:
    """Images for one sound class labeled informative (1) or not (0)."""

    class_name: str
    images: np.ndarray
    labels: np.ndarray
    sources: list[str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels) or len(self.sources) != len(self.labels):
            raise ValueError("images, labels and sources must be aligned and images must be (N, C, H, W)")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (non-informative) or 1 (informative)")

    def __len__(self):
        return len(self.labels)

    def imbalance(self) -> float:
        """|n_informative - n_non| / N."""
        n1 = int(self.labels.sum())
        return abs(2 * n1 - len(self.labels)) / max(1, len(self.labels))

    def split(self, train_fraction: float, seed: int) -> tuple["InformativityDataset", "InformativityDataset"]:
        """Stratified split that keeps both halves label-balanced."""
        rng = np.random.default_rng([seed, 7])
        train_idx, test_idx = [], []
        for label in (0, 1):
            idx = rng.permutation(np.flatnonzero(self.labels == label))
            cut = int(round(train_fraction * len(idx)))
            train_idx.append(idx[:cut])
            test_idx.append(idx[cut:])
        return self._take(np.sort(np.concatenate(train_idx))), self._take(np.sort(np.concatenate(test_idx)))

    def _take(self, idx):
        return InformativityDataset(self.class_name, self.images[idx], self.labels[idx],
                                    [self.sources[i] for i in idx])


def build_informativity_dataset(class_name: str, pools: Mapping[str, tuple[np.ndarray, np.ndarray]],
                                per_label: int, seed: int = 0) -> InformativityDataset:
    """Draw ``per_label`` images of each label evenly across source models.

    ``pools`` maps a model id to ``(images, labels)``.  Raises if a model
    cannot supply its share.
    """
    if not pools:
        raise ValueError("no source models given")
    models = sorted(pools)
    shares = [per_label // len(models) + (i < per_label % len(models)) for i in range(len(models))]
    images, labels, sources = [], [], []
    for mi, model in enumerate(models):
        imgs, labs = pools[model]
        labs = np.asarray(labs)
        for label in (1, 0):
            idx = np.flatnonzero(labs == label)
            if len(idx) < shares[mi]:
                raise ValueError(f"model {model!r} has {len(idx)} images labeled {label}, needs {shares[mi]}")
            pick = np.sort(np.random.default_rng([seed, mi, label]).choice(idx, shares[mi], replace=False))
            images.append(np.asarray(imgs)[pick])
            labels.append(np.full(len(pick), label))
            sources += [model] * len(pick)
    return InformativityDataset(class_name, np.concatenate(images), np.concatenate(labels), sources)


@dataclass
class ClassifierConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-5
    epochs: int = 30
    batch_size: int = 32
    train_fraction: float = 0.8
    imbalance_tolerance: float = 0.02
    seed: int = 0


@dataclass
class ClassifierResult:
    model: InformativityClassifier
    train_accuracy: float
    test_accuracy: float
    losses: list[float]


def nll_loss(logp: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(logp[np.arange(len(labels)), labels].astype(np.float64)))


def nll_loss_grad(logp: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = np.zeros_like(logp)
    g[np.arange(len(labels)), labels] = -1.0 / len(labels)
    return g


def predict(model: InformativityClassifier, images, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    out = [np.argmax(model(images[i:i + batch_size], Context(train=False, dropout=False)), axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_informativity_classifier(ds: InformativityDataset, schema: ModelSchema,
                                   cfg: ClassifierConfig | None = None) -> ClassifierResult:
    """Fit a binary informative/non-informative classifier with NLL + SGD."""
    cfg = cfg or ClassifierConfig()
    if ds.imbalance() > cfg.imbalance_tolerance:
        raise ValueError(f"dataset for {ds.class_name!r} is label-imbalanced ({ds.imbalance():.3f} > "
                         f"{cfg.imbalance_tolerance})")
    if ds.images.shape[1:] != schema.image_shape:
        raise ValueError(f"images {ds.images.shape[1:]} do not match schema {schema.image_shape}")
    train, test = ds.split(cfg.train_fraction, cfg.seed)
    rng = RngState(cfg.seed)
    model = build_classifier(schema, rng)
    opt = OptimizerState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    params = dict(model.named_params())
    n, b = len(train), min(cfg.batch_size, len(train))
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.peek("data", epoch).permutation(n)
        total = 0.0
        for j in range(max(1, n // b)):
            idx = perm[j * b:(j + 1) * b]
            logp, cache = model.forward(train.images[idx], Context(train=True, rng=rng))
            total += nll_loss(logp, train.labels[idx])
            _, grads = model.backward(nll_loss_grad(logp, train.labels[idx]), cache)
            sgd_step(params, grads, opt)
        losses.append(total / max(1, n // b))

    def accuracy(part):
        return float(np.mean(predict(model, part.images) == part.labels)) if len(part) else float("nan")

    return ClassifierResult(model, accuracy(train), accuracy(test), losses)


# -- oracle templates ----------------------------------------------------------


def _centered_unit(images: np.ndarray) -> np.ndarray:
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(flat, axis=1, keepdims=True)
    return flat / np.where(norm > 0, norm, 1.0)


@dataclass
class TemplateOracle:
    """Per-class mean images; an image scores by normalized correlation with each."""

    class_names: list[str]
    templates: np.ndarray

    @classmethod
    def fit(cls, images, labels, class_names) -> "TemplateOracle":
        images, labels = np.asarray(images, dtype=np.float64), np.asarray(labels)
        missing = [c for k, c in enumerate(class_names) if not np.any(labels == k)]
        if missing:
            raise ValueError(f"no images for classes {missing}")
        return cls(list(class_names), np.stack([images[labels == k].mean(axis=0) for k in range(len(class_names))]))

    def scores(self, images) -> np.ndarray:
        """(N, n_classes) normalized correlations in [-1, 1]."""
        return _centered_unit(images) @ _centered_unit(self.templates).T

    def classifier(self, class_name: str) -> Callable[[np.ndarray], np.ndarray]:
        """Binary classifier: informative when ``class_name``'s template correlates best."""
        k = self.class_names.index(class_name)
        return lambda images: (np.argmax(self.scores(images), axis=1) == k).astype(np.int64)


def crossmodal_statistic(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro average over classes c of mean score_c(own-class translations) - mean score_c(others)."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    diffs = []
    for k in range(scores.shape[1]):
        own, other = labels == k, labels != k
        if not own.any() or not other.any():
            raise ValueError("every class needs both own-class and other-class sounds")
        diffs.append(scores[own, k].mean() - scores[other, k].mean())
    return float(np.mean(diffs))


def permutation_test(scores, labels, n_permutations: int = 2000, seed: int = 0) -> tuple[float, float]:
    """One-sided test of ``crossmodal_statistic`` against shuffled sound labels.

    Returns ``(statistic, p)`` with ``p = (1 + #{perm >= observed}) / (1 + n)``.
    """
    observed = crossmodal_statistic(scores, labels)
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    hits = sum(crossmodal_statistic(scores, rng.permutation(labels)) >= observed for _ in range(n_permutations))
    return observed, (1 + hits) / (1 + n_permutations)


# -- informativity rate ---------------------------------------------------------


@dataclass
class RateReport:
    per_class: dict[str, float]
    counts: dict[str, tuple[int, int]]

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_class.values()))) if self.per_class else float("nan")


def translate(generator: Generator, encoder: AudioEncoder, spectrograms, seed: int = 0,
              dropout: bool = True, batch_size: int = 64) -> np.ndarray:
    """Images for a batch of spectrograms; deterministic given ``seed``."""
    specs = np.asarray(spectrograms, dtype=np.float32)
    x = encode_audio(encoder, specs)
    rng = RngState(seed)
    out = [generate_image(generator, x[i:i + batch_size], "eval", rng, dropout) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,) + generator.schema.image_shape, np.float32)


def rate_from_labels(predictions: Mapping[str, np.ndarray]) -> RateReport:
    per_class, counts = {}, {}
    for name, pred in predictions.items():
        pred = np.asarray(pred)
        hits = int(np.sum(pred == INFORMATIVE))
        counts[name] = (hits, len(pred))
        per_class[name] = hits / len(pred) if len(pred) else float("nan")
    return RateReport(per_class, counts)


def informativity_rate(generator: Generator, encoder: AudioEncoder, spectrograms, labels,
                       class_names: Sequence[str], classifiers: Mapping[str, object], seed: int = 0,
                       dropout: bool = True) -> RateReport:
    """Fraction of translations each class's classifier labels informative.

    ``classifiers`` values are :class:`InformativityClassifier` models or
    callables mapping images to 0/1 labels.
    """
    labels = np.asarray(labels)
    missing = [c for k, c in enumerate(class_names) if np.any(labels == k) and c not in classifiers]
    if missing:
        raise ValueError(f"no classifier for classes {missing}")
    images = translate(generator, encoder, spectrograms, seed, dropout)
    predictions = {}
    for k, name in enumerate(class_names):
        sel = labels == k
        if not sel.any():
            continue
        clf = classifiers[name]
        predictions[name] = predict(clf, images[sel]) if isinstance(clf, InformativityClassifier) else clf(images[sel])
    return rate_from_labels(predictions)


# -- epoch metrics ------------------------------------------------------------


def moving_average(values, w: int) -> np.ndarray:
    """Trailing mean over ``min(w, available)`` points."""
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v.copy()
    padded = np.concatenate([np.zeros(w - 1), v])
    sums = sliding_window_view(padded, w).sum(axis=1)
    counts = np.minimum(np.arange(1, v.size + 1), w)
    return sums / counts


def mask_epochs(d_update_epochs: Sequence[int], offsets: Sequence[int] = (1, 2)) -> set[int]:
    """Epochs (1-based) that fall ``offsets`` after a discriminator-update epoch."""
    return {e + o for e in d_update_epochs for o in offsets}


@dataclass
class MetricSeries:
    raw: np.ndarray
    window: int
    masked: np.ndarray
    values: np.ndarray
    smoothed: np.ndarray
    n_prior: int = 5
    range_average: float | None = None
    range: tuple[int, int] | None = None

    @property
    def max_smoothed(self) -> float:
        return float(np.max(self.smoothed))


def apply_mask(values, masked_epochs, n_prior: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Replace flagged epochs with the mean of the ``n_prior`` preceding unmasked epochs.

    Returns ``(values, flags)``.  A flagged epoch with no unmasked predecessor
    keeps its value; the flag still records it.
    """
    raw = np.asarray(values, dtype=np.float64)
    flags = np.zeros(raw.size, dtype=bool)
    for e in masked_epochs:
        if 1 <= e <= raw.size:
            flags[e - 1] = True
    out = raw.copy()
    clean = np.flatnonzero(~flags)
    for i in np.flatnonzero(flags):
        prior = clean[clean < i][-n_prior:]
        if prior.size:
            out[i] = raw[prior].mean()
    return out, flags


def epoch_metrics(series, w: int = 50, masked_epochs=(), n_prior: int = 5,
                  avg_range: tuple[int, int] | None = None) -> MetricSeries:
    """Mask, then smooth with a trailing ``w``-point average; optionally average epochs ``avg_range``."""
    raw = np.asarray(series, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("series is empty")
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    values, flags = apply_mask(raw, masked_epochs, n_prior)
    result = MetricSeries(raw, w, flags, values, moving_average(values, w), n_prior)
    if avg_range is not None:
        start, end = avg_range
        lo, hi = max(1, start), min(raw.size, end)
        if lo > hi:
            raise ValueError(f"range {avg_range} does not overlap epochs 1..{raw.size}")
        result.range = (lo, hi)
        result.range_average = float(values[lo - 1:hi].mean())
    return result


# -- reports --------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f")


def svg_line_plot(series: Mapping[str, Sequence[float]], title: str = "", xlabel: str = "epoch",
                  ylabel: str = "", width: int = 640, height: int = 360) -> str:
    """Self-contained SVG with one polyline per series; x is the 1-based index."""
    left, right, top, bottom = 60, 130, 30, 40
    pw, ph = width - left - right, height - top - bottom
    finite = [v for ys in series.values() for v in ys if math.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    n_max = max((len(ys) for ys in series.values()), default=1)

    def px(i):
        return left + (pw * i / (n_max - 1) if n_max > 1 else pw / 2)

    def py(v):
        return top + ph * (1 - (v - lo) / (hi - lo))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{_esc(title)}</text>',
             f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
             f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>',
             f'<text x="14" y="{top + ph / 2}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 14 {top + ph / 2})">{_esc(ylabel)}</text>',
             f'<text x="{left - 4}" y="{top + 4}" text-anchor="end" font-size="10">{hi:.3g}</text>',
             f'<text x="{left - 4}" y="{top + ph}" text-anchor="end" font-size="10">{lo:.3g}</text>',
             f'<text x="{left + pw}" y="{top + ph + 14}" text-anchor="end" font-size="10">{n_max}</text>']
    for k, (name, ys) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{px(i):.2f},{py(v if math.isfinite(v) else lo):.2f}" for i, v in enumerate(ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{left + pw + 8}" y="{top + 14 * (k + 1)}" font-size="11" fill="{color}">'
                     f'{_esc(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


SUMMARY_COLUMNS = ("f", "class", "general_avg", "max_ma50")


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


@dataclass
class Report:
    summary: list[tuple]
    files: list[Path] = field(default_factory=list)


def emit_report(out_dir, ledgers: Mapping[int, Sequence[Mapping]], rates: Mapping[int, Mapping[str, Sequence[float]]],
                w: int = 50, masked_epochs=(), avg_range: tuple[int, int] | None = None) -> Report:
    """Write per-dimension informativity and pixel-loss curves plus the summary table.

    ``ledgers`` maps f to per-epoch loss rows (with a ``pixel`` key); ``rates``
    maps f to per-class per-epoch informativity rates.
    """
    if not ledgers and not rates:
        raise ValueError("need at least one ledger")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = Report([])

    summary_rows, curve_rows = [], []
    for f in sorted(rates):
        curves = {}
        for cls in sorted(rates[f]):
            series = list(rates[f][cls])
            if not series:
                continue
            m = epoch_metrics(series, w, masked_epochs, avg_range=avg_range)
            general = m.range_average if m.range_average is not None else float(m.values.mean())
            summary_rows.append((f, cls, general, m.max_smoothed))
            curves[cls] = list(m.smoothed)
            curve_rows += [(f, cls, e + 1, float(m.raw[e]), int(m.masked[e]), float(m.smoothed[e]))
                           for e in range(m.raw.size)]
        if curves:
            path = out / f"informativity_f{f}.svg"
            path.write_text(svg_line_plot(curves, f"informativity, f={f} ({w}-epoch moving average)",
                                          ylabel="rate"))
            report.files.append(path)
    summary_columns = SUMMARY_COLUMNS if w == 50 else SUMMARY_COLUMNS[:3] + (f"max_ma{w}",)
    (out / "summary.csv").write_text(_csv(summary_columns, summary_rows))
    (out / "informativity.csv").write_text(_csv(("f", "class", "epoch", "rate", "masked", "ma"), curve_rows))
    report.files += [out / "summary.csv", out / "informativity.csv"]

    pixel_rows, pixel_curves = [], {}
    for f in sorted(ledgers):
        pix = [float(r["pixel"]) for r in ledgers[f] if r.get("pixel") not in (None, "")]
        if not pix:
            continue
        ma = moving_average(pix, w)
        pixel_curves[f"f={f}"] = list(ma)
        pixel_rows += [(f, e + 1, pix[e], float(ma[e])) for e in range(len(pix))]
    (out / "pixel_loss.csv").write_text(_csv(("f", "epoch", "pixel", "pixel_ma"), pixel_rows))
    report.files.append(out / "pixel_loss.csv")
    if pixel_curves:
        path = out / "pixel_loss.svg"
        path.write_text(svg_line_plot(pixel_curves, f"pixel loss ({w}-epoch moving average)", ylabel="loss"))
        report.files.append(path)
    report.summary = summary_rows
    return report
