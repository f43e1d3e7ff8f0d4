"""Correlation metrics, benchmark reports and the input-routing ablation harness."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, FormatError, IQTError, MetricError
from .io import decode_image
from .model import IQTModel, Routing
from .pipeline import score_pair, train

log = logging.getLogger(__name__)

REPORT_HEADER = ["config_id", "srcc", "krcc", "plcc", "main_score", "n"]


# --- metrics ---------------------------------------------------------------


def _validate(x, y, min_len):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise MetricError(f"inputs must be equal-length 1-D lists, got {x.shape} and {y.shape}")
    if x.size < min_len:
        raise MetricError(f"need at least {min_len} samples, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise MetricError("inputs contain NaN or Inf")
    return x, y


def rankdata(x):
    """Fractional ranks starting at 1; ties share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    start = 0
    for end in range(1, x.size + 1):
        if end == x.size or sorted_x[end] != sorted_x[start]:
            ranks[order[start:end]] = (start + 1 + end) / 2.0
            start = end
    return ranks


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise MetricError("correlation is undefined for constant input")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def srcc(x, y):
    """Spearman rank correlation: Pearson correlation of average-tie ranks."""
    x, y = _validate(x, y, 3)
    return pearson(rankdata(x), rankdata(y))


def krcc(x, y):
    """Kendall tau-b."""
    x, y = _validate(x, y, 3)
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(x.size, k=1)
    sx, sy = sx[iu], sy[iu]
    s = int(np.sum(sx * sy))  # concordant - discordant
    n0 = sx.size
    tx = int(np.count_nonzero(sx == 0))
    ty = int(np.count_nonzero(sy == 0))
    denom = (n0 - tx) * (n0 - ty)
    if denom == 0:
        raise MetricError("Kendall tau-b is undefined for constant input")
    return min(1.0, max(-1.0, s / math.sqrt(denom)))


def poly3_fit(pred, mos):
    """Least-squares cubic mapping pred -> mos; returns fitted values.

    ``pred`` is centred and scaled before building the Vandermonde matrix.
    """
    pred = np.asarray(pred, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    scale = pred.std()
    if scale == 0.0:
        raise MetricError("cannot fit a polynomial to constant predictions")
    t = (pred - pred.mean()) / scale
    design = np.vander(t, 4, increasing=True)
    coef, *_ = np.linalg.lstsq(design, mos, rcond=None)
    return design @ coef


def plcc_poly3(pred, mos):
    """Pearson correlation after a third-order polynomial regression of MOS on predictions."""
    pred, mos = _validate(pred, mos, 5)
    fitted = poly3_fit(pred, mos)
    if np.ptp(fitted) == 0.0:
        raise MetricError("polynomial fit is constant")
    return pearson(fitted, mos)


@dataclass(frozen=True)
class CorrelationReport:
    srcc: float
    krcc: float
    plcc: float
    n_samples: int
    config_id: str = "model"

    @property
    def main_score(self):
        return self.plcc + self.srcc

    def row(self):
        return [self.config_id, repr(self.srcc), repr(self.krcc), repr(self.plcc), repr(self.main_score),
                str(self.n_samples)]


def correlation_report(pred, mos, config_id="model"):
    return CorrelationReport(srcc(pred, mos), krcc(pred, mos), plcc_poly3(pred, mos), len(pred), config_id)


def write_report_csv(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for rep in reports:
            w.writerow(rep.row() if isinstance(rep, CorrelationReport) else rep)


def read_report_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != REPORT_HEADER:
            raise FormatError(f"report header must be {','.join(REPORT_HEADER)}", offset=1, path=path, unit="line")
        return [dict(zip(REPORT_HEADER, row)) for row in reader]


def write_predictions_csv(path, entries, preds):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ref_path", "dist_path", "mos", "prediction"])
        for e, p in zip(entries, preds):
            w.writerow([str(e.ref_path), str(e.dist_path), repr(e.mos), repr(p)])


# --- evaluation ------------------------------------------------------------


def model_scorer(model):
    """Adapter so an IQTModel can be used where ``scorer(ref, dist) -> float`` is expected."""
    if model.config.backbone.kind == "feature-file":
        return lambda ref, dist: model.score_features(ref, dist)
    return lambda ref, dist: score_pair(ref, dist, model)


def evaluate(entries, model, config_id="model", loader=decode_image):
    """Score every manifest row and correlate with MOS.

    ``model`` is an IQTModel or any ``scorer(ref, dist) -> float``. Rows that
    fail to load or score are skipped with a warning; fewer than five usable
    rows is an error. Returns ``(report, used_entries, predictions)``.
    """
    scorer = model_scorer(model) if isinstance(model, IQTModel) else model
    if isinstance(model, IQTModel) and model.config.backbone.kind == "feature-file":
        from .backbone import load_feature_file

        loader = load_feature_file
    used, preds = [], []
    for e in entries:
        try:
            preds.append(float(scorer(loader(e.ref_path), loader(e.dist_path))))
        except (OSError, IQTError) as exc:
            warnings.warn(f"skipping {e.dist_path}: {exc}", stacklevel=2)
            continue
        used.append(e)
    if len(used) < 5:
        raise MetricError(f"only {len(used)} usable rows; at least 5 are needed")
    report = correlation_report(preds, [e.mos for e in used], config_id)
    return report, used, preds


# --- ablation --------------------------------------------------------------


@dataclass(frozen=True)
class AblationConfig:
    id: str
    encoder_stream: str
    decoder_stream: str
    diff_level: str = "feature"

    @property
    def routing(self):
        return Routing(self.encoder_stream, self.decoder_stream, self.diff_level)


# Rows (1)-(8) of the input-routing table, then the RGB-difference variant of (7).
ABLATION_CONFIGS = (
    AblationConfig("1", "dist", "dist"),
    AblationConfig("2", "dist", "ref"),
    AblationConfig("3", "ref", "dist"),
    AblationConfig("4", "dist", "diff"),
    AblationConfig("5", "ref", "diff"),
    AblationConfig("6", "diff", "dist"),
    AblationConfig("7", "diff", "ref"),
    AblationConfig("8", "diff", "diff"),
    AblationConfig("7-image", "diff", "ref", "image"),
)
SELECTED_CONFIG = "7"


def probe_routing(model_config, ablation, size=None, seed=0):
    """Check which stream reaches which stack, using marker features and images.

    Feature probe: ``ref``/``dist`` maps filled with distinct constants (so
    ``diff`` is a third constant) are routed and identified by value. Image
    probe: a random pair is run through ``streams`` and the diff stream is
    compared against both candidate constructions (feature-level subtraction
    versus backbone of the RGB difference). Returns a dict describing what was
    observed and raises ConfigError on any mismatch.
    """
    from .backbone import FeatureMap, normalize_image

    cfg = replace(model_config, routing=ablation.routing)
    model = IQTModel(cfg, seed=seed)
    h, w = cfg.grid
    c = cfg.backbone.total_channels
    markers = {"ref": 3.0, "dist": 1.0}
    markers["diff"] = markers["ref"] - markers["dist"]
    streams = {k: FeatureMap(np.full((h, w, c), v, dtype=np.float32), cfg.backbone.stages)
               for k, v in markers.items()}
    streams["diff"] = FeatureMap(streams["ref"].values - streams["dist"].values, cfg.backbone.stages)
    enc, dec = model.route(streams)
    lookup = {v: k for k, v in markers.items()}
    observed = {"encoder": lookup[float(enc.values.flat[0])], "decoder": lookup[float(dec.values.flat[0])]}

    observed["diff_level"] = None
    if cfg.backbone.kind == "toy-cnn":
        rng = np.random.default_rng(seed)
        size = size or cfg.patch_size
        ref = rng.random((size, size, 3))
        dist = rng.random((size, size, 3))
        got = model.streams(ref, dist)["diff"].values
        feat = model.backbone(normalize_image(ref)).values - model.backbone(normalize_image(dist)).values
        img = model.backbone(normalize_image(ref) - normalize_image(dist)).values
        if np.array_equal(got, feat) and not np.array_equal(got, img):
            observed["diff_level"] = "feature"
        elif np.array_equal(got, img) and not np.array_equal(got, feat):
            observed["diff_level"] = "image"
    expected = {"encoder": ablation.encoder_stream, "decoder": ablation.decoder_stream,
                "diff_level": ablation.diff_level if observed["diff_level"] is not None else None}
    if observed != expected:
        raise ConfigError(f"config {ablation.id}: routing probe saw {observed}, expected {expected}")
    return observed


@dataclass
class AblationRow:
    config: AblationConfig
    report: CorrelationReport | None = None
    error: str | None = None

    @property
    def failed(self):
        return self.report is None


def run_ablation(train_entries, eval_entries, base_config, train_cfg, probe_only=False, configs=ABLATION_CONFIGS):
    """Probe, train and evaluate every routing config under identical seeds and budgets."""
    rows = []
    for ab in configs:
        try:
            probe_routing(base_config, ab, seed=train_cfg.seed)
            if probe_only:
                rows.append(AblationRow(ab))
                continue
            cfg = replace(base_config, routing=ab.routing)
            ckpt = train(train_entries, train_cfg, cfg)
            report, _, _ = evaluate(eval_entries, ckpt.model(), config_id=ab.id)
            rows.append(AblationRow(ab, report))
        except (IQTError, OSError, ValueError) as exc:
            log.warning("ablation config %s failed: %s", ab.id, exc)
            rows.append(AblationRow(ab, error=str(exc)))
    return rows


def ablation_csv_rows(rows):
    out = []
    for r in rows:
        if r.report is not None:
            out.append(r.report.row())
        else:
            out.append([r.config.id, "nan", "nan", "nan", "nan", "0"])
    return out


def format_ablation_table(rows):
    """Plain-text table: encoder/decoder check marks per stream, then the metrics."""
    streams = ("dist", "ref", "diff")
    head1 = f"{'No.':<9}| {'Encoder':^20} | {'Decoder':^20} | {'Diff':^7} | {'SRCC':>7} {'KRCC':>7} {'PLCC':>7} {'Main':>7}"
    head2 = f"{'':<9}| " + " ".join(f"{s:^6}" for s in streams) + " | " + " ".join(f"{s:^6}" for s in streams)
    head2 += f" | {'level':^7} |"
    lines = [head1, head2, "-" * len(head1)]
    for r in rows:
        ab = r.config
        enc = " ".join(f"{'x' if s == ab.encoder_stream else '':^6}" for s in streams)
        dec = " ".join(f"{'x' if s == ab.decoder_stream else '':^6}" for s in streams)
        if r.report is not None:
            rep = r.report
            metrics = f"{rep.srcc:7.4f} {rep.krcc:7.4f} {rep.plcc:7.4f} {rep.main_score:7.4f}"
        elif r.error is None:
            metrics = f"{'probe ok':>31}"
        else:
            metrics = f"{'failed':>31}"
        lines.append(f"{'(' + ab.id + ')':<9}| {enc} | {dec} | {ab.diff_level:^7} | {metrics}")
    return "\n".join(lines) + "\n"


def format_report(report):
    return (f"n={report.n_samples}  SRCC={report.srcc:.4f}  KRCC={report.krcc:.4f}  "
            f"PLCC={report.plcc:.4f}  main={report.main_score:.4f}\n")
