"""AUC, stratified k-fold cross-validation, T sweeps and summary reports."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .architectures import ModelSpec, build_model, count_params, score_clips
from .errors import ConfigError, MetricError
from .training import TrainConfig, train

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["architecture", "input_mode", "params", "best_T", "auc", "fold_aucs"]
SWEEP_COLUMNS = ["architecture", "input_mode", "T", "fold", "auc", "frame_auc"]


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly.

    Tied pairs count one half. Label 1 is the positive (risky) class.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise MetricError(f"{len(scores)} scores for {len(labels)} labels")
    pos = scores[labels == 1]
    neg = np.sort(scores[labels == 0])
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUC needs both positive and negative labels")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    # doubled counts stay integral, so the sum is exact
    u2 = int(np.sum(2 * below + (upto - below)))
    return u2 / (2.0 * len(pos) * len(neg))


def kfold_split(clip_ids, labels, k=10, seed=0) -> list[list]:
    """Stratified folds: shuffle each class, then deal clips round-robin.

    Positives are dealt first and negatives continue the rotation, so fold
    sizes and per-fold positive counts each differ by at most one.
    """
    clip_ids = list(clip_ids)
    labels = np.asarray(labels).astype(int)
    n = len(clip_ids)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if n < k:
        raise ConfigError(f"{n} clips cannot fill {k} folds")
    n_pos = int(labels.sum())
    if n_pos < k:
        raise ConfigError(
            f"only {n_pos} positive clips for {k} folds; use k <= {max(n_pos, 1)}"
        )
    rng = np.random.default_rng(seed)
    order = []
    for cls in (1, 0):
        idx = np.flatnonzero(labels == cls)
        order.extend(idx[rng.permutation(len(idx))].tolist())
    folds = [[] for _ in range(k)]
    for i, j in enumerate(order):
        folds[i % k].append(clip_ids[j])
    return [sorted(f) for f in folds]


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class FoldResult:
    T: int
    fold: int
    auc: float
    frame_auc: float | None = None


@dataclass
class ReportRow:
    architecture: str
    input_mode: str
    params: int
    best_T: int
    auc: float
    fold_aucs: list[float]
    folds: list[FoldResult] = field(default_factory=list)

    def mean_auc(self, T) -> float:
        vals = [f.auc for f in self.folds if f.T == T]
        return float(np.mean(vals))


class ModelScorer:
    """Default fit result: a trained model scoring whole clips."""

    def __init__(self, model):
        self.model = model

    def __call__(self, samples):
        return score_clips(self.model, np.stack([s.x for s in samples]))

    def frame_scores(self, samples):
        if not self.model.frame_level:
            return None
        x = np.stack([s.x for s in samples])
        frames = x.reshape(-1, *x.shape[2:])
        return self.model.predict_proba(frames, 256)[:, 1]


def fit_model(spec: ModelSpec, samples, config: TrainConfig):
    model = build_model(spec, seed=config.seed)
    train(model, samples, config)
    return ModelScorer(model)


def _run_fold(spec, train_samples, test_samples, config, fit, T, fold):
    scorer = fit(spec, train_samples, config)
    labels = np.array([int(s.y[1]) for s in test_samples])
    fold_auc = auc(scorer(test_samples), labels)
    frame_auc = None
    frame_scores = getattr(scorer, "frame_scores", None)
    if frame_scores is not None:
        fs = frame_scores(test_samples)
        if fs is not None:
            reps = len(fs) // len(test_samples)
            frame_auc = auc(fs, np.repeat(labels, reps))
    log.info("%s T=%d fold %d: AUC %.4f", spec.name, T, fold, fold_auc)
    return FoldResult(T, fold, fold_auc, frame_auc)


def cross_validate(
    spec: ModelSpec,
    dataset,
    k=10,
    t_sweep=(5, 10, 15, 20, 50, 100),
    config: TrainConfig | None = None,
    fit=None,
    jobs=1,
    alpha=0.7,
) -> ReportRow:
    """k-fold CV for every ``T`` in ``t_sweep``; the best mean AUC wins.

    ``dataset`` needs ``clip_ids``, ``labels`` (with ``is_risky``) and
    ``samples(T, input_mode, resolution, alpha)``. ``fit(spec, samples,
    config)`` must return a callable scoring a list of samples; it defaults
    to training a freshly initialised model of ``spec``.
    """
    config = config or TrainConfig()
    fit = fit or fit_model
    t_sweep = sorted(set(int(t) for t in t_sweep))
    if not t_sweep:
        raise ConfigError("empty T sweep")
    ids = list(dataset.clip_ids)
    risky = dataset.labels.as_dict()
    folds = kfold_split(ids, [risky[c] for c in ids], k, config.seed)

    jobs_spec = []
    for T in t_sweep:
        tspec = spec.with_T(T)
        by_id = {s.clip_id: s for s in dataset.samples(T, spec.input_mode, spec.resolution, alpha)}
        for f, held_out in enumerate(folds):
            held = set(held_out)
            train_s = [by_id[c] for c in ids if c not in held]
            test_s = [by_id[c] for c in held_out]
            cfg = replace(config, seed=derive_seed(config.seed, T, f))
            jobs_spec.append((tspec, train_s, test_s, cfg, fit, T, f))

    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_fold, *zip(*jobs_spec)))
    else:
        results = [_run_fold(*args) for args in jobs_spec]
    results.sort(key=lambda r: (r.T, r.fold))

    means = {T: float(np.mean([r.auc for r in results if r.T == T])) for T in t_sweep}
    best_T = max(t_sweep, key=lambda T: (means[T], -T))
    params = count_params(build_model(spec.with_T(best_T), seed=0))
    return ReportRow(
        architecture=spec.name,
        input_mode=spec.input_mode,
        params=params,
        best_T=best_T,
        auc=means[best_T],
        fold_aucs=[r.auc for r in results if r.T == best_T],
        folds=results,
    )


# -- reporting ----------------------------------------------------------------


def _sorted_rows(rows):
    return sorted(rows, key=lambda r: (r.auc, r.architecture, r.input_mode))


def render_report(rows) -> str:
    """Fixed-width table, rows ordered by AUC ascending (best last)."""
    header = ["Architecture", "Input mode", "#Params (M)", "Best T", "AUC"]
    body = [
        [r.architecture, r.input_mode, f"{r.params / 1e6:.3f}", str(r.best_T), f"{r.auc:.3f}"]
        for r in _sorted_rows(rows)
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    fmt = lambda row: "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
    lines = [fmt(header), "  ".join("-" * w for w in widths)]
    lines.extend(fmt(row) for row in body)
    return "\n".join(lines) + "\n"


def report_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in _sorted_rows(rows):
        writer.writerow(
            [
                r.architecture,
                r.input_mode,
                r.params,
                r.best_T,
                repr(float(r.auc)),
                ";".join(repr(float(a)) for a in r.fold_aucs),
            ]
        )
    return buf.getvalue()


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        for f in r.folds:
            writer.writerow(
                [
                    r.architecture,
                    r.input_mode,
                    f.T,
                    f.fold,
                    repr(float(f.auc)),
                    "" if f.frame_auc is None else repr(float(f.frame_auc)),
                ]
            )
    return buf.getvalue()


def read_report_csv(path) -> list[ReportRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_COLUMNS:
            raise ConfigError(f"{path}: not a report CSV (columns {reader.fieldnames})")
        for rec in reader:
            folds = [float(a) for a in rec["fold_aucs"].split(";") if a]
            rows.append(
                ReportRow(
                    rec["architecture"],
                    rec["input_mode"],
                    int(rec["params"]),
                    int(rec["best_T"]),
                    float(rec["auc"]),
                    folds,
                )
            )
    return rows
