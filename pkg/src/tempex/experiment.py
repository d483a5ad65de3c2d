"""Experiment harness: data -> classifier -> explainers -> metrics -> files.

A run produces, inside its output directory, a per-fold CSV
(`<experiment>_results.csv`, one row per method/metric/fold), an aggregated
CSV with mean and std over folds, trained classifier checkpoints, and SVG
line charts for the metrics that carry a mask-fraction axis.

Every fold re-seeds data generation and model training (seed + fold), so a
run is fully determined by its config. Learned explanations are optimized
in chunks of at most `chunk` samples to bound tape memory; rows are
independent, so chunking does not change any individual result beyond the
per-chunk generator init streams (which the chunk seed pins).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import data, explainers as ex, metrics as mt, nets
from .perturbation import BIDIRECTIONAL, UNIDIRECTIONAL, ZERO

HMM = "hmm"
ICU = "icu_like"
EXPERIMENTS = (HMM, ICU)

FAST = "fast"
FULL = "full"

LAMBDAS = (0.01, 0.1, 1.0, 10.0, 100.0)
FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
SUBSTITUTIONS = (mt.TIME_AVERAGE, mt.ZEROS)

CSV_HEADER = ["method", "metric", "fraction", "substitution", "mean",
              "std", "fold"]

# per (experiment, profile) sizing; everything is overridable via config
PROFILES = {
    (HMM, FAST): dict(n_series=200, n_steps=100, eval_samples=100,
                      iterations=100, epochs=20, hidden=32),
    (HMM, FULL): dict(n_series=1000, n_steps=200, eval_samples=200,
                      iterations=500, epochs=40, hidden=32),
    (ICU, FAST): dict(n_series=200, n_steps=48, eval_samples=100,
                      iterations=100, epochs=20, hidden=64),
    (ICU, FULL): dict(n_series=800, n_steps=48, eval_samples=150,
                      iterations=500, epochs=30, hidden=200),
}


class StageError(RuntimeError):
    """Failure inside a named pipeline stage; partial results stay on disk."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    experiment: str = HMM
    profile: str = FAST
    folds: int = 5
    seed: int = 0
    out_dir: str = "runs/out"
    jobs: int = 1
    ablation: str = None  # "lambda" for the 5x5 grid (HMM only)
    compare_generators: bool = False
    chunk: int = 250
    # scalar overrides for the PROFILES entry (n_series, epochs, ...)
    overrides: dict = field(default_factory=dict)

    def settings(self):
        key = (self.experiment, self.profile)
        if key not in PROFILES:
            raise ValueError(f"no profile {self.profile!r} for experiment "
                             f"{self.experiment!r}")
        s = dict(PROFILES[key])
        s.update(self.overrides)
        return s


def _stage(name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, etype, exc, tb):
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc
            return False

    return _Ctx()


# ---------------------------------------------------------------------------
# fold pipelines


def _explain_learned_chunked(X, model, config, chunk):
    parts = []
    for lo in range(0, X.shape[0], chunk):
        part = ex.explain_learned(
            X[lo:lo + chunk], model, replace(config, seed=config.seed + lo))
        parts.append(part.scores)
    return np.concatenate(parts, axis=0)


def _eval_scores(saliency_scores, mode):
    # in the deletion game the mask stays at 1 on unimportant cells and is
    # driven to 0 where removal destroys the prediction, so importance is 1-m
    if mode == ex.DELETION:
        return 1.0 - saliency_scores
    return saliency_scores


def _train_fold_classifier(ds, fold_seed, s, experiment):
    if experiment == HMM:
        model = nets.init_classifier(np.random.default_rng(fold_seed),
                                     ds.X.shape[2], s["hidden"])
    else:
        model = nets.init_classifier(np.random.default_rng(fold_seed),
                                     ds.X.shape[2], s["hidden"],
                                     readout=nets.FINAL_STEP)
    model, _ = nets.train_classifier(
        ds, model, nets.TrainConfig(epochs=s["epochs"], seed=fold_seed))
    return model.freeze()


def hmm_fold(cfg: ExperimentConfig, fold: int):
    """One HMM fold: rows of (method, metric, value) ground-truth metrics."""
    s = cfg.settings()
    fold_seed = cfg.seed + fold
    with _stage("generate"):
        ds = data.generate_hmm(data.HmmConfig(
            n_series=s["n_series"], n_steps=s["n_steps"], seed=fold_seed))
    with _stage("train"):
        model = _train_fold_classifier(ds, fold_seed, s, HMM)
    sub = ds.subset(np.arange(min(s["eval_samples"], ds.n_samples)))
    it = s["iterations"]
    rows = []

    def add_gt(method, scores):
        rep = mt.ground_truth_report(scores, sub.true_saliency)
        for metric in ("aup", "aur", "information", "entropy"):
            rows.append([method, metric, "", "", getattr(rep, metric), fold])

    if cfg.ablation == "lambda":
        for l1 in LAMBDAS:
            for l2 in LAMBDAS:
                name = f"learned_l1={l1:g}_l2={l2:g}"
                with _stage(f"explain:{name}"):
                    scores = _explain_learned_chunked(
                        sub.X, model,
                        ex.ExplainerConfig(lambda1=l1, lambda2=l2,
                                           iterations=it, seed=fold_seed),
                        cfg.chunk)
                add_gt(name, scores)
        return rows, model

    with _stage("explain:learned_preservation"):
        scores = _explain_learned_chunked(
            sub.X, model, ex.ExplainerConfig(iterations=it, seed=fold_seed),
            cfg.chunk)
        add_gt("learned_preservation", scores)
    with _stage("explain:learned_deletion"):
        scores = _explain_learned_chunked(
            sub.X, model,
            ex.ExplainerConfig(mode=ex.DELETION, iterations=it,
                               seed=fold_seed), cfg.chunk)
        add_gt("learned_deletion", _eval_scores(scores, ex.DELETION))
    with _stage("explain:dynamask"):
        out = ex.explain_dynamask(sub.X, model,
                                  ex.DynamaskConfig(iterations=it))
        add_gt("dynamask", out.scores)
    with _stage("explain:occlusion"):
        add_gt("occlusion", ex.occlusion(sub.X, model).scores)
    with _stage("explain:augmented_occlusion"):
        add_gt("augmented_occlusion",
               ex.augmented_occlusion(sub.X, model, ds.X,
                                      seed=fold_seed).scores)
    with _stage("explain:integrated_gradients"):
        add_gt("integrated_gradients",
               ex.integrated_gradients(sub.X, model, steps=128).scores)
    return rows, model


def icu_fold(cfg: ExperimentConfig, fold: int):
    """One ICU-like fold: masked-prediction metrics over fractions and
    substitutions, plus the front/back masking curve."""
    s = cfg.settings()
    fold_seed = cfg.seed + fold
    with _stage("generate"):
        ds = data.generate_icu_like(s["n_series"], n_steps=s["n_steps"],
                                    seed=fold_seed)
    with _stage("train"):
        model = _train_fold_classifier(ds, fold_seed, s, ICU)
    sub = ds.subset(np.arange(min(s["eval_samples"], ds.n_samples)))
    it = s["iterations"]

    saliencies = {}
    with _stage("explain:learned_preservation"):
        saliencies["learned_preservation"] = _explain_learned_chunked(
            sub.X, model, ex.ExplainerConfig(iterations=it, seed=fold_seed),
            cfg.chunk)
    if cfg.compare_generators:
        for name, kind in (("learned_gru", UNIDIRECTIONAL),
                           ("learned_zeros", ZERO)):
            with _stage(f"explain:{name}"):
                saliencies[name] = _explain_learned_chunked(
                    sub.X, model,
                    ex.ExplainerConfig(generator=kind, iterations=it,
                                       seed=fold_seed), cfg.chunk)
    with _stage("explain:occlusion"):
        saliencies["occlusion"] = ex.occlusion(sub.X, model).scores
    with _stage("explain:augmented_occlusion"):
        saliencies["augmented_occlusion"] = ex.augmented_occlusion(
            sub.X, model, ds.X, seed=fold_seed).scores
    with _stage("explain:integrated_gradients"):
        saliencies["integrated_gradients"] = ex.integrated_gradients(
            sub.X, model, steps=128).scores

    rows = []
    with _stage("metrics"):
        fractions = s.get("fractions", FRACTIONS)
        for method, scores in saliencies.items():
            for frac in fractions:
                for subst in SUBSTITUTIONS:
                    rep = mt.masked_prediction_metrics(model, sub, scores,
                                                       frac, subst)
                    for metric in ("accuracy", "cross_entropy",
                                   "comprehensiveness", "sufficiency"):
                        rows.append([method, metric, frac, subst,
                                     getattr(rep, metric), fold])
        T = sub.X.shape[1]
        curve = mt.positive_rate_masking_curve(model, sub,
                                               [0, T // 4, T // 2, T])
        for i, k in enumerate(curve["k"]):
            rows.append(["masking_curve", "positive_rate_mask_first",
                         k / T, mt.ZEROS, curve["mask_first"][i], fold])
            rows.append(["masking_curve", "positive_rate_mask_last",
                         k / T, mt.ZEROS, curve["mask_last"][i], fold])
    return rows, model


# ---------------------------------------------------------------------------
# run orchestration


def _fold_runner(args):
    cfg, fold = args
    fn = hmm_fold if cfg.experiment == HMM else icu_fold
    rows, model = fn(cfg, fold)
    return fold, rows, model


def _fmt(v):
    if v == "":
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _write_rows(path, rows, append=False):
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(CSV_HEADER)
        for method, metric, frac, subst, value, fold in rows:
            w.writerow([method, metric, _fmt(frac), subst, _fmt(value), "",
                        fold])


def load_results(path):
    """Rows of the results CSV as dicts with floats where applicable."""
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rec["mean"] = float(rec["mean"])
            rec["std"] = float(rec["std"]) if rec["std"] else None
            rec["fraction"] = float(rec["fraction"]) if rec["fraction"] \
                else None
            out.append(rec)
    return out


def aggregate(rows):
    """Group per-fold rows by (method, metric, fraction, substitution) and
    reduce to mean and sample std over folds."""
    groups = {}
    for method, metric, frac, subst, value, _fold in rows:
        groups.setdefault((method, metric, frac, subst), []).append(value)
    agg = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        vals = np.asarray(groups[key], dtype=np.float64)
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        agg.append(list(key) + [float(vals.mean()), std])
    return agg


def _write_aggregated(path, agg):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for method, metric, frac, subst, mean, std in agg:
            w.writerow([method, metric, _fmt(frac), subst, _fmt(mean),
                        _fmt(std), "all"])


def run_experiment(cfg: ExperimentConfig):
    """Execute all folds and write results, aggregates and charts.

    Returns the path of the per-fold results CSV. Raises StageError with
    the failing stage name; rows from completed folds are already on disk.
    """
    if cfg.experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {cfg.experiment!r}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    os.makedirs(os.path.join(cfg.out_dir, "models"), exist_ok=True)
    results_path = os.path.join(cfg.out_dir, f"{cfg.experiment}_results.csv")

    all_rows = []
    tasks = [(cfg, f) for f in range(cfg.folds)]
    if cfg.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            done = sorted(pool.map(_fold_runner, tasks))
    else:
        done = []
        for task in tasks:
            fold, rows, model = _fold_runner(task)
            # flush after every fold so a later failure keeps earlier folds
            _write_rows(results_path, rows, append=fold > 0)
            nets.save_classifier(model, os.path.join(
                cfg.out_dir, "models", f"fold{fold}.json"))
            all_rows.extend(rows)
            done.append((fold, rows, model))
    if cfg.jobs > 1:
        all_rows = [r for _fold, rows, _m in done for r in rows]
        _write_rows(results_path, all_rows)
        for fold, _rows, model in done:
            nets.save_classifier(model, os.path.join(
                cfg.out_dir, "models", f"fold{fold}.json"))

    with _stage("aggregate"):
        agg = aggregate(all_rows)
        _write_aggregated(
            os.path.join(cfg.out_dir, f"{cfg.experiment}_aggregated.csv"),
            agg)
    with _stage("charts"):
        write_charts(cfg.out_dir, cfg.experiment, agg)
    return results_path


# ---------------------------------------------------------------------------
# SVG line charts (no plotting dependency; fixed palette, one polyline per
# method, metric on y, mask fraction on x)

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f")


def write_svg_chart(path, title, series, xlabel="mask fraction"):
    """series: {label: (xs, ys)}; writes a self-contained SVG line chart."""
    W, H = 640, 400
    ml, mr, mt_, mb = 60, 160, 40, 50
    pw, ph = W - ml - mr, H - mt_ - mb
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt_ + (1.0 - (y - y0) / (y1 - y0)) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{ml}" y="24" font-size="14" font-family="sans-serif">'
        f'{title}</text>',
        f'<line x1="{ml}" y1="{mt_ + ph}" x2="{ml + pw}" y2="{mt_ + ph}" '
        'stroke="black"/>',
        f'<line x1="{ml}" y1="{mt_}" x2="{ml}" y2="{mt_ + ph}" '
        'stroke="black"/>',
        f'<text x="{ml + pw / 2:.0f}" y="{H - 12}" font-size="12" '
        f'font-family="sans-serif" text-anchor="middle">{xlabel}</text>',
    ]
    for frac_pos in (0.0, 0.5, 1.0):
        xv = x0 + frac_pos * (x1 - x0)
        yv = y0 + frac_pos * (y1 - y0)
        parts.append(
            f'<text x="{sx(xv):.1f}" y="{mt_ + ph + 18}" font-size="10" '
            f'font-family="sans-serif" text-anchor="middle">{xv:.3g}</text>')
        parts.append(
            f'<text x="{ml - 6}" y="{sy(yv) + 4:.1f}" font-size="10" '
            f'font-family="sans-serif" text-anchor="end">{yv:.3g}</text>')
    for i, (label, (xs, ys)) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        ly = mt_ + 14 + 16 * i
        parts.append(f'<line x1="{ml + pw + 8}" y1="{ly - 4}" '
                     f'x2="{ml + pw + 28}" y2="{ly - 4}" stroke="{color}" '
                     'stroke-width="1.5"/>')
        parts.append(f'<text x="{ml + pw + 32}" y="{ly}" font-size="10" '
                     f'font-family="sans-serif">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def write_charts(out_dir, experiment, agg):
    """One chart per metric that has a fraction axis, lines per method."""
    by_metric = {}
    for method, metric, frac, subst, mean, _std in agg:
        if frac == "" or frac is None:
            continue
        key = (metric, subst)
        by_metric.setdefault(key, {}).setdefault(method, []).append(
            (float(frac), mean))
    for (metric, subst), methods in by_metric.items():
        series = {}
        for method, pts in methods.items():
            pts = sorted(pts)
            series[method] = ([p[0] for p in pts], [p[1] for p in pts])
        name = f"{experiment}_{metric}_{subst}.svg" if subst else \
            f"{experiment}_{metric}.svg"
        write_svg_chart(os.path.join(out_dir, name),
                        f"{metric} vs mask fraction ({subst})", series)
