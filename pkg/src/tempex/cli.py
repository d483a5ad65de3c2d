"""Command line driver.

Verbs: generate, train, explain, evaluate, run, report. `run` executes a
whole experiment (folds, explainers, metrics, charts); the other verbs
expose the individual pipeline stages for one-off work.

Configuration comes from an INI file (sections [dataset], [model],
[explainers.learned], [metrics], [run]); command line flags override file
keys, and the TEMPEX_SEED environment variable overrides the file seed
(an explicit --seed flag still wins).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys

import numpy as np

from . import data, experiment as xp, explainers as ex, metrics as mt, nets

SEED_ENV = "TEMPEX_SEED"


# ---------------------------------------------------------------------------
# config file handling

_INT_KEYS = {"n_series", "n_steps", "eval_samples", "epochs", "hidden",
             "iterations", "folds", "seed", "jobs", "chunk"}
_FLOAT_KEYS = {"lambda1", "lambda2", "lr", "mask_lr", "generator_lr"}


def _coerce(key, value):
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key == "fractions":
        return tuple(float(v) for v in value.split(","))
    return value


def read_config(path):
    """Flatten the INI file into {section: {key: coerced value}}."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for section in parser.sections():
        out[section] = {k: _coerce(k, v) for k, v in parser[section].items()}
    return out


def _resolve_seed(args, file_conf):
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        return int(env)
    return file_conf.get("run", {}).get("seed", 0)


# ---------------------------------------------------------------------------
# verbs


def cmd_generate(args):
    if args.experiment == xp.HMM:
        ds = data.generate_hmm(data.HmmConfig(
            n_series=args.n_series, n_steps=args.n_steps, seed=args.seed or 0))
    else:
        ds = data.generate_icu_like(args.n_series, n_steps=args.n_steps,
                                    seed=args.seed or 0)
    data.save_dataset(ds, args.out)
    print(f"wrote {args.out}: X {ds.X.shape}, y {ds.y.shape}")


def cmd_train(args):
    ds = data.load_dataset(args.data)
    seed = args.seed or 0
    model = nets.init_classifier(np.random.default_rng(seed),
                                 ds.X.shape[2], args.hidden,
                                 direction=args.direction,
                                 readout=args.readout)
    model, history = nets.train_classifier(
        ds, model, nets.TrainConfig(epochs=args.epochs, lr=args.lr,
                                    seed=seed))
    nets.save_classifier(model, args.out)
    print(f"wrote {args.out}: final loss {history[-1]:.4f}")


def cmd_explain(args):
    ds = data.load_dataset(args.data)
    model = nets.load_classifier(args.model).freeze()
    X = ds.X[: args.samples] if args.samples else ds.X
    seed = args.seed or 0
    if args.method == "learned":
        cfg = ex.ExplainerConfig(lambda1=args.lambda1, lambda2=args.lambda2,
                                 mode=args.mode, generator=args.generator,
                                 iterations=args.iterations, seed=seed)
        sal = ex.explain_learned(X, model, cfg)
    elif args.method == "dynamask":
        sal = ex.explain_dynamask(
            X, model, ex.DynamaskConfig(iterations=args.iterations))
    elif args.method == "occlusion":
        sal = ex.occlusion(X, model)
    elif args.method == "augmented_occlusion":
        sal = ex.augmented_occlusion(X, model, ds.X, seed=seed)
    elif args.method == "integrated_gradients":
        sal = ex.integrated_gradients(X, model, steps=args.steps)
    else:
        raise ValueError(f"unknown method {args.method!r}")
    ex.save_saliency_csv(sal, args.out)
    print(f"wrote {args.out}: scores for {X.shape[0]} samples")


def cmd_evaluate(args):
    ds = data.load_dataset(args.data)
    sal = ex.load_saliency_csv(args.saliency)
    n = sal.scores.shape[0]
    if ds.true_saliency is not None:
        rep = mt.ground_truth_report(sal.scores, ds.true_saliency[:n])
        print(f"aup {rep.aup:.4f}  aur {rep.aur:.4f}  "
              f"information {rep.information:.2f}  entropy {rep.entropy:.2f}")
    if args.model:
        model = nets.load_classifier(args.model).freeze()
        sub = ds.subset(np.arange(n))
        rep = mt.masked_prediction_metrics(model, sub, sal.scores,
                                           args.fraction, args.substitution)
        print(f"fraction {rep.fraction:g} ({rep.substitution}): "
              f"acc {rep.accuracy:.4f}  ce {rep.cross_entropy:.4f}  "
              f"comp {rep.comprehensiveness:.4f}  "
              f"suff {rep.sufficiency:.4f}")
    elif ds.true_saliency is None:
        raise SystemExit("dataset has no ground truth; pass --model for "
                         "masked-prediction metrics")


def cmd_run(args):
    file_conf = read_config(args.config) if args.config else {}
    run_conf = file_conf.get("run", {})
    overrides = {}
    for section in ("dataset", "model", "metrics"):
        overrides.update(file_conf.get(section, {}))
    for section, keys in file_conf.items():
        if section.startswith("explainers."):
            overrides.update(keys)
    experiment = args.experiment or run_conf.get("experiment", xp.HMM)
    profile = args.profile or run_conf.get("profile", xp.FAST)
    out_dir = args.out or run_conf.get("out_dir") or \
        f"runs/{experiment}_{profile}"
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not args.force:
        raise SystemExit(f"output dir {out_dir!r} is not empty; "
                         "pass --force to overwrite")
    cfg = xp.ExperimentConfig(
        experiment=experiment,
        profile=profile,
        folds=args.folds if args.folds is not None
        else run_conf.get("folds", 5),
        seed=_resolve_seed(args, file_conf),
        out_dir=out_dir,
        jobs=args.jobs if args.jobs is not None else run_conf.get("jobs", 1),
        ablation=args.ablation,
        compare_generators=args.compare_generators,
        overrides=overrides,
    )
    os.makedirs(out_dir, exist_ok=True)
    _echo_config(cfg, os.path.join(out_dir, "config.ini"))
    try:
        path = xp.run_experiment(cfg)
    except xp.StageError as e:
        print(f"error in stage {e.stage!r}: {e.cause}", file=sys.stderr)
        print(f"partial results (if any) are under {out_dir}",
              file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


def _echo_config(cfg: xp.ExperimentConfig, path):
    parser = configparser.ConfigParser()
    settings = cfg.settings()
    parser["run"] = {
        "experiment": cfg.experiment, "profile": cfg.profile,
        "folds": str(cfg.folds), "seed": str(cfg.seed),
        "jobs": str(cfg.jobs), "out_dir": cfg.out_dir,
        "ablation": str(cfg.ablation or ""),
        "compare_generators": str(cfg.compare_generators),
    }
    parser["resolved"] = {k: str(v) for k, v in sorted(settings.items())}
    with open(path, "w") as fh:
        parser.write(fh)


def _load_aggregated(run_dir):
    for exp in xp.EXPERIMENTS:
        path = os.path.join(run_dir, f"{exp}_aggregated.csv")
        if os.path.exists(path):
            return exp, xp.load_results(path)
    expected = [f"{e}_aggregated.csv" for e in xp.EXPERIMENTS]
    raise SystemExit(f"no aggregated results in {run_dir!r}; expected one "
                     f"of: {', '.join(expected)}")


def _cell(rows, method, metric, frac=None, subst=None):
    for r in rows:
        if r["method"] == method and r["metric"] == metric and \
                (frac is None or r["fraction"] == frac) and \
                (subst is None or r["substitution"] == subst):
            return f"{r['mean']:.3f} ({r['std']:.3f})"
    return "-"


def _value(rows, method, metric, frac=None, subst=None):
    for r in rows:
        if r["method"] == method and r["metric"] == metric and \
                (frac is None or r["fraction"] == frac) and \
                (subst is None or r["substitution"] == subst):
            return r["mean"]
    return None


def _report_violations(exp, rows, methods):
    """Claim checks printed at the end of the report; each failed check
    emits one 'violation:' line."""
    out = []

    def check(cond, msg):
        if cond is not None and not cond:
            out.append(msg)

    if exp == xp.HMM and "learned_preservation" in methods:
        aup = _value(rows, "learned_preservation", "aup")
        aur = _value(rows, "learned_preservation", "aur")
        check(aup is None or aup >= 0.80,
              f"learned preservation aup {aup:.3f} < 0.80")
        check(aur is None or aur >= 0.70,
              f"learned preservation aur {aur:.3f} < 0.70")
        if "dynamask" in methods:
            for metric, sign in (("aup", 1), ("information", 1),
                                 ("entropy", -1)):
                a = _value(rows, "learned_preservation", metric)
                b = _value(rows, "dynamask", metric)
                check(sign * (a - b) > 0,
                      f"learned preservation does not beat dynamask on "
                      f"{metric} ({a:.3f} vs {b:.3f})")
            a = _value(rows, "learned_preservation", "aur")
            b = _value(rows, "dynamask", "aur")
            check(a >= b - 0.05,
                  f"learned preservation aur {a:.3f} more than 0.05 below "
                  f"dynamask {b:.3f}")
        if "learned_deletion" in methods:
            check(_value(rows, "learned_deletion", "aur")
                  > _value(rows, "learned_preservation", "aur"),
                  "deletion aur not above preservation aur")
            check(_value(rows, "learned_preservation", "aup")
                  - _value(rows, "learned_deletion", "aup") >= 0.3,
                  "deletion aup not >= 0.3 below preservation aup")
    if exp == xp.ICU and "learned_preservation" in methods:
        for subst in (mt.TIME_AVERAGE, mt.ZEROS):
            for other in ("occlusion", "augmented_occlusion",
                          "integrated_gradients"):
                if other not in methods:
                    continue
                for metric, sign in (("cross_entropy", 1),
                                     ("comprehensiveness", 1),
                                     ("sufficiency", -1), ("accuracy", -1)):
                    a = _value(rows, "learned_preservation", metric, 0.2,
                               subst)
                    b = _value(rows, other, metric, 0.2, subst)
                    if a is None or b is None:
                        continue
                    check(sign * (a - b) > 0,
                          f"{metric} not better than {other} ({subst})")
        first = _value(rows, "masking_curve", "positive_rate_mask_first",
                       0.25, mt.ZEROS)
        last = _value(rows, "masking_curve", "positive_rate_mask_last",
                      0.25, mt.ZEROS)
        if first is not None and last is not None:
            check((1.0 - last) >= 3.0 * (1.0 - first) and last < 1.0,
                  "masking the last T/4 does not reduce the positive rate "
                  "3x more than the first T/4")
    if out:
        print()
        for msg in out:
            print(f"violation: {msg}")
    return out


def cmd_report(args):
    exp, rows = _load_aggregated(args.dir)
    methods = sorted({r["method"] for r in rows if r["method"] !=
                      "masking_curve"})
    if exp == xp.HMM:
        metrics_ = ("aup", "aur", "information", "entropy")
        print(f"{'method':<34}" + "".join(f"{m:>18}" for m in metrics_))
        for method in methods:
            print(f"{method:<34}" + "".join(
                f"{_cell(rows, method, m):>18}" for m in metrics_))
        if {"learned_preservation", "learned_deletion"} <= set(methods):
            print("\ndeletion vs preservation:")
            for method in ("learned_preservation", "learned_deletion"):
                print(f"  {method:<22} aup "
                      f"{_cell(rows, method, 'aup')}   aur "
                      f"{_cell(rows, method, 'aur')}")
    else:
        metrics_ = ("accuracy", "cross_entropy", "comprehensiveness",
                    "sufficiency")
        for subst in (mt.TIME_AVERAGE, mt.ZEROS):
            print(f"\nsubstitution = {subst}, mask fraction = 0.2")
            print(f"{'method':<26}" + "".join(f"{m:>18}" for m in metrics_))
            for method in methods:
                print(f"{method:<26}" + "".join(
                    f"{_cell(rows, method, m, 0.2, subst):>18}"
                    for m in metrics_))
    _report_violations(exp, rows, set(methods))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(
        prog="tempex",
        description="learned-perturbation saliency for time series")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset archive")
    g.add_argument("--experiment", choices=xp.EXPERIMENTS, default=xp.HMM)
    g.add_argument("--out", required=True)
    g.add_argument("--n-series", type=int, default=200, dest="n_series")
    g.add_argument("--n-steps", type=int, default=100, dest="n_steps")
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a GRU classifier")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--hidden", type=int, default=32)
    t.add_argument("--direction", default=nets.FORWARD,
                   choices=(nets.FORWARD, nets.BACKWARD, nets.BIDIRECTIONAL))
    t.add_argument("--readout", default=nets.PER_TIMESTEP,
                   choices=(nets.PER_TIMESTEP, nets.FINAL_STEP))
    t.add_argument("--epochs", type=int, default=25)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("explain", help="run one explainer, write saliency CSV")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--method", default="learned",
                   choices=("learned", "dynamask", "occlusion",
                            "augmented_occlusion", "integrated_gradients"))
    e.add_argument("--out", required=True)
    e.add_argument("--samples", type=int, default=None,
                   help="explain only the first N samples")
    e.add_argument("--iterations", type=int, default=500)
    e.add_argument("--lambda1", type=float, default=1.0)
    e.add_argument("--lambda2", type=float, default=1.0)
    e.add_argument("--mode", default=ex.PRESERVATION,
                   choices=(ex.PRESERVATION, ex.DELETION))
    e.add_argument("--generator", default="bidirectional",
                   choices=("zero", "unidirectional", "bidirectional"))
    e.add_argument("--steps", type=int, default=128,
                   help="integration steps (integrated_gradients)")
    e.add_argument("--seed", type=int, default=None)
    e.set_defaults(func=cmd_explain)

    v = sub.add_parser("evaluate", help="score a saliency CSV")
    v.add_argument("--data", required=True)
    v.add_argument("--saliency", required=True)
    v.add_argument("--model", default=None)
    v.add_argument("--fraction", type=float, default=0.2)
    v.add_argument("--substitution", default=mt.TIME_AVERAGE,
                   choices=(mt.TIME_AVERAGE, mt.ZEROS))
    v.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("run", help="run a full experiment")
    r.add_argument("--experiment", choices=xp.EXPERIMENTS, default=None)
    r.add_argument("--profile", choices=(xp.FAST, xp.FULL), default=None)
    r.add_argument("--out", default=None)
    r.add_argument("--config", default=None, help="INI config file")
    r.add_argument("--folds", type=int, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--jobs", type=int, default=None)
    r.add_argument("--force", action="store_true")
    r.add_argument("--ablation", choices=("lambda",), default=None)
    r.add_argument("--compare-generators", action="store_true",
                   dest="compare_generators")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="print summary tables for a run")
    rep.add_argument("--dir", required=True)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
