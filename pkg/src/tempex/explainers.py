"""Attribution methods.

The learned-perturbation explainer jointly optimizes a per-sample mask and
a per-sample perturbation generator against a frozen classifier:

    preservation:  l1 * mean(m) + l2 * mean(|nn(x)|) + CE(f(x), f(phi))
    deletion:      l1 * mean(1 - m) + l2 * mean(|nn(x)|) + CE(f(0), f(phi))

Baselines: a fixed-perturbation mask explainer with the sorted-mask area
regularizer, Occlusion, Augmented Occlusion, and Integrated Gradients.
Mask methods emit the mask itself as the saliency map; gradient and
occlusion scores are min-max normalized into [0, 1] per sample.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Tensor
from .nets import ClassifierParams, classifier_forward, predict_proba, \
    target_score
from .perturbation import (
    BIDIRECTIONAL,
    FixedPerturbationConfig,
    Mask,
    PerturbationGenerator,
    ZERO,
    apply_fixed,
    apply_learned,
)

PRESERVATION = "preservation"
DELETION = "deletion"


class FrozenModelError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class ExplainerConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    mode: str = PRESERVATION
    generator: str = BIDIRECTIONAL
    generator_hidden: int = 32
    mask_lr: float = 0.01
    generator_lr: float = 0.001
    iterations: int = 500
    early_stop_tol: float = 1e-6
    early_stop_patience: int = 10
    target: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be >= 0")
        if self.mode not in (PRESERVATION, DELETION):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class DynamaskConfig:
    perturbation: FixedPerturbationConfig = field(
        default_factory=FixedPerturbationConfig)
    area: float = 0.1
    reg_weight: float = 1.0
    lr: float = 0.01
    iterations: int = 500
    early_stop_tol: float = 1e-6
    early_stop_patience: int = 10
    target: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.area <= 1:
            raise ValueError("area must be in (0, 1]")


@dataclass
class SaliencyMap:
    scores: np.ndarray  # (N, T, n) in [0, 1]
    method: str
    metadata: dict = field(default_factory=dict)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ad.ShapeError(f"expected (T, n) or (B, T, n) input, got {x.shape}")


def _check_frozen(classifier: ClassifierParams):
    if any(t.requires_grad for t in classifier.tensors()):
        raise FrozenModelError(
            "classifier must be frozen before explanation (call .freeze())"
        )


def _reference_probs(X, classifier, mode, target):
    if mode == PRESERVATION:
        p = predict_proba(X, classifier)
    else:
        zero = np.zeros((1,) + X.shape[1:])
        p0 = predict_proba(zero, classifier)
        p = np.broadcast_to(p0, (X.shape[0],) + p0.shape[1:]).copy()
    return p if target == 1 else 1.0 - p


def _per_sample_ce(logits, ref_probs):
    ce = ad.cross_entropy_with_logits(logits, Tensor(ref_probs))
    if ce.ndim == 2:
        return ad.tmean(ce, axis=1)
    return ce


def _stall_update(vals, best, stall, tol):
    """Per-row early-stop bookkeeping: a row improves when its loss drops
    at least tol below its best so far; otherwise its stall counter grows.
    Mutates best/stall in place."""
    improved = vals < best - tol
    stall[improved] = 0
    stall[~improved] += 1
    np.minimum(best, vals, out=best)


def _minmax_per_sample(raw):
    lo = raw.min(axis=(1, 2), keepdims=True)
    hi = raw.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    out = np.zeros_like(raw)
    ok = (span > 0).ravel()
    out[ok] = (raw[ok] - lo[ok]) / span[ok]
    return out


def explain_learned(x, classifier: ClassifierParams,
                    config: ExplainerConfig = None,
                    sample_seeds=None) -> SaliencyMap:
    """Optimize mask + generator for each sample (jointly as a batch; rows
    are independent, and a sample freezes once its loss stops improving).

    sample_seeds optionally pins the per-row generator init streams so a
    single-sample run can reproduce one row of a batched run.
    """
    config = config or ExplainerConfig()
    X, single = _as_batch(x)
    _check_frozen(classifier)
    snap = classifier.snapshot()
    B, T, n = X.shape
    if sample_seeds is None:
        sample_seeds = np.random.SeedSequence(config.seed).spawn(B)
    ref = _reference_probs(X, classifier, config.mode, config.target)
    mask = Mask(B, T, n, init=0.5)
    gen = PerturbationGenerator(config.generator, B, n,
                                hidden=config.generator_hidden,
                                seed=config.seed, row_seeds=sample_seeds)
    opt_mask = ad.Adam([mask.values], lr=config.mask_lr)
    opt_gen = ad.Adam(gen.parameters(), lr=config.generator_lr) \
        if gen.parameters() else None
    active = np.ones(B, dtype=bool)
    best = np.full(B, np.inf)
    stall = np.zeros(B, dtype=np.int64)
    history = np.empty((config.iterations, B))
    x_tensor = Tensor(X)
    iterations_run = 0
    final_terms = {}
    for it in range(config.iterations):
        with ad.Tape():
            phi, nn_x = apply_learned(x_tensor, mask.values, gen)
            logits = classifier_forward(phi, classifier)
            if config.target == 0:
                logits = ad.neg(logits)
            ce_b = _per_sample_ce(logits, ref)
            m_flat = ad.reshape(mask.values, (B, T * n))
            if config.mode == PRESERVATION:
                m_term = ad.tmean(m_flat, axis=1)
            else:
                m_term = ad.tmean(ad.sub(1.0, m_flat), axis=1)
            nn_term = ad.tmean(
                ad.reshape(ad.tabs(nn_x), (B, T * n)), axis=1)
            loss_b = ad.add(
                ad.add(ad.mul(m_term, config.lambda1),
                       ad.mul(nn_term, config.lambda2)), ce_b)
            loss = ad.tsum(loss_b)
            vals = loss_b.data.copy()
            if not np.all(np.isfinite(vals)):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            loss.backward()
        history[it] = vals
        opt_mask.step(active=active)
        if opt_gen is not None:
            opt_gen.step(active=active)
        mask.project()
        opt_mask.zero_grad()
        if opt_gen is not None:
            opt_gen.zero_grad()
        iterations_run = it + 1
        final_terms = {
            "mask_term": float(np.mean(m_term.data)),
            "generator_term": float(np.mean(nn_term.data)),
            "ce_term": float(np.mean(ce_b.data)),
        }
        _stall_update(vals, best, stall, config.early_stop_tol)
        active &= stall < config.early_stop_patience
        if not active.any():
            break
    classifier.check_unchanged(snap)
    scores = mask.data.copy()
    meta = {"iterations_run": iterations_run, "mode": config.mode,
            "generator": config.generator,
            "loss_history": history[:iterations_run].copy(), **final_terms}
    return SaliencyMap(scores=scores[0:1] if single else scores,
                       method=f"learned_{config.generator}", metadata=meta)


def vecsort(m):
    """Ascending sort of the flattened mask values (plain arrays)."""
    return np.sort(np.asarray(m).ravel())


def area_target(total_cells, area):
    """(1 - a) * cells zeros followed by a * cells ones."""
    ones = int(round(area * total_cells))
    r = np.zeros(total_cells)
    if ones:
        r[-ones:] = 1.0
    return r


def explain_dynamask(x, classifier: ClassifierParams,
                     config: DynamaskConfig = None) -> SaliencyMap:
    """Fixed-perturbation mask baseline: optimizes the mask alone under the
    preservation objective with the sorted-mask area regularizer."""
    config = config or DynamaskConfig()
    X, single = _as_batch(x)
    _check_frozen(classifier)
    snap = classifier.snapshot()
    B, T, n = X.shape
    ref = _reference_probs(X, classifier, PRESERVATION, config.target)
    mask = Mask(B, T, n, init=0.5)
    opt = ad.Adam([mask.values], lr=config.lr)
    r_a = area_target(T * n, config.area)
    active = np.ones(B, dtype=bool)
    best = np.full(B, np.inf)
    stall = np.zeros(B, dtype=np.int64)
    history = np.empty((config.iterations, B))
    x_tensor = Tensor(X)
    iterations_run = 0
    for it in range(config.iterations):
        with ad.Tape():
            phi = apply_fixed(x_tensor, mask.values, config.perturbation)
            logits = classifier_forward(phi, classifier)
            if config.target == 0:
                logits = ad.neg(logits)
            ce_b = _per_sample_ce(logits, ref)
            sorted_m = ad.sort_last_axis(
                ad.reshape(mask.values, (B, T * n)))
            d = ad.sub(sorted_m, Tensor(r_a))
            reg_b = ad.tmean(ad.mul(d, d), axis=1)
            loss_b = ad.add(ad.mul(reg_b, config.reg_weight), ce_b)
            loss = ad.tsum(loss_b)
            vals = loss_b.data.copy()
            if not np.all(np.isfinite(vals)):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            loss.backward()
        history[it] = vals
        opt.step(active=active)
        mask.project()
        opt.zero_grad()
        iterations_run = it + 1
        _stall_update(vals, best, stall, config.early_stop_tol)
        active &= stall < config.early_stop_patience
        if not active.any():
            break
    classifier.check_unchanged(snap)
    meta = {"iterations_run": iterations_run, "area": config.area,
            "perturbation": config.perturbation.kind}
    return SaliencyMap(scores=mask.data.copy()[0:1] if single
                       else mask.data.copy(),
                       method="dynamask", metadata=meta)


def occlusion(x, classifier: ClassifierParams, baseline=0.0,
              target=1) -> SaliencyMap:
    """Score of each cell: |f_c(x) - f_c(x with the cell set to baseline)|."""
    X, single = _as_batch(x)
    _check_frozen(classifier)
    B, T, n = X.shape
    base = target_score(X, classifier, target)
    raw = np.empty((B, T, n))
    for t in range(T):
        for i in range(n):
            mod = X.copy()
            mod[:, t, i] = baseline
            raw[:, t, i] = np.abs(base - target_score(mod, classifier, target))
    scores = _minmax_per_sample(raw)
    return SaliencyMap(scores=scores[0:1] if single else scores,
                       method="occlusion", metadata={"raw": raw})


def augmented_occlusion(x, classifier: ClassifierParams,
                        reference: np.ndarray, draws=10, seed=0,
                        target=1) -> SaliencyMap:
    """Occlusion with cell values resampled from the feature's empirical
    distribution across the reference dataset; scores average |delta|
    over the draws."""
    X, single = _as_batch(x)
    _check_frozen(classifier)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.size == 0:
        raise ValueError("augmented_occlusion: empty reference dataset")
    B, T, n = X.shape
    pool = reference.reshape(-1, reference.shape[-1])  # (N*T, n)
    rng = np.random.default_rng(seed)
    # fold the draws into the batch axis: one forward per cell
    tiled = np.repeat(X, draws, axis=0)  # (B*draws, T, n)
    base = target_score(X, classifier, target)
    raw = np.empty((B, T, n))
    for t in range(T):
        for i in range(n):
            mod = tiled.copy()
            mod[:, t, i] = rng.choice(pool[:, i], size=B * draws)
            sc = target_score(mod, classifier, target).reshape(B, draws)
            raw[:, t, i] = np.abs(base[:, None] - sc).mean(axis=1)
    scores = _minmax_per_sample(raw)
    return SaliencyMap(scores=scores[0:1] if single else scores,
                       method="augmented_occlusion", metadata={"raw": raw})


def integrated_gradients(x, classifier: ClassifierParams, baseline=None,
                         steps=50, target=1) -> SaliencyMap:
    """Midpoint-rule path integral of gradients from baseline to x. Raw
    attributions live in metadata; scores are min-max normalized."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    X, single = _as_batch(x)
    _check_frozen(classifier)
    B, T, n = X.shape
    if baseline is None:
        baseline = np.zeros_like(X)
    else:
        baseline = np.broadcast_to(
            np.asarray(baseline, dtype=np.float64), X.shape).copy()
    diff = X - baseline
    avg_grad = np.zeros_like(X)
    for k in range(steps):
        alpha = (k + 0.5) / steps
        point = Tensor(baseline + alpha * diff, requires_grad=True)
        with ad.Tape():
            logits = classifier_forward(point, classifier)
            p = ad.sigmoid(logits)
            if target == 0:
                p = ad.sub(1.0, p)
            total = ad.tsum(p)
            total.backward()
        avg_grad += point.grad
    raw = diff * (avg_grad / steps)
    scores = _minmax_per_sample(np.abs(raw))
    return SaliencyMap(scores=scores[0:1] if single else scores,
                       method="integrated_gradients",
                       metadata={"raw": raw, "steps": steps})


# ---------------------------------------------------------------------------
# serialization


def save_saliency_csv(saliency: SaliencyMap, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "t", "feature", "score"])
        N, T, n = saliency.scores.shape
        for b in range(N):
            for t in range(T):
                for i in range(n):
                    w.writerow([b, t, i, repr(float(saliency.scores[b, t, i]))])


def load_saliency_csv(path, method="loaded"):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((int(rec["sample_id"]), int(rec["t"]),
                         int(rec["feature"]), float(rec["score"])))
    N = max(r[0] for r in rows) + 1
    T = max(r[1] for r in rows) + 1
    n = max(r[2] for r in rows) + 1
    scores = np.zeros((N, T, n))
    for b, t, i, s in rows:
        scores[b, t, i] = s
    return SaliencyMap(scores=scores, method=method)
