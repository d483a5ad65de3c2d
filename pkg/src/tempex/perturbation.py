"""Perturbation operators.

Fixed operators blend the input with a deterministic temporal surrogate
(windowed averages, or a mask-bandwidth Gaussian blur). The learned
operator blends with the output of a trainable generator:

    phi(x, m) = m * x + (1 - m) * nn(x),    0 <= m <= 1

so m = 1 keeps the input exactly and m = 0 hands the cell to the
generator. Generators: all-zeros, a unidirectional GRU, or a
bidirectional GRU, each with a linear head back to the feature space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Tensor

WINDOW_AVERAGE = "window_average"
PAST_WINDOW_AVERAGE = "past_window_average"
GAUSSIAN_BLUR = "gaussian_blur"

ZERO = "zero"
UNIDIRECTIONAL = "unidirectional"
BIDIRECTIONAL = "bidirectional"


@dataclass
class FixedPerturbationConfig:
    kind: str = WINDOW_AVERAGE
    window: int = 2
    sigma_max: float = 2.0

    def __post_init__(self):
        if self.kind not in (WINDOW_AVERAGE, PAST_WINDOW_AVERAGE,
                             GAUSSIAN_BLUR):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if self.sigma_max <= 0:
            raise ValueError("sigma_max must be > 0")


def window_average(x, window):
    """Centered moving average along time. x: array (..., T, n); boundary
    windows truncate to valid indices and renormalize."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-2]
    out = np.empty_like(x)
    for t in range(T):
        lo, hi = max(0, t - window), min(T, t + window + 1)
        out[..., t, :] = x[..., lo:hi, :].mean(axis=-2)
    return out


def past_window_average(x, window):
    """Trailing moving average over [t - window, t], truncated at the start."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-2]
    out = np.empty_like(x)
    for t in range(T):
        lo = max(0, t - window)
        out[..., t, :] = x[..., lo:t + 1, :].mean(axis=-2)
    return out


def _blur_weights(m, sigma_max, T):
    """Per-cell normalized kernel weights, differentiable in m.

    m: Tensor (..., T, n). Returns Tensor (..., T, n, T') of weights over
    source steps t'. sigma = sigma_max * (1 - m); tails beyond 4 sigma are
    truncated and the row renormalized.
    """
    dt = np.arange(T, dtype=np.float64)
    d2 = (dt[:, None] - dt[None, :]) ** 2  # (T, T')
    sigma = ad.mul(ad.sub(1.0, m), sigma_max)  # (..., T, n)
    # sigma = 0 (m = 1) degenerates to the identity row: the clamp keeps the
    # arithmetic finite and the 4-sigma cutoff removes every off-diagonal
    safe = ad.clamp(sigma, 1e-12, float(np.inf))
    inv2s2 = ad.div(1.0, ad.mul(ad.mul(safe, safe), 2.0))
    expanded = ad.reshape(inv2s2, inv2s2.shape + (1,))  # (..., T, n, 1)
    w = ad.exp(ad.neg(ad.mul(expanded, Tensor(d2.reshape(T, 1, T)))))
    sig = np.maximum(sigma.data, 1e-12)
    cutoff = np.sqrt(d2).reshape(
        (1,) * (m.ndim - 2) + (T, 1, T)) > 4.0 * sig[..., None]
    w = ad.mul(w, Tensor((~cutoff).astype(np.float64)))
    norm = ad.tsum(w, axis=-1, keepdims=True)
    return ad.div(w, norm)


def gaussian_blur(x, m, sigma_max):
    """Temporal Gaussian re-blur of x with bandwidth sigma_max * (1 - m).

    x: Tensor or array (..., T, n); m: Tensor (..., T, n). At m = 1 the
    output equals x exactly.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    T, n = x.shape[-2], x.shape[-1]
    w = _blur_weights(m, sigma_max, T)  # (..., T, n, T')
    # out[..., t, i] = sum_t' w[..., t, i, t'] * x[..., t', i]
    xt = ad.reshape(_transpose_last2(x), x.shape[:-2] + (1, n, T))
    blurred = ad.tsum(ad.mul(w, xt), axis=-1)  # (..., T, n)
    # exact identity where m == 1 (no 0/0, no roundoff through the kernel)
    keep_x = Tensor((m.data >= 1.0).astype(np.float64))
    return ad.add(ad.mul(keep_x, x), ad.mul(ad.sub(1.0, keep_x), blurred))


def _transpose_last2(x):
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    data = np.transpose(x.data, axes)
    out = Tensor(data.copy())

    def backward(g):
        if x._tracked():
            x._accumulate(np.transpose(g, axes))

    return ad._record(out, (x,), backward)


def apply_fixed(x, m, config: FixedPerturbationConfig):
    """Fixed-surrogate perturbation. Window kinds blend per cell:
    m * x + (1 - m) * mu; the blur kind is the pure re-blur with
    mask-dependent bandwidth (no extra blend)."""
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if m.shape != x_arr.shape:
        raise ad.ShapeError(
            f"apply_fixed: mask {m.shape} vs input {x_arr.shape}"
        )
    if config.kind == GAUSSIAN_BLUR:
        return gaussian_blur(x, m, config.sigma_max)
    if config.kind == WINDOW_AVERAGE:
        mu = window_average(x_arr, config.window)
    else:
        mu = past_window_average(x_arr, config.window)
    x_t = x if isinstance(x, Tensor) else Tensor(x_arr)
    return ad.add(ad.mul(m, x_t), ad.mul(ad.sub(1.0, m), Tensor(mu)))


# ---------------------------------------------------------------------------
# learned perturbation


class Mask:
    """Trainable mask in [0, 1]^(B, T, n); clamped back into the box after
    every optimizer step (hard projection keeps values interpretable as
    saliency scores)."""

    def __init__(self, batch, n_steps, n_features, init=0.5):
        self.values = Tensor(np.full((batch, n_steps, n_features), init),
                             requires_grad=True, name="mask")

    def project(self):
        np.clip(self.values.data, 0.0, 1.0, out=self.values.data)

    @property
    def data(self):
        return self.values.data


class PerturbationGenerator:
    """nn(x) of the learned operator. kind 'zero' has no parameters; the
    recurrent kinds hold one independent parameter set per batch row so a
    joint batched optimization equals per-sample runs."""

    def __init__(self, kind, batch, n_features, hidden=32, seed=0,
                 row_seeds=None):
        if kind not in (ZERO, UNIDIRECTIONAL, BIDIRECTIONAL):
            raise ValueError(f"unknown generator kind {kind!r}")
        self.kind = kind
        self.batch = batch
        self.n_features = n_features
        self.hidden = hidden
        if kind == ZERO:
            self.gru = None
            self.w_head = None
            self.b_head = None
            return
        if row_seeds is None:
            row_seeds = np.random.SeedSequence(seed).spawn(batch)
        direction = nets.FORWARD if kind == UNIDIRECTIONAL \
            else nets.BIDIRECTIONAL
        ndir = 2 if direction == nets.BIDIRECTIONAL else 1
        D = ndir * hidden
        kg = 1.0 / np.sqrt(hidden)
        kh = 1.0 / np.sqrt(D)
        # each batch row gets its own seeded stream, so row b of a batched
        # init is identical to a batch-of-one init seeded the same way
        rows = []
        for rs in row_seeds:
            rng = np.random.default_rng(rs)
            row = []
            for _ in range(ndir):
                row.append(rng.uniform(-kg, kg, (n_features, 3 * hidden)))
                row.append(rng.uniform(-kg, kg, (hidden, 3 * hidden)))
                row.append(rng.uniform(-kg, kg, (1, 3 * hidden)))
            row.append(rng.uniform(-kh, kh, (D, n_features)))
            row.append(rng.uniform(-kh, kh, (1, n_features)))
            rows.append(row)
        stacked = [Tensor(np.stack([r[j] for r in rows]), requires_grad=True)
                   for j in range(len(rows[0]))]
        self.gru = nets.GruParams(n_features, hidden, direction)
        self.gru.fwd = nets.GruDirectionParams(*stacked[0:3])
        if ndir == 2:
            self.gru.bwd = nets.GruDirectionParams(*stacked[3:6])
        self.w_head = stacked[-2]
        self.b_head = stacked[-1]
        self.w_head.name = "gen_head_w"
        self.b_head.name = "gen_head_b"

    def parameters(self):
        if self.kind == ZERO:
            return []
        return self.gru.tensors() + [self.w_head, self.b_head]

    def forward(self, x):
        """x: Tensor (B, T, n) -> Tensor (B, T, n)."""
        if x.shape[0] != self.batch or x.shape[2] != self.n_features:
            raise ad.ShapeError(
                f"generator built for batch {self.batch} x features "
                f"{self.n_features}, got input {x.shape}"
            )
        if self.kind == ZERO:
            return ad.zeros(x.shape)
        h = nets.gru_forward(x, self.gru)  # (B, T, D)
        out = ad.matmul(h, self.w_head)  # (B, T, n), batched
        return ad.add(out, self.b_head)

    def select(self, rows):
        """Fresh generator holding copies of the given batch rows (used to
        compare batched vs per-sample optimization)."""
        sub = PerturbationGenerator(self.kind, int(np.sum(rows)),
                                    self.n_features, self.hidden)
        if self.kind != ZERO:
            for dst, src in zip(sub.parameters(), self.parameters()):
                dst.data = src.data[rows].copy()
        return sub


def apply_learned(x, m, generator: PerturbationGenerator):
    """phi = m * x + (1 - m) * nn(x), differentiable in m and the
    generator parameters."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if m.shape != x.shape:
        raise ad.ShapeError(f"apply_learned: mask {m.shape} vs input {x.shape}")
    nn_x = generator.forward(x)
    return ad.add(ad.mul(m, x), ad.mul(ad.sub(1.0, m), nn_x)), nn_x
