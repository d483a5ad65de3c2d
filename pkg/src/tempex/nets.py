"""GRU sequence models: the classifier under explanation and the recurrent
perturbation generators both build on the same cell.

All forward passes take a batched input [B, T, n]. Parameters are either
shared across the batch (2-d weights, the normal case) or carry a leading
batch axis (3-d weights, one independent parameter set per sample; used
when many explanation instances are optimized jointly).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FORWARD = "forward"
BACKWARD = "backward"
BIDIRECTIONAL = "bidirectional"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class GruDirectionParams:
    w_x: Tensor  # (n, 3H) or (B, n, 3H)
    w_h: Tensor  # (H, 3H) or (B, H, 3H)
    b: Tensor  # (3H,) or (B, 1, 3H)

    def tensors(self):
        return [self.w_x, self.w_h, self.b]


@dataclass
class GruParams:
    input_size: int
    hidden_size: int
    direction: str = FORWARD
    fwd: GruDirectionParams = None
    bwd: GruDirectionParams = None  # only for bidirectional

    @property
    def output_size(self):
        return 2 * self.hidden_size if self.direction == BIDIRECTIONAL \
            else self.hidden_size

    def tensors(self):
        out = self.fwd.tensors()
        if self.bwd is not None:
            out = out + self.bwd.tensors()
        return out


def _init_direction(rng, n, hidden, batch, requires_grad):
    # uniform in [-k, k], k = 1/sqrt(H)
    k = 1.0 / np.sqrt(hidden)
    def u(shape):
        full = shape if batch is None else (batch,) + shape
        return Tensor(rng.uniform(-k, k, size=full), requires_grad=requires_grad)
    return GruDirectionParams(
        w_x=u((n, 3 * hidden)),
        w_h=u((hidden, 3 * hidden)),
        b=u((3 * hidden,)) if batch is None
        else Tensor(rng.uniform(-k, k, size=(batch, 1, 3 * hidden)),
                    requires_grad=requires_grad),
    )


def init_gru(rng, input_size, hidden_size, direction=FORWARD, batch=None,
             requires_grad=True):
    if direction not in (FORWARD, BACKWARD, BIDIRECTIONAL):
        raise ValueError(f"unknown direction {direction!r}")
    p = GruParams(input_size, hidden_size, direction)
    p.fwd = _init_direction(rng, input_size, hidden_size, batch, requires_grad)
    if direction == BIDIRECTIONAL:
        p.bwd = _init_direction(rng, input_size, hidden_size, batch,
                                requires_grad)
    return p


def gru_cell_step(x_t, h_prev, dp: GruDirectionParams, hidden):
    """One gated step, fused into a single taped op.

    x_t: (B, n) or (B, 1, n); h_prev matches with H columns. The cell is
    the usual r/z/c gating, h' = (1-z)*c + z*h; forward and backward are
    hand-written so a T-step unroll records T ops instead of ~20T.
    """
    H = hidden
    w_x, w_h, b = dp.w_x, dp.w_h, dp.b
    x, h = x_t.data, h_prev.data
    xg = x @ w_x.data + b.data
    hg = h @ w_h.data
    r = ad.expit(xg[..., :H] + hg[..., :H])
    z = ad.expit(xg[..., H:2 * H] + hg[..., H:2 * H])
    hc = hg[..., 2 * H:]
    c = np.tanh(xg[..., 2 * H:] + r * hc)
    out = Tensor((1.0 - z) * c + z * h)

    def backward(g):
        du = g * (1.0 - z) * (1.0 - c * c)
        d_ar = du * hc * r * (1.0 - r)
        d_az = g * (h - c) * z * (1.0 - z)
        d_xg = np.concatenate([d_ar, d_az, du], axis=-1)
        d_hg = np.concatenate([d_ar, d_az, du * r], axis=-1)
        if x_t._tracked():
            x_t._accumulate(d_xg @ w_x.data.swapaxes(-1, -2))
        if h_prev._tracked():
            h_prev._accumulate(g * z + d_hg @ w_h.data.swapaxes(-1, -2))
        if w_x._tracked():
            w_x._accumulate(x.swapaxes(-1, -2) @ d_xg)
        if w_h._tracked():
            w_h._accumulate(h.swapaxes(-1, -2) @ d_hg)
        if b._tracked():
            b._accumulate(ad._unbroadcast(d_xg, b.shape))

    return ad._record(out, (x_t, h_prev, w_x, w_h, b), backward)


def _run_direction(x, dp, hidden, reverse, per_sample):
    B, T, n = x.shape
    if per_sample:
        h = ad.zeros((B, 1, hidden))
    else:
        h = ad.zeros((B, hidden))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    outs = [None] * T
    for t in steps:
        x_t = x[:, t:t + 1, :] if per_sample else x[:, t, :]
        h = gru_cell_step(x_t, h, dp, hidden)
        outs[t] = h if not per_sample else ad.reshape(h, (B, hidden))
    return ad.stack(outs, axis=1)  # (B, T, H)


def gru_forward(x, params: GruParams):
    """x: Tensor (B, T, n) -> (B, T, H) or (B, T, 2H) for bidirectional.

    A bidirectional pass concatenates the forward states with the states of
    an independent time-reversed pass.
    """
    if x.ndim != 3:
        raise ad.ShapeError(f"gru_forward expects (B, T, n), got {x.shape}")
    B, T, n = x.shape
    if T < 1:
        raise ad.ShapeError("gru_forward: empty sequence")
    if n != params.input_size:
        raise ad.ShapeError(
            f"gru_forward: {n} features vs params.input_size {params.input_size}"
        )
    per_sample = params.fwd.w_x.ndim == 3
    if params.direction == BACKWARD:
        return _run_direction(x, params.fwd, params.hidden_size, True,
                              per_sample)
    out = _run_direction(x, params.fwd, params.hidden_size, False, per_sample)
    if params.direction == BIDIRECTIONAL:
        rev = _run_direction(x, params.bwd, params.hidden_size, True,
                             per_sample)
        out = ad.concatenate([out, rev], axis=2)
    return out


# ---------------------------------------------------------------------------
# classifier

PER_TIMESTEP = "per_timestep"
FINAL_STEP = "final_step"


@dataclass
class ClassifierParams:
    gru: GruParams
    w_out: Tensor  # (D, 1) single-logit binary readout
    b_out: Tensor  # (1,)
    readout: str = PER_TIMESTEP

    def tensors(self):
        return self.gru.tensors() + [self.w_out, self.b_out]

    def freeze(self):
        for t in self.tensors():
            t.requires_grad = False
        return self

    def snapshot(self):
        return [t.data.copy() for t in self.tensors()]

    def check_unchanged(self, snap):
        for t, s in zip(self.tensors(), snap):
            if not np.array_equal(t.data, s):
                raise RuntimeError(
                    "classifier parameters changed during explanation"
                )


def init_classifier(rng, input_size, hidden_size, direction=FORWARD,
                    readout=PER_TIMESTEP):
    if readout not in (PER_TIMESTEP, FINAL_STEP):
        raise ValueError(f"unknown readout mode {readout!r}")
    gru = init_gru(rng, input_size, hidden_size, direction)
    D = gru.output_size
    k = 1.0 / np.sqrt(D)
    return ClassifierParams(
        gru=gru,
        w_out=Tensor(rng.uniform(-k, k, size=(D, 1)), requires_grad=True),
        b_out=Tensor(rng.uniform(-k, k, size=(1,)), requires_grad=True),
        readout=readout,
    )


def classifier_forward(x, params: ClassifierParams):
    """Logits: (B, T) in per-timestep mode, (B,) in final-step mode."""
    h = gru_forward(x, params.gru)  # (B, T, D)
    B, T, D = h.shape
    if params.readout == PER_TIMESTEP:
        flat = ad.reshape(h, (B * T, D))
        logits = ad.add(ad.matmul(flat, params.w_out), params.b_out)
        return ad.reshape(logits, (B, T))
    h_last = h[:, T - 1, :]
    logits = ad.add(ad.matmul(h_last, params.w_out), params.b_out)
    return ad.reshape(logits, (B,))


def predict_proba(x_data, params: ClassifierParams):
    """Positive-class probabilities as a plain array (no tape)."""
    logits = classifier_forward(Tensor(x_data), params)
    return 1.0 / (1.0 + np.exp(-logits.data))


def target_score(x_data, params: ClassifierParams, target=1):
    """Scalar per-sample score for attribution methods: the target-class
    probability, summed over output positions in per-timestep mode."""
    p = predict_proba(x_data, params)
    p = p if target == 1 else 1.0 - p
    return p.sum(axis=1) if p.ndim == 2 else p


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 0.001
    batch_size: int = 64
    seed: int = 0
    log_every: int = 0  # epochs between loss prints; 0 = silent


def train_classifier(dataset, params: ClassifierParams,
                     config: TrainConfig = None):
    """Minimize binary cross-entropy on the dataset; returns params.

    Labels are (N, T) for per-timestep readout or (N,) for final-step.
    Deterministic for a fixed seed. NaN loss aborts.
    """
    config = config or TrainConfig()
    X, y = dataset.X, dataset.y
    N = X.shape[0]
    if N == 0:
        raise ValueError("train_classifier: empty dataset")
    rng = np.random.default_rng(config.seed)
    opt = ad.Adam(params.tensors(), lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        total, count = 0.0, 0
        for lo in range(0, N, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            with ad.Tape():
                logits = classifier_forward(Tensor(X[idx]), params)
                loss = ad.tmean(
                    ad.cross_entropy_with_logits(logits, Tensor(y[idx]))
                )
                val = loss.item()
                if not np.isfinite(val):
                    raise TrainingDiverged(
                        f"NaN/Inf loss at epoch {epoch}, batch offset {lo}"
                    )
                opt.zero_grad()
                loss.backward()
            opt.step()
        # epoch loss on the last batch is noisy; track a fresh full pass
        full = ad.tmean(ad.cross_entropy_with_logits(
            classifier_forward(Tensor(X), params), Tensor(y))).item()
        history.append(full)
        if config.log_every and (epoch + 1) % config.log_every == 0:
            print(f"epoch {epoch + 1}: loss {full:.4f}")
    return params, history


# ---------------------------------------------------------------------------
# checkpoint format: versioned JSON with shapes + flat weight arrays

_CKPT_VERSION = 1


def _arrays_of(params: ClassifierParams):
    names = ["fwd.w_x", "fwd.w_h", "fwd.b"]
    tensors = params.gru.fwd.tensors()
    if params.gru.bwd is not None:
        names += ["bwd.w_x", "bwd.w_h", "bwd.b"]
        tensors += params.gru.bwd.tensors()
    names += ["w_out", "b_out"]
    tensors += [params.w_out, params.b_out]
    return names, tensors


def save_classifier(params: ClassifierParams, path):
    names, tensors = _arrays_of(params)
    payload = {
        "version": _CKPT_VERSION,
        "input_size": params.gru.input_size,
        "hidden_size": params.gru.hidden_size,
        "direction": params.gru.direction,
        "readout": params.readout,
        "arrays": {
            name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
            for name, t in zip(names, tensors)
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_classifier(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('version')}")
    rng = np.random.default_rng(0)
    params = init_classifier(rng, payload["input_size"],
                             payload["hidden_size"], payload["direction"],
                             payload["readout"])
    names, tensors = _arrays_of(params)
    for name, t in zip(names, tensors):
        rec = payload["arrays"][name]
        arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        if arr.shape != t.shape:
            raise ValueError(f"checkpoint array {name}: shape {arr.shape} "
                             f"does not match {t.shape}")
        t.data = arr
    return params
