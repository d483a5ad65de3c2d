import numpy as np
import pytest

from tempex import autodiff as ad
from tempex import nets
from tempex.autodiff import Tensor
from tempex.data import TimeSeriesDataset

from conftest import assert_gradcheck


def _zero_direction(n, H):
    return nets.GruDirectionParams(
        w_x=Tensor(np.zeros((n, 3 * H))),
        w_h=Tensor(np.zeros((H, 3 * H))),
        b=Tensor(np.zeros(3 * H)),
    )


def test_zero_weights_fixed_point():
    dp = _zero_direction(3, 4)
    h = nets.gru_cell_step(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 4))),
                           dp, 4)
    np.testing.assert_array_equal(h.data, np.zeros((1, 4)))


def test_saturated_candidate_stays_in_tanh_range():
    dp = _zero_direction(2, 3)
    dp.b = Tensor(np.concatenate([np.zeros(6), np.full(3, 50.0)]))
    h = nets.gru_cell_step(Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 3))),
                           dp, 3)
    assert np.all(np.abs(h.data) < 1.0)


def test_cell_matches_scalar_recomputation(rng):
    n, H = 3, 4
    p = nets.init_gru(rng, n, H)
    x = rng.uniform(-1, 1, (1, n))
    h_prev = rng.uniform(-1, 1, (1, H))
    got = nets.gru_cell_step(Tensor(x), Tensor(h_prev), p.fwd, H).data[0]

    # independent scalar re-computation of the gate equations
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    wx, wh, b = p.fwd.w_x.data, p.fwd.w_h.data, p.fwd.b.data
    want = np.empty(H)
    for j in range(H):
        xr = sum(x[0, a] * wx[a, j] for a in range(n)) + b[j]
        hr = sum(h_prev[0, a] * wh[a, j] for a in range(H))
        xz = sum(x[0, a] * wx[a, H + j] for a in range(n)) + b[H + j]
        hz = sum(h_prev[0, a] * wh[a, H + j] for a in range(H))
        xc = sum(x[0, a] * wx[a, 2 * H + j] for a in range(n)) + b[2 * H + j]
        hc = sum(h_prev[0, a] * wh[a, 2 * H + j] for a in range(H))
        r, z = sig(xr + hr), sig(xz + hz)
        c = np.tanh(xc + r * hc)
        want[j] = (1 - z) * c + z * h_prev[0, j]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_bidirectional_single_step_uses_same_input(rng):
    p = nets.init_gru(rng, 2, 3, nets.BIDIRECTIONAL)
    x = rng.uniform(-1, 1, (1, 1, 2))
    out = nets.gru_forward(Tensor(x), p)
    assert out.shape == (1, 1, 6)
    fwd_half = nets.gru_forward(Tensor(x), nets.GruParams(2, 3, nets.FORWARD,
                                                          fwd=p.fwd))
    np.testing.assert_array_equal(out.data[..., :3], fwd_half.data)


def test_unidirectional_causality(rng):
    p = nets.init_gru(rng, 2, 4)
    x = rng.uniform(-1, 1, (1, 8, 2))
    out = nets.gru_forward(Tensor(x), p).data
    x2 = x.copy()
    x2[0, 5:, :] += 10.0  # suffix perturbation
    out2 = nets.gru_forward(Tensor(x2), p).data
    np.testing.assert_array_equal(out[:, :5], out2[:, :5])
    assert not np.allclose(out[:, 5:], out2[:, 5:])


def test_bidirectional_sees_the_future(rng):
    p = nets.init_gru(rng, 2, 4, nets.BIDIRECTIONAL)
    x = rng.uniform(-1, 1, (1, 8, 2))
    out = nets.gru_forward(Tensor(x), p).data
    x2 = x.copy()
    x2[0, 6, :] += 1.0
    out2 = nets.gru_forward(Tensor(x2), p).data
    assert not np.allclose(out[:, 2], out2[:, 2])


def test_empty_sequence_rejected(rng):
    p = nets.init_gru(rng, 2, 4)
    with pytest.raises(ad.ShapeError):
        nets.gru_forward(Tensor(np.zeros((1, 0, 2))), p)


def test_gru_gradcheck(rng):
    p = nets.init_gru(rng, 2, 3, nets.BIDIRECTIONAL)

    def build(x):
        return ad.tsum(ad.mul(nets.gru_forward(x, p), 0.3))

    assert_gradcheck(build, rng.uniform(-1, 1, (2, 4, 2)))


def test_zero_readout_gives_half_probability(rng):
    c = nets.init_classifier(rng, 2, 4)
    c.w_out.data[:] = 0.0
    c.b_out.data[:] = 0.0
    x = rng.uniform(-1, 1, (2, 5, 2))
    logits = nets.classifier_forward(Tensor(x), c)
    np.testing.assert_array_equal(logits.data, np.zeros((2, 5)))
    np.testing.assert_array_equal(nets.predict_proba(x, c), np.full((2, 5), 0.5))


def test_per_timestep_output_length(rng):
    c = nets.init_classifier(rng, 3, 4)
    out = nets.classifier_forward(Tensor(rng.uniform(-1, 1, (2, 7, 3))), c)
    assert out.shape == (2, 7)


def test_final_step_output_shape(rng):
    c = nets.init_classifier(rng, 3, 4, readout=nets.FINAL_STEP)
    out = nets.classifier_forward(Tensor(rng.uniform(-1, 1, (2, 7, 3))), c)
    assert out.shape == (2,)


def _toy_separable(rng, N=60, T=10):
    # label = feature 0 shifted; linearly separable per timestep
    X = rng.uniform(-1, 1, (N, T, 2))
    y = (X[:, :, 0] > 0).astype(np.int64)
    return TimeSeriesDataset(X=X, y=y)


def test_training_reaches_high_accuracy(rng):
    ds = _toy_separable(rng)
    c = nets.init_classifier(np.random.default_rng(1), 2, 8)
    c, history = nets.train_classifier(ds, c, nets.TrainConfig(epochs=100,
                                                               lr=0.02,
                                                               seed=3))
    acc = np.mean((nets.predict_proba(ds.X, c) > 0.5) == ds.y)
    assert acc > 0.95
    assert history[-1] < history[0]


def test_zero_epochs_returns_init_unchanged(rng):
    ds = _toy_separable(rng)
    c = nets.init_classifier(np.random.default_rng(1), 2, 8)
    before = c.snapshot()
    c, _ = nets.train_classifier(ds, c, nets.TrainConfig(epochs=0))
    c.check_unchanged(before)


def test_training_determinism(rng):
    ds = _toy_separable(rng)
    runs = []
    for _ in range(2):
        c = nets.init_classifier(np.random.default_rng(1), 2, 8)
        c, _ = nets.train_classifier(ds, c, nets.TrainConfig(epochs=5,
                                                             seed=42))
        runs.append(c.snapshot())
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a, b)


def test_gradient_flow_through_every_weight(rng):
    ds = _toy_separable(rng, N=8, T=6)
    c = nets.init_classifier(np.random.default_rng(2), 2, 4,
                             direction=nets.BIDIRECTIONAL)
    with ad.Tape():
        logits = nets.classifier_forward(Tensor(ds.X), c)
        loss = ad.tmean(ad.cross_entropy_with_logits(logits, Tensor(ds.y)))
        loss.backward()
    for t in c.tensors():
        assert t.grad is not None
        assert np.any(t.grad != 0.0)


def test_checkpoint_roundtrip(tmp_path, rng):
    c = nets.init_classifier(rng, 3, 5, direction=nets.BIDIRECTIONAL,
                             readout=nets.FINAL_STEP)
    path = tmp_path / "model.json"
    nets.save_classifier(c, path)
    loaded = nets.load_classifier(path)
    x = rng.uniform(-1, 1, (2, 6, 3))
    np.testing.assert_array_equal(nets.predict_proba(x, c),
                                  nets.predict_proba(x, loaded))
