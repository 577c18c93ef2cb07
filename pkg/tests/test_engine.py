import numpy as np
import pytest

from binlow.analysis import memory_footprint, step_ledger
from binlow.engine import (
    Dataset, NumericError, TrainConfig, build_model, evaluate, load_checkpoint,
    reference_nonbinary_mode, save_checkpoint, softmax_cross_entropy, train, train_step,
)
from binlow.optim import OptimizerConfig
from binlow.scheme import PROPOSED, STANDARD, Scheme
from binlow.topology import LayerSpec, Topology, geometry

EPS = 1e-5


def dense_topo(*widths, n_in=6):
    return Topology("toy", (1, 1, n_in), tuple(LayerSpec("dense", w) for w in widths))


def small_conv():
    return Topology("small", (8, 8, 3), (
        LayerSpec("conv", 8, pool=2), LayerSpec("conv", 12), LayerSpec("dense", 16),
        LayerSpec("dense", 5)), order="pool_bn")


def blobs(n, n_in=6, classes=4, seed=0, spread=0.1):
    rng = np.random.default_rng(seed)
    centres = rng.uniform(-1, 1, size=(classes, n_in))
    y = np.arange(n) % classes
    x = centres[y] + spread * rng.normal(size=(n, n_in))
    return x.reshape(n, 1, 1, n_in), y


# -- independent numpy oracles -----------------------------------------------

def bn2(y, beta):
    mu = y.mean(0)
    d = np.sqrt(((y - mu) ** 2).mean(0)) + EPS
    return (y - mu) / d + beta


def ce(logits, labels):
    z = logits - logits.max(1, keepdims=True)
    return -np.mean(z[np.arange(len(labels)), labels] - np.log(np.exp(z).sum(1)))


def surrogate_loss(ws, w0s, betas, x, labels, refs):
    """The function whose exact gradient the STE backward computes.

    Every sgn(u) is replaced by sgn(u0) + clip(u) - clip(u0) around the
    current point (``refs`` holds the unperturbed BN outputs u0), so values
    match the binary net and derivatives are the straight-through ones:
    identity on weights, |x| <= 1 mask on activations.
    """
    a = x
    for i, (w, w0, b) in enumerate(zip(ws, w0s, betas)):
        wh = np.where(w0 >= 0, 1.0, -1.0) + (w - w0)
        xl = bn2(a @ wh, b)
        if i == len(ws) - 1:
            return ce(xl, labels)
        x0 = refs[i]
        a = np.where(x0 >= 0, 1.0, -1.0) + np.clip(xl, -1, 1) - np.clip(x0, -1, 1)
    raise AssertionError("no layers")


def binary_forward_refs(w0s, betas, x):
    """BN outputs of the unperturbed binary net, per layer."""
    a, out = x, []
    for i, (w0, b) in enumerate(zip(w0s, betas)):
        xl = bn2(a @ np.where(w0 >= 0, 1.0, -1.0), b)
        out.append(xl)
        a = np.where(xl >= 0, 1.0, -1.0)
    return out


def engine_grads(model, x, labels):
    logits = model.forward(x)
    loss, g = softmax_cross_entropy(logits.astype(np.float64), labels)
    grads = model.backward(g.astype(model.compute))
    model.clear()
    return loss, grads


class TestGradientCheck:
    def _setup(self, seed):
        cfg = TrainConfig(dense_topo(8, 4), STANDARD, compute="float64", batch_size=16)
        model = build_model(cfg)
        rng = np.random.default_rng(seed)
        x, y = blobs(16, seed=seed, spread=0.5)
        for l in model.layers:
            l.bn.beta[:] = rng.normal(scale=0.3, size=l.channels)
        return model, x, y

    @pytest.mark.parametrize("seed", range(5))
    def test_standard_ste_gradient(self, seed):
        model, x, y = self._setup(seed)
        loss, grads = engine_grads(model, x, y)
        w0s = [l.W.copy() for l in model.layers]
        betas = [l.bn.beta.copy() for l in model.layers]
        xf = x.reshape(16, -1)
        refs = binary_forward_refs(w0s, betas, xf)
        assert ce(bn2(np.where(refs[0] >= 0, 1.0, -1.0) @ np.where(w0s[1] >= 0, 1.0, -1.0),
                      betas[1]), y) == pytest.approx(loss, rel=1e-12)
        # keep only points away from the clip kinks
        assert np.min(np.abs(np.abs(refs[0]) - 1)) > 1e-4
        h = 1e-6
        for li in range(2):
            num = np.zeros_like(w0s[li])
            for idx in np.ndindex(*w0s[li].shape):
                ws = [w.copy() for w in w0s]
                ws[li][idx] += h
                fp = surrogate_loss(ws, w0s, betas, xf, y, refs)
                ws[li][idx] -= 2 * h
                fm = surrogate_loss(ws, w0s, betas, xf, y, refs)
                num[idx] = (fp - fm) / (2 * h)
            got = grads[li][0]
            assert np.max(np.abs(got - num)) / np.max(np.abs(num)) < 1e-3

    def test_nonbinary_finite_differences(self):
        cfg = TrainConfig(dense_topo(8, 4), Scheme(binary=False), compute="float64", batch_size=16)
        model = build_model(cfg)
        x, y = blobs(16, seed=3, spread=0.5)
        _, grads = engine_grads(model, x, y)
        h = 1e-6
        for li, layer in enumerate(model.layers):
            num = np.zeros_like(layer.W)
            for idx in np.ndindex(*layer.W.shape):
                old = layer.W[idx]
                layer.W[idx] = old + h
                fp = engine_grads(model, x, y)[0]
                layer.W[idx] = old - h
                fm = engine_grads(model, x, y)[0]
                layer.W[idx] = old
                num[idx] = (fp - fm) / (2 * h)
            assert np.max(np.abs(grads[li][0] - num)) / np.max(np.abs(num)) < 1e-4


def test_hand_traced_standard_step():
    """One Adam step of a 3-layer binary MLP against a from-scratch trace."""
    cfg = TrainConfig(dense_topo(2, 2, 2, n_in=2), STANDARD, compute="float64", batch_size=4)
    model = build_model(cfg)
    x = np.array([[0.5, -0.25], [-0.75, 0.5], [0.25, 0.75], [-0.5, -1.0]])
    y = np.array([0, 1, 1, 0])
    w = [l.W.copy() for l in model.layers]
    # forward
    acts, xs = [x], []
    for i in range(3):
        xi = bn2(acts[-1] @ np.where(w[i] >= 0, 1.0, -1.0), 0.0)
        xs.append(xi)
        acts.append(np.where(xi >= 0, 1.0, -1.0))
    p = np.exp(xs[2] - xs[2].max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    g = (p - np.eye(2)[y]) / 4
    # backward
    dws = [None] * 3
    for i in (2, 1, 0):
        dx = g if i == 2 else g * (np.abs(xs[i]) <= 1)
        yv = acts[i] @ np.where(w[i] >= 0, 1.0, -1.0)
        mu = yv.mean(0)
        d = np.sqrt(((yv - mu) ** 2).mean(0)) + EPS
        v = dx / d
        dy = v - v.mean(0) - np.mean(v * xs[i], 0) * xs[i]
        dws[i] = acts[i].T @ dy
        g = dy @ np.where(w[i] >= 0, 1.0, -1.0).T
    train_step((x.reshape(4, 1, 1, 2), y), model)
    for i in range(3):
        step = -1e-3 * dws[i] / (np.abs(dws[i]) + 1e-8)
        np.testing.assert_allclose(model.layers[i].W - w[i], np.clip(w[i] + step, -1, 1) - w[i],
                                   atol=1e-12)


def test_linear_net_loss_decreases():
    topo = dense_topo(3, n_in=2)
    cfg = TrainConfig(topo, Scheme(binary=False), OptimizerConfig("sgd_momentum", lr=0.01,
                                                                   momentum=0.0),
                      batch_size=4, compute="float64")
    model = build_model(cfg)
    x = np.array([[0.2, 0.9], [-0.4, 0.1], [0.7, -0.6], [-0.9, -0.3]]).reshape(4, 1, 1, 2)
    y = np.array([0, 1, 2, 1])
    losses = [train_step((x, y), model).loss for _ in range(100)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


class TestTrace:
    @pytest.mark.parametrize("scheme", [STANDARD, PROPOSED, Scheme(dY_dtype="blockfp_5"),
                                        PROPOSED.with_(bn_variant="l1")])
    def test_matches_analyzer(self, scheme):
        topo = small_conv()
        cfg = TrainConfig(topo, scheme, batch_size=10)
        model = build_model(cfg)
        rng = np.random.default_rng(0)
        st = train_step((rng.uniform(-1, 1, (10, 8, 8, 3)), rng.integers(0, 5, 10)), model)
        got = st.memory_report()
        want = memory_footprint(topo, scheme, 10, input_dtype=scheme.base_dtype)
        assert [(r.variable, r.lifetime, r.dtype, r.bytes) for r in got.rows] == \
               [(r.variable, r.lifetime, r.dtype, r.bytes) for r in want.rows]
        assert st.geoms == geometry(topo)
        led = step_ledger(topo, scheme, 10)
        assert st.ledger.traffic_bits == led.traffic_bits
        assert dict(st.ledger.ops) == pytest.approx(dict(led.ops))

    def test_transient_workspace_bound(self):
        # for the MLP the input is the largest activation: the analyzer's
        # shared workspace is sized to it, the per-layer buffers are smaller
        topo = Topology("mlp", (28, 28, 1), (LayerSpec("dense", 32), LayerSpec("dense", 10)))
        cfg = TrainConfig(topo, PROPOSED, batch_size=4)
        model = build_model(cfg)
        rng = np.random.default_rng(1)
        st = train_step((rng.uniform(-1, 1, (4, 28, 28, 1)), rng.integers(0, 10, 4)), model)
        want = memory_footprint(topo, PROPOSED, 4, input_dtype="f16")
        got = st.memory_report()
        for r in want.rows:
            g = got.row(r.variable)
            if r.lifetime == "transient":
                assert g.bytes <= r.bytes
            else:
                assert g.bytes == r.bytes

    def test_proposed_x_is_bool(self):
        cfg = TrainConfig(small_conv(), PROPOSED, batch_size=6)
        model = build_model(cfg)
        rng = np.random.default_rng(2)
        st = train_step((rng.uniform(-1, 1, (6, 8, 8, 3)), rng.integers(0, 5, 6)), model)
        assert {b.dtype for b in st.buffers_named("X") if b.layer >= 0} == {"bool1"}
        assert {b.name for b in st.untracked} == {"beta momenta", "pool argmax", "STE mask"}

    def test_no_high_precision_x_retained(self):
        cfg = TrainConfig(small_conv(), PROPOSED, batch_size=6)
        model = build_model(cfg)
        rng = np.random.default_rng(3)
        model.forward(rng.uniform(-1, 1, (6, 8, 8, 3)))
        assert all(l.x is None and l.x_bits is not None for l in model.layers)


class TestNumeric:
    def test_nan_input(self):
        model = build_model(TrainConfig(dense_topo(4, 3), batch_size=4))
        x = np.zeros((4, 1, 1, 6))
        x[1, 0, 0, 2] = np.nan
        with pytest.raises(NumericError) as e:
            train_step((x, np.zeros(4, int)), model)
        assert e.value.layer == 0 and e.value.phase == "forward"

    def test_shape_mismatch(self):
        model = build_model(TrainConfig(dense_topo(4, 3), batch_size=4))
        with pytest.raises(ValueError, match="topology"):
            train_step((np.zeros((4, 1, 1, 5)), np.zeros(4, int)), model)


def toy_dataset(n=400, seed=0, spread=0.1):
    x, y = blobs(n, seed=seed, spread=spread)
    xt, yt = blobs(200, seed=seed, spread=spread)
    return Dataset.split(x, y, xt, yt)


class TestTrain:
    def test_zero_epochs(self):
        cfg = TrainConfig(dense_topo(16, 4), batch_size=20, epochs=0, density_batches=0)
        r = train(toy_dataset(), cfg)
        assert len(r.history) == 1 and r.history[0]["epoch"] == 0

    def test_separable_reaches_100(self):
        cfg = TrainConfig(dense_topo(32, 4), batch_size=20, epochs=30, density_batches=0,
                          optimizer=OptimizerConfig(lr=0.01))
        r = train(toy_dataset(spread=0.05), cfg)
        assert r.history[-1]["test_acc"] == 1.0

    def test_deterministic(self):
        cfg = TrainConfig(dense_topo(16, 4), PROPOSED, batch_size=20, epochs=3)
        a = train(toy_dataset(), cfg)
        b = train(toy_dataset(), cfg)
        assert a.history == b.history
        assert a.density == b.density

    def test_chance_level(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, size=(3000, 1, 1, 6))
        y = np.arange(3000) % 10
        model = build_model(TrainConfig(dense_topo(32, 10), batch_size=100))
        acc = evaluate((x, y), model)
        assert abs(acc - 0.1) < 0.03
        assert evaluate((x, y), model) == acc

    def test_label_range(self):
        ds = toy_dataset()
        cfg = TrainConfig(dense_topo(16, 3), batch_size=20, epochs=1)
        with pytest.raises(ValueError, match="labels"):
            train(ds, cfg)

    def test_nonbinary_mode(self):
        cfg = reference_nonbinary_mode(TrainConfig(dense_topo(16, 4), PROPOSED))
        assert not cfg.scheme.binary
        assert cfg.scheme.dY_dtype == PROPOSED.dY_dtype
        with pytest.raises(ValueError):
            Scheme(binary=True, activation="relu")

    def test_checkpoint_resume(self, tmp_path):
        cfg = TrainConfig(dense_topo(16, 4), PROPOSED, batch_size=20, epochs=4)
        full = train(toy_dataset(), cfg)
        saved = {}

        def hook(epoch, model, history, sched, rng, density):
            if epoch == 2:
                save_checkpoint(tmp_path / "ck.npz", model, epoch, sched, rng, history, density)
                saved["ok"] = True

        train(toy_dataset(), cfg, epochs=2, on_epoch=hook)
        assert saved
        model, start = load_checkpoint(tmp_path / "ck.npz", cfg)
        resumed = train(toy_dataset(), cfg, model=model, start=start)
        assert resumed.history == full.history
        for a, b in zip(resumed.model.layers, full.model.layers):
            np.testing.assert_array_equal(a.W, b.W)

    def test_checkpoint_config_mismatch(self, tmp_path):
        cfg = TrainConfig(dense_topo(16, 4), batch_size=20, epochs=1, density_batches=0)
        r = train(toy_dataset(), cfg)
        save_checkpoint(tmp_path / "ck.npz", r.model, 1, cfg.make_schedule(),
                        np.random.default_rng(0), r.history)
        other = TrainConfig(dense_topo(16, 4), batch_size=20, epochs=1, seed=1)
        with pytest.raises(ValueError, match="different configuration"):
            load_checkpoint(tmp_path / "ck.npz", other)
