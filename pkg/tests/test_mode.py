import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import finite_difference, relative_errors, sample_coordinates
from modese.dsp import StftConfig
from modese.errors import ConfigError, DataError, FormatError
from modese.mode import (
    build_mode_model,
    expert_distances,
    infer_mask,
    load_model,
    loss_from_distances,
    mode_backward,
    mode_forward,
    mode_loss,
    posterior_weights,
    save_model,
)

SMALL = StftConfig(sample_rate=16000, frame_len=16, hop=8, n_mels=6, n_mfcc=4)  # 9 bins


def small_model(m=2, hidden=(8, 8), batchnorm=False, seed=0, context=1):
    model = build_mode_model(SMALL, m=m, context=context, hidden=hidden, batchnorm=batchnorm, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for net in [model.gate, *model.experts]:
        for layer in net.layers:
            layer.bias[:] = rng.normal(0, 0.2, layer.bias.shape)
    return model


def inputs(model, n=6, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, model.expert_input_dim)), rng.standard_normal((n, model.gate_input_dim)),
            rng.uniform(0, 1, (n, SMALL.n_bins)))


def saturate_gate(model, i):
    last = model.gate.layers[-1]
    last.weights[:] = 0
    last.bias[:] = -400.0
    last.bias[i] = 400.0


class TestForward:
    def test_single_expert(self):
        model = small_model(m=1)
        x, v, _ = inputs(model)
        res = mode_forward(model, x, v)
        assert np.all(res.gate_probs == 1.0)
        np.testing.assert_allclose(res.combined_mask, model.experts[0].predict(x), atol=1e-15)

    def test_one_hot_gate(self):
        model = small_model(m=3)
        saturate_gate(model, 1)
        x, v, _ = inputs(model)
        res = mode_forward(model, x, v)
        np.testing.assert_allclose(res.combined_mask, res.expert_masks[:, 1], atol=1e-15)

    def test_convex_combination(self):
        model = small_model(m=4)
        x, v, _ = inputs(model, n=20)
        res = mode_forward(model, x, v)
        lo, hi = res.expert_masks.min(1), res.expert_masks.max(1)
        assert np.all(res.combined_mask >= lo - 1e-15) and np.all(res.combined_mask <= hi + 1e-15)
        np.testing.assert_allclose(res.gate_probs.sum(1), 1.0, atol=1e-9)
        assert np.all((res.combined_mask >= 0) & (res.combined_mask <= 1))

    def test_dimension_mismatch(self):
        model = small_model()
        x, v, _ = inputs(model)
        with pytest.raises(DataError):
            mode_forward(model, x[:, :-1], v)

    def test_experts_must_share_layout(self):
        a = small_model(m=2)
        b = small_model(m=2, hidden=(4,))
        with pytest.raises(ConfigError):
            type(a)(a.gate, [a.experts[0], b.experts[0]], a.context, a.stft)


class TestLoss:
    def test_single_expert_is_distance(self):
        rng = np.random.default_rng(0)
        masks = rng.uniform(size=(5, 1, 9))
        target = rng.uniform(size=(5, 9))
        d = 0.5 * np.sum((masks[:, 0] - target) ** 2, axis=1)
        assert abs(mode_loss(np.ones((5, 1)), masks, target) - d.mean()) < 1e-12

    def test_perfect_expert(self):
        target = np.random.default_rng(1).uniform(size=(3, 9))
        masks = np.stack([target, 1 - target], axis=1)
        assert mode_loss(np.tile([1.0, 0.0], (3, 1)), masks, target) == 0.0

    def test_ln2_limit(self):
        target = np.zeros((1, 100))
        masks = np.zeros((1, 2, 100))
        masks[0, 1, 0] = 10.0  # d_2 = 50
        loss = mode_loss([[0.5, 0.5]], masks, target)
        assert abs(loss - math.log(2)) < 1e-9

    def test_huge_distances_stay_finite(self):
        target = np.zeros((1, 257))
        masks = np.full((1, 3, 257), 80.0)  # d ~ 8e5 would underflow exp(-d)
        loss = mode_loss([[0.2, 0.3, 0.5]], masks, target)
        assert np.isfinite(loss) and loss == pytest.approx(0.5 * 257 * 6400)

    def test_rejects_bad_probs(self):
        with pytest.raises(DataError):
            mode_loss([[0.7, 0.7]], np.zeros((1, 2, 3)), np.zeros((1, 3)))
        with pytest.raises(DataError):
            mode_loss([[1.5, -0.5]], np.zeros((1, 2, 3)), np.zeros((1, 3)))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 4, elements=st.floats(0.01, 1)), arrays(np.float64, 4, elements=st.floats(0, 200)))
    def test_em_decomposition(self, raw_p, d):
        p = (raw_p / raw_p.sum())[None]
        w = posterior_weights(p, d[None])[0]
        loss = loss_from_distances(p, d[None])[0]
        free_energy = np.sum(w * d) + np.sum(np.where(w > 0, w * np.log(np.where(w > 0, w, 1) / p[0]), 0))
        assert abs(loss - free_energy) < 1e-9 * max(1.0, abs(loss))


class TestPosterior:
    def test_equal_distances(self):
        p = np.array([[0.1, 0.6, 0.3]])
        assert np.max(np.abs(posterior_weights(p, [[2.0, 2.0, 2.0]]) - p)) < 1e-12

    def test_uniform_zero(self):
        np.testing.assert_allclose(posterior_weights([[0.5, 0.5]], [[0.0, 0.0]]), [[0.5, 0.5]])

    def test_ln3(self):
        np.testing.assert_allclose(posterior_weights([[0.5, 0.5]], [[0.0, math.log(3)]]), [[0.75, 0.25]],
                                   atol=1e-15)

    def test_underflow_never_nan(self):
        w = posterior_weights([[0.5, 0.5]], [[5000.0, 5001.0]])
        assert np.all(np.isfinite(w))
        np.testing.assert_allclose(w.sum(), 1.0)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 5, elements=st.floats(0, 1)), arrays(np.float64, 5, elements=st.floats(0, 1e4)))
    def test_simplex(self, raw_p, d):
        if raw_p.sum() == 0:
            raw_p[0] = 1.0
        w = posterior_weights((raw_p / raw_p.sum())[None], d[None])
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-9


def mixture_gradients_via_probabilities(model, res, target):
    """Independent chain rule: differentiate the loss w.r.t. p (not the logits)
    and push that through the gate's softmax Jacobian."""
    batch = target.shape[0]
    d = expert_distances(res.expert_masks, target)
    terms = res.gate_probs * np.exp(-(d - d.min(1, keepdims=True)))
    s = terms.sum(1, keepdims=True)
    d_p = -np.exp(-(d - d.min(1, keepdims=True))) / s / batch
    gate = model.gate.backward(res.gate_cache, d_p)[0]
    experts = []
    for i, (e, c) in enumerate(zip(model.experts, res.expert_caches)):
        d_d = terms[:, i : i + 1] / s / batch
        experts.append(e.backward(c, d_d * (res.expert_masks[:, i] - target))[0])
    return gate, experts


class TestBackward:
    @pytest.mark.parametrize("m", [1, 2, 3])
    @pytest.mark.parametrize("batchnorm", [False, True])
    def test_finite_differences(self, m, batchnorm):
        model = small_model(m=m, batchnorm=batchnorm, seed=m)
        x, v, t = inputs(model, seed=m)
        res = mode_forward(model, x, v, train=True, update_stats=False)
        grads = mode_backward(model, res, t).flat()
        params = model.params()

        def loss():
            r = mode_forward(model, x, v, train=True, update_stats=False)
            return mode_loss(r.gate_probs, r.expert_masks, t)

        rng = np.random.default_rng(0)
        coords = sample_coordinates(params, 300, rng)
        analytic = np.array([grads[i].reshape(-1)[j] for i, j in coords])
        assert relative_errors(analytic, finite_difference(loss, params, coords)).max() < 1e-4

    @pytest.mark.parametrize("batchnorm", [False, True])
    def test_matches_generic_chain_rule(self, batchnorm):
        model = small_model(m=3, batchnorm=batchnorm)
        x, v, t = inputs(model, n=10)
        res = mode_forward(model, x, v, train=True, update_stats=False)
        g = mode_backward(model, res, t)
        gate, experts = mixture_gradients_via_probabilities(model, res, t)
        for a, b in zip(g.gate, gate):
            assert np.max(np.abs(a - b)) < 1e-10
        for ga, gb in zip(g.experts, experts):
            for a, b in zip(ga, gb):
                assert np.max(np.abs(a - b)) < 1e-10

    def test_matches_torch_autograd(self):
        torch = pytest.importorskip("torch")
        model = small_model(m=3)
        x, v, t = inputs(model, n=7)
        res = mode_forward(model, x, v, train=True)
        g = mode_backward(model, res, t)

        def torch_net(net):
            return [(torch.tensor(l.weights, requires_grad=True), torch.tensor(l.bias, requires_grad=True),
                     l.activation) for l in net.layers]

        def run(layers, inp):
            h = torch.tensor(inp)
            acts = {"relu": torch.relu, "sigmoid": torch.sigmoid, "softmax": lambda z: torch.softmax(z, 1),
                    "linear": lambda z: z}
            for w, b, a in layers:
                h = acts[a](h @ w + b)
            return h

        tg = torch_net(model.gate)
        te = [torch_net(e) for e in model.experts]
        p = run(tg, v)
        masks = torch.stack([run(e, x) for e in te], 1)
        d = 0.5 * ((masks - torch.tensor(t)[:, None]) ** 2).sum(2)
        loss = -torch.logsumexp(torch.log(p) - d, 1).mean()
        loss.backward()
        assert abs(loss.item() - mode_loss(res.gate_probs, res.expert_masks, t)) < 1e-12
        ours = g.flat()
        theirs = [q.grad.numpy() for layers in [tg, *te] for w, b, _ in layers for q in (w, b)]
        for a, b in zip(ours, theirs):
            assert np.max(np.abs(a - b)) < 1e-10

    def test_zero_posterior_expert_gets_no_gradient(self):
        model = small_model(m=2)
        saturate_gate(model, 0)  # p_1 underflows to exactly 0, hence w_1 = 0
        x, v, t = inputs(model)
        res = mode_forward(model, x, v, train=True)
        assert np.all(res.gate_probs[:, 1] == 0)
        g = mode_backward(model, res, t)
        assert np.all(g.posteriors[:, 1] == 0)
        assert all(np.all(q == 0) for q in g.experts[1])

    def test_equal_distances_zero_gate_gradient(self):
        model = small_model(m=3)
        # identical experts give identical distances, so w == p
        for e in model.experts[1:]:
            for la, lb in zip(e.layers, model.experts[0].layers):
                la.weights[:] = lb.weights
                la.bias[:] = lb.bias
        x, v, t = inputs(model)
        res = mode_forward(model, x, v, train=True)
        g = mode_backward(model, res, t)
        assert max(np.max(np.abs(q)) for q in g.gate) < 1e-10

    def test_requires_train_caches(self):
        model = small_model()
        x, v, t = inputs(model)
        res = mode_forward(model, x, v)
        res.gate_cache = None
        with pytest.raises(ValueError):
            mode_backward(model, res, t)


class TestInference:
    def test_one_hot_full_equals_top1(self):
        model = small_model(m=3)
        saturate_gate(model, 2)
        x, v, _ = inputs(model)
        np.testing.assert_allclose(infer_mask(model, x, v, "full"), infer_mask(model, x, v, "top1"), atol=1e-15)

    def test_top1_is_argmax_expert(self):
        model = small_model(m=3, batchnorm=True)
        x, v, _ = inputs(model, n=40)
        out = infer_mask(model, x, v, "top1")
        choice = np.argmax(model.gate.predict(v), 1)
        for n in range(40):
            np.testing.assert_allclose(out[n], model.experts[choice[n]].predict(x[n : n + 1])[0], atol=1e-14)

    def test_evaluation_counts(self):
        model = small_model(m=4)
        x, v, _ = inputs(model, n=25)
        model.expert_evaluations = 0
        infer_mask(model, x, v, "top1")
        assert model.expert_evaluations == 25
        model.expert_evaluations = 0
        infer_mask(model, x, v, "full")
        assert model.expert_evaluations == 100

    def test_unknown_strategy(self):
        model = small_model()
        x, v, _ = inputs(model)
        with pytest.raises(ConfigError):
            infer_mask(model, x, v, "top2")


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        model = small_model(m=3, batchnorm=True)
        x, v, _ = inputs(model)
        mode_forward(model, x, v, train=True)
        save_model(model, tmp_path / "m.mode")
        back = load_model(tmp_path / "m.mode")
        assert back.m == 3 and back.context == model.context and back.stft == model.stft
        for a, b in zip(model.params(), back.params()):
            assert np.array_equal(a, b)
        assert np.array_equal(mode_forward(model, x, v).combined_mask, mode_forward(back, x, v).combined_mask)

    def test_truncated(self, tmp_path):
        path = save_model(small_model(), tmp_path / "m.mode")
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_model(path)

    def test_wrong_magic(self, tmp_path):
        path = save_model(small_model(), tmp_path / "m.mode")
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_model(path)

    def test_wrong_version(self, tmp_path):
        path = save_model(small_model(), tmp_path / "m.mode")
        raw = bytearray(path.read_bytes())
        raw[8] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_model(path)
