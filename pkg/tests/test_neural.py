import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmssd.errors import ContractError
from dmssd.neural import (
    MASK_LOGIT,
    Adam,
    ModelFormatError,
    PolicyValueNet,
    adam_step,
    clip_grad_norm,
    from_bytes,
    load_model,
    log_prob_entropy,
    masked_distribution,
    sample_action,
    sample_actions,
    to_bytes,
)

from oracles import central_difference, relative_error


def zero_net(**kw):
    net = PolicyValueNet(5, 2, **kw)
    for v in net.params.values():
        v[...] = 0.0
    return net


class TestForward:
    def test_zero_weights(self):
        logits, value = zero_net().forward(np.ones(5))
        assert np.all(logits == 0) and value == 0

    def test_deterministic(self):
        net = PolicyValueNet(7, 3, seed=4)
        x = np.random.default_rng(0).normal(size=(3, 7))
        a, b = net.forward(x), net.forward(x)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_hand_computed_one_unit_layers(self):
        net = PolicyValueNet(1, 1, hidden=(1, 1), n_actions=5, seed=0)
        p = net.params
        p["W0"][...] = 0.7; p["b0"][...] = -0.2
        p["W1"][...] = -1.3; p["b1"][...] = 0.4
        p["Wp"][...] = [[0.5, -1.0, 2.0, 0.0, 3.0]]; p["bp"][...] = [0.1, 0.2, 0.3, 0.4, 0.5]
        p["Wv"][...] = 1.5; p["bv"][...] = -0.25
        x = 0.9
        h1 = math.tanh(0.7 * x - 0.2)
        h2 = math.tanh(-1.3 * h1 + 0.4)
        logits, value = net.forward(np.array([x]))
        expected = [0.5 * h2 + 0.1, -h2 + 0.2, 2 * h2 + 0.3, 0.4, 3 * h2 + 0.5]
        assert np.max(np.abs(logits - expected)) < 1e-12
        assert abs(value - (1.5 * h2 - 0.25)) < 1e-12

    def test_separate_value_trunk(self):
        net = PolicyValueNet(1, 1, hidden=(1,), n_actions=5, seed=0, shared=False)
        p = net.params
        p["W0"][...] = 1.0; p["b0"][...] = 0.0
        p["V0"][...] = 2.0; p["c0"][...] = 0.5
        p["Wv"][...] = 1.0; p["bv"][...] = 0.0
        _, value = net.forward(np.array([0.3]))
        assert abs(value - math.tanh(2 * 0.3 + 0.5)) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            PolicyValueNet(7, 3).forward(np.zeros(6))

    def test_default_shape(self):
        net = PolicyValueNet.for_env(3)
        assert net.input_dim == 7 and net.hidden == (64, 64)
        assert net.params["Wp"].shape == (64, 5)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 7, elements=st.floats(-1e6, 1e6)))
    def test_finite_logits(self, x):
        logits, value = PolicyValueNet(7, 3, seed=1).forward(x)
        assert np.all(np.isfinite(logits)) and np.isfinite(value)


class TestDistribution:
    def test_uniform(self):
        np.testing.assert_allclose(masked_distribution(np.zeros(5), np.ones(5, bool)), 0.2)

    def test_one_masked(self):
        p = masked_distribution(np.zeros(5), np.array([True, False, True, True, True]))
        np.testing.assert_allclose(p[[0, 2, 3, 4]], 0.25)
        assert p[1] < 1e-30

    def test_worked_softmax(self):
        p = masked_distribution(np.array([1.0, 0, 0, 0, 0]), np.ones(5, bool))
        assert p[0] == pytest.approx(math.e / (math.e + 4), abs=1e-15)
        assert p[0] == pytest.approx(0.4046, abs=1e-4)

    def test_all_masked(self):
        with pytest.raises(ContractError):
            masked_distribution(np.zeros(5), np.zeros(5, bool))

    def test_mask_logit_value(self):
        assert MASK_LOGIT == -1e8

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 5, elements=st.floats(-50, 50)),
           arrays(bool, 5).filter(lambda m: m.any()),
           st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, logits, mask, c):
        p = masked_distribution(logits, mask)
        assert abs(p.sum() - 1) < 1e-9
        assert np.all(p[~mask] < 1e-30)
        np.testing.assert_allclose(masked_distribution(logits + c, mask), p, atol=1e-9)

    def test_masked_never_sampled(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(100_000, 5)) * 5
        masks = rng.random((100_000, 5)) < 0.5
        masks[:, 4] = True
        probs = masked_distribution(logits, masks)
        a = sample_actions(probs, rng)
        assert masks[np.arange(len(a)), a].all()


class TestSampling:
    def test_deterministic_distribution(self):
        rng = np.random.default_rng(0)
        p = np.array([1.0, 0, 0, 0, 0])
        assert all(sample_action(p, rng) == 0 for _ in range(100))
        assert log_prob_entropy(p, 0)[1] == 0.0

    def test_entropies(self):
        assert log_prob_entropy(np.full(5, 0.2), 2)[1] == pytest.approx(math.log(5))
        p = masked_distribution(np.zeros(5), np.array([True, True, False, True, True]))
        lp, h = log_prob_entropy(p, 0, mask=np.array([True, True, False, True, True]))
        assert h == pytest.approx(math.log(4)) and lp == pytest.approx(math.log(0.25))

    def test_inverse_cdf_order(self):
        class FixedRng:
            def __init__(self, u):
                self.u = u

            def random(self, n):
                return np.full(n, self.u)

        p = np.array([0.1, 0.2, 0.3, 0.4, 0.0])
        assert sample_action(p, FixedRng(0.05)) == 0
        assert sample_action(p, FixedRng(0.15)) == 1
        assert sample_action(p, FixedRng(0.55)) == 2
        assert sample_action(p, FixedRng(0.65)) == 3
        # cdf rounding below u must not select a zero-probability tail entry
        assert sample_action(p, FixedRng(0.9999999999999999)) == 3

    def test_frequencies(self):
        from scipy import stats
        rng = np.random.default_rng(3)
        p = np.array([0.1, 0.2, 0.3, 0.4, 0.0])
        draws = sample_actions(np.tile(p, (50_000, 1)), rng)
        counts = np.bincount(draws, minlength=5)
        assert counts[4] == 0
        _, pval = stats.chisquare(counts[:4], 50_000 * p[:4])
        assert pval > 1e-3


def _random_net(rng, shared):
    n_p = int(rng.integers(2, 5))
    hidden = tuple(int(h) for h in rng.integers(2, 7, size=int(rng.integers(1, 3))))
    net = PolicyValueNet(2 * n_p + 1, n_p, hidden=hidden, seed=int(rng.integers(1 << 30)),
                         shared=shared)
    for v in net.params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    return net


class TestBackward:
    @pytest.mark.parametrize("shared", [True, False])
    def test_matches_finite_differences(self, shared):
        rng = np.random.default_rng(11 if shared else 12)
        for _ in range(10):
            net = _random_net(rng, shared)
            x = rng.normal(size=(3, net.input_dim))
            a = rng.normal(size=(3, 5))
            b = rng.normal(size=3)

            def loss():
                lg, v = net.forward(x)
                return float((a * lg).sum() + (b * v).sum())

            _, _, acts = net.forward_cache(x)
            g = net.backward(acts, a, b)
            num = central_difference(loss, net.params)
            for k in net.params:
                assert relative_error(g[k], num[k]) < 1e-6, k

    def test_zero_seed_zero_gradient(self):
        net = PolicyValueNet(7, 3, seed=0)
        _, _, acts = net.forward_cache(np.ones((2, 7)))
        g = net.backward(acts, np.zeros((2, 5)), np.zeros(2))
        assert all(np.all(v == 0) for v in g.values())

    def test_policy_only_loss_leaves_value_head(self):
        for shared in (True, False):
            net = PolicyValueNet(7, 3, seed=0, shared=shared)
            _, _, acts = net.forward_cache(np.ones((2, 7)))
            g = net.backward(acts, np.ones((2, 5)), np.zeros(2))
            assert np.all(g["Wv"] == 0) and np.all(g["bv"] == 0)
            if not shared:
                assert all(np.all(g[k] == 0) for k in g if k[0] in "Vc")

    def test_gradient_keys_and_shapes(self):
        net = PolicyValueNet(7, 3, seed=0, shared=False)
        _, _, acts = net.forward_cache(np.ones((4, 7)))
        g = net.backward(acts, np.ones((4, 5)), np.ones(4))
        assert list(g) == list(net.params)
        assert all(g[k].shape == net.params[k].shape for k in g)


class TestAdam:
    def test_zero_gradient_step_one(self):
        p = {"w": np.array([1.5])}
        opt = Adam(p)
        adam_step(p, {"w": np.array([0.0])}, opt)
        assert p["w"][0] == 1.5

    def test_first_step_is_lr(self):
        p = {"w": np.array([0.0])}
        opt = Adam(p, lr=0.001)
        adam_step(p, {"w": np.array([1.0])}, opt)
        assert p["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)

    def test_constant_gradient_step_approaches_lr(self):
        p = {"w": np.array([0.0])}
        opt = Adam(p, lr=0.01)
        prev = 0.0
        for _ in range(5000):
            adam_step(p, {"w": np.array([3.0])}, opt)
            step = prev - p["w"][0]
            prev = p["w"][0]
        assert step == pytest.approx(0.01, rel=1e-6)
        assert opt.t == 5000

    def test_shape_mismatch(self):
        p = {"w": np.zeros(3)}
        with pytest.raises(ContractError):
            Adam(p).step(p, {"w": np.zeros(2)})

    def test_clip_grad_norm(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
        assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0, rel=1e-5)
        g = {"a": np.array([0.3])}
        clip_grad_norm(g, 1.0)
        assert g["a"][0] == 0.3


class TestSerialization:
    @pytest.mark.parametrize("shared", [True, False])
    def test_round_trip_bit_identical(self, tmp_path, shared):
        net = PolicyValueNet(9, 4, seed=3, shared=shared)
        path = net.save(tmp_path / "m.bin")
        back = load_model(path)
        x = np.random.default_rng(0).normal(size=(8, 9))
        for a, b in zip(net.forward(x), back.forward(x)):
            assert a.tobytes() == b.tobytes()
        assert back.shared == shared and back.n_p == 4 and back.hidden == (64, 64)

    def test_layout(self):
        net = PolicyValueNet(5, 2, hidden=(3,), seed=0)
        data = to_bytes(net)
        assert data.startswith(b"DMSSDNET1")
        n_params = sum(v.size for v in net.params.values())
        assert len(data) == 9 + 4 * 5 + 8 * n_params + 4

    def test_corruption_detected(self):
        data = bytearray(to_bytes(PolicyValueNet(5, 2, seed=0)))
        data[40] ^= 0x01
        with pytest.raises(ModelFormatError):
            from_bytes(bytes(data))

    @pytest.mark.parametrize("data", [b"", b"DMSSDNET1", b"NOTAMODEL" + bytes(40)])
    def test_garbage(self, data):
        with pytest.raises(ModelFormatError):
            from_bytes(data)

    def test_copy_is_independent(self):
        net = PolicyValueNet(5, 2, seed=0)
        c = net.copy()
        c.params["W0"][0, 0] += 1
        assert net.params["W0"][0, 0] != c.params["W0"][0, 0]

    def test_flat_round_trip(self):
        net = PolicyValueNet(5, 2, seed=0)
        flat = net.get_flat()
        other = PolicyValueNet(5, 2, seed=9)
        other.set_flat(flat)
        assert other.get_flat().tobytes() == flat.tobytes()
