import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from balancekit import nnet
from balancekit.nnet import (Adam, MlpParams, MlpSpec, ShapeError, backward,
                             bounded01, forward, forward_cached,
                             gaussian_log_prob, gaussian_sample, init_params,
                             load_checkpoint, save_checkpoint)


def fd_gradient(spec, params, x, upstream, h=1e-6):
    """Central finite differences of sum(upstream * y) over the flat params."""
    def loss(flat):
        p = MlpParams(spec, flat)
        y = forward(spec, p, x)
        return float((np.asarray(upstream) * y).sum())

    g = np.zeros_like(params.flat)
    for i in range(len(g)):
        fp = params.flat.copy(); fp[i] += h
        fm = params.flat.copy(); fm[i] -= h
        g[i] = (loss(fp) - loss(fm)) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


class TestForward:
    def test_zero_weights_bias_only(self):
        spec = MlpSpec((3, 2))
        p = MlpParams(spec, np.zeros(spec.n_params()))
        W, b = p.layers[0]
        b[:] = [0.5, -1.0]
        y = forward(spec, p, np.ones(3))
        assert np.allclose(y, [0.5, -1.0])

    def test_identity_single_layer(self):
        spec = MlpSpec((4, 4))
        p = MlpParams(spec, np.zeros(spec.n_params()))
        W, _ = p.layers[0]
        W[:] = np.eye(4)
        x = np.array([0.1, -2.0, 3.0, 0.0])
        assert np.allclose(forward(spec, p, x), x)

    def test_size_mismatch_raises(self):
        spec = MlpSpec((3, 2))
        p = MlpParams(spec, np.zeros(spec.n_params()))
        with pytest.raises(ShapeError):
            forward(spec, p, np.ones(4))

    def test_batched_matches_single(self, rng):
        spec = MlpSpec((5, 16, 3))
        p = init_params(spec, rng, out_gain=1.0)
        X = rng.normal(size=(7, 5))
        Y = forward(spec, p, X)
        for i in range(7):
            assert np.allclose(Y[i], forward(spec, p, X[i]))

    def test_deterministic(self, rng):
        spec = MlpSpec((5, 8, 2))
        p = init_params(spec, rng)
        x = rng.normal(size=5)
        assert np.array_equal(forward(spec, p, x), forward(spec, p, x))


class TestBackward:
    def test_zero_upstream_zero_grad(self, rng):
        spec = MlpSpec((3, 8, 2))
        p = init_params(spec, rng, out_gain=1.0)
        _, cache = forward_cached(spec, p, rng.normal(size=3))
        g = backward(spec, p, cache, np.zeros(2))
        assert np.allclose(g, 0.0)

    def test_linearity_in_upstream(self, rng):
        spec = MlpSpec((4, 10, 3))
        p = init_params(spec, rng, out_gain=1.0)
        x = rng.normal(size=4)
        _, cache = forward_cached(spec, p, x)
        u1 = rng.normal(size=3)
        u2 = rng.normal(size=3)
        g1 = backward(spec, p, cache, u1)
        g2 = backward(spec, p, cache, u2)
        g12 = backward(spec, p, cache, u1 + u2)
        assert np.allclose(g12, g1 + g2, atol=1e-12)

    @pytest.mark.parametrize("head", ["linear", "bounded01"])
    def test_matches_finite_differences(self, head, rng):
        spec = MlpSpec((4, 12, 6, 3), output_head=head)
        p = init_params(spec, rng, out_gain=1.0)
        x = rng.normal(size=4)
        upstream = rng.normal(size=3)
        y, cache = forward_cached(spec, p, x)
        g = backward(spec, p, cache, upstream)
        if head == "gaussian":
            g = g[: len(g) - 3]
        g_fd = fd_gradient(spec, p, x, upstream)
        assert rel_err(g, g_fd) < 1e-6

    def test_random_specs_match_fd(self, rng):
        # broad sweep over shapes/heads; the acceptance suite runs 50+
        for _ in range(10):
            nl = rng.integers(1, 4)
            sizes = tuple(int(rng.integers(1, 9)) for _ in range(nl + 1))
            head = ["linear", "bounded01"][rng.integers(2)]
            spec = MlpSpec(sizes, output_head=head)
            p = init_params(spec, rng, out_gain=1.0)
            x = rng.normal(size=sizes[0])
            upstream = rng.normal(size=sizes[-1])
            _, cache = forward_cached(spec, p, x)
            g = backward(spec, p, cache, upstream)
            assert rel_err(g, fd_gradient(spec, p, x, upstream)) < 1e-4


class TestBounded01:
    def test_values(self):
        assert bounded01(0.0) == 0.0
        assert bounded01(-5.0) == 0.0
        assert bounded01(5.0) == pytest.approx(math.tanh(5.0), rel=1e-12)
        assert bounded01(5.0) == pytest.approx(0.9999, abs=1e-4)

    @given(st.floats(-50, 50))
    def test_range(self, x):
        assert 0.0 <= bounded01(x) <= 1.0


class TestGaussian:
    def test_degenerate_sigma_returns_mean(self, rng):
        spec = MlpSpec((2, 3), output_head="gaussian")
        p = init_params(spec, rng, log_std_init=-20.0)
        mean = np.array([0.3, -1.0, 2.0])
        a, _ = gaussian_sample(p, mean, rng)
        assert np.allclose(a, mean, atol=1e-8)

    def test_log_prob_at_mean(self):
        log_std = np.log(np.array([0.1, 0.5]))
        expect = -(log_std.sum() + 0.5 * math.log(2 * math.pi) * 2)
        got = gaussian_log_prob(np.zeros(2), np.zeros(2), log_std)
        assert got == pytest.approx(expect, rel=1e-12)

    def test_sample_moments(self):
        rng = np.random.default_rng(11)
        spec = MlpSpec((2, 2), output_head="gaussian")
        p = init_params(spec, rng, log_std_init=math.log(0.3))
        mean = np.array([1.0, -2.0])
        n = 100_000
        samples = np.array([gaussian_sample(p, mean, rng)[0] for _ in range(n)])
        se_mean = 0.3 / math.sqrt(n)
        assert np.all(np.abs(samples.mean(axis=0) - mean) < 3 * se_mean)
        se_std = 0.3 / math.sqrt(2 * (n - 1))
        assert np.all(np.abs(samples.std(axis=0) - 0.3) < 3 * se_std)

    def test_log_prob_matches_sampled_action(self, rng):
        spec = MlpSpec((2, 3), output_head="gaussian")
        p = init_params(spec, rng, log_std_init=math.log(0.2))
        mean = np.array([0.0, 1.0, -1.0])
        a, lp = gaussian_sample(p, mean, rng)
        assert lp == pytest.approx(gaussian_log_prob(a, mean, p.log_std), rel=1e-12)


class TestAdam:
    def test_zero_grad_no_change(self, rng):
        spec = MlpSpec((3, 4, 2))
        p = init_params(spec, rng)
        before = p.flat.copy()
        opt = Adam(spec.n_params(), lr=1e-2)
        opt.step(p, np.zeros(spec.n_params()))
        assert np.array_equal(p.flat, before)

    def test_descends_quadratic(self):
        spec = MlpSpec((1, 1))
        p = MlpParams(spec, np.array([5.0, 0.0]))
        opt = Adam(spec.n_params(), lr=0.1)
        for _ in range(500):
            grad = np.array([2 * p.flat[0], 0.0])
            opt.step(p, grad)
        assert abs(p.flat[0]) < 0.05

    def test_clip_grad_norm(self):
        g = np.array([3.0, 4.0])
        assert np.allclose(nnet.clip_grad_norm(g, 1.0), g / 5.0)
        assert np.allclose(nnet.clip_grad_norm(g, 10.0), g)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, rng, tmp_path):
        spec_a = MlpSpec((5, 16, 3), output_head="gaussian")
        spec_b = MlpSpec((7, 8, 2), output_head="bounded01")
        a = init_params(spec_a, rng)
        b = init_params(spec_b, rng)
        a.flat[3] = np.nextafter(1.0, 2.0)   # tickle exact float encoding
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, {"cpn": a, "mcn": b}, meta={"iteration": 7})
        nets, meta = load_checkpoint(path)
        assert meta["iteration"] == 7
        assert nets["cpn"].spec == spec_a
        assert np.array_equal(nets["cpn"].flat, a.flat)
        assert np.array_equal(nets["mcn"].flat, b.flat)

    def test_rejects_bad_schema(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"schema": "other", "nets": {}}')
        with pytest.raises(ValueError):
            load_checkpoint(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_gradient_property_random_nets(seed):
    rng = np.random.default_rng(seed)
    nl = int(rng.integers(1, 5))
    sizes = tuple(int(rng.integers(1, 65)) for _ in range(nl + 1))
    spec = MlpSpec(sizes, output_head=["linear", "bounded01"][int(rng.integers(2))])
    p = init_params(spec, rng, out_gain=1.0)
    x = rng.normal(size=sizes[0])
    upstream = rng.normal(size=sizes[-1])
    _, cache = forward_cached(spec, p, x)
    g = backward(spec, p, cache, upstream)
    # spot-check 12 random coordinates against central differences
    idx = rng.integers(0, len(g), size=min(12, len(g)))
    h = 1e-6
    for i in idx:
        fp = p.flat.copy(); fp[i] += h
        fm = p.flat.copy(); fm[i] -= h
        yp = forward(spec, MlpParams(spec, fp), x)
        ym = forward(spec, MlpParams(spec, fm), x)
        gi = float((upstream * (yp - ym)).sum() / (2 * h))
        assert abs(gi - g[i]) <= 1e-4 * max(1.0, abs(gi))
