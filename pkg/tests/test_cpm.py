import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rainbalance import tensor as tn
from rainbalance.cpm import LinearProbabilityMap, ProbabilityVAE, kl_divergence, reparameterize
from rainbalance.gradcheck import grad_check
from rainbalance.tensor import Parameter, Tensor

from conftest import rng


def kl_oracle(mu, log_var):
    total = 0.0
    for m, lv in zip(np.ravel(mu), np.ravel(log_var)):
        total += -0.5 * (1.0 + lv - m * m - np.exp(lv))
    return total


def _vae(seed=0, k=3, n=2, hidden=4):
    return ProbabilityVAE("cpm", k, n, hidden, rng(seed))


def _zero(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


# ---------------------------------------------------------------- KL

def test_kl_spot_values():
    assert kl_divergence(np.zeros((3, 2)), np.zeros((3, 2))).item() == 0.0
    assert kl_divergence(np.array([[1.0]]), np.array([[0.0]])).item() == 0.5


def test_kl_matches_elementwise_oracle():
    r = rng(30)
    for _ in range(100):
        shape = (r.integers(1, 6), r.integers(1, 4))
        mu, lv = r.standard_normal(shape), r.uniform(-3, 3, shape)
        assert kl_divergence(mu, lv).item() == pytest.approx(kl_oracle(mu, lv), abs=1e-10)


def test_kl_batched_reduction_is_mean_of_per_sequence_sums():
    r = rng(31)
    mu, lv = r.standard_normal((4, 5, 2)), r.uniform(-2, 2, (4, 5, 2))
    per = [kl_oracle(mu[b], lv[b]) for b in range(4)]
    assert kl_divergence(mu, lv).item() == pytest.approx(np.mean(per), abs=1e-12)


def test_kl_matches_monte_carlo_estimate():
    r = rng(32)
    mu, lv = r.standard_normal((2, 2)), r.uniform(-1, 1, (2, 2))
    sd = np.exp(0.5 * lv)
    z = mu + sd * r.standard_normal((1_000_000, 2, 2))
    log_q = -0.5 * (((z - mu) / sd) ** 2 + lv + np.log(2 * np.pi))
    log_p = -0.5 * (z ** 2 + np.log(2 * np.pi))
    mc = np.mean(np.sum(log_q - log_p, axis=(1, 2)))
    assert abs(kl_divergence(mu, lv).item() - mc) < 0.01


@given(arrays(np.float64, (3, 2), elements=st.floats(-20, 20)),
       arrays(np.float64, (3, 2), elements=st.floats(-10, 10)))
def test_kl_is_nonnegative(mu, lv):
    assert kl_divergence(mu, lv).item() >= -1e-9


@pytest.mark.parametrize("mu,lv", [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (-1.0, -1.0), (0.0, -1e-3)])
def test_kl_zero_only_at_prior(mu, lv):
    value = kl_divergence(np.array([[mu]]), np.array([[lv]])).item()
    if mu == 0.0 and lv == 0.0:
        assert value == 0.0
    else:
        assert value > 0.0


# ---------------------------------------------------------------- reparameterisation

def test_reparameterize_spot_values():
    mu = rng(33).standard_normal((4, 2))
    np.testing.assert_array_equal(reparameterize(mu, np.zeros((4, 2)), np.zeros((4, 2))).data, mu)
    np.testing.assert_array_equal(reparameterize(mu, np.zeros((4, 2)), np.ones((4, 2))).data, mu + 1)


def test_reparameterize_moments():
    eps = rng(34).standard_normal((100_000, 1))
    z = reparameterize(np.full((100_000, 1), 2.0), np.full((100_000, 1), np.log(4.0)), eps).data
    assert abs(z.mean() - 2.0) < 0.02
    assert abs(z.std() - 2.0) < 0.02


def test_reparameterize_shape_check():
    with pytest.raises(tn.ShapeError):
        reparameterize(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)))


# ---------------------------------------------------------------- VAE

def test_zero_weights_with_bias_give_constant_mean():
    vae = _vae()
    _zero(vae)
    vae.proj_mu.bias.data = np.array([0.7, -1.2])
    post = vae.encode(Tensor(rng(35).dirichlet(np.ones(3), size=5)))
    np.testing.assert_array_equal(post.mu.data, np.tile([0.7, -1.2], (5, 1)))


def test_shapes_and_eps_zero_is_mean():
    vae = _vae(k=3, n=2)
    pi = Tensor(rng(36).dirichlet(np.ones(3), size=4))
    post = vae.encode(pi)
    assert post.mu.shape == post.log_var.shape == (4, 2)
    pi_hat, post, kl = vae(pi, None)
    assert post.z is post.mu
    assert pi_hat.shape == (4, 3)


def test_zero_decoder_gives_uniform():
    vae = _vae(k=4)
    _zero(vae.dec)
    _zero(vae.proj_pred)
    pi_hat = vae.decode(Tensor(rng(37).standard_normal((6, 2)))).data
    np.testing.assert_array_equal(pi_hat, 0.25)


def test_decoded_rows_are_distributions():
    vae = _vae(seed=1, k=5, n=3, hidden=6)
    pi_hat = vae.decode(Tensor(rng(38).standard_normal((2, 7, 3)) * 5)).data
    np.testing.assert_allclose(pi_hat.sum(-1), 1.0, atol=1e-12)


def test_log_var_is_clamped():
    vae = _vae()
    vae.proj_sigma.bias.data = np.array([50.0, -50.0])
    lv = vae.encode(Tensor(rng(39).dirichlet(np.ones(3), size=3))).log_var.data
    np.testing.assert_array_equal(lv[:, 0], 10.0)
    np.testing.assert_array_equal(lv[:, 1], -10.0)


def test_fixed_eps_fixes_output_bitwise():
    vae = _vae(seed=2)
    r = rng(40)
    pi, eps = Tensor(r.dirichlet(np.ones(3), size=(2, 5))), r.standard_normal((2, 5, 2))
    a, _, _ = vae(pi, eps)
    b, _, _ = vae(pi, eps)
    np.testing.assert_array_equal(a.data, b.data)


def test_encoder_time_reversal_swaps_lanes():
    vae = _vae(seed=3)
    pi = rng(41).dirichlet(np.ones(3), size=(1, 6))
    fwd = vae.enc_mu(Tensor(pi)).data
    mirror = ProbabilityVAE("m", 3, 2, 4, rng(9))
    for src, dst in ((vae.enc_mu.fwd, mirror.enc_mu.bwd), (vae.enc_mu.bwd, mirror.enc_mu.fwd)):
        for a, b in zip(src.parameters(), dst.parameters()):
            b.data = a.data.copy()
    rev = mirror.enc_mu(Tensor(pi[:, ::-1])).data[:, ::-1]
    np.testing.assert_allclose(np.concatenate([rev[..., 4:], rev[..., :4]], -1), fwd, atol=1e-14)


def test_encoder_gradcheck():
    vae = _vae(seed=4)
    pi = Tensor(rng(42).dirichlet(np.ones(3), size=5))
    params = [p for p in vae.parameters() if p.name.startswith(("cpm.enc", "cpm.proj_mu", "cpm.proj_sigma"))]

    def fn():
        post = vae.encode(pi)
        return tn.add(tn.sum(post.mu), tn.sum(post.log_var))

    assert grad_check(fn, params).passed


def test_full_vae_gradcheck_with_fixed_eps():
    vae = _vae(seed=5, k=3, n=2)
    r = rng(43)
    pi, eps, w = Tensor(r.dirichlet(np.ones(3), size=6)), r.standard_normal((6, 2)), r.standard_normal((6, 3))

    def fn():
        pi_hat, _, kl = vae(pi, eps)
        return tn.add(tn.sum(tn.mul(pi_hat, w)), kl)

    report = grad_check(fn, vae.parameters())
    assert report.passed, report.lines()


def test_linear_map_is_softmax_of_affine_and_has_no_kl():
    lmap = LinearProbabilityMap("cpm", 3, rng(44))
    pi = rng(45).dirichlet(np.ones(3), size=4)
    out, post, kl = lmap(Tensor(pi))
    logits = pi @ lmap.proj.weight.data + lmap.proj.bias.data
    ref = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    np.testing.assert_allclose(out.data, ref, atol=1e-14)
    assert post is None and kl.item() == 0.0
    assert isinstance(lmap.proj.weight, Parameter)
