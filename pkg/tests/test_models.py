"""Network-level tests: architecture contracts (equivariance, invariance,
identity-at-init), bijector round trips against a dense-Jacobian oracle,
and the KL estimator against the closed-form Gaussian value."""

import math

import numpy as np
import pytest

from swarmflow import autodiff as ad
from swarmflow.models import (BijectorNumericsError, CouplingBijector,
                              GatedContextualNet, ModelConfig, ParamStore,
                              PointSetEncoder, build_models, kl_divergence,
                              time_embedding)


def perturbed_bijector(dim, n_layers=4, hidden=8, seed=7, amount=0.3):
    """Bijector with randomized (non-identity) coupling weights."""
    rng = np.random.default_rng(seed)
    bij = CouplingBijector(dim, n_layers=n_layers, hidden=hidden, rng=rng)
    for _, node in bij.params.named():
        node.value = np.asarray(
            node.value + amount * rng.standard_normal(node.value.shape))
    return bij


def nudge_param(node, i, delta):
    """Return a copy of the param value with flat entry ``i`` shifted.

    Swapping the whole array avoids 0-d view pitfalls (numpy returns
    immutable scalars from 0-d arithmetic).
    """
    arr = np.array(node.value, dtype=np.float64).reshape(-1).copy()
    arr[i] += delta
    return arr.reshape(np.shape(node.value))


# ---------------------------------------------------------------------------
# parameter store

def test_param_store_basics():
    store = ParamStore()
    w = store.add("w", np.ones((2, 2)))
    with pytest.raises(ValueError):
        store.add("w", np.zeros(1))
    assert store["w"] is w
    assert store.n_parameters() == 4
    ad.backward(ad.reduce_sum(ad.mul(w, w)))
    assert w.grad is not None
    store.zero_grad()
    assert w.grad is None


def test_param_store_state_roundtrip():
    store = ParamStore()
    store.add("a", np.arange(6.0).reshape(2, 3))
    store.add("b", np.array(5.0))
    state = store.state_dict()
    store["a"].value = np.zeros((2, 3))
    store.load_state_dict(state)
    assert np.array_equal(store["a"].value, np.arange(6.0).reshape(2, 3))
    with pytest.raises(KeyError):
        store.load_state_dict({"a": state["a"]})
    with pytest.raises(ValueError):
        store.load_state_dict({"a": np.zeros(4), "b": state["b"]})


# ---------------------------------------------------------------------------
# time embedding

def test_time_embedding_values():
    assert np.allclose(time_embedding(0.0), [0.0, 0.0, 1.0])
    emb = time_embedding(0.25)
    assert emb[0] == 0.25
    assert emb[1] == pytest.approx(1.0, abs=1e-15)
    assert emb[2] == pytest.approx(0.0, abs=1e-15)
    # horizon rescales the argument
    assert np.array_equal(time_embedding(1.0, horizon=4.0),
                          time_embedding(0.25))


# ---------------------------------------------------------------------------
# velocity field network

def test_field_net_output_shape_and_zero_init():
    rng = np.random.default_rng(0)
    net = GatedContextualNet(latent_dim=8, hidden=16, blocks=3, rng=rng)
    x = rng.standard_normal((10, 3))
    z = rng.standard_normal(8)
    out = net(x, 0.5, z)
    assert out.shape == (10, 3)
    # final block is zero-initialized: untrained field is identically zero
    assert np.array_equal(out.value, np.zeros((10, 3)))


def test_field_net_latent_dim_mismatch_raises():
    net = GatedContextualNet(latent_dim=8, hidden=16, blocks=3,
                             rng=np.random.default_rng(0))
    with pytest.raises(ad.ShapeMismatchError):
        net(np.zeros((4, 3)), 0.5, np.zeros(9))
    with pytest.raises(ad.ShapeMismatchError):
        net(np.zeros((4, 2)), 0.5, np.zeros(8))


def test_field_net_permutation_equivariance():
    rng = np.random.default_rng(3)
    net = GatedContextualNet(latent_dim=6, hidden=16, blocks=3, rng=rng)
    for _, node in net.params.named():  # make the last block non-zero too
        node.value = node.value + 0.1 * rng.standard_normal(node.value.shape)
    x = rng.standard_normal((20, 3))
    z = rng.standard_normal(6)
    perm = rng.permutation(20)
    out = net(x, 0.3, z).value
    out_perm = net(x[perm], 0.3, z).value
    assert np.array_equal(out[perm], out_perm)


def test_field_net_per_point_independence():
    # evaluating a subset of rows gives the same rows as the full batch
    rng = np.random.default_rng(4)
    net = GatedContextualNet(latent_dim=6, hidden=16, blocks=3, rng=rng)
    for _, node in net.params.named():
        node.value = node.value + 0.1 * rng.standard_normal(node.value.shape)
    x = rng.standard_normal((12, 3))
    z = rng.standard_normal(6)
    full = net(x, 0.7, z).value
    part = net(x[3:7], 0.7, z).value
    assert np.allclose(full[3:7], part, rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# point-set encoder

def test_encoder_shapes_and_standard_normal_init():
    rng = np.random.default_rng(1)
    enc = PointSetEncoder(latent_dim=8, widths=(8, 16), rng=rng)
    mu, logvar = enc(rng.standard_normal((30, 3)))
    assert mu.shape == (8,) and logvar.shape == (8,)
    # zero-initialized heads: untrained posterior is exactly N(0, I)
    assert np.array_equal(mu.value, np.zeros(8))
    assert np.array_equal(logvar.value, np.zeros(8))


def test_encoder_permutation_invariance_exact():
    rng = np.random.default_rng(2)
    enc = PointSetEncoder(latent_dim=8, widths=(8, 16), rng=rng)
    for _, node in enc.params.named():
        node.value = node.value + 0.2 * rng.standard_normal(node.value.shape)
    x = rng.standard_normal((40, 3))
    perm = rng.permutation(40)
    mu1, lv1 = enc(x)
    mu2, lv2 = enc(x[perm])
    assert np.array_equal(mu1.value, mu2.value)
    assert np.array_equal(lv1.value, lv2.value)


def test_encoder_empty_cloud_raises():
    enc = PointSetEncoder(latent_dim=4, widths=(8,),
                          rng=np.random.default_rng(0))
    with pytest.raises(ad.ShapeMismatchError):
        enc(np.zeros((0, 3)))


def test_encode_reparameterization_formula():
    rng = np.random.default_rng(5)
    enc = PointSetEncoder(latent_dim=6, widths=(8, 8), rng=rng)
    for _, node in enc.params.named():
        node.value = node.value + 0.2 * rng.standard_normal(node.value.shape)
    x = rng.standard_normal((10, 3))
    z, mu, logvar = enc.encode(x, np.random.default_rng(123))
    eps = np.random.default_rng(123).standard_normal(6)
    assert np.array_equal(z.value,
                          mu.value + np.exp(0.5 * logvar.value) * eps)


# ---------------------------------------------------------------------------
# coupling bijector

def test_bijector_identity_at_init():
    bij = CouplingBijector(6, n_layers=4, hidden=8,
                           rng=np.random.default_rng(0))
    w = np.random.default_rng(1).standard_normal(6)
    z, logdet = bij.forward(w)
    assert np.array_equal(z.value, w)
    assert logdet.value == 0.0


def test_bijector_roundtrip_100_vectors():
    bij = perturbed_bijector(8)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        w = rng.standard_normal(8)
        z, logdet_f = bij.forward(w)
        back, logdet_i = bij.inverse(z.value)
        worst = max(worst, float(np.max(np.abs(back.value - w))))
        # determinants of a map and its inverse cancel
        assert logdet_f.value + logdet_i.value == pytest.approx(0.0, abs=1e-10)
    assert worst < 1e-6


def test_bijector_logdet_matches_dense_jacobian():
    bij = perturbed_bijector(4, n_layers=4, hidden=8, seed=3)
    rng = np.random.default_rng(21)
    eps = 1e-6
    for _ in range(5):
        w = rng.standard_normal(4)
        jac = np.zeros((4, 4))
        for j in range(4):
            delta = np.zeros(4)
            delta[j] = eps
            hi, _ = bij.forward(w + delta)
            lo, _ = bij.forward(w - delta)
            jac[:, j] = (hi.value - lo.value) / (2.0 * eps)
        sign, ref = np.linalg.slogdet(jac)
        assert sign > 0
        _, logdet = bij.forward(w)
        assert abs(logdet.value - ref) <= 1e-4 * max(1.0, abs(ref))


def test_bijector_input_shape_raises():
    bij = CouplingBijector(6, n_layers=2, hidden=4,
                           rng=np.random.default_rng(0))
    with pytest.raises(ad.ShapeMismatchError):
        bij.forward(np.zeros(5))
    with pytest.raises(ValueError):
        CouplingBijector(1, rng=np.random.default_rng(0))


def test_bijector_nonfinite_intermediate_names_layer():
    bij = perturbed_bijector(6, n_layers=3)
    bij.params["c1.s_factor"].value = np.array(1e4)  # exp overflow in layer 1
    w = 10.0 * np.ones(6)
    with np.errstate(over="ignore", invalid="ignore"), \
            pytest.raises(BijectorNumericsError, match="layer 1"):
        bij.forward(w)


def test_bijector_parameter_gradients_fd():
    bij = perturbed_bijector(6, n_layers=2, seed=9)
    w = np.random.default_rng(13).standard_normal(6)
    weights = np.random.default_rng(14).standard_normal(6)

    def loss_value():
        z, logdet = bij.forward(w)
        return ad.reduce_sum(ad.mul(z, weights)) + logdet

    node = loss_value()
    for _, p in bij.params.named():
        p.grad = None
    ad.backward(node)
    rng = np.random.default_rng(15)
    for name, p in bij.params.named():
        size = np.size(p.value)
        gflat = np.reshape(p.grad, -1)
        picks = rng.choice(size, size=min(2, size), replace=False)
        original = p.value
        for i in picks:
            p.value = nudge_param(p, i, +1e-5)
            hi = float(loss_value().value)
            p.value = original
            p.value = nudge_param(p, i, -1e-5)
            lo = float(loss_value().value)
            p.value = original
            fd = (hi - lo) / 2e-5
            an = gflat[i]
            err = abs(an - fd)
            assert err <= 1e-4 * max(abs(an), abs(fd)) or err <= 1e-8, \
                f"{name}[{i}]: analytic {an}, fd {fd}"


# ---------------------------------------------------------------------------
# KL estimator

def closed_form_kl(mu, logvar):
    """KL(N(mu, diag(exp(logvar))) || N(0, I))."""
    var = np.exp(logvar)
    return 0.5 * float(np.sum(mu * mu + var - logvar - 1.0))


def test_kl_zero_when_posterior_is_prior():
    bij = CouplingBijector(6, n_layers=2, hidden=4,
                           rng=np.random.default_rng(0))
    rng = np.random.default_rng(33)
    for _ in range(10):
        z = ad.wrap(rng.standard_normal(6))
        kl = kl_divergence(ad.wrap(np.zeros(6)), ad.wrap(np.zeros(6)), z, bij)
        assert kl.value == 0.0


def test_kl_montecarlo_matches_closed_form():
    # identity bijector: prior is exactly N(0, I), so the Monte-Carlo mean
    # of the single-sample estimator must approach the Gaussian closed form
    dim = 4
    bij = CouplingBijector(dim, n_layers=2, hidden=4,
                           rng=np.random.default_rng(0))
    mu = np.array([0.5, -0.3, 0.8, 0.1])
    logvar = np.array([0.2, -0.4, 0.1, -0.1])
    expected = closed_form_kl(mu, logvar)
    rng = np.random.default_rng(77)
    sigma = np.exp(0.5 * logvar)
    total = 0.0
    n = 100_000
    for _ in range(n):
        z = mu + sigma * rng.standard_normal(dim)
        total += float(kl_divergence(ad.wrap(mu), ad.wrap(logvar),
                                     ad.wrap(z), bij).value)
    estimate = total / n
    assert abs(estimate - expected) <= 0.01 * abs(expected), \
        f"MC {estimate} vs closed form {expected}"


def test_kl_gradient_through_reparameterization():
    # gradient w.r.t. mu of E[KL] at the sample should match FD on the
    # same fixed noise draw
    dim = 4
    bij = perturbed_bijector(dim, n_layers=2, seed=5)
    eps = np.random.default_rng(6).standard_normal(dim)
    logvar = np.zeros(dim)

    def kl_at(mu_arr):
        mu = ad.wrap(mu_arr)
        z = mu + ad.wrap(eps)
        return kl_divergence(mu, ad.wrap(logvar), z, bij)

    mu0 = np.array([0.3, -0.2, 0.5, 0.0])
    mu = ad.wrap(mu0)
    z = mu + ad.wrap(eps)
    kl = kl_divergence(mu, ad.wrap(logvar), z, bij)
    ad.backward(kl)
    for i in range(dim):
        d = np.zeros(dim)
        d[i] = 1e-5
        fd = (float(kl_at(mu0 + d).value) - float(kl_at(mu0 - d).value)) / 2e-5
        an = mu.grad[i]
        assert abs(an - fd) <= 1e-4 * max(1.0, abs(fd))


# ---------------------------------------------------------------------------
# model set

def test_build_models_and_named_parameters():
    cfg = ModelConfig(latent_dim=8, field_hidden=16, field_blocks=3,
                      encoder_widths=(8, 16), coupling_layers=4,
                      coupling_hidden=8)
    models = build_models(cfg, np.random.default_rng(0))
    names = [n for n, _ in models.named_parameters()]
    assert len(names) == len(set(names))
    assert any(n.startswith("field.") for n in names)
    assert any(n.startswith("encoder.") for n in names)
    assert any(n.startswith("bijector.") for n in names)
    state = models.state_dict()
    models2 = build_models(cfg, np.random.default_rng(99))
    models2.load_state_dict(state)
    for (_, a), (_, b) in zip(models.named_parameters(),
                              models2.named_parameters()):
        assert np.array_equal(a.value, b.value)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(latent_dim=1)
    cfg = ModelConfig(latent_dim=8, encoder_widths=(8, 16))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
