import numpy as np
import pytest

from p2nf import autodiff as ad
from p2nf.field import FieldConfig, target_layout
from p2nf.hypernet import (ColoredPointCloud, HyperConfig, HyperNet,
                           kl_divergence, reparameterize)

TINY_FIELD = FieldConfig(trunk_depth=2, trunk_width=8, feature_dim=8,
                         pos_freqs=2, dir_freqs=1)
TINY_HYPER = HyperConfig(latent_dim=8, encoder_hidden=(16, 32),
                         decoder_hidden=(32,), embed_dim=4)


def random_cloud(rng, n=64):
    pos = rng.normal(size=(n, 3))
    pos *= rng.uniform(0.2, 0.9) / np.linalg.norm(pos, axis=1, keepdims=True)
    return ColoredPointCloud(np.hstack([pos, rng.random((n, 3))]).astype(np.float32))


@pytest.fixture
def net(rng):
    return HyperNet(TINY_FIELD, TINY_HYPER, rng)


# -- cloud validation ---------------------------------------------------------

def test_cloud_rejects_empty_and_out_of_range():
    with pytest.raises(ValueError):
        ColoredPointCloud(np.zeros((0, 6)))
    bad_pos = np.zeros((4, 6))
    bad_pos[0, 0] = 2.0
    with pytest.raises(ValueError, match="unit sphere"):
        ColoredPointCloud(bad_pos)
    bad_col = np.zeros((4, 6))
    bad_col[0, 4] = 1.5
    with pytest.raises(ValueError, match="colors"):
        ColoredPointCloud(bad_col)


# -- encoder ------------------------------------------------------------------

def test_encode_permutation_invariant_exactly(net, rng):
    cloud = random_cloud(rng, 256)
    z0 = net.encode(cloud).z
    for _ in range(10):
        perm = rng.permutation(cloud.n_points)
        z = net.encode(ColoredPointCloud(cloud.points[perm])).z
        assert np.array_equal(z, z0)


def test_encode_invariant_to_duplication(net, rng):
    cloud = random_cloud(rng, 64)
    doubled = ColoredPointCloud(np.vstack([cloud.points, cloud.points]))
    assert np.array_equal(net.encode(cloud).z, net.encode(doubled).z)


def test_dominating_point_changes_code(net, rng):
    cloud = random_cloud(rng, 64)
    pts = cloud.points.copy()
    pts[0] = [0.0, 0.0, 0.999, 1.0, 1.0, 1.0]  # extreme corner of the domain
    z0 = net.encode(cloud).z
    z1 = net.encode(ColoredPointCloud(pts)).z
    assert np.linalg.norm(z1 - z0) > 0


# -- variational head ---------------------------------------------------------

def test_reparameterize_collapses_at_tiny_variance(rng):
    mu = rng.normal(size=8)
    z = reparameterize(mu, np.full(8, -60.0), rng)  # clamped at -20
    np.testing.assert_allclose(z, mu, atol=1e-4)


def test_reparameterize_sample_mean(rng):
    mu = np.array([0.7, -1.2])
    logvar = np.array([0.4, -0.3])
    draws = np.stack([reparameterize(mu, logvar, rng) for _ in range(100_000)])
    se = np.exp(0.5 * logvar) / np.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - mu) < 3 * se)


def test_reparameterize_reproducible():
    mu, logvar = np.ones(4), np.zeros(4)
    a = reparameterize(mu, logvar, np.random.default_rng(9))
    b = reparameterize(mu, logvar, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_kl_trivial_values():
    assert kl_divergence(np.zeros(4), np.zeros(4)) == 0.0
    assert kl_divergence(np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)
    expected = -0.5 * (1.0 + np.log(2.0) - 2.0)
    assert kl_divergence(np.array([0.0]), np.array([np.log(2.0)])) == \
        pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.1534, abs=1e-4)


def test_kl_nonnegative_random(rng):
    for _ in range(2000):
        d = int(rng.integers(1, 16))
        assert kl_divergence(rng.normal(size=d) * 3, rng.normal(size=d) * 3) >= 0.0


def test_kl_zero_only_at_prior(rng):
    assert kl_divergence(np.zeros(3), np.zeros(3)) == 0.0
    for _ in range(100):
        mu = rng.normal(size=3)
        lv = rng.normal(size=3)
        if np.any(mu != 0) or np.any(lv != 0):
            assert kl_divergence(mu, lv) > 0.0


def test_variational_encode_returns_all_parts(rng):
    net = HyperNet(TINY_FIELD, HyperConfig(latent_dim=8, encoder_hidden=(16, 32),
                                           decoder_hidden=(32,), embed_dim=4,
                                           variational=True), rng)
    cloud = random_cloud(rng)
    code = net.encode(cloud, rng)
    assert code.mu is not None and code.logvar is not None
    assert code.z.shape == (8,)
    code2 = net.encode(cloud)  # no rng: posterior mean
    assert np.array_equal(code2.z, code2.mu)


# -- decoder ------------------------------------------------------------------

def test_decode_shapes_match_layout(net, rng):
    tw = net.decode_weights(rng.normal(size=8))
    for (w, b), spec in zip(tw.layers, target_layout(TINY_FIELD)):
        assert w.shape == (spec.in_dim, spec.out_dim)
        assert b.shape == (spec.out_dim,)


def test_decode_deterministic_bitwise(net, rng):
    z = rng.normal(size=8)
    a = net.decode_weights(z)
    b = net.decode_weights(z)
    assert all(np.array_equal(wa, wb) and np.array_equal(ba, bb)
               for (wa, ba), (wb, bb) in zip(a.layers, b.layers))


def test_layer_chunks_differ_through_embeddings(net, rng):
    tw = net.decode_weights(rng.normal(size=8))
    # trunk0 (15, 8) and trunk1 (23, 8) share no shape, compare the biases and
    # overlapping slices of the two chunks produced by different embeddings
    w0 = tw.layers[0][0][:15, :8].ravel()
    w1 = tw.layers[1][0][:15, :8].ravel()
    assert np.linalg.norm(w0 - w1) > 0


def test_decode_rejects_wrong_latent_dim(net):
    with pytest.raises(ValueError):
        net.decode_weights(np.zeros(9))


def test_generated_weights_are_finite_and_scaled(net, rng):
    for _ in range(5):
        tw = net.generate(random_cloud(rng))
        for (w, b), spec in zip(tw.layers, target_layout(TINY_FIELD)):
            assert np.all(np.isfinite(w)) and np.all(np.isfinite(b))
            assert w.std() < 10.0 / np.sqrt(spec.in_dim)


def test_generate_accepts_only_valid_clouds(net):
    with pytest.raises(ValueError):
        net.generate(ColoredPointCloud(np.zeros((0, 6))))


# -- end-to-end differentiability --------------------------------------------

def test_gradients_flow_from_weights_into_all_parameters(net, rng, f64):
    net64 = HyperNet(TINY_FIELD, TINY_HYPER, np.random.default_rng(3))
    cloud = random_cloud(rng, 16)
    bundle = net64.build(cloud)
    out = ad.constant(np.zeros(()))
    for w, b in bundle.weight_nodes:
        coeff = ad.constant(rng.normal(size=w.shape))
        out = ad.add(out, ad.reduce_sum(ad.mul(w, coeff)))
        out = ad.add(out, ad.reduce_sum(b))
    grads = ad.backward(out)
    leaf_names = {leaf.uid: name for name, leaf in bundle.leaves.items()}
    got = {leaf_names[t.uid] for t in grads}
    assert got == set(net64.params)  # every parameter participates
