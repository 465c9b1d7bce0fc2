import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from fleetadapt import neighbors as N


def _centroids_at_distances(dists, dim=2):
    """Unit vectors at the given cosine distances from e1."""
    out = {}
    for i, d in enumerate(dists):
        ang = math.acos(1.0 - d)
        v = np.zeros(dim)
        v[0], v[1] = math.cos(ang), (1 if i % 2 == 0 else -1) * math.sin(ang)
        out[f"v{i}"] = v
    return out


# -- centroid / PCA ---------------------------------------------------------

def test_centroid_examples():
    np.testing.assert_array_equal(N.compute_centroid([(1, 0), (0, 1)]), [0.5, 0.5])
    np.testing.assert_array_equal(N.compute_centroid([(2.0, 3.0)]), [2.0, 3.0])
    with pytest.raises(ValueError):
        N.compute_centroid([])


@given(st.permutations(list(range(6))))
def test_centroid_permutation_invariant(perm):
    pts = np.arange(18, dtype=float).reshape(6, 3) ** 1.5
    np.testing.assert_allclose(N.compute_centroid(pts[list(perm)]), N.compute_centroid(pts), rtol=1e-14)


def test_pca_line_is_rank_one():
    t = np.linspace(-3, 3, 40)[:, None]
    direction = np.random.default_rng(0).normal(size=16)
    pca = N.fit_pca(t * direction + 5.0)
    assert pca.k == 1
    assert pca.explained_variance_ratio[0] == pytest.approx(1.0)


def test_pca_isotropic_needs_fifteen_components():
    # an exactly isotropic sample: scaled orthonormal columns, centered
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.normal(size=(64, 17)))
    X = q[:, 1:] * 10.0
    X -= X.mean(0)
    # re-orthonormalize after centering so every direction has equal variance
    u, _, vt = np.linalg.svd(X, full_matrices=False)
    X = u @ vt
    pca = N.fit_pca(X)
    assert pca.k == 15


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 100.0), min_size=2, max_size=10), st.integers(0, 10_000))
def test_pca_minimal_k_on_known_spectrum(variances, seed):
    spec = np.sort(np.array(variances))[::-1]
    ratio = spec / spec.sum()
    cum = np.cumsum(ratio)
    # avoid spectra whose cumulative sum sits on the 0.9 boundary within float noise
    assume(np.all(np.abs(cum - 0.9) > 1e-6))
    expect_k = int(np.argmax(cum >= 0.9) + 1)
    D = len(spec)
    rng = np.random.default_rng(seed)
    n = 4 * D + 4
    Z = rng.normal(size=(n, D))
    Z -= Z.mean(0)
    # whiten exactly so the sample covariance has the constructed spectrum
    u, _, vt = np.linalg.svd(Z, full_matrices=False)
    Z = u * np.sqrt(n - 1)
    rot, _ = np.linalg.qr(rng.normal(size=(D, D)))
    X = (Z * np.sqrt(spec)) @ rot.T + rng.normal(size=D)
    pca = N.fit_pca(X)
    assert pca.k == expect_k
    assert pca.explained_variance_ratio.sum() >= 0.9
    np.testing.assert_allclose(pca.explained_variance_ratio, ratio[:expect_k], rtol=1e-8)
    np.testing.assert_allclose(pca.components @ pca.components.T, np.eye(pca.k), atol=1e-9)
    recon = pca.inverse_transform(pca.transform(X))
    lost = ((X - recon) ** 2).sum() / ((X - X.mean(0)) ** 2).sum()
    assert lost <= 0.1 + 1e-9


def test_pca_rejects_degenerate():
    with pytest.raises(ValueError):
        N.fit_pca(np.ones((5, 3)))
    with pytest.raises(ValueError):
        N.fit_pca(np.ones((1, 3)))


def test_pca_dict_round_trip():
    X = np.random.default_rng(2).normal(size=(30, 5))
    pca = N.fit_pca(X)
    back = N.PCAProjection.from_dict(pca.to_dict())
    np.testing.assert_array_equal(back.transform(X), pca.transform(X))


# -- threshold --------------------------------------------------------------

def test_epsilon_from_distance_example():
    assert N.epsilon_from_distances([0.1, 0.2, 0.3]) == pytest.approx(0.2 + 2 * math.sqrt(2 / 300), abs=1e-12)
    assert N.epsilon_from_distances([0.1, 0.2, 0.3]) == pytest.approx(0.36330, abs=1e-5)


def test_adaptive_threshold_degenerate_cases():
    assert N.adaptive_threshold([np.array([1.0, 2.0])] * 3) == pytest.approx(0.0, abs=1e-12)
    a, b = np.array([1.0, 0.0]), np.array([1.0, 1.0])
    assert N.adaptive_threshold([a, b]) == pytest.approx(N.cosine_distance(a, b), abs=1e-12)
    with pytest.raises(ValueError):
        N.adaptive_threshold([a, np.zeros(2)])
    with pytest.raises(ValueError):
        N.adaptive_threshold([a])


def test_adaptive_threshold_on_constructed_distances():
    # three centroids whose pairwise cosine distances are computable by hand
    c = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0])]
    d = [1.0, 1 - 1 / math.sqrt(2), 1 - 1 / math.sqrt(2)]
    mean = sum(d) / 3
    sd = math.sqrt(sum((x - mean) ** 2 for x in d) / 3)
    assert N.adaptive_threshold(c) == pytest.approx(mean + 2 * sd, abs=1e-9)


# -- selection --------------------------------------------------------------

def test_select_two_neighbors_example():
    cents = _centroids_at_distances([0.1, 0.2])
    ns = N.select_neighbors(np.array([1.0, 0.0]), cents, 0.5)
    assert ns.verdict == N.NEIGHBORS
    assert ns.ids == ["v0", "v1"]
    np.testing.assert_allclose([m.distance for m in ns.members], [0.1, 0.2], atol=1e-12)
    np.testing.assert_allclose(ns.weights, [0.8, 0.2], atol=1e-9)


def test_truncation_example():
    np.testing.assert_allclose(N.truncate_weights([0.8, 0.15, 0.05]), [0.8 / 0.95, 0.15 / 0.95], atol=1e-9)
    assert N.truncate_weights([0.8, 0.15, 0.05])[0] == pytest.approx(0.8421052631578947, abs=1e-9)


def test_truncation_through_select():
    # raw inverse-square weights (0.8, 0.15, 0.05) require d ~ 1/sqrt(w)
    w = np.array([0.8, 0.15, 0.05])
    d = 0.05 / np.sqrt(w / w[0])
    cents = _centroids_at_distances(d, dim=3)
    ns = N.select_neighbors(np.array([1.0, 0.0, 0.0]), cents, 1.0)
    assert len(ns.members) == 2
    np.testing.assert_allclose([m.raw_weight for m in ns.members], [0.8, 0.15], atol=1e-9)
    np.testing.assert_allclose(ns.weights, [0.8 / 0.95, 0.15 / 0.95], atol=1e-9)


def test_out_of_distribution_verdict():
    cents = _centroids_at_distances([0.6, 0.7, 0.9])
    ns = N.select_neighbors(np.array([1.0, 0.0]), cents, 0.5)
    assert ns.verdict == N.OOD and ns.members == []
    assert set(ns.distances) == {"v0", "v1", "v2"}
    err = N.OutOfDistributionError(ns.distances, ns.epsilon)
    assert "v2=0.9000" in str(err) and "epsilon=0.5000" in str(err)


def test_zero_norm_query_rejected():
    with pytest.raises(ValueError):
        N.select_neighbors(np.zeros(2), {"a": np.ones(2)}, 0.5)


def test_zero_distance_clamped():
    cents = {"a": np.array([1.0, 0.0]), "b": np.array([1.0, 0.2])}
    ns = N.select_neighbors(np.array([2.0, 0.0]), cents, 1.0)
    assert ns.ids == ["a"]
    assert np.isfinite(ns.members[0].raw_weight)


def test_ties_broken_by_id():
    cents = {"b": np.array([1.0, 0.3]), "a": np.array([1.0, -0.3])}
    ns = N.select_neighbors(np.array([1.0, 0.0]), cents, 1.0)
    assert ns.ids == ["a", "b"]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 9), st.floats(0.1, 100.0))
def test_selection_properties(seed, V, scale):
    rng = np.random.default_rng(seed)
    cents = {f"v{i}": rng.normal(size=4) for i in range(V)}
    q = rng.normal(size=4)
    eps = N.adaptive_threshold(list(cents.values()))
    ns = N.select_neighbors(q, cents, eps)
    scaled = N.select_neighbors(q * scale, {k: v * scale for k, v in cents.items()}, eps)
    assert ns.verdict == scaled.verdict and ns.ids == scaled.ids
    np.testing.assert_allclose(ns.weights, scaled.weights, rtol=1e-9)
    if ns.verdict == N.NEIGHBORS:
        w = ns.weights
        assert np.all(w > 0) and abs(w.sum() - 1) < 1e-9
        assert np.all(np.diff(w) <= 1e-15)
        assert all(m.distance <= eps for m in ns.members)
        dists = [m.distance for m in ns.members]
        assert dists == sorted(dists)
        raw = np.array([m.raw_weight for m in ns.members])
        # minimal prefix: dropping the last kept member falls below the cutoff
        assert raw.sum() >= 0.9 - 1e-12
        assert raw[:-1].sum() < 0.9 or len(raw) == 1
    else:
        assert all(d > eps for d in ns.distances.values())


def test_latent_index_query_and_round_trip():
    rng = np.random.default_rng(5)
    means = {f"v{i}": rng.normal(size=6) * 4 for i in range(5)}
    emb = {k: m + rng.normal(size=(40, 6)) * 0.3 for k, m in means.items()}
    index = N.LatentIndex.build(emb)
    query = means["v3"] + rng.normal(size=(10, 6)) * 0.3
    ns = index.query(query)
    assert ns.verdict == N.NEIGHBORS and ns.ids[0] == "v3"
    back = N.LatentIndex.from_dict(index.to_dict())
    assert back.query(query).to_dict() == ns.to_dict()


def test_neighbor_set_json():
    ns = N.select_neighbors(np.array([1.0, 0.0]), _centroids_at_distances([0.1, 0.2]), 0.5)
    text = ns.to_json()
    assert '"verdict": "neighbors"' in text and '"raw_weight"' in text
