import numpy as np
import pytest

from thubert import kmeans
from thubert.encoder import Encoder, TransformerConfig
from thubert.kmeans import Codebook


def brute_nearest(x, c):
    out = []
    for row in x:
        best, arg = np.inf, -1
        for j, cen in enumerate(c):
            d = float(((row - cen) ** 2).sum())
            if d < best:
                best, arg = d, j
        out.append(arg)
    return np.array(out)


def restart_oracle(x, k, restarts, seed):
    """Best distortion over plain Lloyd runs from uniformly drawn data points."""
    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(restarts):
        c = x[rng.choice(len(x), k, replace=False)].copy()
        for _ in range(100):
            d = ((x[:, None] - c[None]) ** 2).sum(-1)
            a = d.argmin(1)
            new = np.array([x[a == j].mean(0) if (a == j).any() else c[j] for j in range(k)])
            if np.array_equal(new, c):
                break
            c = new
        best = min(best, ((x[:, None] - c[None]) ** 2).sum(-1).min(1).mean())
    return best


def test_k1_centroid_is_mean():
    x = np.random.default_rng(0).standard_normal((57, 3))
    np.testing.assert_allclose(kmeans.fit_kmeans(x, 1).centroids[0], x.mean(0), rtol=1e-13, atol=1e-15)


def test_two_points_two_clusters():
    x = np.array([[0.0, 0.0], [10.0, 10.0]])
    cb = kmeans.fit_kmeans(x, 2)
    assert sorted(map(tuple, cb.centroids)) == [(0.0, 0.0), (10.0, 10.0)]
    assert kmeans.distortion(cb, x) == 0.0


def test_too_few_points():
    with pytest.raises(ValueError):
        kmeans.fit_kmeans(np.zeros((2, 2)), 3)
    with pytest.raises(ValueError):
        kmeans.fit_kmeans(np.zeros((5, 2)), 2)


@pytest.mark.parametrize("seed", range(3))
def test_close_to_restart_oracle(seed):
    x = np.random.default_rng(seed).uniform(0, 1, (40, 2))
    best = restart_oracle(x, 3, 1000, seed)
    assert kmeans.distortion(kmeans.fit_kmeans(x, 3, seed=seed), x) <= 1.05 * best


@pytest.mark.parametrize("seed", range(10))
def test_distortion_non_increasing(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rng.integers(20, 200), rng.integers(1, 6)))
    hist = kmeans.fit_kmeans(x, int(rng.integers(1, 8)), seed=seed).distortions
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_assign_exact_centroid_and_tie():
    cb = Codebook(np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]]))
    assert kmeans.assign(cb, [[5.0, 5.0]]).codes.tolist() == [2]
    assert kmeans.assign(cb, [[1.0, 0.0]]).codes.tolist() == [0]


@pytest.mark.parametrize("seed", range(10))
def test_assign_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((7, 4))
    x = rng.standard_normal((60, 4))
    np.testing.assert_array_equal(kmeans.assign(Codebook(c), x).codes, brute_nearest(x, c))


def test_assign_dimension_mismatch():
    with pytest.raises(ValueError):
        kmeans.assign(Codebook(np.zeros((2, 3))), np.zeros((4, 2)))


def test_assign_idempotent_deterministic():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((80, 3))
    cb = kmeans.fit_kmeans(x, 5)
    a = kmeans.assign(cb, x).codes
    np.testing.assert_array_equal(a, kmeans.assign(cb, x).codes)
    np.testing.assert_array_equal(a, kmeans.assign(cb, cb.centroids[a]).codes)


def test_codebook_round_trip_bit_exact(tmp_path):
    cb = kmeans.fit_kmeans(np.random.default_rng(0).standard_normal((50, 4)), 4)
    cb.save(tmp_path / "c.kmns")
    assert Codebook.load(tmp_path / "c.kmns").centroids.tobytes() == cb.centroids.tobytes()


def test_code_sequence_range_checked():
    with pytest.raises(ValueError):
        kmeans.CodeSequence([0, 3], vocab_size=3)


def tiny_encoder():
    return Encoder(TransformerConfig(layers=2, dim=16, ffn=32, heads=2, input_dim=5), seed=0)


def tiny_corpus():
    rng = np.random.default_rng(1)
    return [rng.standard_normal((n, 5)) for n in (9, 14, 6)]


def test_recluster_k1_is_layer_mean():
    enc, corpus = tiny_encoder(), tiny_corpus()
    acts = np.concatenate(kmeans.layer_features(enc, corpus, 1))
    cb = kmeans.recluster_from_layer(enc, 1, corpus, 1)
    np.testing.assert_allclose(cb.centroids[0], acts.mean(0), rtol=1e-12, atol=1e-14)
    assert cb.source == "layer:1"


def test_recluster_deterministic():
    enc, corpus = tiny_encoder(), tiny_corpus()
    a = kmeans.recluster_from_layer(enc, 2, corpus, 4, seed=5).centroids
    b = kmeans.recluster_from_layer(enc, 2, corpus, 4, seed=5).centroids
    np.testing.assert_array_equal(a, b)


def test_recluster_layer_out_of_range():
    with pytest.raises(ValueError):
        kmeans.recluster_from_layer(tiny_encoder(), 3, tiny_corpus(), 2)
