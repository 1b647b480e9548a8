import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import ks_2samp

from conftest import random_rotation
from vims.descriptors import (NBYTES, DescriptorModelSpec, PnPFailure, VocabularyTree, bow_score,
                              bow_similarity, build_vocabulary, default_vocabulary, describe, describe_many,
                              hamming, hamming_matrix, match_2nn, p3p, pnp_ransac, replicate_across_scales)
from vims.geometry import rotmat_angle

desc_st = st.binary(min_size=NBYTES, max_size=NBYTES).map(lambda b: np.frombuffer(b, np.uint8))


def rand_desc(rng, n=None):
    return rng.integers(0, 256, (NBYTES,) if n is None else (n, NBYTES), dtype=np.uint8)


# ---------------------------------------------------------------- bits
@given(desc_st, desc_st, desc_st)
def test_hamming_metric(a, b, c):
    assert hamming(a, b) == hamming(b, a)
    assert hamming(a, c) <= hamming(a, b) + hamming(b, c)
    assert hamming(a, a) == 0


def test_hamming_matrix_matches_scalar(rng):
    A, B = rand_desc(rng, 5), rand_desc(rng, 7)
    M = hamming_matrix(A, B)
    assert all(M[i, j] == hamming(A[i], B[j]) for i in range(5) for j in range(7))


# ---------------------------------------------------------------- describe
def test_noise_free_rotation_aware_is_exact(rng):
    spec = DescriptorModelSpec(rotation_aware=True, base_flip_prob=0.0)
    t = rand_desc(rng)
    for rot in (0.0, 1.0, np.pi, -2.5):
        assert np.array_equal(describe(t, rot, 1.0, spec, rng, 17), t)


def test_rotation_sensitive_binomial():
    rng = np.random.default_rng(2)
    spec = DescriptorModelSpec(rotation_aware=False, base_flip_prob=0.05, rotation_flip_gain=0.08)
    expected = 256 * min(0.05 + 0.08 * np.pi, 0.5)
    d = [hamming(t, describe(t, np.pi, 1.0, spec, rng, int(s)))
         for t, s in zip(rand_desc(rng, 1000), rng.integers(0, 2**31, 1000))]
    assert abs(np.mean(d) - expected) < 0.1 * expected


def test_two_near_identical_views():
    rng = np.random.default_rng(3)
    spec = DescriptorModelSpec(base_flip_prob=0.05)
    expected = 2 * 256 * 0.05 * 0.95
    d = []
    for _ in range(1000):
        t, s = rand_desc(rng), int(rng.integers(2**31))
        d.append(hamming(describe(t, 0.3, 1.0, spec, rng, s), describe(t, 0.3001, 1.0, spec, rng, s)))
    assert abs(np.mean(d) - expected) < 0.15 * expected


def test_rotation_aware_distribution_independent_of_rotation():
    rng = np.random.default_rng(4)
    spec = DescriptorModelSpec(rotation_aware=True)

    def sample(rot):
        return [hamming(t, describe(t, rot, 1.0, spec, rng, int(s)))
                for t, s in zip(rand_desc(rng, 1000), rng.integers(0, 2**31, 1000))]

    assert ks_2samp(sample(0.0), sample(np.pi)).pvalue > 0.01


def test_flip_probability_clamped():
    spec = DescriptorModelSpec(rotation_aware=False, base_flip_prob=0.4, rotation_flip_gain=1.0)
    assert spec.flip_probability(np.pi, 16.0) == 0.5
    assert 0.0 <= DescriptorModelSpec().flip_probability(0.0, 1.0) <= 0.5


def test_describe_many_matches_sequential():
    spec = DescriptorModelSpec(rotation_aware=False)
    r0 = np.random.default_rng(5)
    T = rand_desc(r0, 20)
    seeds = r0.integers(0, 2**31, 20)
    rots, scales = r0.uniform(-3, 3, 20), r0.uniform(0.5, 2.0, 20)
    a, b = np.random.default_rng(9), np.random.default_rng(9)
    batch = describe_many(T, seeds, rots, scales, spec, a)
    seq = np.array([describe(T[i], rots[i], scales[i], spec, b, int(seeds[i])) for i in range(20)])
    assert np.array_equal(batch, seq)


# ---------------------------------------------------------------- replication
def test_replicate_levels(rng):
    spec = DescriptorModelSpec()
    ds = replicate_across_scales(rand_desc(rng, 1), [1], [0.0], [1.0], [1.0], 3, spec, rng)
    assert list(ds.level) == [0, 1, 2]
    ds = replicate_across_scales(rand_desc(rng, 1), [1], [0.0], [1.0], [0.1], 3, spec, rng, response_floor=0.5)
    assert len(ds) == 0
    resp = rng.random(50)
    ds = replicate_across_scales(rand_desc(rng, 50), np.arange(50), np.zeros(50), np.ones(50), resp, 4, spec, rng,
                                 response_floor=np.median(resp))
    assert len(ds) == 25 * 4
    with pytest.raises(ValueError):
        replicate_across_scales(rand_desc(rng, 1), [1], [0.0], [1.0], [1.0], 9, spec, rng)


# ---------------------------------------------------------------- vocabulary
def test_vocabulary_k_far_descriptors():
    base = np.zeros((4, NBYTES), np.uint8)
    for i in range(4):
        base[i, 8 * i:8 * i + 8] = 255
    v = build_vocabulary(np.repeat(base, 3, axis=0), k=4, L=1)
    assert len(v.leaf_nodes()) == 4
    cents = {bytes(c) for c in v.centroids[v.leaf_nodes()]}
    assert cents == {bytes(b) for b in base}
    assert len(set(v.transform(base))) == 4


def test_vocabulary_identical_descriptors(rng):
    d = np.tile(rand_desc(rng), (50, 1))
    with pytest.warns(UserWarning, match="shallower"):
        v = build_vocabulary(d, k=10, L=3)
    assert len(set(v.transform(d))) == 1


def test_vocabulary_quantization_beats_random_leaf():
    rng = np.random.default_rng(6)
    v = build_vocabulary(rand_desc(rng, 10_000), k=10, L=3, seed=1)
    leaves = v.leaf_nodes()
    probes = rand_desc(rng, 100)
    words = v.transform(probes)
    node_of_word = {int(v.word[n]): n for n in leaves}
    q = np.array([hamming(p, v.centroids[node_of_word[int(w)]]) for p, w in zip(probes, words)])
    r = np.array([hamming(p, v.centroids[rng.choice(leaves)]) for p in probes])
    assert q.mean() < r.mean()


def test_vocabulary_deterministic_and_roundtrip(tmp_path, rng):
    d = rand_desc(rng, 2000)
    a, b = build_vocabulary(d, 5, 3, seed=3), build_vocabulary(d, 5, 3, seed=3)
    assert np.array_equal(a.centroids, b.centroids) and np.array_equal(a.weights, b.weights)
    a.save(tmp_path / "v.bin")
    c = VocabularyTree.load(tmp_path / "v.bin")
    assert np.array_equal(c.transform(d[:50]), a.transform(d[:50]))
    assert np.all(a.weights >= 0)


def test_vocabulary_empty():
    with pytest.raises(ValueError):
        build_vocabulary(np.zeros((0, NBYTES), np.uint8))


def test_fixture_vocabulary_shape():
    v = default_vocabulary()
    assert v.k == 10 and v.L == 4 and v.n_words > 1000


# ---------------------------------------------------------------- bow
def test_bow_examples(rng):
    v = default_vocabulary()
    d = rand_desc(rng, 30)
    assert bow_similarity(d, d, v) == pytest.approx(1.0, abs=1e-12)
    assert bow_score({0: 0.5, 1: 0.5}, {2: 0.3, 3: 0.7}) == 0.0
    a = {0: 0.5, 1: 0.3, 2: 0.2}
    b = {0: 0.2, 1: 0.3, 2: 0.5}
    assert bow_score(a, b) == pytest.approx(1 - 0.5 * (0.3 + 0.0 + 0.3), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_bow_score_range(seed):
    r = np.random.default_rng(seed)
    v = default_vocabulary()
    a, b = v.bow_vector(rand_desc(r, 10)), v.bow_vector(rand_desc(r, 10))
    s = bow_score(a, b)
    assert 0.0 <= s <= 1.0
    assert bow_score(a, a) == pytest.approx(1.0)


# ---------------------------------------------------------------- 2NN
def test_match_identical_and_tie(rng):
    q = rand_desc(rng)
    far = np.array([q ^ 0xFF, (q ^ 0xF0) ^ 0x0F])
    T = np.vstack([far, q[None]])
    assert match_2nn(q[None], T).tolist() == [[0, 2]]
    twin = q.copy()
    twin[0] ^= 1
    twin2 = q.copy()
    twin2[1] ^= 1
    assert len(match_2nn(q[None], np.vstack([twin, twin2]))) == 0


def test_reversed_revisit_matching():
    rng = np.random.default_rng(7)
    truth = rand_desc(rng, 100)
    seeds = rng.integers(0, 2**31, 100)
    rot = rng.uniform(-np.pi, np.pi, 100)
    sc = rng.uniform(0.9, 1.1, 100)
    for aware, check in ((True, lambda f: f >= 0.8), (False, lambda f: f < 0.1)):
        spec = DescriptorModelSpec(rotation_aware=aware)
        a = describe_many(truth, seeds, rot, sc, spec, rng)
        b = describe_many(truth, seeds, rot + np.pi, sc, spec, rng)
        m = match_2nn(a, b)
        correct = np.sum(m[:, 0] == m[:, 1]) / 100
        assert check(correct), (aware, correct)


# ---------------------------------------------------------------- PnP
def scene(rng, n=60, outliers=0.0):
    R = random_rotation(rng, 0.5)
    t = rng.normal(0, 0.5, 3)
    pc = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(2, 6, n)])
    P = (pc - t) @ R  # points in the reference frame
    uv = pc[:, :2] / pc[:, 2:]
    bad = rng.random(n) < outliers
    uv[bad] = rng.uniform(-0.7, 0.7, (bad.sum(), 2))
    return R, t, P, uv, bad


def test_p3p_recovers_pose(rng):
    for _ in range(50):
        R, t, P, uv, _ = scene(rng, 3)
        b = np.column_stack([uv, np.ones(3)])
        sols = p3p(P, b)
        assert min(rotmat_angle(R.T @ Rs) + np.linalg.norm(ts - t) for Rs, ts in sols) < 1e-6


def test_pnp_identity_pose(rng):
    P = np.column_stack([rng.uniform(-2, 2, 40), rng.uniform(-2, 2, 40), rng.uniform(2, 6, 40)])
    res = pnp_ransac(P, P[:, :2] / P[:, 2:])
    assert res.pose.almost_equal(type(res.pose).identity(), 1e-8)
    assert res.inliers.all()


def test_pnp_with_outliers(rng):
    R, t, P, uv, bad = scene(rng, 80, 0.3)
    res = pnp_ransac(P, uv, iterations=200)
    assert np.degrees(rotmat_angle(R.T @ res.pose.R)) < 0.5
    assert np.linalg.norm(res.pose.t - t) < 0.02
    assert not np.any(res.inliers & bad)


def test_pnp_all_outliers(rng):
    P = rng.uniform(-2, 2, (40, 3)) + [0, 0, 5]
    with pytest.raises(PnPFailure):
        pnp_ransac(P, rng.uniform(-0.7, 0.7, (40, 2)))
    with pytest.raises(PnPFailure):
        pnp_ransac(P[:3], rng.uniform(-0.7, 0.7, (3, 2)))


@given(st.integers(0, 2**32 - 1))
def test_pnp_deterministic_and_permutation_covariant(seed):
    rng = np.random.default_rng(seed)
    R, t, P, uv, bad = scene(rng, 40, 0.2)
    a = pnp_ransac(P, uv, seed=5)
    b = pnp_ransac(P, uv, seed=5)
    assert np.array_equal(a.inliers, b.inliers) and np.array_equal(a.pose.t, b.pose.t)
    perm = rng.permutation(40)
    c = pnp_ransac(P[perm], uv[perm], seed=5)
    assert np.array_equal(c.inliers, a.inliers[perm])
