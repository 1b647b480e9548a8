"""Synthetic binary descriptors, scale replication, bag-of-binary-words and
geometric matching (2NN ratio test, P3P + RANSAC).

Descriptor model
----------------
A landmark has a true 256-bit string. Viewing it from a different in-plane
rotation or scale flips bits *coherently*: each landmark owns a random
pattern (seeded by ``pattern_seed``) that marks some bits as rotation
sensitive, each with a crossing angle, and some as scale sensitive, each with
a crossing log-scale. A bit flips when the viewpoint crosses its threshold,
so two views of the same landmark differ in proportion to how far apart the
views are, not to how far each is from the canonical one. On top of that,
independent per-extraction noise flips the remaining bits. Averaged over
landmarks a bit flips with probability
``clamp(base + rotation_gain * |theta| + scale_gain * |log2 s|, 0, 0.5)``.
An ORB-like model (``rotation_aware``) ignores the rotation part.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from vims.geometry import Pose3, exp_rotmat

NBITS = 256
NBYTES = NBITS // 8
MAX_LEVELS = 8


# --------------------------------------------------------------------------
# bits
# --------------------------------------------------------------------------

def hamming(a, b) -> int:
    return int(np.bitwise_count(np.bitwise_xor(a, b)).sum())


def hamming_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """(N, M) Hamming distances between rows of two (., 32) uint8 arrays."""
    A = np.asarray(A, dtype=np.uint8).reshape(-1, NBYTES)
    B = np.asarray(B, dtype=np.uint8).reshape(-1, NBYTES)
    if len(A) == 0 or len(B) == 0:
        return np.zeros((len(A), len(B)), dtype=np.int64)
    return np.bitwise_count(A[:, None, :] ^ B[None, :, :]).sum(axis=2, dtype=np.int64)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    return np.packbits(np.asarray(bits, dtype=np.uint8), axis=-1)


def unpack_bits(desc: np.ndarray) -> np.ndarray:
    return np.unpackbits(np.asarray(desc, dtype=np.uint8), axis=-1)


# --------------------------------------------------------------------------
# descriptor model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DescriptorModelSpec:
    rotation_aware: bool = True
    base_flip_prob: float = 0.05
    rotation_flip_gain: float = 0.5 / np.pi  # per radian; at pi half the bits are rotation sensitive
    scale_flip_gain: float = 0.05  # per octave
    scale_span: float = 4.0  # octaves over which scale thresholds spread

    def __post_init__(self):
        if not 0.0 <= self.base_flip_prob <= 0.5:
            raise ValueError("base_flip_prob must lie in [0, 0.5]")
        if self.rotation_flip_gain < 0.0 or self.scale_flip_gain < 0.0:
            raise ValueError("flip gains must be >= 0")

    @property
    def rotation_fraction(self) -> float:
        return min(self.rotation_flip_gain * np.pi, 1.0)

    @property
    def scale_fraction(self) -> float:
        return min(self.scale_flip_gain * 2.0 * self.scale_span, 1.0 - self.rotation_fraction)

    def flip_probability(self, rotation: float, scale_ratio: float) -> float:
        rot = 0.0 if self.rotation_aware else self.rotation_flip_gain * min(abs(_wrap(rotation)), np.pi)
        sc = self.scale_flip_gain * min(abs(np.log2(scale_ratio)), self.scale_span)
        return float(np.clip(self.base_flip_prob + rot + sc, 0.0, 0.5))


ORB_LIKE = DescriptorModelSpec(rotation_aware=True)
BRIEF_LIKE = DescriptorModelSpec(rotation_aware=False)


@dataclass(frozen=True)
class BinaryDescriptor:
    bits: np.ndarray  # (32,) uint8
    scale_level: int = 0
    response: float = 1.0

    def __post_init__(self):
        if not 0 <= self.scale_level < MAX_LEVELS:
            raise ValueError("scale_level out of range")


def _wrap(a):
    return (np.asarray(a, dtype=float) + np.pi) % (2.0 * np.pi) - np.pi


@lru_cache(maxsize=65536)
def _pattern(seed: int):
    rng = np.random.default_rng(int(seed))
    u = rng.random(NBITS)
    phi = rng.uniform(0.0, np.pi, NBITS)
    tau = rng.uniform(-1.0, 1.0, NBITS)
    return u, phi, tau


def coherent_flips(pattern_seed: int, rotation: float, scale_ratio: float, spec: DescriptorModelSpec) -> np.ndarray:
    """Deterministic viewpoint flips (bool, 256) for one landmark."""
    u, phi, tau = _pattern(int(pattern_seed))
    qr, qs = spec.rotation_fraction, spec.scale_fraction
    flips = np.zeros(NBITS, dtype=bool)
    if not spec.rotation_aware and qr > 0.0:
        th = float(_wrap(rotation))
        rot_bits = u < qr
        # bit state is the indicator of a half circle starting at phi
        flips |= rot_bits & (((th - phi) % (2.0 * np.pi)) < np.pi)
    if qs > 0.0:
        x = float(np.clip(np.log2(scale_ratio), -spec.scale_span, spec.scale_span))
        t = tau * spec.scale_span
        sc_bits = (u >= qr) & (u < qr + qs)
        flips |= sc_bits & (((t > 0.0) & (t < x)) | ((t < 0.0) & (t > x)))
    return flips


def describe(true_descriptor, rotation: float, scale_ratio: float, spec: DescriptorModelSpec,
             rng: np.random.Generator, pattern_seed: int = 0) -> np.ndarray:
    """One noisy extraction of a landmark's descriptor from a viewpoint."""
    truth = unpack_bits(true_descriptor).astype(bool)
    coh = coherent_flips(pattern_seed, rotation, scale_ratio, spec)
    target = spec.flip_probability(rotation, scale_ratio)
    # expected coherent flip rate for this viewpoint (independent of the pattern)
    qr = 0.0 if spec.rotation_aware else spec.rotation_fraction
    c_exp = qr * min(abs(float(_wrap(rotation))), np.pi) / np.pi
    c_exp += spec.scale_fraction * min(abs(np.log2(scale_ratio)), spec.scale_span) / (2.0 * spec.scale_span)
    q_base = 0.0 if c_exp >= 1.0 else max(0.0, (target - c_exp) / (1.0 - c_exp))
    noise = rng.random(NBITS) < q_base
    flips = coh | (noise & ~coh)
    return pack_bits(truth ^ flips)


def describe_many(truth: np.ndarray, pattern_seeds, rotations, scales, spec: DescriptorModelSpec,
                  rng: np.random.Generator) -> np.ndarray:
    """Row-wise ``describe``; draws the same random stream as calling it in order."""
    truth = np.asarray(truth, dtype=np.uint8).reshape(-1, NBYTES)
    n = len(truth)
    if n == 0:
        return truth.copy()
    rot = np.asarray(rotations, dtype=float).reshape(n)
    sc = np.asarray(scales, dtype=float).reshape(n)
    pats = [_pattern(int(s)) for s in np.asarray(pattern_seeds).reshape(n)]
    u = np.array([p[0] for p in pats])
    qr, qs = spec.rotation_fraction, spec.scale_fraction
    coh = np.zeros((n, NBITS), dtype=bool)
    th = _wrap(rot)
    if not spec.rotation_aware and qr > 0.0:
        phi = np.array([p[1] for p in pats])
        coh |= (u < qr) & (((th[:, None] - phi) % (2.0 * np.pi)) < np.pi)
    lg = np.log2(sc)
    if qs > 0.0:
        x = np.clip(lg, -spec.scale_span, spec.scale_span)[:, None]
        t = np.array([p[2] for p in pats]) * spec.scale_span
        coh |= (u >= qr) & (u < qr + qs) & (((t > 0.0) & (t < x)) | ((t < 0.0) & (t > x)))
    rot_rate = 0.0 if spec.rotation_aware else spec.rotation_flip_gain * np.minimum(np.abs(th), np.pi)
    target = np.clip(spec.base_flip_prob + rot_rate + spec.scale_flip_gain * np.minimum(np.abs(lg), spec.scale_span),
                     0.0, 0.5)
    c_exp = (0.0 if spec.rotation_aware else qr) * np.minimum(np.abs(th), np.pi) / np.pi
    c_exp = c_exp + spec.scale_fraction * np.minimum(np.abs(lg), spec.scale_span) / (2.0 * spec.scale_span)
    q_base = np.where(c_exp >= 1.0, 0.0, np.maximum(0.0, (target - c_exp) / np.maximum(1.0 - c_exp, 1e-12)))
    noise = rng.random((n, NBITS)) < q_base[:, None]
    flips = coh | (noise & ~coh)
    return np.packbits(unpack_bits(truth).astype(bool) ^ flips, axis=1)


@dataclass
class DescriptorSet:
    """Column table of descriptors; ``point`` indexes the owning feature."""

    bits: np.ndarray
    level: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    response: np.ndarray = field(default_factory=lambda: np.zeros(0))
    point: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8).reshape(-1, NBYTES)
        n = len(self.bits)
        if len(self.level) != n:
            self.level = np.zeros(n, dtype=int)
        if len(self.response) != n:
            self.response = np.ones(n)
        if len(self.point) != n:
            self.point = np.arange(n)

    def __len__(self):
        return len(self.bits)

    def __getitem__(self, i) -> BinaryDescriptor:
        return BinaryDescriptor(self.bits[i], int(self.level[i]), float(self.response[i]))


def replicate_across_scales(truth, pattern_seeds, rotations, scales, responses, levels: int,
                            spec: DescriptorModelSpec, rng: np.random.Generator,
                            response_floor: float = 0.0, scale_factor: float = 1.2) -> DescriptorSet:
    """Descriptors of every retained point at pyramid levels ``0..levels-1``.

    Points with response at or below ``response_floor`` are discarded first.
    Level ``l`` is extracted as if the point were seen ``scale_factor**l``
    times farther away.
    """
    if not 1 <= levels <= MAX_LEVELS:
        raise ValueError(f"levels must be in [1, {MAX_LEVELS}]")
    truth = np.asarray(truth, dtype=np.uint8).reshape(-1, NBYTES)
    responses = np.asarray(responses, dtype=float)
    keep = np.flatnonzero(responses > response_floor)
    pt = np.repeat(keep, levels)
    lev = np.tile(np.arange(levels), len(keep))
    s = np.asarray(scales, dtype=float)[pt] * scale_factor ** lev
    bits = describe_many(truth[pt], np.asarray(pattern_seeds)[pt], np.asarray(rotations, dtype=float)[pt], s,
                         spec, rng)
    return DescriptorSet(bits.reshape(-1, NBYTES), lev.astype(int), responses[pt], pt.astype(int))


# --------------------------------------------------------------------------
# vocabulary
# --------------------------------------------------------------------------

VOCAB_MAGIC = b"VIMSVOC1"


@dataclass
class VocabularyTree:
    k: int
    L: int
    parent: np.ndarray  # (n_nodes,) int32, -1 for the root
    centroids: np.ndarray  # (n_nodes, 32) uint8; the root row is unused
    word: np.ndarray  # (n_nodes,) int32, -1 for internal nodes
    weights: np.ndarray  # (n_words,) idf

    def __post_init__(self):
        n = len(self.parent)
        kids: list[list[int]] = [[] for _ in range(n)]
        for i in range(1, n):
            kids[self.parent[i]].append(i)
        self.children = [np.array(c, dtype=int) for c in kids]

    @property
    def n_words(self) -> int:
        return len(self.weights)

    def leaf_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.word >= 0)

    def transform(self, descriptors: np.ndarray) -> np.ndarray:
        """Word id of each descriptor (greedy descent, ties to the lowest child)."""
        D = np.asarray(descriptors, dtype=np.uint8).reshape(-1, NBYTES)
        node = np.zeros(len(D), dtype=int)
        active = np.ones(len(D), dtype=bool)
        while np.any(active):
            for nd in np.unique(node[active]):
                sel = np.flatnonzero(active & (node == nd))
                ch = self.children[nd]
                if len(ch) == 0:
                    active[sel] = False
                    continue
                d = hamming_matrix(D[sel], self.centroids[ch])
                node[sel] = ch[np.argmin(d, axis=1)]
        return self.word[node]

    def bow_vector(self, descriptors: np.ndarray) -> dict[int, float]:
        """L1-normalised tf-idf vector as a sparse dict."""
        if len(descriptors) == 0:
            return {}
        words = self.transform(descriptors)
        ids, counts = np.unique(words, return_counts=True)
        vals = counts / counts.sum() * self.weights[ids]
        s = vals.sum()
        if s <= 0.0:
            return {}
        return {int(w): float(v / s) for w, v in zip(ids, vals)}

    # ---- persistence
    def save(self, path):
        n = len(self.parent)
        with open(path, "wb") as fh:
            fh.write(VOCAB_MAGIC)
            fh.write(struct.pack("<IIII", self.k, self.L, n, self.n_words))
            fh.write(self.parent.astype("<i4").tobytes())
            fh.write(self.word.astype("<i4").tobytes())
            fh.write(self.centroids.astype(np.uint8).tobytes())
            fh.write(self.weights.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "VocabularyTree":
        data = Path(path).read_bytes()
        if data[:8] != VOCAB_MAGIC:
            raise ValueError(f"{path}: not a vocabulary file")
        k, L, n, nw = struct.unpack("<IIII", data[8:24])
        o = 24
        parent = np.frombuffer(data, "<i4", n, o).astype(np.int32)
        o += 4 * n
        word = np.frombuffer(data, "<i4", n, o).astype(np.int32)
        o += 4 * n
        cent = np.frombuffer(data, np.uint8, n * NBYTES, o).reshape(n, NBYTES).copy()
        o += n * NBYTES
        weights = np.frombuffer(data, "<f8", nw, o).copy()
        return cls(k, L, parent, cent, word, weights)

    def to_json(self) -> str:
        nodes = [{"id": i, "parent": int(self.parent[i]), "word": int(self.word[i]),
                  "centroid": bytes(self.centroids[i]).hex()} for i in range(len(self.parent))]
        return json.dumps({"k": self.k, "L": self.L, "nodes": nodes,
                           "weights": [float(w) for w in self.weights]}, indent=1)


def _majority(D: np.ndarray) -> np.ndarray:
    """Bitwise majority vote; ties go to 0."""
    bits = unpack_bits(D).astype(np.int64)
    return pack_bits((2 * bits.sum(axis=0) > len(D)).astype(np.uint8))


def _kmajority(D: np.ndarray, k: int, rng: np.random.Generator, iters: int = 10):
    """k-majority clustering with k-means++ seeding under the Hamming metric."""
    n = len(D)
    centers = [int(rng.integers(n))]
    dmin = hamming_matrix(D, D[centers[0]][None])[:, 0].astype(float)
    for _ in range(1, k):
        w = dmin ** 2
        if w.sum() <= 0:
            break
        c = int(rng.choice(n, p=w / w.sum()))
        centers.append(c)
        dmin = np.minimum(dmin, hamming_matrix(D, D[c][None])[:, 0])
    C = D[centers].copy()
    assign = np.argmin(hamming_matrix(D, C), axis=1)
    for _ in range(iters):
        newC = np.array([_majority(D[assign == j]) if np.any(assign == j) else C[j] for j in range(len(C))])
        new_assign = np.argmin(hamming_matrix(D, newC), axis=1)
        C = newC
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return C, assign


def build_vocabulary(training: np.ndarray, k: int = 10, L: int = 4, seed: int = 0,
                     doc_size: int = 25) -> VocabularyTree:
    """Hierarchical k-majority vocabulary with idf weights.

    Training descriptors are grouped into pseudo-documents of ``doc_size``
    consecutive rows for the idf statistics.
    """
    D = np.asarray(training, dtype=np.uint8).reshape(-1, NBYTES)
    if len(D) == 0:
        raise ValueError("empty training set")
    if len(D) < k ** L:
        warnings.warn(f"{len(D)} training descriptors < k^L = {k ** L}; the tree will be shallower",
                      stacklevel=2)
    rng = np.random.default_rng(seed)
    parent = [-1]
    cents = [np.zeros(NBYTES, dtype=np.uint8)]
    word = [-1]
    leaf_of = np.zeros(len(D), dtype=int)

    def grow(node: int, idx: np.ndarray, depth: int):
        sub = D[idx]
        uniq = np.unique(sub, axis=0)
        if depth == L or len(uniq) <= 1:
            word[node] = -2  # mark leaf
            leaf_of[idx] = node
            return
        if len(uniq) <= k:
            for u in uniq:
                c = len(parent)
                parent.append(node)
                cents.append(u)
                word.append(-2)
                match = np.all(sub == u, axis=1)
                leaf_of[idx[match]] = c
            return
        C, assign = _kmajority(sub, k, rng)
        for j in range(len(C)):
            members = idx[assign == j]
            if len(members) == 0:
                continue
            c = len(parent)
            parent.append(node)
            cents.append(C[j])
            word.append(-1)
            grow(c, members, depth + 1)

    grow(0, np.arange(len(D)), 0)
    word_arr = np.array(word)
    leaves = np.flatnonzero(word_arr == -2)
    word_arr[:] = -1
    word_arr[leaves] = np.arange(len(leaves))
    # idf over pseudo-documents
    n_docs = max(1, int(np.ceil(len(D) / doc_size)))
    doc_of = np.arange(len(D)) // doc_size
    words = word_arr[leaf_of]
    pairs = np.unique(np.column_stack([doc_of, words]), axis=0)
    df = np.bincount(pairs[:, 1], minlength=len(leaves)).astype(float)
    weights = np.log(n_docs / np.maximum(df, 1.0))
    weights[df == 0] = np.log(n_docs)
    return VocabularyTree(k, L, np.array(parent, dtype=np.int32), np.array(cents, dtype=np.uint8),
                          word_arr.astype(np.int32), np.maximum(weights, 0.0))


VOCAB_FIXTURE = Path(__file__).with_name("data") / "vocabulary_k10_L4.bin"
FIXTURE_SEED = 20240611
FIXTURE_SAMPLES = 100_000


def fixture_training_set(n: int = FIXTURE_SAMPLES, seed: int = FIXTURE_SEED) -> np.ndarray:
    """Descriptors drawn like the scenario generator's landmark descriptors."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, NBYTES), dtype=np.uint8)


@lru_cache(maxsize=1)
def default_vocabulary() -> VocabularyTree:
    if VOCAB_FIXTURE.exists():
        return VocabularyTree.load(VOCAB_FIXTURE)
    vocab = build_vocabulary(fixture_training_set(), 10, 4, FIXTURE_SEED)
    VOCAB_FIXTURE.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(VOCAB_FIXTURE)
    return vocab


def bow_score(v: dict[int, float], w: dict[int, float]) -> float:
    """``1 - 0.5 * |v - w|_1`` for L1-normalised non-negative vectors."""
    if not v or not w:
        return 0.0
    common = v.keys() & w.keys()
    # |v - w|_1 = 2 - 2 * sum_common min(v, w) when both sum to one
    overlap = sum(min(v[i], w[i]) for i in common)
    return float(min(1.0, max(0.0, overlap)))


def bow_similarity(query: np.ndarray, candidate: np.ndarray, vocab: VocabularyTree) -> float:
    return bow_score(vocab.bow_vector(query), vocab.bow_vector(candidate))


# --------------------------------------------------------------------------
# matching
# --------------------------------------------------------------------------

def match_2nn(query: np.ndarray, target: np.ndarray, ratio: float = 0.7, abs_threshold: int = 64) -> np.ndarray:
    """Mutual-best matches passing the 2NN ratio test; (K, 2) index pairs."""
    Q = np.asarray(query, dtype=np.uint8).reshape(-1, NBYTES)
    T = np.asarray(target, dtype=np.uint8).reshape(-1, NBYTES)
    if len(Q) == 0 or len(T) == 0:
        return np.zeros((0, 2), dtype=int)
    D = hamming_matrix(Q, T)
    best = np.argmin(D, axis=1)
    d1 = D[np.arange(len(Q)), best]
    if len(T) >= 2:
        part = np.partition(D, 1, axis=1)
        d2 = part[:, 1]
        ok = d1 < ratio * d2
    else:
        ok = d1 < abs_threshold
    back = np.argmin(D, axis=0)
    mutual = back[best] == np.arange(len(Q))
    sel = np.flatnonzero(ok & mutual)
    return np.column_stack([sel, best[sel]]).astype(int)


# --------------------------------------------------------------------------
# PnP
# --------------------------------------------------------------------------

class PnPFailure(RuntimeError):
    pass


@dataclass
class PnPResult:
    pose: Pose3  # camera <- reference frame of the 3-D points
    inliers: np.ndarray  # bool mask
    iterations: int

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def _kabsch(P: np.ndarray, X: np.ndarray):
    """R, t minimising |R P + t - X|."""
    mp, mx = P.mean(axis=0), X.mean(axis=0)
    H = (P - mp).T @ (X - mx)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, mx - R @ mp


def _pmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise product of ascending coefficient arrays (M, p) x (M, q)."""
    out = np.zeros((a.shape[0], a.shape[1] + b.shape[1] - 1))
    for i in range(a.shape[1]):
        out[:, i:i + b.shape[1]] += a[:, i:i + 1] * b
    return out


def _peval(c: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate ascending coefficients (M, p) at x (M, r)."""
    out = np.zeros_like(x)
    for k in range(c.shape[1] - 1, -1, -1):
        out = out * x + c[:, k:k + 1]
    return out


def _kabsch_batch(P: np.ndarray, X: np.ndarray):
    """Batched Kabsch over (M, n, 3) point sets."""
    mp, mx = P.mean(axis=1), X.mean(axis=1)
    H = np.einsum("mni,mnj->mij", P - mp[:, None], X - mx[:, None])
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    V = V.copy()
    V[:, :, 2] *= d[:, None]
    R = V @ Ut
    return R, mx - np.einsum("mij,mj->mi", R, mp)


def p3p_batch(points: np.ndarray, bearings: np.ndarray):
    """P3P for M minimal samples at once.

    ``points`` and ``bearings`` are (M, 3, 3).  Returns ``(R, t, valid)`` of
    shapes (M, 4, 3, 3), (M, 4, 3), (M, 4): one slot per quartic root.
    Grunert's distance equations are reduced to a quartic in ``v = s3 / s1``
    by eliminating ``u = s2 / s1`` between the two equations quadratic in it.
    """
    P = np.asarray(points, dtype=float)
    b = np.asarray(bearings, dtype=float)
    b = b / np.linalg.norm(b, axis=2, keepdims=True)
    M = len(P)
    a2 = np.sum((P[:, 1] - P[:, 2]) ** 2, axis=1)
    b2 = np.sum((P[:, 0] - P[:, 2]) ** 2, axis=1)
    c2 = np.sum((P[:, 0] - P[:, 1]) ** 2, axis=1)
    good = np.minimum(np.minimum(a2, b2), c2) > 1e-12
    b2s = np.where(good, b2, 1.0)
    ca = np.sum(b[:, 1] * b[:, 2], axis=1)
    cb = np.sum(b[:, 0] * b[:, 2], axis=1)
    cg = np.sum(b[:, 0] * b[:, 1], axis=1)
    K1, K2 = a2 / b2s, c2 / b2s
    one = np.ones(M)
    Q = np.column_stack([one, -2.0 * cb, one])
    N = (K2 - K1)[:, None] * Q
    N[:, 0] -= 1.0
    N[:, 2] += 1.0
    Dn = np.column_stack([2.0 * cg, -2.0 * ca])
    onemk = -K2[:, None] * Q
    onemk[:, 0] += 1.0
    DD = _pmul(Dn, Dn)
    quart = _pmul(N, N) + _pmul(onemk, DD)
    quart[:, :4] += 2.0 * cg[:, None] * _pmul(N, Dn)
    lead = quart[:, 4]
    good &= np.abs(lead) > 1e-14 * np.max(np.abs(quart), axis=1)
    lead = np.where(good, lead, 1.0)
    comp = np.zeros((M, 4, 4))
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    comp[:, :, 3] = -quart[:, :4] / lead[:, None]
    comp[~good] = np.eye(4)
    roots = np.linalg.eigvals(comp)
    v = roots.real
    dq = quart[:, 1:] * np.arange(1, 5)
    for _ in range(2):  # Newton polish of the eigenvalue roots
        dval = _peval(dq, v)
        v = v - _peval(quart, v) / np.where(np.abs(dval) > 1e-300, dval, 1.0)
    valid = good[:, None] & (np.abs(roots.imag) <= 1e-6 * np.maximum(1.0, np.abs(v))) & (v > 0)
    dv = _peval(Dn, v)
    valid &= np.abs(dv) > 1e-12
    u = -_peval(N, v) / np.where(valid, dv, 1.0)
    qv = _peval(Q, v)
    valid &= (u > 0) & (qv > 0)
    s1 = np.sqrt(b2s[:, None] / np.where(valid, qv, 1.0))
    X = np.stack([s1[..., None] * b[:, None, 0], (u * s1)[..., None] * b[:, None, 1],
                  (v * s1)[..., None] * b[:, None, 2]], axis=2)
    Pr = np.broadcast_to(P[:, None], (M, 4, 3, 3)).reshape(-1, 3, 3)
    R, t = _kabsch_batch(Pr, X.reshape(-1, 3, 3))
    return R.reshape(M, 4, 3, 3), t.reshape(M, 4, 3), valid


def p3p(points: np.ndarray, bearings: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """All (R, t) with ``bearing_i ~ R P_i + t`` for three correspondences."""
    R, t, ok = p3p_batch(np.asarray(points, float)[None], np.asarray(bearings, float)[None])
    return [(R[0, k], t[0, k]) for k in np.flatnonzero(ok[0])]


def reprojection_errors(R, t, points, uv) -> tuple[np.ndarray, np.ndarray]:
    pc = points @ R.T + t
    z = pc[:, 2]
    zs = np.where(z > 1e-9, z, 1e-9)
    err = np.linalg.norm(pc[:, :2] / zs[:, None] - uv, axis=1)
    return err, z > 1e-9


def refine_pose(R, t, points, uv, iters: int = 10):
    """Gauss-Newton on reprojection error (right perturbation of R)."""
    n = len(points)
    for _ in range(iters):
        pc = points @ R.T + t
        z = pc[:, 2]
        r = (pc[:, :2] / z[:, None] - uv).ravel()
        dproj = np.zeros((n, 2, 3))
        dproj[:, 0, 0] = dproj[:, 1, 1] = 1.0 / z
        dproj[:, :, 2] = -pc[:, :2] / z[:, None] ** 2
        J = np.empty((n, 2, 6))
        J[:, :, :3] = -dproj @ R @ skew_batch(points)
        J[:, :, 3:] = dproj
        J = J.reshape(2 * n, 6)
        try:
            dx = np.linalg.solve(J.T @ J, -(J.T @ r))
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        R = R @ exp_rotmat(dx[:3])
        t = t + dx[3:]
        if np.linalg.norm(dx) < 1e-10:
            break
    return R, t


def skew_batch(v: np.ndarray) -> np.ndarray:
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def _hypothesis_errors(R, t, P, U):
    """Reprojection errors of (H, 3, 3), (H, 3) hypotheses over all points."""
    pc = np.einsum("hij,nj->hni", R, P) + t[:, None]
    z = pc[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1e-9)
    err = np.linalg.norm(pc[..., :2] / zs[..., None] - U, axis=2)
    return np.where(front, err, np.inf)


def pnp_ransac(points: np.ndarray, uv: np.ndarray, iterations: int = 200, threshold: float = 0.01,
               min_inliers: int = 12, seed: int = 0, confidence: float = 0.999, batch: int = 16) -> PnPResult:
    """Camera pose from 3-D/2-D matches: P3P hypotheses, a fourth point to
    pick among the roots, inlier scoring, then least-squares refinement.

    Hypotheses are drawn and scored ``batch`` at a time; the adaptive
    iteration bound is checked between batches.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    U = np.asarray(uv, dtype=float).reshape(-1, 2)
    n = len(P)
    if n < 4:
        raise PnPFailure("insufficient matches")
    rng = np.random.default_rng(seed)
    bear = np.column_stack([U, np.ones(n)])
    best_R, best_t, best_cnt, best_score = None, None, -1, np.inf
    max_it = iterations
    it = 0
    while it < max_it:
        m = min(batch, max_it - it)
        idx = np.argpartition(rng.random((m, n)), 3, axis=1)[:, :4]
        it += m
        Rh, th, ok = p3p_batch(P[idx[:, :3]], bear[idx[:, :3]])
        if not ok.any():
            continue
        # fourth point disambiguates the roots of each sample
        p4 = np.einsum("mkij,mj->mki", Rh, P[idx[:, 3]]) + th
        z4 = p4[..., 2]
        e4 = np.linalg.norm(p4[..., :2] / np.where(np.abs(z4) > 1e-9, z4, 1e-9)[..., None]
                            - U[idx[:, 3]][:, None], axis=2)
        e4 = np.where(ok & (z4 > 1e-9), e4, np.inf)
        has = ok.any(axis=1)
        pick = np.argmin(np.where(ok, e4, np.inf), axis=1)
        rows = np.flatnonzero(has)
        R = Rh[rows, pick[rows]]
        t = th[rows, pick[rows]]
        err = _hypothesis_errors(R, t, P, U)
        inl = err < threshold
        cnt = inl.sum(axis=1)
        score = np.minimum(err, threshold).sum(axis=1)
        order = np.lexsort((score, -cnt))
        k = order[0]
        if cnt[k] > best_cnt or (cnt[k] == best_cnt and score[k] < best_score):
            best_R, best_t, best_cnt, best_score = R[k], t[k], int(cnt[k]), float(score[k])
            w = best_cnt / n
            if 0.0 < w < 1.0:
                need = np.log(1.0 - confidence) / np.log(1.0 - w ** 4)
                max_it = min(iterations, max(it, int(np.ceil(need))))
            elif w >= 1.0:
                max_it = it
    R, t = best_R, best_t
    if R is None or best_cnt < min_inliers:
        raise PnPFailure("no hypothesis reached min_inliers")
    for _ in range(2):
        err, front = reprojection_errors(R, t, P, U)
        inl = (err < threshold) & front
        if inl.sum() < 4:
            break
        R, t = refine_pose(R, t, P[inl], U[inl])
    err, front = reprojection_errors(R, t, P, U)
    inl = (err < threshold) & front
    if inl.sum() < min_inliers:
        raise PnPFailure("no hypothesis reached min_inliers")
    return PnPResult(Pose3.from_rt(R, t), inl, it)
