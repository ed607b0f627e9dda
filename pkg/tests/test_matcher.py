import numpy as np
import pytest
from scipy.special import expit

from monovo.descriptor import DescriptorSet
from monovo.matcher import (AttentionMatcher, MatcherWeights, MutualNNMatcher, apply_rotary, assignment,
                            assignment_from_scores, attend, confidence, cross_scores, default_rotary_freq,
                            extract_matches, match_mutual_nn, mutual_argmax, rotary_encode, self_scores,
                            similarity, weight_shapes)

SMALL = dict(n_layers=1, n_heads=2, head_dim=4)


def small_weights(seed=0, **kw):
    return MatcherWeights.random(seed, **{**SMALL, **kw})


def rand_desc(rng, k, d):
    return DescriptorSet(rng.normal(size=(k, d)), rng.random((k, 2)))


# -- weights ---------------------------------------------------------------------

def test_default_architecture():
    w = MatcherWeights.random(0)
    assert (w.n_layers, w.n_heads, w.head_dim, w.dim) == (12, 3, 64, 192)
    assert w["conf0.weight"].shape == (128, 384)
    assert "layer11.cross.k.weight" in w.params and "layer0.cross.q.weight" not in w.params


def test_weights_save_load_round_trip(tmp_path):
    w = small_weights(3)
    path = w.save(tmp_path / "w")
    back = MatcherWeights.load(path)
    assert back.n_layers == 1 and back.n_heads == 2
    for k, v in w.params.items():
        np.testing.assert_allclose(back[k], v, atol=1e-6)


def test_weights_missing_tensor_rejected():
    p = dict(small_weights().params)
    del p["match.weight"]
    with pytest.raises(ValueError):
        MatcherWeights(p, **SMALL)


def test_seeded_weights_deterministic():
    a, b = small_weights(5), small_weights(5)
    assert all(np.array_equal(a[k], b[k]) for k in a.params)


# -- rotary ---------------------------------------------------------------------------

def test_rotary_identity_and_orthogonal(rng):
    F = default_rotary_freq(8)
    np.testing.assert_array_equal(rotary_encode([0.0, 0.0], F), np.eye(8))
    M = rotary_encode(rng.random(2), F)
    np.testing.assert_allclose(M @ M.T, np.eye(8), atol=1e-12)
    v = rng.normal(size=8)
    assert np.linalg.norm(M @ v) == pytest.approx(np.linalg.norm(v))


def test_rotary_score_matches_explicit_matrix(rng):
    F = default_rotary_freq(8)
    q, k = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    p = rng.random((5, 2))
    fast = apply_rotary(q, p, F) @ apply_rotary(k, p, F).T
    for i in range(5):
        for j in range(5):
            assert fast[i, j] == pytest.approx(q[i] @ rotary_encode(p[j] - p[i], F) @ k[j], abs=1e-10)


# -- attention ------------------------------------------------------------------------

def layer_norm(x, g, b, eps=1e-5):
    return (x - x.mean()) / np.sqrt(x.var() + eps) * g + b


def gelu(x):
    from math import erf, sqrt
    return np.array([0.5 * v * (1 + erf(v / sqrt(2))) for v in x])


def naive_update(w, prefix, f, m):
    h = w[f"{prefix}.mlp0.weight"] @ np.concatenate([f, m]) + w[f"{prefix}.mlp0.bias"]
    h = layer_norm(h, w[f"{prefix}.norm.weight"], w[f"{prefix}.norm.bias"])
    return f + w[f"{prefix}.mlp1.weight"] @ gelu(h) + w[f"{prefix}.mlp1.bias"]


def lin(w, name, x):
    return w[f"{name}.weight"] @ x + w[f"{name}.bias"]


def naive_layer(w, fa, pa, fb, pb):
    """Single attention layer written out with explicit loops and softmaxes."""
    H, hd = w.n_heads, w.head_dim
    F = w["rotary.freq"]

    def self_unit(f, p):
        out = []
        for i in range(len(f)):
            msg = []
            for h in range(H):
                sl = slice(h * hd, (h + 1) * hd)
                q = lin(w, "layer0.self.q", f[i])[sl]
                s = np.array([q @ rotary_encode(p[j] - p[i], F) @ lin(w, "layer0.self.k", f[j])[sl] / np.sqrt(hd)
                              for j in range(len(f))])
                a = np.exp(s - s.max())
                a /= a.sum()
                msg.append(sum(a[j] * lin(w, "layer0.self.v", f[j])[sl] for j in range(len(f))))
            m = lin(w, "layer0.self.out", np.concatenate(msg))
            out.append(naive_update(w, "layer0.self", f[i], m))
        return np.array(out)

    def cross_unit(ft, fs):
        out = []
        for i in range(len(ft)):
            msg = []
            for h in range(H):
                sl = slice(h * hd, (h + 1) * hd)
                ki = lin(w, "layer0.cross.k", ft[i])[sl]
                s = np.array([ki @ lin(w, "layer0.cross.k", fs[j])[sl] / np.sqrt(hd) for j in range(len(fs))])
                a = np.exp(s - s.max())
                a /= a.sum()
                msg.append(sum(a[j] * lin(w, "layer0.cross.v", fs[j])[sl] for j in range(len(fs))))
            out.append(naive_update(w, "layer0.cross", ft[i], lin(w, "layer0.cross.out", np.concatenate(msg))))
        return np.array(out)

    fa, fb = self_unit(fa, pa), self_unit(fb, pb)
    return cross_unit(fa, fb), cross_unit(fb, fa)


def test_single_layer_matches_hand_computation(rng):
    w = small_weights(1)
    a, b = rand_desc(rng, 2, 8), rand_desc(rng, 2, 8)
    fa, fb = attend(a, b, w)
    ea, eb = naive_layer(w, a.descriptors, a.positions, b.descriptors, b.positions)
    np.testing.assert_allclose(fa.descriptors, ea, atol=1e-10)
    np.testing.assert_allclose(fb.descriptors, eb, atol=1e-10)


def test_zero_message_mlp_is_identity(rng):
    w = small_weights(2, n_layers=3)
    for n in range(3):
        for unit in ("self", "cross"):
            w.params[f"layer{n}.{unit}.mlp1.weight"][:] = 0.0
            w.params[f"layer{n}.{unit}.mlp1.bias"][:] = 0.0
    a, b = rand_desc(rng, 6, 8), rand_desc(rng, 5, 8)
    fa, fb = attend(a, b, w)
    np.testing.assert_array_equal(fa.descriptors, a.descriptors)
    np.testing.assert_array_equal(fb.descriptors, b.descriptors)


def test_cross_scores_transpose(rng):
    w = MatcherWeights.random(0)
    fa, fb = rng.normal(size=(7, 192)), rng.normal(size=(9, 192))
    np.testing.assert_allclose(cross_scores(fb, fa, w, 3), cross_scores(fa, fb, w, 3).transpose(0, 2, 1),
                               atol=1e-10)


def test_self_scores_shape(rng):
    w = small_weights()
    f = rng.normal(size=(4, 8))
    assert self_scores(f, rng.random((4, 2)), w, 0).shape == (2, 4, 4)


def test_attend_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        attend(rand_desc(rng, 3, 10), rand_desc(rng, 3, 10), small_weights())


# -- assignment ----------------------------------------------------------------------

def naive_P(S, sa, sb):
    Ka, Kb = S.shape
    P = np.zeros_like(S)
    for i in range(Ka):
        for j in range(Kb):
            col = np.exp(S[i, j]) / np.exp(S[:, j]).sum()
            row = np.exp(S[i, j]) / np.exp(S[i, :]).sum()
            P[i, j] = sa[i] * sb[j] * col * row
    return P


def test_assignment_matches_formula(rng):
    S = rng.normal(size=(4, 4))
    sa, sb = rng.random(4), rng.random(4)
    np.testing.assert_allclose(assignment_from_scores(S, sa, sb).P, naive_P(S, sa, sb), atol=1e-10)


def test_assignment_trivial_cases(rng):
    assert assignment_from_scores(np.array([[3.0]]), [1.0], [1.0]).P[0, 0] == pytest.approx(1.0)
    P = assignment_from_scores(rng.normal(size=(3, 4)), [0.5, 0.0, 1.0], np.ones(4)).P
    assert np.all(P[1] == 0.0)


def test_assignment_stable_for_large_scores(rng):
    S = rng.normal(size=(5, 6)) * 1e4
    P = assignment_from_scores(S, np.ones(5), np.ones(6)).P
    assert np.all(np.isfinite(P))


def test_assignment_bounds_and_model_path(rng):
    w = MatcherWeights.random(4)
    a, b = rand_desc(rng, 64, 192), rand_desc(rng, 64, 192)
    A = assignment(a, b, w)
    assert np.all((A.P >= 0) & (A.P <= 1))
    assert A.P.sum(axis=0).max() <= 1 + 1e-6 and A.P.sum(axis=1).max() <= 1 + 1e-6
    sa = expit(a.descriptors @ w["match.weight"][0] + w["match.bias"][0])
    sb = expit(b.descriptors @ w["match.weight"][0] + w["match.bias"][0])
    np.testing.assert_allclose(A.P, naive_P(similarity(a, b, w), sa, sb), atol=1e-10)


# -- matches ---------------------------------------------------------------------------

def brute_mutual(M, thr):
    out = []
    for i in range(M.shape[0]):
        j = int(np.argmax(M[i]))
        if int(np.argmax(M[:, j])) == i and M[i, j] >= thr:
            out.append((i, j))
    return out


def test_mutual_argmax_brute_force(rng):
    for _ in range(20):
        M = rng.random((8, 11))
        ia, ib = mutual_argmax(M, 0.3)
        assert list(zip(ia, ib)) == brute_mutual(M, 0.3)


def test_extract_matches_examples(rng):
    w = small_weights()
    d = rand_desc(rng, 4, 8)
    P = assignment_from_scores(np.eye(4) * 10, np.ones(4), np.ones(4))
    m = extract_matches(P, d, d, w, 0.2)
    assert list(m.idx_a) == [0, 1, 2, 3] and list(m.idx_b) == [0, 1, 2, 3]
    assert np.all(m.weights >= 0)
    assert len(extract_matches(P, d, d, w, 1.0 + 1e-9)) == 0
    # rows 0 and 1 both peak in column 0: column arg-max keeps the stronger
    Q = np.array([[0.6, 0.1], [0.7, 0.2]])
    from monovo.matcher import AssignmentMatrix
    m = extract_matches(AssignmentMatrix(Q, np.ones(2), np.ones(2)), rand_desc(rng, 2, 8), rand_desc(rng, 2, 8), w, 0.0)
    assert list(zip(m.idx_a, m.idx_b)) == [(1, 0)]


def test_attention_matcher_injective_and_nonnegative(rng):
    w = MatcherWeights.random(0, n_layers=2)
    a, b = rand_desc(rng, 64, 192), rand_desc(rng, 64, 192)
    m = AttentionMatcher(w, threshold=0.0)(None, a, None, b)
    assert len(set(m.idx_a)) == len(m) and len(set(m.idx_b)) == len(m)
    assert np.all(m.weights >= 0) and np.all(m.probs >= 0)


def test_permutation_equivariance(rng):
    w = MatcherWeights.random(0, n_layers=2)
    a, b = rand_desc(rng, 16, 192), rand_desc(rng, 16, 192)
    perm = rng.permutation(16)
    ap = DescriptorSet(a.descriptors[perm], a.positions[perm])
    P = assignment(*attend(a, b, w), w).P
    Pp = assignment(*attend(ap, b, w), w).P
    np.testing.assert_allclose(Pp, P[perm], rtol=0, atol=1e-14)
    m = AttentionMatcher(w, 0.0)(None, a, None, b)
    mp = AttentionMatcher(w, 0.0)(None, ap, None, b)
    assert sorted(zip(perm[mp.idx_a], mp.idx_b)) == sorted(zip(m.idx_a, m.idx_b))


def test_confidence_nonnegative(rng):
    w = small_weights()
    assert np.all(confidence(rng.normal(size=(10, 8)) * 100, rng.normal(size=(10, 8)) * 100, w) >= 0)


def test_mnn_examples(rng):
    d = rng.normal(size=(10, 16))
    m = match_mutual_nn(d, d)
    assert list(m.idx_a) == list(range(10)) and list(m.idx_b) == list(range(10))
    assert np.all(m.weights == 1.0)
    e = np.eye(4)
    assert len(match_mutual_nn(e[:2], e[2:], threshold=0.5)) == 0


def test_mnn_brute_force(rng):
    for _ in range(10):
        a, b = rng.normal(size=(12, 6)), rng.normal(size=(9, 6))
        m = MutualNNMatcher(0.1)(None, a, None, b)
        an = a / np.linalg.norm(a, axis=1, keepdims=True)
        bn = b / np.linalg.norm(b, axis=1, keepdims=True)
        assert list(zip(m.idx_a, m.idx_b)) == brute_mutual(an @ bn.T, 0.1)


def test_weight_shapes_count():
    s = weight_shapes(1, 2, 4)
    assert s["rotary.freq"] == (2, 2) and s["layer0.self.mlp0.weight"] == (16, 16)
