"""Sparse matching: attention-based soft partial assignment and a mutual
nearest-neighbour baseline.

The attention matcher stacks ``n_layers`` blocks, each a self-attention unit
(scores modulated by a rotary encoding of relative keypoint position)
followed by a bidirectional cross-attention unit that shares one score
matrix between the two directions.  A final head turns descriptors into a
soft partial assignment ``P`` (dual softmax times per-keypoint
matchability); mutual arg-maxima of ``P`` above a threshold become matches,
each with a non-negative confidence weight for the pose solver.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit, log_expit, log_softmax, softmax

from .descriptor import DescriptorSet
from .detector import KeypointSet
from .fmap import read_fmap, write_fmap

CONF_HIDDEN = 128


# -- weights -----------------------------------------------------------------

def _linear_shapes(prefix, n_out, n_in):
    return {f"{prefix}.weight": (n_out, n_in), f"{prefix}.bias": (n_out,)}


def weight_shapes(n_layers=12, n_heads=3, head_dim=64):
    """Name -> shape of every tensor the attention matcher needs."""
    d = n_heads * head_dim
    shapes = {"rotary.freq": (head_dim // 2, 2)}
    for n in range(n_layers):
        for unit, projs in (("self", "qkv"), ("cross", "kv")):
            p = f"layer{n}.{unit}"
            for name in projs:
                shapes.update(_linear_shapes(f"{p}.{name}", d, d))
            shapes.update(_linear_shapes(f"{p}.out", d, d))
            shapes.update(_linear_shapes(f"{p}.mlp0", 2 * d, 2 * d))
            shapes.update({f"{p}.norm.weight": (2 * d,), f"{p}.norm.bias": (2 * d,)})
            shapes.update(_linear_shapes(f"{p}.mlp1", d, 2 * d))
    shapes.update(_linear_shapes("final.proj", d, d))
    shapes.update(_linear_shapes("match", 1, d))
    shapes.update(_linear_shapes("conf0", CONF_HIDDEN, 2 * d))
    shapes.update(_linear_shapes("conf1", 1, CONF_HIDDEN))
    return shapes


def default_rotary_freq(head_dim=64):
    """Fixed frequencies (radians per unit of normalized position).

    The first half of the rotation pairs turn with the row coordinate, the
    second half with the column coordinate; frequencies are geometric in
    ``[1, 256]`` within each half.
    """
    n = head_dim // 2
    half = n // 2
    freqs = np.geomspace(1.0, 256.0, half)
    F = np.zeros((n, 2))
    F[:half, 0] = freqs
    F[half:, 1] = np.geomspace(1.0, 256.0, n - half)
    return F


@dataclass
class MatcherWeights:
    params: dict
    n_layers: int = 12
    n_heads: int = 3
    head_dim: int = 64

    def __post_init__(self):
        if self.head_dim % 2:
            raise ValueError("head dimension must be even for the rotary encoding")
        expected = weight_shapes(self.n_layers, self.n_heads, self.head_dim)
        missing = sorted(set(expected) - set(self.params))
        if missing:
            raise ValueError(f"missing matcher tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        clean = {}
        for name, shape in expected.items():
            a = np.asarray(self.params[name], dtype=float).reshape(shape)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite values in {name}")
            clean[name] = a
        self.params = clean

    @property
    def dim(self):
        return self.n_heads * self.head_dim

    def __getitem__(self, name):
        return self.params[name]

    @classmethod
    def random(cls, seed=0, n_layers=12, n_heads=3, head_dim=64):
        """Seeded initialization: uniform(+-1/sqrt(fan_in)) linear layers,
        unit LayerNorm scales, fixed rotary frequencies."""
        rng = np.random.default_rng(seed)
        shapes = weight_shapes(n_layers, n_heads, head_dim)
        params = {}
        for name, shape in shapes.items():
            if name == "rotary.freq":
                params[name] = default_rotary_freq(head_dim)
            elif name.endswith("norm.weight"):
                params[name] = np.ones(shape)
            elif name.endswith("norm.bias"):
                params[name] = np.zeros(shape)
            else:
                fan_in = shapes[name.rsplit(".", 1)[0] + ".weight"][1]
                bound = 1.0 / np.sqrt(fan_in)
                params[name] = rng.uniform(-bound, bound, shape)
        return cls(params, n_layers, n_heads, head_dim)

    def save(self, directory):
        """Write one FMAP per tensor plus a ``weights.txt`` manifest.

        Manifest lines are ``key = value`` for the architecture and
        ``tensor <name> <relative path>`` for each tensor.  Matrices are
        stored as (rows, cols, 1) FMAPs, vectors as (1, n, 1).
        """
        os.makedirs(directory, exist_ok=True)
        lines = [f"n_layers = {self.n_layers}", f"n_heads = {self.n_heads}",
                 f"head_dim = {self.head_dim}"]
        for name, a in self.params.items():
            fname = f"{name}.fmap"
            write_fmap(os.path.join(directory, fname), a if a.ndim == 2 else a[None, :])
            lines.append(f"tensor {name} {fname}")
        path = os.path.join(directory, "weights.txt")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, manifest_path):
        base = os.path.dirname(os.path.abspath(manifest_path))
        arch, params = {}, {}
        with open(manifest_path) as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if line.startswith("tensor "):
                    parts = line.split()
                    if len(parts) != 3:
                        raise ValueError(f"{manifest_path}:{lineno}: expected 'tensor <name> <path>'")
                    params[parts[1]] = read_fmap(os.path.join(base, parts[2]))[..., 0]
                elif "=" in line:
                    key, value = (s.strip() for s in line.split("=", 1))
                    arch[key] = int(value)
                else:
                    raise ValueError(f"{manifest_path}:{lineno}: cannot parse {line!r}")
        return cls(params, **arch)


# -- building blocks ---------------------------------------------------------

def _linear(w, name, x):
    return x @ w[f"{name}.weight"].T + w[f"{name}.bias"]


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def rotary_angles(positions, freq):
    """Rotation angle of every pair for each position: ``(K, d/2)``."""
    return np.asarray(positions, dtype=float) @ np.asarray(freq, dtype=float).T


def apply_rotary(x, positions, freq):
    """Rotate consecutive pairs ``(x[2k], x[2k+1])`` of the last axis by
    ``freq[k] . position``.  ``x`` is ``(..., K, d)``."""
    ang = rotary_angles(positions, freq)
    c, s = np.cos(ang), np.sin(ang)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x, dtype=float)
    out[..., 0::2] = c * x0 - s * x1
    out[..., 1::2] = s * x0 + c * x1
    return out


def rotary_encode(delta, freq):
    """Explicit ``d x d`` block-diagonal rotation for a position offset.

    ``q_i @ rotary_encode(p_j - p_i) @ k_j`` equals the dot product of the
    rotated query and key, which is what :func:`apply_rotary` computes.
    """
    ang = rotary_angles(np.reshape(delta, (1, 2)), freq)[0]
    d = 2 * len(ang)
    M = np.zeros((d, d))
    c, s = np.cos(ang), np.sin(ang)
    M[0::2, 0::2] = np.diag(c)
    M[0::2, 1::2] = np.diag(-s)
    M[1::2, 0::2] = np.diag(s)
    M[1::2, 1::2] = np.diag(c)
    return M


def _heads(x, n_heads):
    """``(K, h*hd)`` -> ``(h, K, hd)``."""
    return x.reshape(len(x), n_heads, -1).transpose(1, 0, 2)


def _merge(x):
    return x.transpose(1, 0, 2).reshape(x.shape[1], -1)


def _update(w, prefix, f, message):
    h = _linear(w, f"{prefix}.mlp0", np.hstack([f, message]))
    h = _layer_norm(h, w[f"{prefix}.norm.weight"], w[f"{prefix}.norm.bias"])
    return f + _linear(w, f"{prefix}.mlp1", _gelu(h))


def self_scores(f, positions, w: MatcherWeights, layer):
    """Per-head self-attention scores ``(heads, K, K)`` including the
    rotary term and the 1/sqrt(head_dim) scaling."""
    p = f"layer{layer}.self"
    q = apply_rotary(_heads(_linear(w, f"{p}.q", f), w.n_heads), positions, w["rotary.freq"])
    k = apply_rotary(_heads(_linear(w, f"{p}.k", f), w.n_heads), positions, w["rotary.freq"])
    return q @ k.transpose(0, 2, 1) / np.sqrt(w.head_dim)


def self_attention(f, positions, w: MatcherWeights, layer):
    p = f"layer{layer}.self"
    v = _heads(_linear(w, f"{p}.v", f), w.n_heads)
    attn = softmax(self_scores(f, positions, w, layer), axis=-1)
    m = _merge(attn @ v)
    return _update(w, p, f, _linear(w, f"{p}.out", m))


def cross_scores(f_target, f_source, w: MatcherWeights, layer):
    """Per-head cross scores ``a[h, i, j] = k_i(target) . k_j(source) / sqrt(hd)``."""
    p = f"layer{layer}.cross"
    kt = _heads(_linear(w, f"{p}.k", f_target), w.n_heads)
    ks = _heads(_linear(w, f"{p}.k", f_source), w.n_heads)
    return kt @ ks.transpose(0, 2, 1) / np.sqrt(w.head_dim)


def cross_attention(fa, fb, w: MatcherWeights, layer):
    """Bidirectional update; the b->a scores are the transpose of a->b."""
    p = f"layer{layer}.cross"
    va = _heads(_linear(w, f"{p}.v", fa), w.n_heads)
    vb = _heads(_linear(w, f"{p}.v", fb), w.n_heads)
    s = cross_scores(fa, fb, w, layer)
    ma = _merge(softmax(s, axis=2) @ vb)
    mb = _merge(softmax(s, axis=1).transpose(0, 2, 1) @ va)
    return (_update(w, p, fa, _linear(w, f"{p}.out", ma)),
            _update(w, p, fb, _linear(w, f"{p}.out", mb)))


def canonical_order(desc: DescriptorSet):
    """Sort order by position, then descriptor values.

    Running on canonically sorted inputs makes every reduction over
    keypoints see the same operand order whatever order the caller used, so
    permutation equivariance holds bit for bit rather than to round-off.
    """
    keys = np.column_stack([desc.positions, desc.descriptors])
    return np.lexsort(keys.T[::-1])


def _sorted(desc: DescriptorSet, order):
    return DescriptorSet(desc.descriptors[order], desc.positions[order])


def _attend_sorted(desc_a, desc_b, w):
    fa, fb = desc_a.descriptors, desc_b.descriptors
    layers = []
    for n in range(w.n_layers):
        fa = self_attention(fa, desc_a.positions, w, n)
        fb = self_attention(fb, desc_b.positions, w, n)
        fa, fb = cross_attention(fa, fb, w, n)
        layers.append((fa, fb))
    return layers


def attend(desc_a: DescriptorSet, desc_b: DescriptorSet, w: MatcherWeights,
           return_layers=False):
    """Run all attention layers.

    Returns the final ``(desc_a, desc_b)``, or with ``return_layers`` the
    list of per-layer outputs.
    """
    if desc_a.dim != w.dim or desc_b.dim != w.dim:
        raise ValueError(f"descriptor dims {desc_a.dim}/{desc_b.dim} != matcher dim {w.dim}")
    oa, ob = canonical_order(desc_a), canonical_order(desc_b)
    ia, ib = np.argsort(oa), np.argsort(ob)
    layers = [(DescriptorSet(fa[ia], desc_a.positions), DescriptorSet(fb[ib], desc_b.positions))
              for fa, fb in _attend_sorted(_sorted(desc_a, oa), _sorted(desc_b, ob), w)]
    if return_layers:
        return layers
    if not layers:
        return desc_a, desc_b
    return layers[-1]


# -- assignment ----------------------------------------------------------------

@dataclass
class AssignmentMatrix:
    P: np.ndarray        # (Ka, Kb)
    sigma_a: np.ndarray  # (Ka,)
    sigma_b: np.ndarray  # (Kb,)


def _log_assignment(S, log_sigma_a, log_sigma_b):
    if S.size == 0:
        return AssignmentMatrix(np.zeros(S.shape), np.exp(log_sigma_a), np.exp(log_sigma_b))
    logP = (log_softmax(S, axis=0) + log_softmax(S, axis=1)
            + log_sigma_a[:, None] + log_sigma_b[None, :])
    return AssignmentMatrix(np.exp(logP), np.exp(log_sigma_a), np.exp(log_sigma_b))


def assignment_from_scores(S, sigma_a, sigma_b):
    """``P_ij = sigma_i sigma_j softmax_i(S[:, j]) softmax_j(S[i, :])``,
    evaluated in the log domain."""
    with np.errstate(divide="ignore"):
        return _log_assignment(np.asarray(S, dtype=float),
                               np.log(np.asarray(sigma_a, dtype=float)),
                               np.log(np.asarray(sigma_b, dtype=float)))


def similarity(desc_a, desc_b, w: MatcherWeights):
    ma = _linear(w, "final.proj", desc_a.descriptors) / w.dim ** 0.25
    mb = _linear(w, "final.proj", desc_b.descriptors) / w.dim ** 0.25
    return ma @ mb.T


def matchability(desc, w: MatcherWeights):
    return expit(_linear(w, "match", desc.descriptors)[:, 0])


def assignment(desc_a, desc_b, w: MatcherWeights) -> AssignmentMatrix:
    oa, ob = canonical_order(desc_a), canonical_order(desc_b)
    a, b = _sorted(desc_a, oa), _sorted(desc_b, ob)
    A = _log_assignment(similarity(a, b, w),
                        log_expit(_linear(w, "match", a.descriptors)[:, 0]),
                        log_expit(_linear(w, "match", b.descriptors)[:, 0]))
    ia, ib = np.argsort(oa), np.argsort(ob)
    return AssignmentMatrix(A.P[ia][:, ib], A.sigma_a[ia], A.sigma_b[ib])


def confidence(fa, fb, w: MatcherWeights):
    """Confidence weights for paired rows of ``fa`` and ``fb``: a two-layer
    MLP (ReLU hidden layer) with a softplus output, so weights are >= 0."""
    h = np.maximum(_linear(w, "conf0", np.hstack([fa, fb])), 0.0)
    return np.logaddexp(0.0, _linear(w, "conf1", h)[:, 0])


# -- matches -----------------------------------------------------------------

@dataclass
class MatchSet:
    idx_a: np.ndarray
    idx_b: np.ndarray
    probs: np.ndarray
    weights: np.ndarray
    kp_a: KeypointSet | None = field(default=None, repr=False)
    kp_b: KeypointSet | None = field(default=None, repr=False)

    def __post_init__(self):
        self.idx_a = np.asarray(self.idx_a, dtype=int).reshape(-1)
        self.idx_b = np.asarray(self.idx_b, dtype=int).reshape(-1)
        self.probs = np.asarray(self.probs, dtype=float).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        n = len(self.idx_a)
        if not (len(self.idx_b) == len(self.probs) == len(self.weights) == n):
            raise ValueError("match arrays must have equal length")
        if np.any(~np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("confidence weights must be finite and >= 0")

    def __len__(self):
        return len(self.idx_a)

    def points(self):
        """Matched ``(row, col)`` positions in image a and image b."""
        return self.kp_a.rc[self.idx_a], self.kp_b.rc[self.idx_b]


def mutual_argmax(M, threshold):
    """Pairs ``(i, j)`` where ``j`` is the row arg-max of ``i``, ``i`` the
    column arg-max of ``j`` and ``M[i, j] >= threshold``."""
    if M.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    row_best = np.argmax(M, axis=1)
    col_best = np.argmax(M, axis=0)
    i = np.arange(M.shape[0])
    keep = (col_best[row_best] == i) & (M[i, row_best] >= threshold)
    return i[keep], row_best[keep]


def extract_matches(P: AssignmentMatrix, desc_a, desc_b, w: MatcherWeights,
                    threshold=0.2, kp_a=None, kp_b=None) -> MatchSet:
    ia, ib = mutual_argmax(P.P, threshold)
    if len(ia):
        conf = confidence(desc_a.descriptors[ia], desc_b.descriptors[ib], w)
    else:
        conf = np.zeros(0)
    return MatchSet(ia, ib, P.P[ia, ib], conf, kp_a, kp_b)


def match_mutual_nn(desc_a, desc_b, threshold=0.0, kp_a=None, kp_b=None) -> MatchSet:
    """Mutual nearest neighbours under cosine similarity; confidences are 1."""
    a = np.asarray(getattr(desc_a, "descriptors", desc_a), dtype=float)
    b = np.asarray(getattr(desc_b, "descriptors", desc_b), dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"descriptor shapes {a.shape} and {b.shape} are incompatible")
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    sim = an @ bn.T
    ia, ib = mutual_argmax(sim, threshold)
    return MatchSet(ia, ib, sim[ia, ib], np.ones(len(ia)), kp_a, kp_b)


@dataclass
class AttentionMatcher:
    weights: MatcherWeights
    threshold: float = 0.2

    def __call__(self, kp_a, desc_a, kp_b, desc_b) -> MatchSet:
        fa, fb = attend(desc_a, desc_b, self.weights)
        P = assignment(fa, fb, self.weights)
        return extract_matches(P, fa, fb, self.weights, self.threshold, kp_a, kp_b)


@dataclass
class MutualNNMatcher:
    threshold: float = 0.0

    def __call__(self, kp_a, desc_a, kp_b, desc_b) -> MatchSet:
        return match_mutual_nn(desc_a, desc_b, self.threshold, kp_a, kp_b)
