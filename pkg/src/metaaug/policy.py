"""Augmentation policy network and batch weight normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metaaug.augment import EMBED_DIM
from metaaug.nn import DenseLayer, sigmoid


_LOW = np.finfo(np.float64).tiny
_HIGH = np.nextafter(1.0, 0.0)


@dataclass
class PolicyCache:
    features: np.ndarray
    embeddings: np.ndarray
    z_feat: np.ndarray
    z_emb: np.ndarray
    hidden: np.ndarray
    out: np.ndarray


@dataclass
class PolicyNetwork:
    """Two ReLU branches (image feature, transform embedding), concatenated, sigmoid head."""

    branch_feat: DenseLayer
    branch_emb: DenseLayer
    head: DenseLayer

    def __post_init__(self):
        if self.branch_feat.activation != "relu" or self.branch_emb.activation != "relu":
            raise ValueError("policy branches must use ReLU")
        if self.head.activation != "sigmoid" or self.head.out_size != 1:
            raise ValueError("policy head must be a single sigmoid unit")
        if self.head.in_size != self.branch_feat.out_size + self.branch_emb.out_size:
            raise ValueError("head input size must equal the concatenated branch sizes")

    @classmethod
    def init(cls, feature_dim, rng, hidden=100, embed_dim=EMBED_DIM):
        """Fan-in uniform branches and an all-zero head, so every initial weight is 0.5."""
        return cls(
            DenseLayer.init(feature_dim, hidden, "relu", rng),
            DenseLayer.init(embed_dim, hidden, "relu", rng),
            DenseLayer.init(2 * hidden, 1, "sigmoid", rng, zero=True),
        )

    @property
    def feature_dim(self):
        return self.branch_feat.in_size

    @property
    def embed_dim(self):
        return self.branch_emb.in_size

    def params(self):
        return [self.branch_feat.weights, self.branch_feat.bias,
                self.branch_emb.weights, self.branch_emb.bias,
                self.head.weights, self.head.bias]

    def with_params(self, params):
        if len(params) != 6:
            raise ValueError("policy has six parameter tensors")
        for old, new in zip(self.params(), params):
            if old.shape != np.shape(new):
                raise ValueError("policy parameter shape mismatch")
        c = lambda a: np.array(a, dtype=np.float64)  # noqa: E731
        return PolicyNetwork(
            DenseLayer(c(params[0]), c(params[1]), "relu"),
            DenseLayer(c(params[2]), c(params[3]), "relu"),
            DenseLayer(c(params[4]), c(params[5]), "sigmoid"),
        )

    def forward(self, features, embeddings):
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if features.shape[1] != self.feature_dim:
            raise ValueError(f"feature length {features.shape[1]} != {self.feature_dim}")
        if embeddings.shape[1] != self.embed_dim:
            raise ValueError(f"embedding length {embeddings.shape[1]} != {self.embed_dim}")
        if len(features) != len(embeddings):
            raise ValueError("features and embeddings must have the same batch size")
        z_feat, h_feat = self.branch_feat.forward(features)
        z_emb, h_emb = self.branch_emb.forward(embeddings)
        hidden = np.concatenate([h_feat, h_emb], axis=1)
        # keep weights strictly inside (0, 1) even where float64 sigmoid saturates
        out = np.clip(sigmoid(hidden @ self.head.weights[0] + self.head.bias[0]), _LOW, _HIGH)
        return out, PolicyCache(features, embeddings, z_feat, z_emb, hidden, out)

    def weights(self, features, embeddings):
        return self.forward(features, embeddings)[0]

    def backward(self, cache: PolicyCache, coeffs):
        """Gradient of ``sum_k coeffs[k] * P_k`` with respect to every parameter tensor."""
        coeffs = np.asarray(coeffs, dtype=np.float64)
        d_logit = coeffs * cache.out * (1.0 - cache.out)
        g_head_w = (d_logit @ cache.hidden)[None, :]
        g_head_b = np.array([d_logit.sum()])
        d_hidden = np.outer(d_logit, self.head.weights[0])
        nf = self.branch_feat.out_size
        d_zf = d_hidden[:, :nf] * (cache.z_feat > 0)
        d_ze = d_hidden[:, nf:] * (cache.z_emb > 0)
        return [d_zf.T @ cache.features, d_zf.sum(axis=0),
                d_ze.T @ cache.embeddings, d_ze.sum(axis=0),
                g_head_w, g_head_b]


def weight(feature, embedding, theta: PolicyNetwork) -> float:
    return float(theta.weights(feature, embedding)[0])


def grad_theta(feature, embedding, theta: PolicyNetwork):
    _, cache = theta.forward(feature, embedding)
    return theta.backward(cache, np.ones(1))


def normalize_weights(raw):
    """Rescale a batch of positive weights to mean 1: ``n * raw / sum(raw)``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot normalize an empty batch")
    if np.all(raw == raw[0]):
        return np.ones(raw.size)  # exact, where n * x / (n * x) may round
    return raw * (raw.size / raw.sum())


def normalized_coeffs(raw, upstream):
    """Pull ``sum_i upstream[i] * d(normalized_i)`` back onto the raw weights.

    Returns ``c`` with ``sum_i upstream[i] * grad(n P_i / S) == sum_k c[k] * grad(P_k)``,
    i.e. ``c_k = (n / S) * (upstream_k - sum_i upstream_i P_i / S)``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    s = raw.sum()
    return (raw.size / s) * (upstream - upstream @ raw / s)
