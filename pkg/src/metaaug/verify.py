"""Independent oracles and convergence monitors for the trainer."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from metaaug import augment
from metaaug.augment import FUNCTION_NAMES, INDEX, K, TransformSpec, embed, embed_batch
from metaaug.nn import DenseLayer, TaskNetwork, flatten, per_sample_grad, per_sample_loss
from metaaug.policy import PolicyNetwork, normalize_weights
from metaaug.trainer import inner_step, meta_grad, run


def max_relative_error(a, b, floor=1e-12):
    """``max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# --------------------------------------------------------------------------
# hypergradient oracle


@dataclass
class HyperInstance:
    """A frozen training batch, validation batch and models for hypergradient checks."""

    net: TaskNetwork
    policy: PolicyNetwork
    log_alpha: float
    x: np.ndarray
    y: np.ndarray
    emb: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    normalize: bool = True


def random_instance(rng, feature_dim=8, policy_hidden=16, n_tr=4, n_val=4, input_dim=10,
                    num_classes=3, normalize=True) -> HyperInstance:
    net = TaskNetwork([
        DenseLayer(rng.normal(0, 1 / math.sqrt(input_dim), (feature_dim, input_dim)),
                   rng.normal(0, 0.1, feature_dim), "relu"),
        DenseLayer(rng.normal(0, 1 / math.sqrt(feature_dim), (num_classes, feature_dim)),
                   rng.normal(0, 0.1, num_classes), "identity"),
    ], feature_index=0)
    policy = PolicyNetwork(
        DenseLayer(rng.normal(0, 0.5, (policy_hidden, feature_dim)), rng.normal(0, 0.1, policy_hidden), "relu"),
        DenseLayer(rng.normal(0, 0.2, (policy_hidden, augment.EMBED_DIM)), rng.normal(0, 0.1, policy_hidden), "relu"),
        DenseLayer(rng.normal(0, 0.3, (1, 2 * policy_hidden)), rng.normal(0, 0.1, 1), "sigmoid"),
    )
    specs = [TransformSpec(int(rng.integers(1, K + 1)), int(rng.integers(1, K + 1)),
                           float(rng.uniform(0, 10)), float(rng.uniform(0, 10))) for _ in range(n_tr)]
    return HyperInstance(
        net, policy, float(np.log(rng.uniform(0.2, 1.0))),
        rng.normal(0, 1, (n_tr, input_dim)), rng.integers(0, num_classes, n_tr),
        embed_batch(specs),
        rng.normal(0, 1, (n_val, input_dim)), rng.integers(0, num_classes, n_val),
        normalize,
    )


LD = np.longdouble


def _ld(a):
    return np.asarray(a, dtype=LD)


def _ld_sigmoid(z):
    return 1 / (1 + np.exp(-z))


class _ComposedLoss:
    """Validation loss after the virtual step as a function of ``(theta, log_alpha)``.

    Evaluated in extended precision from scratch; only the per-sample training
    gradients and features, which do not depend on ``(theta, alpha)``, are
    taken from the float64 engine.
    """

    def __init__(self, inst: HyperInstance):
        psg = per_sample_grad(inst.net, inst.x, inst.y)
        self.grads = [[_ld(g) for g in gi] for gi in psg.materialize()]
        self.w = [_ld(p) for p in inst.net.params()]
        self.acts = [l.activation for l in inst.net.layers]
        self.feats = _ld(inst.net.features(inst.x))
        self.emb = _ld(inst.emb)
        self.vx = _ld(inst.vx)
        self.vy = np.asarray(inst.vy)
        self.normalize = inst.normalize

    def __call__(self, theta_params, log_alpha):
        wf, bf, we, be, wh, bh = (_ld(p) for p in theta_params)
        hf = np.maximum(self.feats @ wf.T + bf, 0)
        he = np.maximum(self.emb @ we.T + be, 0)
        raw = _ld_sigmoid(np.concatenate([hf, he], axis=1) @ wh[0] + bh[0])
        n = len(raw)
        pw = raw * (n / raw.sum()) if self.normalize else raw
        alpha = np.exp(LD(log_alpha))
        w_hat = [p - alpha * sum(pw[i] * self.grads[i][q] for i in range(n)) / n
                 for q, p in enumerate(self.w)]
        a = self.vx
        for (W, b), act in zip(zip(w_hat[0::2], w_hat[1::2]), self.acts):
            a = a @ W.T + b
            if act == "relu":
                a = np.maximum(a, 0)
            elif act == "sigmoid":
                a = _ld_sigmoid(a)
        z = a - a.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(self.vy)), self.vy].mean()


def hyper_val_loss(inst: HyperInstance, policy: PolicyNetwork, log_alpha) -> float:
    """Validation loss after the virtual step, as a function of ``(policy, log_alpha)``."""
    return float(_ComposedLoss(inst)(policy.params(), log_alpha))


def analytic_hypergrad(inst: HyperInstance):
    psg = per_sample_grad(inst.net, inst.x, inst.y)
    raw, cache = inst.policy.forward(inst.net.features(inst.x), inst.emb)
    alpha = math.exp(inst.log_alpha)
    w = normalize_weights(raw) if inst.normalize else raw
    w_hat = inner_step(inst.net.params(), psg, w, alpha)
    mg = meta_grad(inst.net, w_hat, psg, inst.vx, inst.vy, inst.policy, cache, alpha, inst.normalize)
    return flatten(mg.grad_theta), mg.grad_log_alpha


def fd_hypergrad(inst: HyperInstance, eps=1e-5):
    """Central differences of the post-step validation loss, coordinate by coordinate."""
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")
    f = _ComposedLoss(inst)
    like = inst.policy.params()
    theta = flatten(like).astype(LD)
    g = np.empty(theta.size)
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += eps
        tm = theta.copy()
        tm[i] -= eps
        g[i] = (f(_unflatten_ld(tp, like), inst.log_alpha) - f(_unflatten_ld(tm, like), inst.log_alpha)) / (2 * eps)
    ga = (f(like, LD(inst.log_alpha) + LD(eps)) - f(like, LD(inst.log_alpha) - LD(eps))) / (2 * eps)
    return g, float(ga)


def _unflatten_ld(vec, like):
    out, pos = [], 0
    for p in like:
        out.append(vec[pos:pos + p.size].reshape(p.shape))
        pos += p.size
    return out


def hypergrad_error(inst: HyperInstance, eps=1e-5):
    """Max relative error of the analytic hypergradient against central differences."""
    a_theta, a_alpha = analytic_hypergrad(inst)
    f_theta, f_alpha = fd_hypergrad(inst, eps)
    return max_relative_error(np.append(a_theta, a_alpha), np.append(f_theta, f_alpha))


# --------------------------------------------------------------------------
# weighted training loss oracle


def weighted_loss_oracle(net: TaskNetwork, policy: PolicyNetwork, images, labels, mc_samples, rng,
                         functions=None, catalog=augment.DEFAULT_CATALOG):
    """Expected policy-weighted augmented loss over samples, function pairs and magnitudes.

    Sums exhaustively over samples and over every ``(j, k)`` pair drawn from
    ``functions`` (all 14 by default); magnitudes are Monte Carlo. Returns
    ``(estimate, standard_error)``. Uses raw policy outputs.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be at least 1")
    funcs = list(range(1, K + 1)) if functions is None else list(functions)
    per_draw = np.zeros(mc_samples)
    for m in range(mc_samples):
        specs, imgs, ys = [], [], []
        for img, y in zip(images, labels):
            for j in funcs:
                for k in funcs:
                    s = TransformSpec(j, k, float(rng.uniform(0, 10)), float(rng.uniform(0, 10)))
                    specs.append(s)
                    imgs.append(augment.apply_transform(img, s, rng, catalog=catalog))
                    ys.append(y)
        x = np.stack(imgs).reshape(len(imgs), -1)
        feats, logits = net.forward(x)
        vals = policy.weights(feats, embed_batch(specs)) * per_sample_loss(logits, np.array(ys))
        per_draw[m] = vals.mean()
    se = per_draw.std(ddof=1) / math.sqrt(mc_samples) if mc_samples > 1 else 0.0
    return float(per_draw.mean()), float(se)


def minibatch_loss_estimate(net, policy, images, labels, n, rng, catalog=augment.DEFAULT_CATALOG):
    """One mini-batch draw of the weighted loss: uniform samples, uniform pairs, uniform magnitudes."""
    idx = rng.integers(0, len(labels), n)
    specs = [TransformSpec(int(rng.integers(1, K + 1)), int(rng.integers(1, K + 1)),
                           float(rng.uniform(0, 10)), float(rng.uniform(0, 10))) for _ in range(n)]
    x = np.stack([augment.apply_transform(images[i], s, rng, catalog=catalog)
                  for i, s in zip(idx, specs)]).reshape(n, -1)
    feats, logits = net.forward(x)
    return float(np.mean(policy.weights(feats, embed_batch(specs)) * per_sample_loss(logits, labels[idx])))


# --------------------------------------------------------------------------
# convergence monitoring


@dataclass
class ConvergenceReport:
    t: np.ndarray
    grad_theta_sq: np.ndarray
    grad_w_sq: np.ndarray
    train_loss: np.ndarray
    val_loss: np.ndarray

    @classmethod
    def from_rows(cls, rows):
        a = np.array([[r[0], r[3], r[4], r[1], r[2]] for r in rows], dtype=np.float64).reshape(-1, 5)
        return cls(a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4])

    def __len__(self):
        return len(self.t)

    def deciles(self, series):
        """Means over the first and last tenth of the run."""
        n = len(series)
        if n < 10:
            raise ValueError("need at least 10 iterations for decile windows")
        d = n // 10
        return float(np.mean(series[:d])), float(np.mean(series[-d:]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "grad_theta_sq", "grad_w_sq", "train_loss", "val_loss"])
        for row in zip(self.t, self.grad_theta_sq, self.grad_w_sq, self.train_loss, self.val_loss):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def convergence_check(report: ConvergenceReport, expected_length=None) -> dict:
    """Decile trend verdicts.

    ``A``: policy meta-gradient norm falls; ``C``: task gradient norm falls;
    ``V``: validation loss falls. ``B`` reports whether the task gradient norm
    stalls above zero (last decile at least half the first), which is tolerated
    when the policy reads the task network's own features.
    """
    if expected_length is not None and len(report) != expected_length:
        raise ValueError(f"incomplete log: {len(report)} of {expected_length} iterations")
    th0, th1 = report.deciles(report.grad_theta_sq)
    gw0, gw1 = report.deciles(report.grad_w_sq)
    v0, v1 = report.deciles(report.val_loss)
    return {
        "A": th1 < th0,
        "B_plateau": gw1 >= 0.5 * gw0,
        "C": gw1 < gw0,
        "V": v1 < v0,
        "grad_theta_deciles": (th0, th1),
        "grad_w_deciles": (gw0, gw1),
        "val_deciles": (v0, v1),
    }


def own_extractor_fixture(cfg):
    """Run the shared-feature and own-feature policy variants with identical seeds.

    Returns ``(shared_report, own_report, shared_result, own_result)``.
    """
    shared = run(cfg.replace(policy_features="shared"))
    own = run(cfg.replace(policy_features="own"))
    return (ConvergenceReport.from_rows(shared.rows), ConvergenceReport.from_rows(own.rows), shared, own)


# --------------------------------------------------------------------------
# probing learned weights


def probe_weights(net: TaskNetwork, policy: PolicyNetwork, images, rng, function="Rotate",
                  min_magnitude=8.0, draws=4, catalog=augment.DEFAULT_CATALOG):
    """Mean raw policy weight for ``function`` at high magnitude vs Identity-Identity.

    ``function`` is placed in either slot (paired with Identity) with a
    magnitude drawn from ``U(min_magnitude, 10)``.
    """
    fi, ident = INDEX[function], INDEX["Identity"]
    specs, imgs = [], []
    for img in images:
        for d in range(draws):
            m = float(rng.uniform(min_magnitude, 10.0))
            s = TransformSpec(fi, ident, m, 0.0) if d % 2 == 0 else TransformSpec(ident, fi, 0.0, m)
            specs.append(s)
            imgs.append(augment.apply_transform(img, s, rng, catalog=catalog))
    x = np.stack(imgs).reshape(len(imgs), -1)
    w_aug = policy.weights(net.features(x), embed_batch(specs))
    base_specs = [TransformSpec(ident, ident, 0.0, 0.0)] * len(images)
    xb = np.asarray(images).reshape(len(images), -1)
    w_id = policy.weights(net.features(xb), embed_batch(base_specs))
    return float(w_aug.mean()), float(w_id.mean())
