"""Alternating training of the task network and the augmentation policy.

One iteration:

1. virtual step   ``w_hat = w - alpha * mean_i(Pn_i * grad L_i(w))``
2. meta step      ``(theta, log_alpha) -= beta * grad L_val(w_hat)``
3. real step      momentum SGD on ``mean_i(Pn_i' * L_i(w))`` with the updated policy

``Pn`` are the policy outputs rescaled to batch mean 1 and treated as
constants with respect to ``w``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from metaaug import augment
from metaaug.augment import Catalog, Ranges, embed_batch
from metaaug.checkpoint import Checkpoint
from metaaug.config import ConfigError, RunConfig
from metaaug.data import Dataset, load_dataset, make_rng, split, synth_digits
from metaaug.nn import (PerSampleGrads, SgdState, TaskNetwork, cosine_lr, init_task_network,
                        per_sample_grad, per_sample_loss, sgd_step, sq_norm)
from metaaug.policy import PolicyNetwork, normalize_weights, normalized_coeffs
from metaaug.sampler import SamplerState

log = logging.getLogger(__name__)

LOG_COLUMNS = ("t", "train_loss_weighted", "val_loss", "grad_theta_sq", "grad_w_sq",
               "alpha", "weight_mean", "weight_std")


# --------------------------------------------------------------------------
# the three update rules


def inner_step(params, psg: PerSampleGrads, weights, alpha):
    """Plain weighted gradient step; no momentum or weight decay."""
    g = psg.weighted_mean(weights)
    return [p - alpha * gi for p, gi in zip(params, g)]


@dataclass
class MetaGrad:
    grad_theta: list
    grad_log_alpha: float
    val_loss: float
    similarity: np.ndarray  # <grad L_i(w), mean validation gradient at w_hat>


def meta_grad(net: TaskNetwork, w_hat, psg: PerSampleGrads, val_x, val_y,
              policy: PolicyNetwork, cache, alpha, normalize=True) -> MetaGrad:
    """Gradient of the validation loss at ``w_hat`` w.r.t. policy parameters and ``log alpha``.

    ``cache`` is the policy forward cache for the training batch that produced
    ``w_hat``; ``psg`` must be the same per-sample gradients.
    """
    if len(cache.out) != psg.n:
        raise ValueError(f"policy batch of {len(cache.out)} does not match {psg.n} training gradients")
    val_psg = per_sample_grad(net.with_params(w_hat), val_x, val_y)
    g_val = val_psg.weighted_mean(np.ones(val_psg.n))
    sim = psg.dot(g_val)
    n = psg.n
    upstream = -alpha / n * sim
    if normalize:
        coeffs = normalized_coeffs(cache.out, upstream)
        weights = normalize_weights(cache.out)
    else:
        coeffs = upstream
        weights = cache.out
    return MetaGrad(
        grad_theta=policy.backward(cache, coeffs),
        grad_log_alpha=float(-alpha / n * (weights @ sim)),
        val_loss=float(val_psg.losses.mean()),
        similarity=sim,
    )


@dataclass
class PolicyOptimizer:
    state: SgdState
    alpha_state: SgdState
    learn_alpha: bool = True
    alpha_exempt: bool = False

    @classmethod
    def create(cls, policy, momentum=0.9, weight_decay=5e-4, learn_alpha=True, alpha_exempt=False):
        like = policy.params() + [np.zeros(1)]
        return cls(SgdState.zeros_like(like, momentum, weight_decay),
                   SgdState.zeros_like([np.zeros(1)], 0.0, 0.0), learn_alpha, alpha_exempt)


def outer_step_theta(policy: PolicyNetwork, log_alpha, grads: MetaGrad, beta, opt: PolicyOptimizer = None):
    """SGD step on ``(theta, log_alpha)``; momentum and decay come from ``opt`` if given."""
    g_alpha = grads.grad_log_alpha if (opt is None or opt.learn_alpha) else 0.0
    if opt is None:
        new = [p - beta * g for p, g in zip(policy.params(), grads.grad_theta)]
        return policy.with_params(new), log_alpha - beta * g_alpha
    if opt.alpha_exempt or not opt.learn_alpha:
        params = policy.params() + [np.array([log_alpha])]
        gs = grads.grad_theta + [np.zeros(1)]
        new = sgd_step(params, gs, opt.state, beta)
        new_log_alpha = float(sgd_step([np.array([log_alpha])], [np.array([g_alpha])],
                                       opt.alpha_state, beta)[0][0])
    else:
        params = policy.params() + [np.array([log_alpha])]
        gs = grads.grad_theta + [np.array([g_alpha])]
        new = sgd_step(params, gs, opt.state, beta)
        new_log_alpha = float(new[-1][0])
    return policy.with_params(new[:-1]), new_log_alpha


def outer_step_w(params, psg: PerSampleGrads, weights, gamma, sgd_state: SgdState):
    """Real step on the reweighted training loss; returns ``(new params, gradient)``."""
    g = psg.weighted_mean(weights)
    return sgd_step(params, g, sgd_state, gamma), g


def theorem_schedule(T, c=1.0, c_prime=1.0, c_double_prime=1.0):
    """Constant ``(alpha, beta, gamma)`` rates scaled with the horizon ``T``."""
    if T < 3:
        raise ValueError("T must be at least 3 so that log log T > 0")
    if min(c, c_prime, c_double_prime) <= 0:
        raise ValueError("schedule constants must be positive")
    lt = math.log(T)
    return c * lt / T, math.sqrt(c_prime * math.log(lt) / T), c_double_prime * lt / T


# --------------------------------------------------------------------------
# run plumbing


class Batcher:
    """Cycles through ``indices`` in reshuffled epochs."""

    def __init__(self, indices, batch, rng):
        self.indices = np.asarray(indices)
        if len(self.indices) == 0:
            raise ConfigError("cannot draw batches from an empty split")
        self.batch = batch
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self):
        while len(self._order) < self.batch:
            self._order = np.concatenate([self._order, self.rng.permutation(self.indices)])
        out, self._order = self._order[:self.batch], self._order[self.batch:]
        return out


def prepare_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "synth":
        ds = synth_digits(cfg.synth_n, cfg.seed, cfg.synth_noise, cfg.synth_shift)
    else:
        ds = load_dataset(cfg.dataset)
    return split(ds, (cfg.split_train, cfg.split_val, cfg.split_test), cfg.seed)


def catalog_for(cfg: RunConfig) -> Catalog:
    return Catalog(Ranges(rotate_deg=cfg.rotate_max_deg))


def sampler_periods(cfg: RunConfig, n_train):
    epoch = max(1, math.ceil(n_train / cfg.n_tr))
    s = cfg.sampler_s or epoch
    r = cfg.sampler_r or 50 * epoch
    return s, r


def evaluate(net: TaskNetwork, images, labels):
    """Mean loss and accuracy on unaugmented images."""
    if len(labels) == 0:
        return float("nan"), float("nan")
    x = images.reshape(len(images), -1)
    _, logits = net.forward(x)
    return float(per_sample_loss(logits, labels).mean()), float(np.mean(logits.argmax(1) == labels))


def augment_flat(images, specs, rng, catalog):
    out = augment.augment_batch(images, specs, rng, catalog)
    return out.reshape(len(out), -1)


@dataclass
class RunResult:
    net: TaskNetwork
    policy: PolicyNetwork
    log_alpha: float
    sampler: SamplerState
    rows: list
    config: RunConfig
    catalog: Catalog
    val_loss_initial: float = float("nan")
    val_loss_final: float = float("nan")
    test_accuracy: float = float("nan")
    extra: dict = field(default_factory=dict)

    def log_csv(self) -> str:
        return rows_to_csv(self.rows)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.policy, self.net, self.sampler.p.copy(), self.log_alpha, self.catalog.hash())


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return buf.getvalue()


def init_models(cfg: RunConfig, ds: Dataset):
    rng = make_rng(cfg.seed, "init")
    sizes = [ds.input_dim] + cfg.hidden_sizes() + [ds.num_classes]
    net = init_task_network(sizes, rng)
    policy = PolicyNetwork.init(net.feature_dim, rng, hidden=cfg.policy_hidden)
    return net, policy


def run(cfg: RunConfig, ds: Dataset = None, net: TaskNetwork = None, policy: PolicyNetwork = None) -> RunResult:
    """Execute ``cfg.T`` iterations of joint task/policy training."""
    ds = prepare_dataset(cfg) if ds is None else ds
    if not ds.splits:
        raise ConfigError("dataset has no splits")
    tr_idx, val_idx = ds.splits["train"], ds.splits["val"]
    if len(tr_idx) == 0 or len(val_idx) == 0:
        raise ConfigError("training and validation splits must be nonempty")
    catalog = catalog_for(cfg)
    if net is None or policy is None:
        net0, policy0 = init_models(cfg, ds)
        net = net0 if net is None else net
        policy = policy0 if policy is None else policy
    extractor = net.copy() if cfg.policy_features == "own" else None

    s, r = sampler_periods(cfg, len(tr_idx))
    sampler = SamplerState(capacity=r * cfg.n_tr * cfg.mt_factor, epsilon=cfg.epsilon, refresh_every=s)
    data_rng = make_rng(cfg.seed, "data")
    val_rng = make_rng(cfg.seed, "val")
    samp_rng = make_rng(cfg.seed, "sampler")
    aug_rng = make_rng(cfg.seed, "augment")
    train_batches = Batcher(tr_idx, cfg.n_tr, data_rng)
    val_batches = Batcher(val_idx, cfg.n_val, val_rng)

    if cfg.schedule == "theorem1":
        alpha_fixed, beta, gamma0 = theorem_schedule(cfg.T, cfg.c, cfg.c_prime, cfg.c_double_prime)
        log_alpha = math.log(alpha_fixed)
        learn_alpha = False
    else:
        beta, gamma0 = cfg.beta, cfg.gamma
        log_alpha = math.log(cfg.alpha0)
        learn_alpha = cfg.learn_alpha
    popt = PolicyOptimizer.create(policy, cfg.policy_momentum, cfg.policy_weight_decay,
                                  learn_alpha, cfg.alpha_exempt)
    params = net.params()
    sgd = SgdState.zeros_like(params, cfg.momentum, cfg.weight_decay, gamma0)

    val_images, val_labels = ds.subset("val")
    val_loss_initial = evaluate(net, val_images, val_labels)[0]
    rows = []
    joint_end = cfg.T - cfg.frozen_iters
    for t in range(cfg.T):
        idx = np.repeat(train_batches.next(), cfg.mt_factor)
        specs = sampler.sample_batch(len(idx), samp_rng)
        x = augment_flat(ds.images[idx], specs, aug_rng, catalog)
        y = ds.labels[idx]
        vidx = val_batches.next()
        vx = ds.images[vidx].reshape(len(vidx), -1)
        vy = ds.labels[vidx]

        cur = net.with_params(params)
        psg = per_sample_grad(cur, x, y)
        alpha = math.exp(log_alpha)
        gamma = cosine_lr(t, cfg.T, gamma0) if cfg.schedule == "cosine" else gamma0

        if t < cfg.pretrain_iters:
            weights = np.ones(len(idx))
            raw = weights
            grad_theta_sq = 0.0
            val_loss = float(per_sample_loss(cur.forward(vx)[1], vy).mean())
        else:
            feats = (extractor.features(x) if extractor is not None
                     else psg.inputs[cur.feature_index + 1])
            emb = embed_batch(specs)
            raw0, cache = policy.forward(feats, emb)
            if t < joint_end:
                pw = normalize_weights(raw0) if cfg.normalize else raw0
                w_hat = inner_step(params, psg, pw, alpha)
                mg = meta_grad(cur, w_hat, psg, vx, vy, policy, cache, alpha, cfg.normalize)
                policy, log_alpha = outer_step_theta(policy, log_alpha, mg, beta, popt)
                grad_theta_sq = sq_norm(mg.grad_theta)
                val_loss = mg.val_loss
                raw = policy.weights(feats, emb)
            else:
                raw = raw0
                grad_theta_sq = 0.0
                val_loss = float(per_sample_loss(cur.forward(vx)[1], vy).mean())
            weights = normalize_weights(raw) if cfg.normalize else raw
            sampler.record_batch(specs, raw)

        params, g_w = outer_step_w(params, psg, weights, gamma, sgd)
        if sampler.due(t) and t >= cfg.pretrain_iters:
            sampler.refresh()
        rows.append((t, float(np.mean(weights * psg.losses)), val_loss, grad_theta_sq, sq_norm(g_w),
                     math.exp(log_alpha), float(np.mean(raw)), float(np.std(raw))))
        if (t + 1) % 500 == 0:
            log.info("t=%d train=%.4f val=%.4f alpha=%.4g", t + 1, rows[-1][1], val_loss, rows[-1][5])

    net = net.with_params(params)
    result = RunResult(net, policy, log_alpha, sampler, rows, cfg, catalog)
    result.val_loss_initial = val_loss_initial
    result.val_loss_final = evaluate(net, val_images, val_labels)[0]
    if "test" in ds.splits and len(ds.splits["test"]):
        result.test_accuracy = evaluate(net, *ds.subset("test"))[1]
    return result


# --------------------------------------------------------------------------
# single-network training with fixed weights: transfer and the random-augment baseline


@dataclass
class TrainResult:
    net: TaskNetwork
    rows: list
    test_accuracy: float = float("nan")


def train_weighted(net: TaskNetwork, ds: Dataset, cfg: RunConfig, p=None, weight_fn=None) -> TrainResult:
    """Momentum SGD on augmented batches drawn from a frozen distribution ``p``.

    ``weight_fn(x_flat, specs)`` returns normalized per-sample weights; ``None``
    means every weight is exactly 1.
    """
    catalog = catalog_for(cfg)
    sampler = SamplerState(capacity=1, epsilon=cfg.epsilon)
    if p is not None:
        sampler.p = np.array(p, dtype=np.float64)
    data_rng = make_rng(cfg.seed, "data")
    samp_rng = make_rng(cfg.seed, "sampler")
    aug_rng = make_rng(cfg.seed, "augment")
    batches = Batcher(ds.splits["train"], cfg.n_tr, data_rng)
    params = net.params()
    sgd = SgdState.zeros_like(params, cfg.momentum, cfg.weight_decay, cfg.gamma)
    rows = []
    for t in range(cfg.T):
        idx = np.repeat(batches.next(), cfg.mt_factor)
        specs = sampler.sample_batch(len(idx), samp_rng)
        x = augment_flat(ds.images[idx], specs, aug_rng, catalog)
        psg = per_sample_grad(net.with_params(params), x, ds.labels[idx])
        weights = np.ones(len(idx)) if weight_fn is None else weight_fn(x, specs)
        gamma = cosine_lr(t, cfg.T, cfg.gamma) if cfg.schedule == "cosine" else cfg.gamma
        params, g = outer_step_w(params, psg, weights, gamma, sgd)
        rows.append((t, float(np.mean(weights * psg.losses)), float("nan"), 0.0, sq_norm(g),
                     0.0, float(np.mean(weights)), float(np.std(weights))))
    out = net.with_params(params)
    acc = evaluate(out, *ds.subset("test"))[1] if len(ds.splits.get("test", [])) else float("nan")
    return TrainResult(out, rows, acc)


def policy_weight_fn(policy: PolicyNetwork, feature_net: TaskNetwork, normalize=True):
    def fn(x, specs):
        raw = policy.weights(feature_net.features(x), embed_batch(specs))
        return normalize_weights(raw) if normalize else raw
    return fn


def transfer_train(new_net: TaskNetwork, ckpt: Checkpoint, ds: Dataset, cfg: RunConfig) -> TrainResult:
    """Train ``new_net`` with the frozen policy, feature network and distribution of ``ckpt``."""
    expected = catalog_for(cfg).hash()
    if ckpt.catalog_hash != expected:
        raise ValueError(f"checkpoint catalog {ckpt.catalog_hash} does not match config catalog {expected}")
    fn = policy_weight_fn(ckpt.policy, ckpt.task_net, cfg.normalize)
    return train_weighted(new_net, ds, cfg, p=ckpt.p, weight_fn=fn)


def baseline_train(net: TaskNetwork, ds: Dataset, cfg: RunConfig) -> TrainResult:
    """Uniformly sampled transforms, every weight 1."""
    return train_weighted(net, ds, cfg.replace(epsilon=1.0), p=None, weight_fn=None)
