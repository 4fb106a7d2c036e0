"""Coarse-to-fine ensembling and the fully supervised training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import (AugmentConfig, pool_features, pool_labels,
                      sample_window, stable_window)
from .autodiff import Tape, Tensor
from .model import DecoderOutputs, Model
from .optim import Adam
from .seeding import substream

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class EnsembleWeights:
    """A convex weighting over the decoder stages."""

    alpha: tuple

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("alpha must be a non-empty vector")
        if np.any(a <= 0.0):
            raise ValueError("ensemble weights must be strictly positive")
        if abs(a.sum() - 1.0) > 1e-9:
            raise ValueError(f"ensemble weights must sum to 1, got {a.sum()}")

    @classmethod
    def uniform(cls, depth: int) -> "EnsembleWeights":
        return cls(tuple([1.0 / depth] * depth))

    @classmethod
    def normalized(cls, raw) -> "EnsembleWeights":
        a = np.asarray(raw, dtype=np.float64)
        return cls(tuple(a / a.sum()))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.alpha)


def c2f_ensemble(outputs: DecoderOutputs, weights: EnsembleWeights | Tensor) -> Tensor:
    """Weighted sum of the per-stage probability matrices -> [t_in, C].

    ``weights`` may be a Tensor of raw logits-turned-simplex values when
    the mixing weights themselves are being learned.
    """
    if isinstance(weights, Tensor):
        alpha = weights
        if alpha.data.size != len(outputs.p):
            raise ValueError("one weight per decoder stage required")
        acc = None
        for u, p_u in enumerate(outputs.p):
            term = ad.mul(p_u, ad.slice_axis(alpha, 0, u, u + 1))
            acc = term if acc is None else ad.add(acc, term)
        return acc
    a = weights.as_array()
    if a.size != len(outputs.p):
        raise ValueError("one weight per decoder stage required")
    acc = None
    for coef, p_u in zip(a, outputs.p):
        term = ad.mul(p_u, float(coef))
        acc = term if acc is None else ad.add(acc, term)
    return acc


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax frame labeling of a [T, C] probability matrix."""
    return np.asarray(probs).argmax(axis=1)


def cross_entropy(p: Tensor, y: np.ndarray) -> Tensor:
    """Mean negative log-probability of the target labels.

    Probabilities are clamped at 1e-12 before the log so an overconfident
    wrong head yields a large-but-finite loss.
    """
    y = np.asarray(y, dtype=np.int64)
    t, c = p.shape
    if y.shape != (t,):
        raise ValueError(f"labels shape {y.shape} does not match probs [{t}, {c}]")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError("label id out of range")
    onehot = np.zeros((t, c))
    onehot[np.arange(t), y] = 1.0
    picked = ad.reduce_sum(ad.mul(ad.log(ad.clamp_min(p, PROB_FLOOR)), Tensor(onehot)))
    return ad.mul(picked, -1.0 / t)


@dataclass(frozen=True)
class LossConfig:
    lambda_tr: float = 0.15
    eps_max: float = 4.0
    transition: bool = True


def transition_loss(p: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Penalty on frame-to-frame log-probability jumps, clamped per class.

    (1/T) * sum_{t>=1} sum_k min(|log p[t,k] - log p[t-1,k]|, eps_max)^2
    """
    t = p.shape[0]
    if t < 2:
        raise ValueError("transition loss needs at least two frames")
    lp = ad.log(ad.clamp_min(p, PROB_FLOOR))
    jump = ad.absolute(ad.sub(ad.slice_axis(lp, 0, 1, t), ad.slice_axis(lp, 0, 0, t - 1)))
    clamped = ad.clamp_max(jump, cfg.eps_max)
    return ad.mul(ad.reduce_sum(ad.mul(clamped, clamped)), 1.0 / t)


def joint_loss(p: Tensor, y: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    ce = cross_entropy(p, y)
    if not cfg.transition or p.shape[0] < 2:
        return ce
    return ad.add(ce, ad.mul(transition_loss(p, cfg), cfg.lambda_tr))


def activity_loss(p_v: Tensor, activity: int) -> Tensor:
    """Negative log-probability of the video-level activity."""
    c = p_v.data.size
    if not 0 <= activity < c:
        raise ValueError(f"activity id {activity} out of range for {c}")
    onehot = np.zeros(c)
    onehot[activity] = 1.0
    picked = ad.reduce_sum(ad.mul(ad.log(ad.clamp_min(p_v, PROB_FLOOR)), Tensor(onehot)))
    return ad.neg(picked)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-3
    epochs: int = 150
    batch_size: int = 8
    loss_per_layer: bool = False     # attach the loss to every stage, not just the mix
    learned_alpha: bool = False      # learn the ensemble weights on the simplex
    activity_weight: float = 0.0     # optional video-level auxiliary term


@dataclass
class TraceRow:
    epoch: int
    ce: float
    tr: float
    total: float


def _video_loss(outputs: DecoderOutputs, y: np.ndarray, alpha, loss_cfg: LossConfig,
                train_cfg: TrainConfig) -> tuple[Tensor, float, float]:
    """Joint loss for one clip; returns (loss, ce_value, tr_value) for tracing."""
    p_ens = c2f_ensemble(outputs, alpha)
    ce = cross_entropy(p_ens, y)
    use_tr = loss_cfg.transition and p_ens.shape[0] >= 2
    tr = transition_loss(p_ens, loss_cfg) if use_tr else None
    loss = ce if tr is None else ad.add(ce, ad.mul(tr, loss_cfg.lambda_tr))
    if train_cfg.loss_per_layer:
        for p_u in outputs.p:
            term = cross_entropy(p_u, y)
            if use_tr:
                term = ad.add(term, ad.mul(transition_loss(p_u, loss_cfg), loss_cfg.lambda_tr))
            loss = ad.add(loss, ad.mul(term, 1.0 / len(outputs.p)))
    return loss, float(ce.data), 0.0 if tr is None else float(tr.data)


def train_supervised(model: Model, videos: list, augment_cfg: AugmentConfig,
                     loss_cfg: LossConfig, train_cfg: TrainConfig, seed: int,
                     heads=None) -> list[TraceRow]:
    """Train on a list of VideoSample clips; returns the per-epoch loss trace.

    Every clip in a batch is optionally downsampled with its own freshly
    drawn window; gradients are accumulated across the batch and applied
    in one optimizer step.
    """
    rng = substream(seed, "sampler")
    head_obj = model.heads if heads is None else heads
    params = model.backbone_parameters() + head_obj.parameters()
    alpha_param = None
    if train_cfg.learned_alpha:
        alpha_param = Tensor(np.zeros(model.cfg.depth), requires_grad=True)
        params = params + [alpha_param]
    opt = Adam(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    trace: list[TraceRow] = []
    n = len(videos)
    if n == 0:
        raise ValueError("no training videos")
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        ce_sum = tr_sum = total_sum = 0.0
        for start in range(0, n, train_cfg.batch_size):
            batch = [videos[i] for i in order[start:start + train_cfg.batch_size]]
            with Tape() as tape:
                alpha = (ad.softmax(alpha_param, axis=0) if alpha_param is not None
                         else EnsembleWeights.uniform(model.cfg.depth))
                batch_loss = None
                for clip in batch:
                    v, y = clip.features, clip.labels
                    if augment_cfg.enabled:
                        w = stable_window(sample_window(augment_cfg, rng),
                                          v.shape[0], model.cfg.depth)
                        if w > 1:
                            v, y = pool_features(v, w), pool_labels(y, w)
                    outputs = model.forward(v, train=True, heads=head_obj)
                    loss, ce_val, tr_val = _video_loss(outputs, y, alpha, loss_cfg, train_cfg)
                    if train_cfg.activity_weight and outputs.p_activity is not None:
                        loss = ad.add(loss, ad.mul(activity_loss(outputs.p_activity,
                                                                 clip.activity),
                                                   train_cfg.activity_weight))
                    ce_sum += ce_val
                    tr_sum += tr_val
                    total_sum += float(loss.data)
                    batch_loss = loss if batch_loss is None else ad.add(batch_loss, loss)
                tape.backward(ad.mul(batch_loss, 1.0 / len(batch)))
            opt.step()
            opt.zero_grad()
        trace.append(TraceRow(epoch=epoch, ce=ce_sum / n, tr=tr_sum / n, total=total_sum / n))
    return trace
