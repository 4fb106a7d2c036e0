"""Contrastive representation learning over multi-resolution frame features.

The training signal needs no frame labels: clip features are clustered
per batch (k-means), a small set of frames is sampled per clip (one per
time partition plus an epsilon-shifted companion each), and frames are
pulled together when they share a label and are close in normalized time,
pushed apart when labels or video-level activities differ.  The same
machinery later reuses ground-truth or pseudo-labels in place of cluster
ids for the semi-supervised loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import (AugmentConfig, pool_features, pool_labels,
                      sample_window, stable_window)
from .autodiff import Tape, Tensor
from .errors import NumericsError
from .metrics import SegReport
from .model import Model, multires_feature
from .optim import Adam
from .seeding import substream
from .supervised import PROB_FLOOR


@dataclass(frozen=True)
class ContrastConfig:
    K: int = 12                    # time partitions sampled per clip
    epsilon: float | None = None   # companion offset; defaults to 1/(3K)
    delta: float = 0.05            # temporal proximity bound for positives
    tau: float = 0.1               # similarity temperature
    num_clusters: int = 12         # k for the per-batch clustering
    use_video_level: bool = True
    upsample_mode: str = "linear"  # how decoder stages reach frame rate

    def validate(self) -> None:
        if self.K < 1:
            raise ValueError("need at least one partition")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if self.epsilon is not None and not 0.0 < self.epsilon < 1.0 / self.K:
            raise ValueError("epsilon must lie in (0, 1/K)")
        if self.num_clusters < 2:
            raise ValueError("need at least two clusters")
        if self.upsample_mode not in ("linear", "nearest"):
            raise ValueError(f"unknown upsample_mode {self.upsample_mode!r}")

    @property
    def eps(self) -> float:
        return self.epsilon if self.epsilon is not None else 1.0 / (3.0 * self.K)


# ---------------------------------------------------------------------------
# Per-batch clustering
# ---------------------------------------------------------------------------

def kmeans(x: np.ndarray, k: int, rng: np.random.Generator,
           max_iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd iteration with k-means++ seeding.

    Runs to an assignment fixpoint or ``max_iters``; an emptied cluster is
    re-seeded with the point currently farthest from its own centroid.
    Returns (assignments [N], centers [k, D]).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 2 or n == 0:
        raise ValueError("kmeans expects a non-empty [N, D] matrix")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")

    def dist2_to(c):
        d = (x * x).sum(axis=1, keepdims=True) + (c * c).sum(axis=1) - 2.0 * (x @ c.T)
        return np.maximum(d, 0.0)

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    best = dist2_to(centers[:1])[:, 0]
    for i in range(1, k):
        total = best.sum()
        if total <= 0.0:
            centers[i] = x[rng.integers(n)]
        else:
            centers[i] = x[rng.choice(n, p=best / total)]
        best = np.minimum(best, dist2_to(centers[i:i + 1])[:, 0])

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        d2 = dist2_to(centers)
        new_assign = d2.argmin(axis=1)
        own = d2[np.arange(n), new_assign]
        for c in range(k):
            if not np.any(new_assign == c):
                j = int(own.argmax())
                centers[c] = x[j]
                new_assign[j] = c
                own[j] = 0.0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = assign == c
            centers[c] = x[members].mean(axis=0)
    return assign, centers


# ---------------------------------------------------------------------------
# Frame sampling and positive/negative set construction
# ---------------------------------------------------------------------------

@dataclass
class SampledFrames:
    """2K sampled positions of one clip: normalized times plus frame indices."""

    times: np.ndarray    # [2K] floats in [0, 1]
    frames: np.ndarray   # [2K] indices into the clip


def sample_frames(t_n: int, cfg: ContrastConfig, rng: np.random.Generator) -> SampledFrames:
    """One uniform draw per partition [i/K, (i+1)/K) plus an epsilon-offset
    companion for each (random sign, clipped into [0, 1])."""
    cfg.validate()
    k = cfg.K
    if t_n < k:
        raise ValueError(f"clip too short: {t_n} frames for K={k} partitions")
    base = (np.arange(k) + rng.random(k)) / k
    signs = np.where(rng.random(k) < 0.5, -1.0, 1.0)
    companions = np.clip(base + signs * cfg.eps, 0.0, 1.0)
    times = np.concatenate([base, companions])
    frames = np.minimum((times * t_n).astype(np.int64), t_n - 1)
    return SampledFrames(times=times, frames=frames)


@dataclass
class PosNegSets:
    """Per-anchor positive and negative index lists over the flattened batch.

    Index ``a`` ranges over all sampled frames of all clips, clip-major in
    batch order; ``clip_of[a]`` recovers the owning clip.
    """

    pos: list
    neg: list
    clip_of: np.ndarray

    @property
    def total_positive_pairs(self) -> int:
        return int(sum(len(p) for p in self.pos))


def build_sets(samples: list[SampledFrames], labels: list[np.ndarray],
               activities: list[int], delta: float,
               use_video_level: bool = True) -> PosNegSets:
    """Positive = same activity, same label, within ``delta`` in normalized
    time.  Negative = different activity, or same activity with a different
    label.  Same label but farther than ``delta`` apart: neither.  The
    activity clauses collapse away when video-level context is disabled.
    """
    times = np.concatenate([s.times for s in samples])
    labs = np.concatenate([np.asarray(l, dtype=np.int64) for l in labels])
    clip_of = np.concatenate([np.full(len(s.times), i, dtype=np.int64)
                              for i, s in enumerate(samples)])
    acts = np.asarray(activities, dtype=np.int64)[clip_of]
    if labs.shape != times.shape:
        raise ValueError("one label per sampled frame required")
    n = times.size
    pos, neg = [], []
    for a in range(n):
        same_act = acts == acts[a] if use_video_level else np.ones(n, dtype=bool)
        same_label = labs == labs[a]
        close = np.abs(times - times[a]) < delta
        p_mask = same_act & same_label & close
        p_mask[a] = False
        n_mask = ~same_act | (same_act & ~same_label)
        pos.append(np.flatnonzero(p_mask))
        neg.append(np.flatnonzero(n_mask))
    return PosNegSets(pos=pos, neg=neg, clip_of=clip_of)


# ---------------------------------------------------------------------------
# The contrastive objective
# ---------------------------------------------------------------------------

def _normalize_rows(x: Tensor) -> Tensor:
    norms = ad.sqrt(ad.reduce_sum(ad.mul(x, x), axis=1, keepdims=True))
    if float(norms.data.min()) <= 0.0:
        raise NumericsError("zero-norm row; cosine similarities undefined")
    return ad.div(x, norms)


def _masked_nce(rows: Tensor, pos_mask: np.ndarray, neg_mask: np.ndarray,
                tau: float) -> tuple[Tensor, int]:
    """Sum over positive pairs of -log( e_ij / (e_ij + sum_neg e_ik) ).

    ``rows`` must already be row-normalized; masks are [N, N] booleans with
    rows indexing anchors.  Returns (summed loss, number of pairs).
    """
    sim = ad.matmul(rows, ad.transpose2d(rows))
    e = ad.exp(ad.mul(sim, 1.0 / tau))
    neg_sum = ad.reduce_sum(ad.mul(e, Tensor(neg_mask.astype(np.float64))),
                            axis=1, keepdims=True)
    log_denom = ad.log(ad.clamp_min(ad.add(e, neg_sum), PROB_FLOOR))
    per_pair = ad.sub(log_denom, ad.mul(sim, 1.0 / tau))
    total = ad.reduce_sum(ad.mul(per_pair, Tensor(pos_mask.astype(np.float64))))
    return total, int(pos_mask.sum())


def frame_contrast_probabilities(rows: np.ndarray, sets: PosNegSets,
                                 tau: float) -> list[np.ndarray]:
    """Plain-numpy p_ij for each anchor's positives (diagnostics/tests)."""
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    sim = rows @ rows.T
    e = np.exp(sim / tau)
    out = []
    for a in range(len(sets.pos)):
        denom_neg = e[a, sets.neg[a]].sum()
        out.append(e[a, sets.pos[a]] / (e[a, sets.pos[a]] + denom_neg))
    return out


def contrastive_loss(features: list[Tensor], samples: list[SampledFrames],
                     labels: list[np.ndarray], activities: list[int],
                     cfg: ContrastConfig) -> Tensor:
    """Frame-level NCE over sampled frames plus (optionally) a video-level
    term over max-pooled clip features; each term is averaged over its own
    positive-pair count."""
    cfg.validate()
    sets = build_sets(samples, labels, activities, cfg.delta, cfg.use_video_level)
    gathered = [ad.take_rows(f, s.frames) for f, s in zip(features, samples)]
    rows = _normalize_rows(ad.concat(gathered, axis=0))
    n = rows.shape[0]
    pos_mask = np.zeros((n, n), dtype=bool)
    neg_mask = np.zeros((n, n), dtype=bool)
    for a in range(n):
        pos_mask[a, sets.pos[a]] = True
        neg_mask[a, sets.neg[a]] = True
    if not pos_mask.any():
        raise NumericsError("no positive pairs in batch; contrastive loss undefined")
    frame_total, frame_pairs = _masked_nce(rows, pos_mask, neg_mask, cfg.tau)
    loss = ad.mul(frame_total, 1.0 / frame_pairs)

    if cfg.use_video_level and len(features) > 1:
        acts = np.asarray(activities)
        v_pos = (acts[:, None] == acts[None, :]) & ~np.eye(len(acts), dtype=bool)
        v_neg = acts[:, None] != acts[None, :]
        if v_pos.any() and v_neg.any():
            pooled = [ad.reshape(ad.reduce_max(f, axis=0), (1, -1)) for f in features]
            clip_rows = _normalize_rows(ad.concat(pooled, axis=0))
            video_total, video_pairs = _masked_nce(clip_rows, v_pos, v_neg, cfg.tau)
            loss = ad.add(loss, ad.mul(video_total, 1.0 / video_pairs))
    return loss


# ---------------------------------------------------------------------------
# Training passes
# ---------------------------------------------------------------------------

@dataclass
class ContrastClip:
    vid: str
    features: np.ndarray
    labels: np.ndarray | None   # full-length ids, or None for cluster mode
    activity: int


@dataclass
class ContrastTrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 8


def run_contrast_training(model: Model, clips: list[ContrastClip],
                          cfg: ContrastConfig, augment_cfg: AugmentConfig,
                          train_cfg: ContrastTrainConfig, seed: int,
                          stream: str = "contrast") -> list[float]:
    """Shared engine for unsupervised pretraining and semi-supervised
    contrast steps.  Clips with ``labels=None`` get per-batch cluster ids;
    clips with label arrays use those (pooled alongside the features).
    Only backbone parameters are updated.  Returns per-epoch mean losses.
    """
    cfg.validate()
    rng = substream(seed, stream)
    params = model.backbone_parameters()
    opt = Adam(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    losses = []
    n = len(clips)
    if n == 0:
        raise ValueError("no clips to train on")
    for _ in range(train_cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, train_cfg.batch_size):
            batch = [clips[i] for i in order[start:start + train_cfg.batch_size]]
            pooled_feats, pooled_labels = [], []
            for clip in batch:
                w = 1
                if augment_cfg.enabled:
                    w = stable_window(sample_window(augment_cfg, rng),
                                      clip.features.shape[0], model.cfg.depth)
                v = pool_features(clip.features, w) if w > 1 else clip.features
                y = None
                if clip.labels is not None:
                    y = pool_labels(clip.labels, w) if w > 1 else np.asarray(clip.labels)
                pooled_feats.append(v)
                pooled_labels.append(y)
            cluster_needed = [i for i, y in enumerate(pooled_labels) if y is None]
            if cluster_needed:
                stacked = np.concatenate([pooled_feats[i] for i in cluster_needed], axis=0)
                assign, _ = kmeans(stacked, min(cfg.num_clusters, stacked.shape[0]), rng)
                cursor = 0
                for i in cluster_needed:
                    t_i = pooled_feats[i].shape[0]
                    pooled_labels[i] = assign[cursor:cursor + t_i]
                    cursor += t_i
            with Tape() as tape:
                feats, samples, frame_labels = [], [], []
                for v, y in zip(pooled_feats, pooled_labels):
                    outputs = model.forward(v, train=True)
                    f = multires_feature(outputs, v.shape[0], mode=cfg.upsample_mode)
                    sf = sample_frames(v.shape[0], cfg, rng)
                    feats.append(f)
                    samples.append(sf)
                    frame_labels.append(np.asarray(y)[sf.frames])
                loss = contrastive_loss(feats, samples, frame_labels,
                                        [c.activity for c in batch], cfg)
                tape.backward(loss)
            opt.step()
            opt.zero_grad()
            epoch_loss += float(loss.data)
            batches += 1
        losses.append(epoch_loss / batches)
    return losses


def pretrain_unsupervised(model: Model, clips: list, cfg: ContrastConfig,
                          augment_cfg: AugmentConfig, train_cfg: ContrastTrainConfig,
                          seed: int) -> list[float]:
    """Label-free pretraining: cluster ids stand in for frame labels."""
    bare = [ContrastClip(vid=c.vid, features=c.features, labels=None,
                         activity=c.activity) for c in clips]
    return run_contrast_training(model, bare, cfg, augment_cfg, train_cfg, seed,
                                 stream="pretrain")


# ---------------------------------------------------------------------------
# Linear probing of the learned representation
# ---------------------------------------------------------------------------

@dataclass
class LinearEvalConfig:
    lr: float = 1e-2
    epochs: int = 300


def _clip_representation(model: Model | None, clip, raw: bool) -> np.ndarray:
    if raw or model is None:
        return np.asarray(clip.features, dtype=np.float64)
    outputs = model.forward(clip.features, train=False)
    return multires_feature(outputs, clip.features.shape[0], mode="linear").data


def linear_eval(model: Model | None, train_clips: list, test_clips: list,
                num_classes: int, raw: bool = False,
                cfg: LinearEvalConfig = LinearEvalConfig()) -> SegReport:
    """Freeze the backbone, fit one affine softmax classifier on per-frame
    representations of the training clips, and score the test clips.

    Deterministic by construction: the classifier starts at zero and trains
    full-batch.  ``raw=True`` probes the input features instead (the
    no-model baseline).
    """
    xs = [_clip_representation(model, c, raw) for c in train_clips]
    x = np.concatenate(xs, axis=0)
    y = np.concatenate([c.labels for c in train_clips])
    n, d = x.shape
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0

    w = Tensor(np.zeros((num_classes, d)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    opt = Adam([w, b], lr=cfg.lr)
    x_const, oh_const = Tensor(x), Tensor(onehot)
    for _ in range(cfg.epochs):
        with Tape() as tape:
            logits = ad.add(ad.matmul(x_const, ad.transpose2d(w)), ad.reshape(b, (1, -1)))
            p = ad.softmax(logits, axis=1)
            picked = ad.reduce_sum(ad.mul(ad.log(ad.clamp_min(p, PROB_FLOOR)), oh_const))
            tape.backward(ad.mul(picked, -1.0 / n))
        opt.step()
        opt.zero_grad()

    pairs = []
    for clip in test_clips:
        rep = _clip_representation(model, clip, raw)
        logits = rep @ w.data.T + b.data
        pairs.append((logits.argmax(axis=1), clip.labels))
    return SegReport.from_pairs(pairs)
