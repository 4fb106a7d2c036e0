"""Semi-supervised training that alternates contrast and classify steps.

Iteration 1 optionally starts from label-free contrastive pretraining
(cluster ids as stand-in labels); every later iteration first re-runs the
contrast pass over *all* training clips using pseudo-labels for the
unlabeled pool and ground truth for the labeled pool, then trains a fresh
classification head stack (plus a gentle backbone fine-tune) on the
labeled pool only.  Every iteration ends with a test-split report.

Ground-truth frame labels are only ever obtained through an
``AuditedDataset``, so tests can assert that unlabeled clips never leak
their annotations into any step.  Video-level activity ids are treated as
metadata and are not audited.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import (AugmentConfig, pool_features, pool_labels,
                      sample_window, stable_window)
from .autodiff import Tape
from .contrastive import (ContrastClip, ContrastConfig, ContrastTrainConfig,
                          contrastive_loss, run_contrast_training, sample_frames)
from .data import AuditedDataset, SplitSpec
from .inference import evaluate_clips, predict_probs
from .metrics import SegReport
from .model import Model, ProjectionHeads, multires_feature
from .optim import Adam
from .seeding import substream
from .supervised import EnsembleWeights, LossConfig, c2f_ensemble, cross_entropy, transition_loss


@dataclass
class ICCConfig:
    iterations: int = 4
    labeled_fraction: float = 0.1
    lr_g: float = 1e-2             # fresh heads, trained hard
    lr_m_classify: float = 1e-5    # backbone fine-tune during classify
    lr_m_contrast: float = 1e-3    # backbone during contrast steps
    weight_decay: float = 0.0
    pretrain_epochs: int = 30
    contrast_epochs: int = 10
    classify_epochs: int = 40
    batch_size: int = 8
    classify_transition: bool = False   # transition penalty stays off by default
    skip_unsupervised: bool = False


@dataclass
class IterationResult:
    iteration: int
    report: SegReport
    classify_losses: list
    contrast_losses: list


def _labeled_clips(audited: AuditedDataset, vids, with_labels: bool) -> list[ContrastClip]:
    return [ContrastClip(vid=v, features=audited.features(v),
                         labels=audited.labels(v) if with_labels else None,
                         activity=audited.activity(v)) for v in vids]


def classify_step(model: Model, heads: ProjectionHeads, audited: AuditedDataset,
                  labeled_ids, icc_cfg: ICCConfig, augment_cfg: AugmentConfig,
                  contrast_cfg: ContrastConfig, loss_cfg: LossConfig,
                  seed: int, iteration: int) -> list[float]:
    """Supervised pass on the labeled pool: cross-entropy through the fresh
    heads plus the label-driven contrastive term; two optimizers so the
    heads move fast while the backbone barely drifts."""
    rng = substream(seed, f"classify-{iteration}")
    clips = _labeled_clips(audited, labeled_ids, with_labels=True)
    opt_g = Adam(heads.parameters(), lr=icc_cfg.lr_g, weight_decay=icc_cfg.weight_decay)
    opt_m = Adam(model.backbone_parameters(), lr=icc_cfg.lr_m_classify,
                 weight_decay=icc_cfg.weight_decay)
    alpha = EnsembleWeights.uniform(model.cfg.depth)
    losses = []
    n = len(clips)
    for _ in range(icc_cfg.classify_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, icc_cfg.batch_size):
            batch = [clips[i] for i in order[start:start + icc_cfg.batch_size]]
            with Tape() as tape:
                feats, samples, frame_labels, loss = [], [], [], None
                for clip in batch:
                    w = 1
                    if augment_cfg.enabled:
                        w = stable_window(sample_window(augment_cfg, rng),
                                          clip.features.shape[0], model.cfg.depth)
                    v = pool_features(clip.features, w) if w > 1 else clip.features
                    y = pool_labels(clip.labels, w) if w > 1 else clip.labels
                    outputs = model.forward(v, train=True, heads=heads)
                    p_ens = c2f_ensemble(outputs, alpha)
                    term = cross_entropy(p_ens, y)
                    if icc_cfg.classify_transition and p_ens.shape[0] >= 2:
                        term = ad.add(term, ad.mul(transition_loss(p_ens, loss_cfg),
                                                   loss_cfg.lambda_tr))
                    loss = term if loss is None else ad.add(loss, term)
                    f = multires_feature(outputs, v.shape[0], mode="linear")
                    sf = sample_frames(v.shape[0], contrast_cfg, rng)
                    feats.append(f)
                    samples.append(sf)
                    frame_labels.append(np.asarray(y)[sf.frames])
                loss = ad.mul(loss, 1.0 / len(batch))
                loss = ad.add(loss, contrastive_loss(feats, samples, frame_labels,
                                                     [c.activity for c in batch],
                                                     contrast_cfg))
                tape.backward(loss)
            opt_g.step()
            opt_m.step()
            opt_g.zero_grad()
            opt_m.zero_grad()
            epoch_loss += float(loss.data)
            batches += 1
        losses.append(epoch_loss / batches)
    return losses


def pseudo_label(model: Model, heads: ProjectionHeads, features: np.ndarray,
                 augment_cfg: AugmentConfig) -> np.ndarray:
    """Full-length argmax of the standard (non-TTA) ensemble prediction."""
    probs = predict_probs(model, features, augment_cfg, tta=False, heads=heads)
    return probs.argmax(axis=1)


def contrast_step(model: Model, audited: AuditedDataset, split: SplitSpec,
                  pseudo: dict, icc_cfg: ICCConfig, augment_cfg: AugmentConfig,
                  contrast_cfg: ContrastConfig, seed: int, iteration: int) -> list[float]:
    """Contrastive pass over every training clip: ground truth on the
    labeled pool, pseudo-labels elsewhere.  No classifier is involved."""
    clips = _labeled_clips(audited, split.labeled, with_labels=True)
    clips += [ContrastClip(vid=v, features=audited.features(v),
                           labels=np.asarray(pseudo[v]), activity=audited.activity(v))
              for v in split.unlabeled]
    clips.sort(key=lambda c: c.vid)
    train_cfg = ContrastTrainConfig(lr=icc_cfg.lr_m_contrast,
                                    weight_decay=icc_cfg.weight_decay,
                                    epochs=icc_cfg.contrast_epochs,
                                    batch_size=icc_cfg.batch_size)
    return run_contrast_training(model, clips, contrast_cfg, augment_cfg, train_cfg,
                                 seed, stream=f"contrast-{iteration}")


def run_icc(model: Model, audited: AuditedDataset, split: SplitSpec,
            test_clips: list, icc_cfg: ICCConfig, augment_cfg: AugmentConfig,
            contrast_cfg: ContrastConfig, loss_cfg: LossConfig,
            seed: int) -> list[IterationResult]:
    """The full alternation; returns one evaluated result per iteration."""
    results = []
    all_train = sorted(split.labeled + split.unlabeled)
    heads = None
    for iteration in range(1, icc_cfg.iterations + 1):
        if iteration == 1:
            contrast_losses = []
            if not icc_cfg.skip_unsupervised and icc_cfg.pretrain_epochs > 0:
                clips = _labeled_clips(audited, all_train, with_labels=False)
                train_cfg = ContrastTrainConfig(lr=icc_cfg.lr_m_contrast,
                                                weight_decay=icc_cfg.weight_decay,
                                                epochs=icc_cfg.pretrain_epochs,
                                                batch_size=icc_cfg.batch_size)
                contrast_losses = run_contrast_training(model, clips, contrast_cfg,
                                                        augment_cfg, train_cfg, seed,
                                                        stream="pretrain")
        else:
            pseudo = {v: pseudo_label(model, heads, audited.features(v), augment_cfg)
                      for v in split.unlabeled}
            contrast_losses = contrast_step(model, audited, split, pseudo, icc_cfg,
                                            augment_cfg, contrast_cfg, seed, iteration)
        heads = ProjectionHeads(model.cfg, substream(seed, f"heads-{iteration}"))
        classify_losses = classify_step(model, heads, audited, split.labeled, icc_cfg,
                                        augment_cfg, contrast_cfg, loss_cfg, seed,
                                        iteration)
        report = evaluate_clips(model, test_clips, augment_cfg, heads=heads)
        results.append(IterationResult(iteration=iteration, report=report,
                                       classify_losses=classify_losses,
                                       contrast_losses=contrast_losses))
    return results
