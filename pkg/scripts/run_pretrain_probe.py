"""Unsupervised pretraining quality, measured by frame-wise linear probes.

Compares three linear classifiers on the test split: one on the raw
input features, one on multi-resolution features from a randomly
initialized backbone, and one on the same features after contrastive
pretraining (no labels involved until the probes themselves).

    python scripts/run_pretrain_probe.py --out runs/probe
"""

import argparse
import json
import time
from pathlib import Path

from c2fseg.augment import AugmentConfig
from c2fseg.contrastive import (ContrastConfig, ContrastTrainConfig,
                                linear_eval, pretrain_unsupervised)
from c2fseg.data import Dataset, SyntheticConfig, gen_synthetic, save_model
from c2fseg.model import ModelConfig, build_model
from c2fseg.profiles import PROFILES


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default=None, help="dataset dir (generated if omitted)")
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()

    profile = PROFILES["synthetic"]
    seed = profile["seed"] if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.data:
        dataset = Dataset.load(args.data)
    else:
        gen_synthetic(SyntheticConfig(), out / "data")
        dataset = Dataset.load(out / "data")
    train, test = dataset.train(), dataset.test()

    model = build_model(ModelConfig(
        input_dim=dataset.feat_dim, num_classes=dataset.num_classes,
        num_activities=dataset.num_activities,
        encoder_channels=profile["encoder_channels"],
        decoder_channels=profile["decoder_channels"],
        activity_hidden=profile["activity_hidden"]), seed=seed)

    probes = {"raw_features": linear_eval(None, train, test, dataset.num_classes,
                                          raw=True),
              "random_backbone": linear_eval(model, train, test, dataset.num_classes)}

    contrast_cfg = ContrastConfig(K=profile["K"], delta=profile["delta"],
                                  num_clusters=profile["num_clusters"])
    train_cfg = ContrastTrainConfig(lr=profile["contrast_lr"],
                                    epochs=profile["contrast_epochs"],
                                    batch_size=profile["batch_size"])
    aug = AugmentConfig(w0=profile["w0"], pi0=profile["contrast_pi0"])
    t0 = time.time()
    losses = pretrain_unsupervised(model, train, contrast_cfg, aug, train_cfg, seed)
    secs = time.time() - t0
    save_model(out / "pretrained.bin", model)
    probes["pretrained"] = linear_eval(model, train, test, dataset.num_classes)

    print(f"pretrained {train_cfg.epochs} epochs in {secs:.0f}s "
          f"(loss {losses[0]:.4f} -> {losses[-1]:.4f})")
    print(f"{'probe':<20}{'MoF':>8}")
    for name, rep in probes.items():
        print(f"{name:<20}{rep.mof:>8.2f}")
    (out / "probes.json").write_text(json.dumps(
        {name: rep.to_dict() for name, rep in probes.items()}, indent=2) + "\n")


if __name__ == "__main__":
    main()
