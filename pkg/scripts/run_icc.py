"""Semi-supervised alternation at several labeled-data budgets.

For each labeled fraction, runs the full contrast/classify alternation
and prints the per-iteration test MoF/edit alongside a supervised
baseline trained on the same labeled clips only.

    python scripts/run_icc.py --out runs/icc --fractions 0.05 0.1
"""

import argparse
import json
import time
from pathlib import Path

from c2fseg.augment import AugmentConfig
from c2fseg.contrastive import ContrastConfig
from c2fseg.data import (AuditedDataset, Dataset, SyntheticConfig,
                         gen_synthetic, make_split)
from c2fseg.icc import ICCConfig, run_icc
from c2fseg.inference import evaluate_clips
from c2fseg.model import ModelConfig, build_model
from c2fseg.profiles import PROFILES, SEMI_SUPERVISED
from c2fseg.supervised import LossConfig, TrainConfig, train_supervised


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default=None, help="dataset dir (generated if omitted)")
    ap.add_argument("--out", required=True)
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.1])
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
    test = dataset.test()

    aug = AugmentConfig(w0=profile["w0"], pi0=profile["pi0"])
    contrast_cfg = ContrastConfig(K=profile["K"], delta=profile["delta"],
                                  num_clusters=profile["num_clusters"])

    def fresh_model():
        return build_model(ModelConfig(
            input_dim=dataset.feat_dim, num_classes=dataset.num_classes,
            num_activities=dataset.num_activities,
            encoder_channels=profile["encoder_channels"],
            decoder_channels=profile["decoder_channels"],
            activity_hidden=profile["activity_hidden"]), seed=seed)

    summary = {}
    for frac in args.fractions:
        split = make_split(dataset, frac, seed)
        labeled = [dataset.get(v) for v in split.labeled]

        baseline = fresh_model()
        train_cfg = TrainConfig(lr=profile["lr"], weight_decay=profile["weight_decay"],
                                epochs=profile["epochs"], batch_size=profile["batch_size"],
                                loss_per_layer=profile["loss_per_layer"])
        train_supervised(baseline, labeled, aug, LossConfig(), train_cfg, seed)
        base_rep = evaluate_clips(baseline, test, aug)

        icc_cfg = ICCConfig(labeled_fraction=frac, **SEMI_SUPERVISED)
        t0 = time.time()
        results = run_icc(fresh_model(), AuditedDataset(dataset), split, test,
                          icc_cfg, aug, contrast_cfg, LossConfig(), seed)
        secs = time.time() - t0

        print(f"\nlabeled fraction {frac} ({len(split.labeled)} clips), "
              f"alternation took {secs:.0f}s")
        print(f"{'stage':<16}{'MoF':>8}{'edit':>8}")
        print(f"{'baseline':<16}{base_rep.mof:>8.2f}{base_rep.edit:>8.2f}")
        for r in results:
            print(f"{'iteration ' + str(r.iteration):<16}"
                  f"{r.report.mof:>8.2f}{r.report.edit:>8.2f}")
        summary[str(frac)] = {
            "labeled_clips": len(split.labeled),
            "baseline": base_rep.to_dict(),
            "iterations": [r.report.to_dict() for r in results],
        }
    (out / "icc.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
