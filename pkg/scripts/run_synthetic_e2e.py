"""Run the full synthetic experiment and print its results.

    python scripts/run_synthetic_e2e.py --out runs/e2e [--pretrain-epochs 100] [--finetune-epochs 30]
"""

import argparse
import logging

import torch

from longissl.experiments import EndToEndPlan, run_end_to_end


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/e2e")
    ap.add_argument("--pretrain-epochs", type=int, default=EndToEndPlan.pretrain_epochs)
    ap.add_argument("--finetune-epochs", type=int, default=EndToEndPlan.finetune_epochs)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(args.threads)
    plan = EndToEndPlan(pretrain_epochs=args.pretrain_epochs, finetune_epochs=args.finetune_epochs)
    res = run_end_to_end(args.out, plan)
    print(f"TOP pretext accuracy  pairs {res['top_pair_acc']:.3f}  triplets {res['top_triplet_acc']:.3f}  quadruplets {res['top_quad_acc']:.3f}")
    for k, auc in res["classification_auc"].items():
        print(f"TOP fine-tuned, {k} image(s): macro AUC {auc:.3f}")
    for row in res["topc_vs_supervised"]:
        print(f"seeds {row['seeds']}: TOPC {row['TOPC']:.3f}  supervised {row['SUPERVISED']:.3f}")
    print(f"{res['seconds'] / 60:.1f} min; full results in {args.out}/results.json")


if __name__ == "__main__":
    main()
