"""Accuracy of fresh frozen base learners driven by a meta learner, over meta-training.

    python scripts/swap_base_curve.py --episodes 2000 --every 500 --out runs/swap
"""
import argparse
from pathlib import Path

from metanet.cli import to_json
from metanet.datasets import gen_synthetic_glyphs, split_classes
from metanet.episodes import TrialPlan, make_trials
from metanet.model import ModelConfig
from metanet.training import Trainer, swap_base_curve


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=2000)
    ap.add_argument("--every", type=int, default=500)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="runs/swap")
    args = ap.parse_args()

    train, test = split_classes(gen_synthetic_glyphs(120, 20, seed=7), 100, 20)
    trials = make_trials(test, TrialPlan(args.trials, 5, 1, 75, seed=0))
    t = Trainer.fresh(ModelConfig(), train, seed=args.seed)
    snapshots = []
    while t.episode < args.episodes:
        t.run(args.every)
        snapshots.append((t.episode, t.model, {k: v.copy() for k, v in t.params.items()}))
    # a narrow and a wide fresh base learner, both with frozen random slow weights
    rows = swap_base_curve(snapshots, [(32, 32, 32), (128, 128, 128)], trials)
    for row in rows:
        print("  ".join(f"{k} {v:.4f}" if isinstance(v, float) else f"{k} {v}" for k, v in row.items()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "swap_base.json").write_text(to_json(rows) + "\n")


if __name__ == "__main__":
    main()
