"""Continual-learning delta curve: glyphs (problem A) then permuted glyphs (problem B).

    python scripts/continual.py --schedule 0,400,800,1200 --repetitions 2 --out runs/continual
"""
import argparse
from pathlib import Path

from metanet.cli import to_json
from metanet.datasets import gen_synthetic_glyphs, split_classes
from metanet.model import ModelConfig
from metanet.training import ContinualSetup, problem_b_dataset, protocol_continual


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes-a", type=int, default=1000)
    ap.add_argument("--schedule", default="0,400,800,1200")
    ap.add_argument("--repetitions", type=int, default=2)
    ap.add_argument("--shuffles", type=int, default=50)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="runs/continual")
    args = ap.parse_args()

    train_a, test_a = split_classes(gen_synthetic_glyphs(120, 20, seed=7), 100, 20)
    train_b = problem_b_dataset(gen_synthetic_glyphs(10, 20, seed=1_000_003), args.shuffles, seed=0)
    setup = ContinualSetup(ModelConfig(), train_a, test_a, train_b, episodes_a=args.episodes_a,
                           schedule=tuple(int(s) for s in args.schedule.split(",")),
                           repetitions=args.repetitions, eval_trials=args.trials, seed=args.seed)
    res = protocol_continual(setup)
    for row in res["runs"]:
        print(f"rep {row['repetition']}  B trials {row['b_trials']:5d}  "
              f"A before {100 * row['acc_before']:.2f}  after {100 * row['acc_after']:.2f}  "
              f"delta {100 * row['delta']:+.2f}")
    for c in res["curve"]:
        print(f"B trials {c['b_trials']:5d}  mean delta {100 * c['mean_delta']:+.2f} over {c['runs']} runs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "continual.json").write_text(to_json(res) + "\n")


if __name__ == "__main__":
    main()
