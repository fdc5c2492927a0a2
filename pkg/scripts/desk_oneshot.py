"""Desk-scale 5-way 1-shot run on synthetic glyphs: all three variants vs pixel kNN.

    python scripts/desk_oneshot.py --episodes 2000 --out runs/desk
"""
import argparse
import json
import time
from pathlib import Path

from metanet.cli import to_json
from metanet.datasets import gen_synthetic_glyphs, split_classes
from metanet.episodes import TrialPlan, make_trials
from metanet.model import ModelConfig, VariantConfig
from metanet.training import Trainer, evaluate, pixel_knn, protocol_xway, save_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=2000)
    ap.add_argument("--trials", type=int, default=400)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--variants", default="minus,standard,plus")
    ap.add_argument("--eval-every", type=int, default=500)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train, test = split_classes(gen_synthetic_glyphs(120, 20, seed=7), 100, 20)
    trials = make_trials(test, TrialPlan(args.trials, 5, 1, 75, seed=0))
    knn = pixel_knn(trials)
    print(f"pixel kNN  {knn}")
    rows = {"pixel-knn": knn.summary()}
    for variant in args.variants.split(","):
        t = Trainer.fresh(ModelConfig(variant=VariantConfig(variant)), train, seed=args.seed)
        t0 = time.perf_counter()
        curve = []
        while t.episode < args.episodes:
            t.run(min(args.eval_every, args.episodes - t.episode))
            r = evaluate(t.model, t.params, trials)
            curve.append({"episode": t.episode, "mean_acc": r.mean_acc, "ci95": r.ci95})
            print(f"{variant:9s} ep {t.episode:6d}  {r}  ({time.perf_counter() - t0:.0f}s)", flush=True)
        save_checkpoint(t, out / f"{variant}.mnck")
        x10 = protocol_xway(t.model, t.params, 10, test, trials=args.trials, queries_per_class=5)
        print(f"{variant:9s} 10-way via inserted layer  {x10}")
        rows[variant] = {"curve": curve, "final": curve[-1], "xway10": x10.summary()}
    (out / "desk_oneshot.json").write_text(to_json(rows) + "\n")
    print(json.dumps({k: v.get("final", v) for k, v in rows.items()}, indent=1))


if __name__ == "__main__":
    main()
