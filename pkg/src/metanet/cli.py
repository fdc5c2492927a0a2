"""``metanet`` command line: data generation, training, evaluation protocols, gradcheck.

Exit codes: 0 success, 1 config error, 2 numeric failure, 3 check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datasets import DatasetError, gen_synthetic_glyphs, load_dataset, save_dataset, split_classes
from .episodes import Episode, EpisodeError, TrialPlan, make_trials
from .model import MetaNet, ModelConfig, VariantConfig, as_constants
from .training import (
    CheckpointError,
    ContinualSetup,
    Trainer,
    TrainingError,
    dead_groups,
    evaluate,
    load_checkpoint,
    pixel_knn,
    problem_b_dataset,
    protocol_continual,
    protocol_swap_base,
    protocol_xway,
    read_checkpoint,
    save_checkpoint,
    train_with_dev_checkpoint,
)

log = logging.getLogger("metanet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3
GRADCHECK_TOL = 1e-3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    command: str = ""
    dataset: str | None = None
    test_dataset: str | None = None
    dev_dataset: str | None = None
    b_dataset: str | None = None
    out: str = "runs/out"
    checkpoint: str | None = None
    way: int = 5
    train_way: int | None = None
    test_way: int | None = None
    shots: int = 1
    queries: int | None = None          # L; default 5 per class in training, 15 in evaluation
    task_samples: int | None = None     # T; default T = N
    episodes: int = 1000
    trials: int = 400
    seed: int = 0
    lr: float = 1e-3
    variant: str = "standard"
    base_input: str = "raw"
    aug_layers: int = 3
    base_hidden: list = field(default_factory=lambda: [64, 64, 64])
    embed_hidden: list = field(default_factory=lambda: [64, 64, 64])
    threads: int = 1
    checkpoint_every: int = 1000
    eval_every: int = 1000
    classes: int = 120
    per_class: int = 20
    split: str = "100/20"
    fresh_base: list = field(default_factory=lambda: [[32, 32, 32], [128, 128, 128]])
    b_classes: int = 10
    shuffles: int = 50
    schedule: list = field(default_factory=lambda: [400, 800, 1200])
    repetitions: int = 2
    h: float = 1e-7

    def validate(self) -> "RunConfig":
        positive = ("way", "shots", "episodes", "trials", "threads", "checkpoint_every", "eval_every",
                    "classes", "per_class", "b_classes", "shuffles", "repetitions", "aug_layers")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("train_way", "test_way"):
            v = getattr(self, name)
            if v is not None and v < 2:
                raise ConfigError(f"{name} must be >= 2, got {v}")
        if self.way < 2:
            raise ConfigError("way must be >= 2")
        if self.queries is not None and self.queries < 1:
            raise ConfigError("queries must be >= 1")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be a finite non-negative number, got {self.lr}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if any(s < 0 for s in self.schedule) or not self.schedule:
            raise ConfigError("schedule must be a non-empty list of non-negative trial counts")
        try:
            VariantConfig(self.variant, self.base_input)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.split_counts()
        return self

    def split_counts(self) -> tuple[int, int]:
        try:
            a, b = (int(x) for x in self.split.split("/"))
        except ValueError:
            raise ConfigError(f"--split must look like 100/20, got {self.split!r}") from None
        if a < 1 or b < 1:
            raise ConfigError("--split counts must be positive")
        return a, b

    def model_config(self, way: int | None = None) -> ModelConfig:
        return ModelConfig(way=way or self.way, base_hidden=tuple(self.base_hidden),
                           embed_hidden=tuple(self.embed_hidden), aug_layers=self.aug_layers,
                           variant=VariantConfig(self.variant, self.base_input),
                           task_samples=self.task_samples)


FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def build_config(command: str, file_values: dict, flag_values: dict) -> RunConfig:
    """defaults < JSON config file < command-line flags."""
    unknown = sorted(set(file_values) - FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    merged["command"] = command
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


# ---------------------------------------------------------------- output

def to_json(obj) -> str:
    """JSON with every float written to 17 significant digits."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "NaN"
        if math.isinf(x):
            return "Infinity" if x > 0 else "-Infinity"
        return format(x, ".17g")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{to_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(to_json(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def config_echo(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def write_summary(out: Path, name: str, doc: dict) -> None:
    text = to_json(doc)
    (out / name).write_text(text + "\n")
    print(text)


def write_trials(out: Path, name: str, result) -> None:
    with open(out / name, "w") as fh:
        for t in result.trials:
            fh.write(to_json({"trial": t.trial, "accuracy": t.accuracy, "loss": t.loss,
                              "protocol": t.protocol}) + "\n")


def eval_summary(result, cfg: RunConfig, **extra) -> dict:
    return {"protocol": result.protocol, "mean_acc": result.mean_acc, "ci95": result.ci95,
            "report": str(result), "trials": len(result.trials), **extra, "config": config_echo(cfg)}


def setup_logging(out: Path | None) -> None:
    level = os.environ.get("METANET_LOG", "WARNING").upper()
    log.setLevel(logging.DEBUG)
    log.handlers.clear()
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(getattr(logging, level, logging.WARNING))
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(console)
    if out is not None:
        # timestamps live only here, never in metrics or summaries
        side = logging.FileHandler(out / "run.log")
        side.setLevel(logging.DEBUG)
        side.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(side)


def param_banner(model: MetaNet) -> dict:
    shapes = model.param_shapes()
    counts = {g: sum(math.prod(s) for k, s in shapes.items() if k.startswith(g + "."))
              for g in ("W", "Q", "Z", "G")}
    counts["total"] = sum(counts.values())
    counts["fast_W*"] = model.base_layout.size
    counts["fast_Q*"] = 0 if model.variant == "minus" else model.embed_layout.size
    return counts


# ---------------------------------------------------------------- commands

def _need(path: str | None, flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{flag} {p} does not exist")
    return p


def _load(path: str | None, flag: str, partition: str):
    return load_dataset(_need(path, flag), partition)


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    n_train, n_test = cfg.split_counts()
    if n_train + n_test > cfg.classes:
        raise ConfigError(f"--split {cfg.split} needs {n_train + n_test} classes, --classes is {cfg.classes}")
    ds = gen_synthetic_glyphs(cfg.classes, cfg.per_class, cfg.seed)
    train, test = split_classes(ds, n_train, n_test)
    save_dataset(train, out / "train.mn01")
    save_dataset(test, out / "test.mn01")
    write_summary(out, "gen-data.json", {
        "train": {"path": "train.mn01", "classes": train.class_count, "examples": len(train)},
        "test": {"path": "test.mn01", "classes": test.class_count, "examples": len(test)},
        "config": config_echo(cfg)})
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    train = _load(cfg.dataset, "--dataset", "train")
    if cfg.checkpoint:
        trainer = load_checkpoint(_need(cfg.checkpoint, "--checkpoint"), train)
        if trainer.model.config.variant != VariantConfig(cfg.variant, cfg.base_input):
            raise ConfigError("checkpoint variant does not match --variant/--base-input")
        log.info("resumed at episode %d", trainer.episode)
    else:
        trainer = Trainer.fresh(cfg.model_config(), train, seed=cfg.seed, shots=cfg.shots,
                                queries=cfg.queries, lr=cfg.lr)
    banner = param_banner(trainer.model)
    print("params " + " ".join(f"{k}={v}" for k, v in banner.items()))
    target = cfg.episodes
    if trainer.episode >= target:
        raise ConfigError(f"checkpoint is already at episode {trainer.episode} >= --episodes {target}")

    dev_trials = test_trials = None
    if cfg.dev_dataset:
        dev = _load(cfg.dev_dataset, "--dev-dataset", "dev")
        test = _load(cfg.test_dataset, "--test-dataset", "test")
        w = trainer.model.config.way
        q = cfg.queries or 15 * w
        dev_trials = make_trials(dev, TrialPlan(cfg.trials, w, cfg.shots, q, cfg.seed, "dev"))
        test_trials = make_trials(test, TrialPlan(cfg.trials, w, cfg.shots, q, cfg.seed, "test"))

    mode = "a" if cfg.checkpoint else "w"
    with open(out / "metrics.jsonl", mode) as metrics:
        def on_step(r):
            metrics.write(to_json({"episode": r.episode, "loss": r.loss, "accuracy": r.accuracy,
                                   "grad_norm": r.grad_norm, "protocol": "train"}) + "\n")
            done = r.episode + 1
            if done % cfg.checkpoint_every == 0 or done == target:
                metrics.flush()
                save_checkpoint(trainer, out / f"ckpt-{done:06d}.mnck")
            if done % 100 == 0:
                log.info("episode %d loss %.4f acc %.3f", done, r.loss, r.accuracy)

        remaining = target - trainer.episode
        if dev_trials is not None:
            rows = train_with_dev_checkpoint(trainer, remaining, cfg.eval_every, dev_trials, test_trials,
                                             on_step, cfg.seed)
            with open(out / "dev-eval.jsonl", "w") as fh:
                for row in rows:
                    fh.write(to_json(row) + "\n")
        else:
            trainer.run(remaining, on_step)
    save_checkpoint(trainer, out / "final.mnck")
    recent = trainer.history[-100:]
    write_summary(out, "train.json", {"episodes": trainer.episode, "final_checkpoint": "final.mnck",
                                      "recent_loss": float(np.mean(recent)) if recent else None,
                                      "params": banner, "config": config_echo(cfg)})
    return EXIT_OK


def _checkpoint_model(cfg: RunConfig):
    ck = read_checkpoint(_need(cfg.checkpoint, "--checkpoint"))
    model = MetaNet(ck.config)
    return model, ck.params


def _test_trials(cfg: RunConfig, way: int, flag_path: str | None = None):
    test = _load(flag_path or cfg.test_dataset or cfg.dataset, "--test-dataset", "test")
    q = cfg.queries or 15 * way
    return make_trials(test, TrialPlan(cfg.trials, way, cfg.shots, q, cfg.seed, "test")), test


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    model, params = _checkpoint_model(cfg)
    trials, _ = _test_trials(cfg, model.config.way)
    result = evaluate(model, params, trials, cfg.seed, cfg.threads)
    write_trials(out, "trials.jsonl", result)
    write_summary(out, "eval.json", eval_summary(result, cfg))
    return EXIT_OK


def cmd_knn(cfg: RunConfig, out: Path) -> int:
    trials, _ = _test_trials(cfg, cfg.test_way or cfg.way)
    result = pixel_knn(trials)
    write_trials(out, "trials.jsonl", result)
    write_summary(out, "knn.json", eval_summary(result, cfg))
    return EXIT_OK


def cmd_xway(cfg: RunConfig, out: Path) -> int:
    model, params = _checkpoint_model(cfg)
    if cfg.train_way is not None and cfg.train_way != model.config.way:
        raise ConfigError(f"--train-way {cfg.train_way} but checkpoint is {model.config.way}-way")
    K = cfg.test_way or cfg.way
    test = _load(cfg.test_dataset or cfg.dataset, "--test-dataset", "test")
    result = protocol_xway(model, params, K, test, cfg.trials, (cfg.queries or 15 * K) // K, cfg.seed,
                           cfg.threads)
    write_trials(out, "trials.jsonl", result)
    write_summary(out, "xway.json", eval_summary(result, cfg, train_way=model.config.way, test_way=K))
    return EXIT_OK


def cmd_swap_base(cfg: RunConfig, out: Path) -> int:
    model, params = _checkpoint_model(cfg)
    trials, _ = _test_trials(cfg, model.config.way)
    trained = evaluate(model, params, trials, cfg.seed, cfg.threads)
    rows = {"trained_base": {"mean_acc": trained.mean_acc, "ci95": trained.ci95}}
    for hidden in cfg.fresh_base:
        r = protocol_swap_base(model, params, tuple(hidden), trials, cfg.seed, cfg.threads)
        rows[r.protocol] = {"mean_acc": r.mean_acc, "ci95": r.ci95, "report": str(r)}
    write_summary(out, "swap-base.json", {"protocol": "swap-base", "results": rows, "config": config_echo(cfg)})
    return EXIT_OK


def cmd_continual(cfg: RunConfig, out: Path) -> int:
    train_a = _load(cfg.dataset, "--dataset", "train")
    test_a = _load(cfg.test_dataset, "--test-dataset", "test")
    model_cfg = read_checkpoint(cfg.checkpoint).config if cfg.checkpoint else cfg.model_config()
    if cfg.b_dataset:
        base_b = load_dataset(_need(cfg.b_dataset, "--b-dataset"), "train")
    else:
        base_b = gen_synthetic_glyphs(cfg.b_classes, cfg.per_class, cfg.seed + 1_000_003)
    if base_b.class_count < cfg.b_classes:
        raise ConfigError(f"problem B needs {cfg.b_classes} base classes, file has {base_b.class_count}")
    train_b = problem_b_dataset(base_b.subset_classes(range(cfg.b_classes)), cfg.shuffles, cfg.seed)
    setup = ContinualSetup(model_cfg, train_a, test_a, train_b, episodes_a=cfg.episodes,
                           schedule=tuple(cfg.schedule), repetitions=cfg.repetitions,
                           eval_trials=cfg.trials, seed=cfg.seed)
    res = protocol_continual(setup)
    with open(out / "runs.jsonl", "w") as fh:
        for row in res["runs"]:
            fh.write(to_json(row) + "\n")
    write_summary(out, "continual.json", {"protocol": "continual", "curve": res["curve"],
                                          "b_classes": train_b.class_count, "config": config_echo(cfg)})
    return EXIT_OK


def gradcheck_model(variant: str, base_input: str, seed: int = 0, draw: int = 0):
    """Tiny 3-way model with 3 queries and a matching episode; no layer wider than 8 units."""
    cfg = ModelConfig(input_shape=(5, 5), way=3, base_hidden=(6, 6), embed_hidden=(6, 6), aug_layers=3,
                      lstm_hidden=8, mlp_hidden=8, variant=VariantConfig(variant, base_input))
    model = MetaNet(cfg)
    rng = np.random.default_rng([seed, draw, 11])
    params = model.init_params(rng)
    sy = np.arange(3)
    qy = rng.permutation(3)
    ep = Episode(rng.uniform(0, 1, (3, 5, 5)), sy, rng.uniform(0, 1, (3, 5, 5)), qy, sy, sy, sy + 3)
    return model, params, ep


def gradcheck(variant: str, base_input: str, seed: int = 0, h: float = 1e-7, max_draws: int = 64) -> dict:
    """Finite-difference check of the full episode loss, per parameter group.

    A fresh initialisation can leave a generator's fast-weight path inactive
    (every generated weight of one sign feeding a ReLU), in which case that
    group's gradient is exactly zero and the check says nothing about it. Draws
    are taken in order until every group receives gradient; the draw used is
    reported.
    """
    for draw in range(max_draws):
        model, params, ep = gradcheck_model(variant, base_input, seed, draw)
        meta: dict = {}
        model.episode_loss(as_constants(params), ep, np.random.default_rng([seed, draw]), meta)

        def loss(P):
            return model.episode_loss(P, ep, None, meta)[0]

        _, grads = ad.grad(loss, params)
        if not dead_groups(grads):
            break
    groups = {}
    for g in ("W", "Q", "Z", "G"):
        keys = [k for k in params if k.startswith(g + ".")]
        if not keys:
            continue
        sub = {k: params[k] for k in keys}

        def partial(P, sub_keys=tuple(keys)):
            full = {k: (P[k] if k in sub_keys else ad.Tensor(v)) for k, v in params.items()}
            return loss(full)

        err = ad.finite_diff_check(partial, sub, h=h, oracle_dtype=np.longdouble)
        groups[g] = {"max_rel_error": err, "grad_norm": float(np.sqrt(sum((grads[k] ** 2).sum() for k in keys))),
                     "coords": int(sum(params[k].size for k in keys))}
    ok = all(v["max_rel_error"] < GRADCHECK_TOL and v["grad_norm"] > 0 for v in groups.values())
    return {"variant": variant, "base_input": base_input, "draw": draw, "groups": groups, "ok": ok}


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    rep = gradcheck(cfg.variant, cfg.base_input, cfg.seed, cfg.h)
    write_summary(out, "gradcheck.json", {**rep, "tolerance": GRADCHECK_TOL, "config": config_echo(cfg)})
    return EXIT_OK if rep["ok"] else EXIT_CHECK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "knn": cmd_knn,
            "xway": cmd_xway, "swap-base": cmd_swap_base, "continual": cmd_continual,
            "gradcheck": cmd_gradcheck}


# ---------------------------------------------------------------- argv

def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace("x", ",").split(",") if x]


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    a = common.add_argument
    a("--config", help="JSON file of RunConfig fields")
    a("--dataset")
    a("--test-dataset")
    a("--dev-dataset")
    a("--b-dataset", help="base classes for the permuted problem B")
    a("--out")
    a("--checkpoint")
    a("--way", type=int)
    a("--train-way", type=int)
    a("--test-way", type=int)
    a("--shots", type=int)
    a("--queries", type=int, help="L, query examples per episode")
    a("--task-samples", type=int, help="T, support examples fed to the task-level generator")
    a("--episodes", type=int)
    a("--trials", type=int)
    a("--seed", type=int)
    a("--lr", type=float)
    a("--variant", choices=["minus", "standard", "plus"])
    a("--base-input", choices=["raw", "repr"])
    a("--aug-layers", type=int)
    a("--base-hidden", type=_int_list)
    a("--embed-hidden", type=_int_list)
    a("--threads", type=int)
    a("--checkpoint-every", type=int)
    a("--eval-every", type=int)
    a("--classes", type=int)
    a("--per-class", type=int)
    a("--split")
    a("--fresh-base", type=_int_list, action="append", help="hidden widths, e.g. 32x32x32 (repeatable)")
    a("--b-classes", type=int)
    a("--shuffles", type=int)
    a("--schedule", type=_int_list)
    a("--repetitions", type=int)
    a("--h", type=float, help="finite-difference step for gradcheck")

    parser = argparse.ArgumentParser(prog="metanet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def parse(argv) -> RunConfig:
    ns = make_parser().parse_args(argv)
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    file_values = {}
    if ns.config:
        try:
            file_values = json.loads(Path(ns.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read --config {ns.config}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("--config must hold a JSON object")
    return build_config(ns.command, file_values, flags)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse(argv)
    except ConfigError as exc:
        print(f"metanet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:          # argparse usage errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        print(f"metanet: config error: output directory {out} is not writable: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    setup_logging(out)
    log.info("command %s started at %s", cfg.command, time.strftime("%Y-%m-%dT%H:%M:%S"))
    try:
        code = COMMANDS[cfg.command](cfg, out)
    except (ConfigError, DatasetError, EpisodeError, CheckpointError, FileNotFoundError) as exc:
        print(f"metanet: config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except (TrainingError, ad.NumericError) as exc:
        print(f"metanet: numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (ValueError, ad.ShapeError) as exc:
        print(f"metanet: config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    log.info("command %s finished with exit code %d", cfg.command, code)
    for h in list(log.handlers):
        h.close()
        log.removeHandler(h)
    return code


if __name__ == "__main__":
    sys.exit(main())
