"""Outer-loop optimisation of the slow weights, evaluation, and experiment protocols."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .datasets import LabeledImageSet, PermutationFamily, apply_permutation_family
from .episodes import Episode, TrialPlan, make_trials, sample_episode
from .model import MetaNet, ModelConfig, VariantConfig, as_constants

log = logging.getLogger(__name__)

CLIP_NORM = 10.0


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """One bias-corrected ADAM step over every parameter in ``grads``, in place."""
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            params[k] = params[k] - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)

    def forget(self, names: Iterable[str]) -> None:
        for k in names:
            self.m.pop(k, None)
            self.v.pop(k, None)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = CLIP_NORM) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------- training

def loss_and_grads(model: MetaNet, params, episode: Episode, rng, meta=None):
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    loss, logits = model.episode_loss(leaves, episode, rng, meta)
    g = ad.backward(tape, loss, list(leaves.values()))
    return loss.item(), {k: g[t.node] for k, t in leaves.items()}, logits.data


@dataclass
class StepResult:
    episode: int
    loss: float
    accuracy: float
    grad_norm: float


class Trainer:
    """Sequential episodic training state: parameters, ADAM moments, rng, episode counter."""

    def __init__(self, model: MetaNet, params: dict[str, np.ndarray], dataset: LabeledImageSet,
                 shots: int = 1, queries: int | None = None, lr: float = 1e-3, seed: int = 0,
                 frozen: Iterable[str] = ()):
        self.model = model
        self.params = params
        self.dataset = dataset
        way = model.config.way
        self.plan = TrialPlan(1, way, shots, 5 * way if queries is None else queries, seed, dataset.partition)
        self.adam = AdamState(lr=lr)
        self.rng = np.random.default_rng(seed)
        self.episode = 0
        self.frozen = set(frozen)
        self.history: list[float] = []

    @classmethod
    def fresh(cls, config: ModelConfig, dataset, seed: int = 0, **kw) -> "Trainer":
        model = MetaNet(config)
        params = model.init_params(np.random.default_rng([seed, 1]))
        return cls(model, params, dataset, seed=seed, **kw)

    def step(self) -> StepResult:
        episode = sample_episode(self.dataset, self.plan, self.rng)
        try:
            loss, grads, logits = loss_and_grads(self.model, self.params, episode, self.rng)
        except ArithmeticError as exc:
            raise TrainingError(f"episode {self.episode}: {exc}; recent losses {self.history[-5:]}") from exc
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"episode {self.episode}: non-finite loss {loss}; "
                                f"recent losses {self.history[-5:]}")
        for k in self.frozen:
            grads.pop(k, None)
        if self.episode == 0:
            dead = dead_groups(grads)
            if dead:
                log.warning("generator groups %s get an exactly zero gradient on the first episode: "
                            "their fast-weight path is inactive at this initialisation", dead)
        norm = clip_global_norm(grads)
        if self.adam.lr != 0.0:
            self.adam.update(self.params, grads)
        else:
            self.adam.step += 1
        acc = float((logits.argmax(1) == episode.query_y).mean())
        self.history.append(loss)
        self.history = self.history[-100:]
        result = StepResult(self.episode, loss, acc, norm)
        self.episode += 1
        return result

    def run(self, episodes: int, callback: Callable[[StepResult], None] | None = None) -> list[StepResult]:
        out = []
        for _ in range(episodes):
            r = self.step()
            out.append(r)
            if callback:
                callback(r)
        return out


def dead_groups(grads: dict[str, np.ndarray]) -> list[str]:
    """Parameter groups (first name component) whose gradient is identically zero."""
    groups: dict[str, bool] = {}
    for k, g in grads.items():
        prefix = k.split(".")[0]
        groups[prefix] = groups.get(prefix, False) or bool(np.any(g != 0))
    return sorted(k for k, live in groups.items() if not live)


def train_step(model: MetaNet, params, adam: AdamState, episode: Episode, rng, frozen=()) -> float:
    """Single MetaNet update on one episode; mutates ``params`` and ``adam``."""
    loss, grads, _ = loss_and_grads(model, params, episode, rng)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    for k in frozen:
        grads.pop(k, None)
    clip_global_norm(grads)
    adam.update(params, grads)
    return loss


# ---------------------------------------------------------------- evaluation

@dataclass
class TrialMetrics:
    trial: int
    accuracy: float
    loss: float
    protocol: str


@dataclass
class EvalResult:
    mean_acc: float
    ci95: float
    trials: list[TrialMetrics]
    protocol: str = "standard"

    def summary(self) -> dict:
        return {"protocol": self.protocol, "mean_acc": self.mean_acc, "ci95": self.ci95,
                "trials": len(self.trials)}

    def __str__(self) -> str:
        return format_accuracy(self.mean_acc, self.ci95)


def format_accuracy(mean: float, ci: float) -> str:
    return f"{100 * mean:.2f} ± {100 * ci:.2f}"


def aggregate(trials: list[TrialMetrics], protocol: str = "standard") -> EvalResult:
    if not trials:
        raise ValueError("no trials to aggregate")
    trials = sorted(trials, key=lambda t: t.trial)
    acc = np.array([t.accuracy for t in trials])
    ci = 1.96 * acc.std(ddof=1) / math.sqrt(len(acc)) if len(acc) > 1 else 0.0
    return EvalResult(float(acc.mean()), float(ci), trials, protocol)


def evaluate(model: MetaNet, params, trials: list[Episode], seed: int = 0, threads: int = 1,
             protocol: str = "standard") -> EvalResult:
    """Accuracy over trials with frozen parameters. Each trial draws its own rng from
    (seed, trial index), so results do not depend on thread scheduling."""
    if not trials:
        raise ValueError("evaluate needs at least one trial")
    P = as_constants(params)

    def one(i):
        ep = trials[i]
        loss, logits = model.episode_loss(P, ep, np.random.default_rng([seed, i]))
        acc = float((logits.data.argmax(1) == ep.query_y).mean())
        return TrialMetrics(i, acc, loss.item() / len(ep.query_y), protocol)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            metrics = list(pool.map(one, range(len(trials))))
    else:
        metrics = [one(i) for i in range(len(trials))]
    return aggregate(metrics, protocol)


def pixel_knn(trials: list[Episode]) -> EvalResult:
    """1-nearest-neighbour in raw pixel space (Euclidean) against the support set."""
    out = []
    for i, ep in enumerate(trials):
        S = ep.support_x.reshape(len(ep.support_x), -1)
        Q = ep.query_x.reshape(len(ep.query_x), -1)
        d = ((Q[:, None, :] - S[None, :, :]) ** 2).sum(-1)
        pred = ep.support_y[d.argmin(1)]
        out.append(TrialMetrics(i, float((pred == ep.query_y).mean()), float("nan"), "pixel-knn"))
    return aggregate(out, "pixel-knn")


def params_digest(params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def train_with_dev_checkpoint(trainer: Trainer, episodes: int, eval_every: int, dev_trials, test_trials,
                              callback=None, seed: int = 0):
    """Train; every ``eval_every`` episodes score the dev trials and, only when dev
    accuracy beats the best so far, score the test trials. Returns the eval log."""
    best, log_rows = -1.0, []
    done = 0
    while done < episodes:
        n = min(eval_every, episodes - done)
        trainer.run(n, callback)
        done += n
        dev = evaluate(trainer.model, trainer.params, dev_trials, seed, protocol="dev")
        row = {"episode": trainer.episode, "dev_acc": dev.mean_acc, "dev_ci95": dev.ci95}
        if dev.mean_acc > best:
            best = dev.mean_acc
            test = evaluate(trainer.model, trainer.params, test_trials, seed, protocol="test")
            row.update(test_acc=test.mean_acc, test_ci95=test.ci95)
        log_rows.append(row)
    return log_rows


# ---------------------------------------------------------------- protocols

def xway_model(model: MetaNet, params, K: int, rng) -> tuple[MetaNet, dict]:
    """Swap b's softmax layer and u's auxiliary head for fresh K-way layers."""
    if K < 2:
        raise ValueError("K must be >= 2")
    cfg = model.config
    new = MetaNet(ModelConfig(**{**_config_fields(cfg), "way": K}))
    out = dict(params)
    s = cfg.init_scale
    bi, ei = len(new.base) - 1, len(new.embed) - 1
    out[f"W.{bi}"] = rng.uniform(-s, s, size=new.base[bi].weight_shape)
    out[f"Q.{ei}"] = rng.uniform(-s, s, size=new.embed[ei].weight_shape)
    return new, out


def protocol_xway(model: MetaNet, params, K: int, dataset: LabeledImageSet, trials: int = 400,
                  queries_per_class: int = 15, seed: int = 0, threads: int = 1) -> EvalResult:
    new, p = xway_model(model, params, K, np.random.default_rng([seed, 2]))
    plan = TrialPlan(trials, K, 1, queries_per_class * K, seed, dataset.partition)
    return evaluate(new, p, make_trials(dataset, plan), seed, threads, protocol=f"xway-{K}")


def swap_base_model(model: MetaNet, params, base_hidden: tuple[int, ...], rng) -> tuple[MetaNet, dict]:
    """Replace the whole base learner with a freshly initialised one of other widths."""
    cfg = model.config
    if cfg.variant.base_input == "repr":
        raise ValueError("swap-base needs a raw-input base learner")
    new = MetaNet(ModelConfig(**{**_config_fields(cfg), "base_hidden": tuple(base_hidden)}))
    if new.base[0].fan_in != model.base[0].fan_in or new.base[-1].units != model.base[-1].units:
        raise ValueError("fresh base learner has incompatible input or output size")
    out = {k: v for k, v in params.items() if not k.startswith("W.")}
    s = cfg.init_scale
    for i, spec in enumerate(new.base):
        out[f"W.{i}"] = rng.uniform(-s, s, size=spec.weight_shape)
    return new, out


def protocol_swap_base(model: MetaNet, params, base_hidden, trials: list[Episode], seed: int = 0,
                       threads: int = 1) -> EvalResult:
    new, p = swap_base_model(model, params, base_hidden, np.random.default_rng([seed, 3]))
    return evaluate(new, p, trials, seed, threads, protocol=f"swap-base-{'x'.join(map(str, base_hidden))}")


def swap_base_curve(snapshots, bases, trials, seed: int = 0, threads: int = 1) -> list[dict]:
    """Rows of (iteration, trained-base accuracy, fixed-base accuracies) over meta-training."""
    rows = []
    for iteration, model, params in snapshots:
        row = {"iteration": iteration, "trained_base": evaluate(model, params, trials, seed, threads).mean_acc}
        for hidden in bases:
            r = protocol_swap_base(model, params, hidden, trials, seed, threads)
            row[r.protocol] = r.mean_acc
        rows.append(row)
    return rows


@dataclass
class ContinualSetup:
    config: ModelConfig
    train_a: LabeledImageSet
    test_a: LabeledImageSet
    train_b: LabeledImageSet
    episodes_a: int = 2000
    schedule: tuple[int, ...] = (400, 800, 1200)
    repetitions: int = 2
    eval_trials: int = 100
    queries_per_class: int = 5
    seed: int = 0


def problem_b_dataset(base: LabeledImageSet, shuffles: int = 50, seed: int = 0) -> LabeledImageSet:
    fam = PermutationFamily(base.images.shape[1] * base.images.shape[2], shuffles, seed)
    return apply_permutation_family(base, fam)


def protocol_continual(setup: ContinualSetup, callback=None) -> dict:
    """Accuracy on problem A before and after meta-training on problem B.

    Each repetition trains on A from scratch. At the switch W and Q are
    re-allocated for problem B, so only Z and G carry over; A is then
    re-scored with its own W and Q and the updated Z and G. Runs that share a
    repetition seed share their A phase bit for bit, so A is trained once per
    repetition and each schedule point continues from a copy of that state.
    """
    if not setup.schedule:
        raise ValueError("schedule is empty")
    cfg = setup.config
    plan = TrialPlan(setup.eval_trials, cfg.way, 1, setup.queries_per_class * cfg.way, setup.seed,
                     setup.test_a.partition)
    trials_a = make_trials(setup.test_a, plan)
    rows = []
    for rep in range(setup.repetitions):
        seed = setup.seed * 1000 + rep
        ta = Trainer.fresh(cfg, setup.train_a, seed=seed)
        ta.run(setup.episodes_a, callback)
        before = evaluate(ta.model, ta.params, trials_a, setup.seed, protocol="continual-A")
        for point in setup.schedule:
            params_a = {k: v.copy() for k, v in ta.params.items()}
            rng_b = np.random.default_rng([seed, point, 7])
            params_b = dict(params_a)
            fresh = ta.model.init_params(rng_b)
            for k in params_b:
                if k.startswith(("W.", "Q.")):
                    params_b[k] = fresh[k]
            tb = Trainer(ta.model, params_b, setup.train_b, seed=seed + 10_000 * (point + 1))
            tb.adam = AdamState(lr=ta.adam.lr, step=ta.adam.step,
                                m={k: v.copy() for k, v in ta.adam.m.items()},
                                v={k: v.copy() for k, v in ta.adam.v.items()})
            tb.adam.forget([k for k in params_b if k.startswith(("W.", "Q."))])
            tb.run(point, callback)
            after_params = {k: (tb.params[k] if k.startswith(("Z.", "G.")) else params_a[k]) for k in params_a}
            after = evaluate(ta.model, after_params, trials_a, setup.seed, protocol="continual-A")
            rows.append({"repetition": rep, "b_trials": point, "acc_before": before.mean_acc,
                         "acc_after": after.mean_acc, "delta": after.mean_acc - before.mean_acc})
    curve = []
    for point in setup.schedule:
        ds = [r["delta"] for r in rows if r["b_trials"] == point]
        curve.append({"b_trials": point, "mean_delta": float(np.mean(ds)), "runs": len(ds)})
    return {"runs": rows, "curve": curve}


def _config_fields(cfg: ModelConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"MNCK"
CKPT_VERSION = 1


def config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["variant"] = VariantConfig(**d["variant"])
    for k in ("input_shape", "base_hidden", "embed_hidden", "conv_filters"):
        d[k] = tuple(d[k])
    return ModelConfig(**d)


def _write_table(buf, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint is truncated")
    return b


def _read_table(buf) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read(buf, 4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read(buf, 4))
        name = _read(buf, n).decode()
        (rank,) = struct.unpack("<I", _read(buf, 4))
        shape = struct.unpack(f"<{rank}I", _read(buf, 4 * rank))
        size = math.prod(shape)
        out[name] = np.frombuffer(_read(buf, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def _write_json(buf, obj) -> None:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(raw)) + raw)


def _read_json(buf):
    (n,) = struct.unpack("<I", _read(buf, 4))
    try:
        return json.loads(_read(buf, n))
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None


def checkpoint_bytes(trainer: Trainer) -> bytes:
    """MNCK layout: magic, version, metadata JSON, parameter table, ADAM header and
    moment tables, rng state JSON. Every length is a little-endian u32."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
    _write_json(buf, {"config": config_to_dict(trainer.model.config), "episode": trainer.episode,
                      "shots": trainer.plan.shots, "queries": trainer.plan.queries,
                      "frozen": sorted(trainer.frozen)})
    _write_table(buf, trainer.params)
    a = trainer.adam
    buf.write(struct.pack("<Q4d", a.step, a.lr, a.beta1, a.beta2, a.eps))
    _write_table(buf, a.m)
    _write_table(buf, a.v)
    _write_json(buf, trainer.rng.bit_generator.state)
    return buf.getvalue()


def save_checkpoint(trainer: Trainer, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(trainer))


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    rng_state: dict
    episode: int
    meta: dict


def read_checkpoint(path) -> Checkpoint:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != CKPT_MAGIC:
        raise CheckpointError("not a MetaNet checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    meta = _read_json(buf)
    try:
        config = config_from_dict(meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint config: {exc}") from None
    params = _read_table(buf)
    step, lr, b1, b2, eps = struct.unpack("<Q4d", _read(buf, 40))
    m = _read_table(buf)
    v = _read_table(buf)
    rng_state = _read_json(buf)
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(config, params, AdamState(lr, b1, b2, eps, step, m, v), rng_state, meta["episode"], meta)


def load_checkpoint(path, dataset: LabeledImageSet | None = None) -> Trainer:
    ck = read_checkpoint(path)
    model = MetaNet(ck.config)
    expected = model.param_shapes()
    if {k: v.shape for k, v in ck.params.items()} != expected:
        raise CheckpointError("checkpoint tensors do not match its model config")
    t = Trainer.__new__(Trainer)
    t.model = model
    t.params = ck.params
    t.dataset = dataset
    way = ck.config.way
    t.plan = TrialPlan(1, way, ck.meta.get("shots", 1), ck.meta.get("queries", 5 * way), 0,
                       dataset.partition if dataset is not None else "train")
    t.adam = ck.adam
    t.rng = np.random.default_rng()
    t.rng.bit_generator.state = ck.rng_state
    t.episode = ck.episode
    t.frozen = set(ck.meta.get("frozen", []))
    t.history = []
    return t
