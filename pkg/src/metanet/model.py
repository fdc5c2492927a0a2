"""MetaNet: base learner b, representation learner u, fast-weight generators m and d,
a fast-weight memory read by cosine attention, and layer augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import GradPreprocConfig, Tape, Tensor, preprocess_gradient
from .episodes import Episode

VARIANTS = ("minus", "standard", "plus")
BASE_INPUTS = ("raw", "repr")


@dataclass(frozen=True)
class VariantConfig:
    variant: str = "standard"
    base_input: str = "raw"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.base_input not in BASE_INPUTS:
            raise ValueError(f"base_input must be one of {BASE_INPUTS}, got {self.base_input!r}")


@dataclass(frozen=True)
class LayerSpec:
    kind: str          # conv | fc | softmax
    fan_in: int        # input features, or input channels for conv
    units: int         # output features or filters
    augmented: bool = False

    @property
    def weight_shape(self) -> tuple[int, int]:
        # bias lives in the last column
        return (self.units, 9 * self.fan_in + 1) if self.kind == "conv" else (self.units, self.fan_in + 1)


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int] = (28, 28)
    way: int = 5
    base_hidden: tuple[int, ...] = (64, 64, 64)
    embed_hidden: tuple[int, ...] = (64, 64, 64)   # last entry is the size of r
    conv_filters: tuple[int, ...] = ()              # conv blocks in front of both nets
    aug_layers: int = 3                              # how many trailing layers carry fast weights
    variant: VariantConfig = field(default_factory=VariantConfig)
    lstm_hidden: int = 20
    mlp_hidden: int = 20
    grad_p: float = 7.0
    task_samples: int | None = None                  # T; None means T = N
    init_scale: float = 0.1
    forget_bias: float = 1.0
    margin: float = 1.0
    stop_meta_gradient: bool = True

    def __post_init__(self):
        if self.way < 2:
            raise ValueError("way must be >= 2")
        if not self.embed_hidden or (not self.base_hidden and self.variant.base_input == "repr"):
            raise ValueError("embed_hidden must be non-empty")
        if self.aug_layers < 1:
            raise ValueError("aug_layers must be >= 1")
        if not self.stop_meta_gradient:
            raise NotImplementedError("meta information is always a constant: the tape is first-order")
        GradPreprocConfig(self.grad_p)

    def _trunk(self, hidden, n_in, conv):
        layers, fan = [], n_in
        if conv:
            ch, (h, w) = 1, self.input_shape
            for f in self.conv_filters:
                layers.append(LayerSpec("conv", ch, f))
                ch, h, w = f, (h - 2) // 2, (w - 2) // 2
                if h < 1 or w < 1:
                    raise ValueError(f"too many conv blocks for input {self.input_shape}")
            fan = ch * h * w
        for units in hidden:
            layers.append(LayerSpec("fc", fan, units))
            fan = units
        return layers, fan

    def _mark(self, layers):
        k = len(layers) - self.aug_layers
        return [replace(s, augmented=i >= k) for i, s in enumerate(layers)]

    @property
    def input_size(self) -> int:
        return self.input_shape[0] * self.input_shape[1]

    def base_layers(self) -> list[LayerSpec]:
        repr_in = self.variant.base_input == "repr"
        n_in = self.embed_hidden[-1] if repr_in else self.input_size
        layers, fan = self._trunk(self.base_hidden, n_in, conv=not repr_in and bool(self.conv_filters))
        return self._mark(layers + [LayerSpec("softmax", fan, self.way)])

    def embed_layers(self) -> list[LayerSpec]:
        """u's trunk (ending in the FC layer that gives r) followed by its auxiliary softmax head."""
        layers, fan = self._trunk(self.embed_hidden, self.input_size, conv=bool(self.conv_filters))
        return self._mark(layers + [LayerSpec("softmax", fan, self.way)])


# ---------------------------------------------------------------- layers

def _flatten_input(h: Tensor, spec: LayerSpec) -> Tensor:
    B = h.shape[0]
    if spec.kind == "conv":
        return ad.reshape(h, (B, 1) + h.shape[1:]) if h.ndim == 3 else h
    return ad.reshape(h, (B, -1)) if h.ndim != 2 else h


def linear_map(spec: LayerSpec, x: Tensor, w: Tensor) -> Tensor:
    """The layer's linear transform. ``w`` is shared (out, in+1) or per-example (B, out, in+1)."""
    if spec.kind == "conv":
        return ad.conv3x3(x, w)
    B = x.shape[0]
    xa = ad.concat([x, np.ones((B, 1))], axis=1)
    if w.ndim == 2:
        return ad.matmul(xa, ad.transpose(w))
    if w.shape[0] != B:
        raise ad.ShapeError(f"{spec.kind}: per-example weights {w.shape} for batch {B}")
    return ad.reshape(ad.matmul(w, ad.reshape(xa, (B, -1, 1))), (B, w.shape[1]))


def augmented_layer(spec: LayerSpec, slow: Tensor, fast, x: Tensor) -> Tensor:
    """Hidden layers: ReLU(slow x) + sum ReLU(fast x); softmax layer: returns the
    summed pre-activations (logits). Conv layers are followed by 2x2 max-pooling."""
    fast = [f for f in (fast or []) if f is not None]
    for f in fast:
        if f.shape[-2:] != slow.shape:
            raise ad.ShapeError(f"{spec.kind}: fast weights {f.shape} vs slow {slow.shape}")
    if spec.kind == "softmax":
        z = linear_map(spec, x, slow)
        for f in fast:
            z = ad.add(z, linear_map(spec, x, f))
        return z
    h = ad.relu(linear_map(spec, x, slow))
    for f in fast:
        h = ad.add(h, ad.relu(linear_map(spec, x, f)))
    return ad.maxpool2x2(h) if spec.kind == "conv" else h


def layer_augment_forward(spec: LayerSpec, slow, fast, x) -> Tensor:
    """Activation of one augmented layer; the softmax layer returns probabilities."""
    x = _flatten_input(ad.as_tensor(x), spec)
    fast = fast if isinstance(fast, (list, tuple)) else [fast]
    out = augmented_layer(spec, ad.as_tensor(slow), [ad.as_tensor(f) for f in fast], x)
    return ad.softmax(out) if spec.kind == "softmax" else out


def run_layers(layers, slow, fast_paths, x, stop: int | None = None) -> Tensor:
    """Run ``layers[:stop]``; ``fast_paths`` is a list of {layer index: fast tensor}."""
    h = x
    for i, spec in enumerate(layers[:stop]):
        h = _flatten_input(h, spec)
        h = augmented_layer(spec, slow[i], [p.get(i) for p in fast_paths], h)
    return h


# ---------------------------------------------------------------- flat layouts

@dataclass(frozen=True)
class FlatLayout:
    """Offsets of a net's augmented layers inside one flat fast-weight vector."""

    entries: tuple[tuple[int, tuple[int, int], int], ...]   # (layer index, shape, offset)
    size: int

    @classmethod
    def of(cls, layers) -> "FlatLayout":
        entries, off = [], 0
        for i, s in enumerate(layers):
            if s.augmented:
                entries.append((i, s.weight_shape, off))
                off += math.prod(s.weight_shape)
        return cls(tuple(entries), off)

    def split(self, flat: Tensor) -> dict[int, Tensor]:
        lead = flat.shape[:-1]
        out = {}
        for i, shape, off in self.entries:
            n = shape[0] * shape[1]
            piece = ad.index(flat, (Ellipsis, slice(off, off + n)))
            out[i] = ad.reshape(piece, lead + shape)
        return out

    def flatten(self, per_layer: dict[int, np.ndarray], lead: tuple[int, ...] = ()) -> np.ndarray:
        return np.concatenate([per_layer[i].reshape(lead + (-1,)) for i, _, _ in self.entries], axis=-1)


# ---------------------------------------------------------------- the model

@dataclass
class FastWeightSet:
    qstar: dict[int, Tensor] | None     # task-level fast weights for u (shared over the episode)
    memory: Tensor                      # M: (N, P_b) flattened example-level fast weights
    index: Tensor                       # R: (N, D) support embeddings
    base_task: dict[int, Tensor] | None = None  # task-level fast weights for b (plus variant)

    def __post_init__(self):
        if self.memory.shape[0] != self.index.shape[0]:
            raise ValueError(f"memory has {self.memory.shape[0]} rows, index has {self.index.shape[0]}")


def contrastive_loss(e1: Tensor, e2: Tensor, same, margin: float = 1.0) -> Tensor:
    """Per-pair l*d^2 + (1-l)*max(0, margin-d)^2 with Euclidean d."""
    same = np.asarray(same, dtype=np.float64)
    d = ad.l2_distance(e1, e2)
    hinge = ad.relu(ad.sub(margin, d))
    return ad.add(ad.mul(same, ad.mul(d, d)), ad.mul(1.0 - same, ad.mul(hinge, hinge)))


def pair_labels(y1, y2) -> np.ndarray:
    return (np.asarray(y1) == np.asarray(y2)).astype(np.float64)


class MetaNet:
    """Holds the architecture; parameters live in a separate name -> array dict."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.base = config.base_layers()
        self.embed = config.embed_layers()
        self.base_layout = FlatLayout.of(self.base)
        self.embed_layout = FlatLayout.of(self.embed)
        self.preproc = GradPreprocConfig(config.grad_p)

    @property
    def variant(self) -> str:
        return self.config.variant.variant

    # -- parameters

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        shapes = {f"W.{i}": s.weight_shape for i, s in enumerate(self.base)}
        shapes.update({f"Q.{i}": s.weight_shape for i, s in enumerate(self.embed)})
        hm = c.mlp_hidden
        shapes.update({"Z.0": (hm, 3), "Z.1": (hm, hm + 1), "Z.2": (1, hm + 1)})
        H = c.lstm_hidden
        prefixes = []
        if self.variant != "minus":
            prefixes.append("G.")
        if self.variant == "plus":
            prefixes.append("G.base_")
        for p in prefixes:
            shapes.update({p + "lstm_w": (2 + H, 4 * H), p + "lstm_b": (4 * H,), p + "out": (1, H + 1)})
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        s = self.config.init_scale
        params = {k: rng.uniform(-s, s, size=shape) for k, shape in self.param_shapes().items()}
        H = self.config.lstm_hidden
        for k in params:
            if k.endswith("lstm_b"):
                params[k][H:2 * H] = self.config.forget_bias
        return params

    def fresh_layers(self, params, rng, prefix: str, layers, which) -> dict[str, np.ndarray]:
        """Copy of ``params`` with the given layers of one net re-drawn at random."""
        s = self.config.init_scale
        out = dict(params)
        for i in which:
            out[f"{prefix}.{i}"] = rng.uniform(-s, s, size=layers[i].weight_shape)
        return out

    @staticmethod
    def group(params, letter: str) -> list:
        keys = sorted((k for k in params if k.startswith(letter + ".")), key=lambda k: int(k.split(".")[1]))
        return [params[k] for k in keys]

    # -- meta information (constants)

    def _per_example_grads(self, layers, layout, slow_values, forward_loss, batch: int) -> np.ndarray:
        """Per-example gradients of the augmented layers, as (batch, P) flat rows.

        Every example gets its own copy of the augmented weights, so one backward
        pass over the summed loss yields all per-example gradients at once.
        """
        tape = Tape()
        slow = []
        leaves = {}
        for i, (s, w) in enumerate(zip(layers, slow_values)):
            if s.augmented:
                leaves[i] = tape.leaf(np.broadcast_to(w, (batch,) + w.shape))
                slow.append(leaves[i])
            else:
                slow.append(Tensor(w))
        loss = forward_loss(slow)
        if not np.isfinite(loss.item()):
            raise ad.NumericError("meta-information loss is not finite")
        g = ad.backward(tape, loss, list(leaves.values()))
        return layout.flatten({i: g[t.node] for i, t in leaves.items()}, (batch,))

    def embed_gradients(self, Q, episode: Episode, rng) -> np.ndarray:
        """Rows of grad_Q loss_emb on T sampled support examples (or T pairs when multi-shot)."""
        sx, sy = episode.support_x, episode.support_y
        T = self.task_count(len(sy))
        if episode.shots == 1:
            pick = np.sort(rng.choice(len(sy), size=T, replace=False)) if T < len(sy) else np.arange(T)
            x, y = sx[pick], sy[pick]

            def f(slow):
                return ad.sum(self.embed_loss_onehot(slow, x, y))
        else:
            i1 = rng.integers(0, len(sy), size=T)
            i2 = rng.integers(0, len(sy), size=T)
            same = pair_labels(sy[i1], sy[i2])

            def f(slow):
                e1 = run_layers(self.embed, slow, [], Tensor(sx[i1]), stop=-1)
                e2 = run_layers(self.embed, slow, [], Tensor(sx[i2]), stop=-1)
                return ad.sum(contrastive_loss(e1, e2, same, self.config.margin))
        return self._per_example_grads(self.embed, self.embed_layout, Q, f, T)

    def embed_loss_onehot(self, slow, x, y) -> Tensor:
        logits = run_layers(self.embed, slow, [], Tensor(x))
        return ad.cross_entropy(logits, y)

    def base_gradients(self, W, base_in: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Rows of grad_W loss_task(b(W, x'_i), y'_i), one per support example."""
        def f(slow):
            return ad.sum(ad.cross_entropy(run_layers(self.base, slow, [], Tensor(base_in)), y))
        return self._per_example_grads(self.base, self.base_layout, W, f, len(y))

    def task_count(self, n: int) -> int:
        T = n if self.config.task_samples is None else min(self.config.task_samples, n)
        if T < 1:
            raise ValueError("need at least one support example to sample")
        return T

    # -- generators

    def gen_example_fast_weights(self, P, grads: np.ndarray) -> Tensor:
        """m: shared 3-layer MLP applied to every preprocessed gradient coordinate."""
        feats = preprocess_gradient(grads, self.preproc)           # (..., P, 2)
        lead = feats.shape[:-1]
        h = Tensor(feats.reshape(-1, 2))
        spec = LayerSpec("fc", 2, self.config.mlp_hidden)
        h = ad.relu(linear_map(spec, h, P["Z.0"]))
        h = ad.relu(linear_map(spec, h, P["Z.1"]))
        out = linear_map(spec, h, P["Z.2"])
        return ad.reshape(out, lead)

    def _lstm_summary(self, P, prefix: str, grads: np.ndarray) -> Tensor:
        """d: coordinate-wise LSTM over the T gradient rows, read out from the last state."""
        feats = preprocess_gradient(grads, self.preproc)            # (T, P, 2)
        H = self.config.lstm_hidden
        state = Tensor(np.zeros((feats.shape[1], 2 * H)))
        for t in range(feats.shape[0]):
            state = ad.lstm_cell(Tensor(feats[t]), state, P[prefix + "lstm_w"], P[prefix + "lstm_b"])
        h = ad.index(state, (slice(None), slice(0, H)))
        out = linear_map(LayerSpec("fc", H, 1), h, P[prefix + "out"])
        return ad.reshape(out, (feats.shape[1],))

    def gen_task_fast_weights(self, P, embed_grads: np.ndarray) -> dict[int, Tensor]:
        if len(embed_grads) == 0:
            raise ValueError("task fast weights need at least one gradient")
        return self.embed_layout.split(self._lstm_summary(P, "G.", embed_grads))

    def gen_base_task_fast_weights(self, P, base_grads: np.ndarray) -> dict[int, Tensor]:
        return self.base_layout.split(self._lstm_summary(P, "G.base_", base_grads))

    # -- embedding, memory, prediction

    def embed_inputs(self, P, qstar, x) -> Tensor:
        """r = u(Q, Q*, x): output of u's last FC layer."""
        return run_layers(self.embed, self.group(P, "Q"), [qstar] if qstar else [], ad.as_tensor(x), stop=-1)

    def base_logits(self, P, inputs, wstar: dict[int, Tensor] | None, base_task=None) -> Tensor:
        paths = [p for p in (wstar, base_task) if p]
        return run_layers(self.base, self.group(P, "W"), paths, ad.as_tensor(inputs))

    def build_memory(self, P, episode: Episode, rng, meta: dict | None = None) -> FastWeightSet:
        """Task fast weights, then M and R for every support example.

        ``meta`` caches the (constant) gradients so they can be frozen across calls.
        """
        if episode.way != self.config.way:
            raise ad.ShapeError(f"model is {self.config.way}-way, episode is {episode.way}-way")
        meta = {} if meta is None else meta
        values = {k: v.data for k, v in P.items()}
        qstar = None
        if self.variant != "minus":
            if "embed" not in meta:
                meta["embed"] = self.embed_gradients(self.group(values, "Q"), episode, rng)
            qstar = self.gen_task_fast_weights(P, meta["embed"])
        R = self.embed_inputs(P, qstar, episode.support_x)
        if "base" not in meta:
            base_in = R.data if self.config.variant.base_input == "repr" else episode.support_x
            meta["base"] = self.base_gradients(self.group(values, "W"), base_in, episode.support_y)
        M = self.gen_example_fast_weights(P, meta["base"])
        base_task = None
        if self.variant == "plus":
            if "base_pick" not in meta:
                n = len(episode.support_y)
                T = self.task_count(n)
                meta["base_pick"] = np.sort(rng.choice(n, size=T, replace=False)) if T < n else np.arange(n)
            base_task = self.gen_base_task_fast_weights(P, meta["base"][meta["base_pick"]])
        return FastWeightSet(qstar, M, R, base_task)

    @staticmethod
    def attend_read(memory: FastWeightSet, r: Tensor) -> Tensor:
        """softmax(cosine(R, r))^T M for every query row of ``r``."""
        return attend_read(memory.memory, memory.index, r)

    def query_logits(self, P, memory: FastWeightSet, x) -> Tensor:
        r = self.embed_inputs(P, memory.qstar, x)
        wstar = self.base_layout.split(self.attend_read(memory, r))
        inputs = r if self.config.variant.base_input == "repr" else ad.as_tensor(x)
        return self.base_logits(P, inputs, wstar, memory.base_task)

    def predict(self, P, memory: FastWeightSet, x) -> np.ndarray:
        return ad.softmax(self.query_logits(P, memory, x)).data

    def episode_loss(self, P, episode: Episode, rng, meta: dict | None = None):
        """Summed query cross-entropy of one episode and the query logits."""
        memory = self.build_memory(P, episode, rng, meta)
        logits = self.query_logits(P, memory, episode.query_x)
        return ad.sum(ad.cross_entropy(logits, episode.query_y)), logits

    def slow_only_logits(self, P, x) -> Tensor:
        W = self.group(P, "W")
        if self.config.variant.base_input == "repr":
            x = run_layers(self.embed, self.group(P, "Q"), [], ad.as_tensor(x), stop=-1)
        return run_layers(self.base, W, [], ad.as_tensor(x))


def attend_read(M, R, r) -> Tensor:
    M, R, r = ad.as_tensor(M), ad.as_tensor(R), ad.as_tensor(r)
    if M.shape[0] == 0:
        raise ValueError("attention read on an empty memory")
    if r.shape[-1] != R.shape[-1]:
        raise ad.ShapeError(f"query dim {r.shape[-1]} vs index dim {R.shape[-1]}")
    single = r.ndim == 1
    q = ad.reshape(r, (1 if single else r.shape[0], 1, r.shape[-1]))
    keys = ad.reshape(R, (1,) + R.shape)
    weights = ad.softmax(ad.cosine_similarity(q, keys))
    out = ad.matmul(weights, M)
    return ad.reshape(out, (M.shape[1],)) if single else out


def attention_weights(R, r) -> np.ndarray:
    R, r = np.atleast_2d(R), np.atleast_2d(r)
    return ad.softmax(ad.cosine_similarity(r[:, None, :], R[None])).data


def as_constants(params) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}
