"""Episodic task sampling with episode-local labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import LabeledImageSet


class EpisodeError(ValueError):
    pass


@dataclass
class Episode:
    support_x: np.ndarray       # (way * shots, H, W), grouped by local label
    support_y: np.ndarray
    query_x: np.ndarray         # (L, H, W)
    query_y: np.ndarray
    class_map: np.ndarray       # local label -> dataset class id
    support_idx: np.ndarray
    query_idx: np.ndarray

    @property
    def way(self) -> int:
        return len(self.class_map)

    @property
    def shots(self) -> int:
        return len(self.support_y) // self.way


@dataclass(frozen=True)
class TrialPlan:
    trial_count: int = 400
    way: int = 5
    shots: int = 1
    queries: int = 75
    seed: int = 0
    partition: str = "test"

    def __post_init__(self):
        if self.trial_count < 1:
            raise EpisodeError("trial_count must be >= 1")
        if self.way < 2:
            raise EpisodeError("way must be >= 2")
        if self.shots < 1 or self.queries < 1:
            raise EpisodeError("shots and queries must be >= 1")


def sample_episode(dataset: LabeledImageSet, plan: TrialPlan, rng: np.random.Generator) -> Episode:
    """Draw ``plan.way`` classes, shuffle their local labels, and split each class's
    examples into support and query. Queries are spread evenly over classes; the
    remainder goes to randomly chosen classes."""
    way, shots, L = plan.way, plan.shots, plan.queries
    if dataset.class_count < way:
        raise EpisodeError(f"{way}-way episode needs {way} classes, pool has {dataset.class_count}")
    per_q, extra_n = divmod(L, way)
    need = shots + per_q + (1 if extra_n else 0)
    smallest = min(len(dataset.members(c)) for c in range(dataset.class_count))
    if smallest < need:
        raise EpisodeError(f"episode needs {need} examples per class, smallest class has {smallest}")

    chosen = rng.choice(dataset.class_count, size=way, replace=False)
    class_map = np.empty(way, dtype=np.int64)
    class_map[rng.permutation(way)] = chosen
    extra = np.zeros(way, dtype=bool)
    extra[rng.choice(way, size=extra_n, replace=False)] = True

    s_idx, q_idx, q_lab = [], [], []
    for local, cls in enumerate(class_map):
        q = per_q + int(extra[local])
        picked = rng.choice(dataset.members(cls), size=shots + q, replace=False)
        s_idx.append(picked[:shots])
        q_idx.append(picked[shots:])
        q_lab.append(np.full(q, local))
    s_idx = np.concatenate(s_idx)
    order = rng.permutation(L)
    q_idx = np.concatenate(q_idx)[order]
    q_lab = np.concatenate(q_lab)[order]
    return Episode(
        support_x=dataset.images[s_idx],
        support_y=np.repeat(np.arange(way), shots),
        query_x=dataset.images[q_idx],
        query_y=q_lab,
        class_map=class_map,
        support_idx=s_idx,
        query_idx=q_idx,
    )


def make_trials(dataset: LabeledImageSet, plan: TrialPlan) -> list[Episode]:
    if dataset.partition != plan.partition:
        raise EpisodeError(f"plan draws from {plan.partition!r}, dataset is {dataset.partition!r}")
    rng = np.random.default_rng(plan.seed)
    return [sample_episode(dataset, plan, rng) for _ in range(plan.trial_count)]
