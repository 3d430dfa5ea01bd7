"""Chronological few-shot splits and the synthetic interaction generator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .graphstore import EventLog


class SplitError(ValueError):
    pass


@dataclass
class SplitPlan:
    """Event-index sets after chronological sort.

    For link prediction the sets are contiguous ranges. Class-coverage repair
    for node classification may swap individual events between sets.
    """

    pretrain: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    k: int
    task: str
    swaps: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"k": self.k, "task": self.task,
                "pretrain": [int(self.pretrain[0]), int(self.pretrain[-1]) + 1] if self.pretrain.size else [0, 0],
                "train": self.train.tolist(), "val": self.val.tolist(),
                "test_size": int(self.test.size), "swaps": self.swaps}


def pretrain_size(n: int, ratio: float = 0.8) -> int:
    # rational arithmetic so 0.8 * n never rounds below the exact floor
    from fractions import Fraction
    return int(Fraction(str(ratio)) * n)


def make_splits(log: EventLog, k: int = 70, task: str = "link",
                pretrain_ratio: float = 0.8) -> SplitPlan:
    """First ``pretrain_ratio`` of events for pretraining, then K train, K val, rest test."""
    if k < 1:
        raise SplitError("K must be >= 1")
    if task not in ("link", "node"):
        raise SplitError(f"unknown task {task!r}")
    n = len(log)
    p = pretrain_size(n, pretrain_ratio)
    if n < p + 2 * k + 1:
        raise SplitError(f"log has {n} events; needs at least {p + 2 * k + 1} for K={k}")
    pretrain = np.arange(p)
    train = np.arange(p, p + k)
    val = np.arange(p + k, p + 2 * k)
    test = np.arange(p + 2 * k, n)
    plan = SplitPlan(pretrain, train, val, test, k, task)
    if task == "node":
        _repair_class_coverage(log, plan)
    return plan


def _repair_class_coverage(log: EventLog, plan: SplitPlan) -> None:
    labels = log.labels
    post = np.concatenate([plan.train, plan.val, plan.test])
    if np.isnan(labels[post]).any():
        raise SplitError("node classification needs a label on every post-pretraining event")
    classes = np.unique(labels[post])
    if classes.size < 2:
        raise SplitError(f"node classification needs >= 2 classes after the pretraining "
                         f"range; found {classes.tolist()}")
    plan.swaps = {"train": [], "val": []}
    # train first: it may borrow from val or test; val then borrows from test only
    for name, pool_names in (("train", ("val", "test")), ("val", ("test",))):
        members = getattr(plan, name)
        for c in classes:
            if np.any(labels[members] == c):
                continue
            candidates = [(j, pn) for pn in pool_names for j in getattr(plan, pn)
                          if labels[j] == c]
            if not candidates:
                raise SplitError(f"class {c:g} has no event available for the {name} set")
            j, donor = min(candidates)
            counts = {cc: int(np.sum(labels[members] == cc)) for cc in classes}
            over = [i for i in members if counts[labels[i]] > 1]
            if not over:
                raise SplitError(f"K={plan.k} is too small to hold every class")
            victim = max(over)
            members = np.sort(np.append(members[members != victim], j))
            donor_set = getattr(plan, donor)
            setattr(plan, donor, np.sort(np.append(donor_set[donor_set != j], victim)))
            setattr(plan, name, members)
            plan.swaps[name].append({"in": int(j), "out": int(victim)})


def inductive_mask(plan: SplitPlan, log: EventLog) -> np.ndarray:
    """Test event indices with at least one endpoint unseen in pretrain and K-shot sets."""
    seen_idx = np.concatenate([plan.pretrain, plan.train, plan.val])
    seen = np.zeros(log.num_nodes, dtype=bool)
    seen[log.src[seen_idx]] = True
    seen[log.dst[seen_idx]] = True
    test = plan.test
    keep = ~seen[log.src[test]] | ~seen[log.dst[test]]
    return test[keep]


@dataclass
class SyntheticSpec:
    """Planted-preference bipartite interaction stream.

    Items belong to ``num_classes`` classes and each user prefers one class.
    A user's next item is, with probability ``recency_bias``, one of their
    recent items; otherwise it is drawn from the user's affinity row, which puts
    ``affinity`` times more mass on items of the preferred class. Edge features
    are the item-class one-hot plus Gaussian noise. The user's state label is 1
    when most of their last ``label_window`` items belong to class 0. With
    ``preference_shift`` the class preferences are permuted for all events after
    the pretraining boundary.
    """

    num_users: int = 40
    num_items: int = 60
    num_events: int = 2000
    num_classes: int = 6
    affinity: float = 30.0
    recency_bias: float = 0.3
    recency_window: int = 5
    feature_noise: float = 0.1
    popularity_skew: float = 0.0
    preference_shift: bool = False
    shift_ratio: float = 0.8
    label_window: int = 3
    label_noise: float = 0.0
    mean_gap: float = 1.0
    seed: int = 0
    affinity_matrix: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _affinity(spec: SyntheticSpec, item_class: np.ndarray, pref: np.ndarray) -> np.ndarray:
    if spec.affinity_matrix is not None:
        a = np.asarray(spec.affinity_matrix, dtype=np.float64)
        if a.shape != (spec.num_users, spec.num_items) or np.any(a < 0):
            raise ValueError("affinity_matrix must be a non-negative num_users x num_items array")
    else:
        a = np.where(item_class[None, :] == pref[:, None], spec.affinity, 1.0)
        if spec.popularity_skew:
            pop = 1.0 / (1.0 + np.arange(spec.num_items)) ** spec.popularity_skew
            a = a * pop[None, :]
    return a / a.sum(axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> EventLog:
    if spec.num_users < 1 or spec.num_items < 2 or spec.num_events < 1:
        raise ValueError("synthetic spec needs >= 1 user, >= 2 items and >= 1 event")
    rng = np.random.default_rng(spec.seed)
    c = spec.num_classes
    item_class = np.arange(spec.num_items) % c
    pref = rng.integers(0, c, size=spec.num_users)
    probs = _affinity(spec, item_class, pref)
    shifted = probs
    if spec.preference_shift:
        if spec.affinity_matrix is not None:
            # explicit matrix: users swap preference rows (cyclic shift)
            shifted = np.roll(probs, 1, axis=0)
        else:
            perm = np.roll(np.arange(c), 1 + rng.integers(0, c - 1)) if c > 1 else np.arange(1)
            shifted = _affinity(spec, item_class, perm[pref])
    boundary = pretrain_size(spec.num_events, spec.shift_ratio)

    n = spec.num_events
    gaps = rng.exponential(spec.mean_gap, size=n)
    ts = np.cumsum(gaps)
    users = rng.integers(0, spec.num_users, size=n)
    items = np.empty(n, dtype=np.int64)
    labels = np.empty(n)
    history: list[list[int]] = [[] for _ in range(spec.num_users)]
    for k in range(n):
        u = int(users[k])
        hist = history[u]
        recent = hist[-spec.label_window:]
        share0 = np.mean([item_class[i] == 0 for i in recent]) if recent else 0.0
        lab = 1.0 if share0 > 0.5 else 0.0
        if spec.label_noise and rng.random() < spec.label_noise:
            lab = 1.0 - lab
        labels[k] = lab
        row = shifted[u] if k >= boundary else probs[u]
        if hist and rng.random() < spec.recency_bias:
            window = hist[-spec.recency_window:]
            items[k] = window[rng.integers(0, len(window))]
        else:
            items[k] = rng.choice(spec.num_items, p=row)
        hist.append(int(items[k]))

    feats = np.eye(c)[item_class[items]]
    if spec.feature_noise:
        feats = feats + spec.feature_noise * rng.standard_normal(feats.shape)
    num_nodes = spec.num_users + spec.num_items
    return EventLog(users, items + spec.num_users, ts, feats, np.zeros((num_nodes, c)), labels,
                    num_nodes=num_nodes, num_users=spec.num_users)
