"""Few-shot adaptation with a frozen encoder, learnable prompts and a task head."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .featmatrix import RawFeatures
from .graphstore import EventLog, NeighborIndex, build_index
from .layers import MLP, Module
from .metrics import auc_roc, average_precision
from .model import Checkpoint, TemporalEncoder
from .pretrain import negative_universe, sample_negatives
from .prompts import PROMPT_KINDS, PromptParams, prompted_embed
from .protocol import SplitPlan, inductive_mask
from .tensor import Tensor

log_ = logging.getLogger(__name__)

DEFAULT_LR = {"link": 1e-4, "node": 1e-3}


@dataclass
class FinetuneConfig:
    task: str = "link"
    k: int = 70
    learning_rate: float | None = None
    patience: int = 20
    max_epochs: int = 200
    reg: float = 1e-4
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.1
    disable_temporal: bool = False
    disable_edge: bool = False
    disable_feature: bool = False
    head_hidden: int = 80
    bottleneck: int | None = None
    temporal_bias_input: str = "time"
    batch_size: int | None = None
    inductive: bool = False
    negatives: str = "destination"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        if self.task not in ("link", "node"):
            raise ValueError(f"finetune.task must be 'link' or 'node', got {self.task!r}")
        if self.k < 1:
            raise ValueError("finetune.k must be >= 1")
        if self.patience < 1:
            raise ValueError("finetune.patience must be >= 1")
        if self.reg < 0:
            raise ValueError("finetune.reg must be >= 0")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("finetune.alpha/beta/gamma must be >= 0")

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[self.task]

    @property
    def disabled(self) -> frozenset[str]:
        flags = {"temporal": self.disable_temporal, "edge": self.disable_edge,
                 "feature": self.disable_feature}
        return frozenset(k for k, v in flags.items() if v)


class TaskHead(Module):
    """Two-layer perceptron producing one logit per example."""

    def __init__(self, task: str, d_h: int, hidden: int, rng: np.random.Generator):
        self.task = task
        self.mlp = MLP(2 * d_h if task == "link" else d_h, hidden, 1, rng)

    def forward(self, h_u: Tensor, h_v: Tensor | None = None) -> Tensor:
        x = h_u if h_v is None else T.concat([h_u, h_v], axis=-1)
        out = self.mlp(x)
        return T.reshape(out, out.shape[:-1])


def _reg(omega: Sequence[Tensor], lam: float) -> Tensor | None:
    if lam == 0 or not omega:
        return None
    total = T.l2_norm_sq(omega[0])
    for p in omega[1:]:
        total = T.add(total, T.l2_norm_sq(p))
    return T.mul(total, lam)


def link_loss(logit_pos, logit_neg, omega: Sequence[Tensor] = (), lam: float = 0.0) -> Tensor:
    """Per-pair BCE (positive labelled 1, negative 0), averaged over pairs, plus ``lam*||omega||^2``."""
    pos = T.bce_with_logits(logit_pos, 1.0)
    neg = T.bce_with_logits(logit_neg, 0.0)
    loss = T.mean(T.add(pos, neg))
    reg = _reg(list(omega), lam)
    return loss if reg is None else T.add(loss, reg)


def node_loss(logit, label, omega: Sequence[Tensor] = (), lam: float = 0.0) -> Tensor:
    loss = T.mean(T.bce_with_logits(logit, label))
    reg = _reg(list(omega), lam)
    return loss if reg is None else T.add(loss, reg)


class EarlyStopper:
    """Stops after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, metric: float, epoch: int) -> tuple[bool, bool]:
        """Returns ``(improved, should_stop)``."""
        if metric > self.best:
            self.best, self.best_epoch, self.bad_epochs = metric, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


@dataclass
class FinetuneResult:
    seed: int
    metrics: dict
    per_epoch_validation: list[float]
    best_epoch: int
    epochs_run: int
    prompt: PromptParams | None
    head: TaskHead
    phi_digest_before: dict
    phi_digest_after: dict
    phi_grad_entries: int = 0

    def summary(self) -> dict:
        return {"seed": self.seed, **self.metrics, "best_epoch": self.best_epoch,
                "epochs_run": self.epochs_run,
                "per_epoch_validation": self.per_epoch_validation}

    def tuned_tensors(self) -> dict[str, np.ndarray]:
        out = self.head.state_dict("head.")
        if self.prompt is not None:
            out.update(self.prompt.state_dict("prompt."))
        return out


class PromptedModel:
    """Frozen encoder + prompts + head; computes logits for query groups."""

    def __init__(self, encoder: TemporalEncoder, prompt: PromptParams | None, head: TaskHead,
                 disabled: frozenset[str]):
        self.encoder, self.prompt, self.head, self.disabled = encoder, prompt, head, disabled

    def embed(self, raw: RawFeatures) -> Tensor:
        with T.no_grad():
            z = self.encoder.expression(raw)
        return prompted_embed(z, self.prompt, self.encoder, self.disabled)

    def link_logits(self, src: RawFeatures, dst: RawFeatures, neg: RawFeatures):
        b = len(src)
        h = self.embed(RawFeatures.cat([src, dst, neg]))
        hu, hv, hn = h[:b], h[b:2 * b], h[2 * b:]
        return self.head(hu, hv), self.head(hu, hn)

    def node_logits(self, src: RawFeatures) -> Tensor:
        return self.head(self.embed(src))


def _chunks(n: int, size: int | None):
    size = size or n
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def build_tuned(ckpt: Checkpoint, cfg: FinetuneConfig, seed: int):
    """Frozen encoder plus freshly initialised prompt and head for ``seed``.

    Disabled or zero-weight prompt kinds get ``requires_grad=False``. If the
    checkpoint carries ``prompt.*``/``head.*`` tensors they are loaded.
    """
    encoder = ckpt.build()
    encoder.freeze()
    disabled = cfg.disabled
    prompt = None
    if len(disabled) < len(PROMPT_KINDS):
        prompt = PromptParams(encoder.cfg.d, 3 * encoder.cfg.d, np.random.default_rng([seed, 10]),
                              cfg.bottleneck, cfg.alpha, cfg.beta, cfg.gamma,
                              cfg.temporal_bias_input)
        for kind in PROMPT_KINDS:
            active = kind not in disabled and prompt.weight(kind) != 0
            for p in prompt.kind_parameters(kind):
                p.requires_grad = active
    head = TaskHead(cfg.task, encoder.cfg.d_h, cfg.head_hidden, np.random.default_rng([seed, 11]))
    extra = ckpt.extra_tensors
    if any(k.startswith("head.") for k in extra):
        head.load_state_dict(extra, "head.")
        if prompt is not None:
            prompt.load_state_dict(extra, "prompt.")
    return encoder, prompt, head


class _EvalSets:
    """Validation and test queries, with negatives fixed per seed."""

    def __init__(self, encoder: TemporalEncoder, index: NeighborIndex, log: EventLog,
                 plan: SplitPlan, cfg: FinetuneConfig, seed: int):
        self.encoder, self.index, self.log, self.task = encoder, index, log, cfg.task
        test_idx = inductive_mask(plan, log) if cfg.inductive else plan.test
        if test_idx.size == 0:
            raise ValueError("test set is empty (no inductive events?)")
        self.test_idx = test_idx
        rng = np.random.default_rng([seed, 13])
        universe = negative_universe(log, cfg.negatives)
        self.va_src = self.queries(plan.val, log.src[plan.val])
        self.te_src = self.queries(test_idx, log.src[test_idx])
        if cfg.task == "link":
            self.va_dst = self.queries(plan.val, log.dst[plan.val])
            self.va_neg = self.queries(plan.val, sample_negatives(universe, log.dst[plan.val], rng))
            self.te_dst = self.queries(test_idx, log.dst[test_idx])
            self.te_neg = self.queries(test_idx, sample_negatives(universe, log.dst[test_idx], rng))
        else:
            self.va_y, self.te_y = log.labels[plan.val], log.labels[test_idx]

    def queries(self, idx, nodes) -> RawFeatures:
        return self.encoder.gather(self.index, nodes, self.log.timestamps[idx])

    @staticmethod
    def _score_link(model, src, dst, neg, batch):
        pos_s, neg_s = [], []
        with T.no_grad():
            for sl in _chunks(len(src), batch):
                lp, ln = model.link_logits(src.take(sl), dst.take(sl), neg.take(sl))
                pos_s.append(lp.data)
                neg_s.append(ln.data)
        s = np.concatenate(pos_s + neg_s)
        y = np.concatenate([np.ones(len(src)), np.zeros(len(src))])
        return s, y

    @staticmethod
    def _score_node(model, src, batch):
        with T.no_grad():
            return np.concatenate([model.node_logits(src.take(sl)).data
                                   for sl in _chunks(len(src), batch)])

    def validation_metric(self, model, batch: int) -> float:
        if self.task == "link":
            return average_precision(*self._score_link(model, self.va_src, self.va_dst,
                                                       self.va_neg, batch))
        return auc_roc(self._score_node(model, self.va_src, batch), self.va_y)

    def test_metrics(self, model, batch: int) -> dict:
        if self.task == "link":
            s, y = self._score_link(model, self.te_src, self.te_dst, self.te_neg, batch)
            return {"ap": average_precision(s, y), "auc": auc_roc(s, y)}
        return {"auc": auc_roc(self._score_node(model, self.te_src, batch), self.te_y)}


def evaluate_tuned(ckpt: Checkpoint, log: EventLog, plan: SplitPlan, cfg: FinetuneConfig,
                   seed: int = 0, index: NeighborIndex | None = None,
                   eval_batch: int = 1024) -> dict:
    """Test metrics of a fine-tuned checkpoint (one carrying ``prompt.*`` and ``head.*``)."""
    if not any(k.startswith("head.") for k in ckpt.extra_tensors):
        raise ValueError("checkpoint has no fine-tuned head tensors")
    index = index or build_index(log)
    encoder, prompt, head = build_tuned(ckpt, cfg, seed)
    model = PromptedModel(encoder, prompt, head, cfg.disabled)
    return _EvalSets(encoder, index, log, plan, cfg, seed).test_metrics(model, eval_batch)


def finetune_run(ckpt: Checkpoint, log: EventLog, plan: SplitPlan, cfg: FinetuneConfig,
                 seed: int = 0, index: NeighborIndex | None = None,
                 validation_hook: Callable[[int, float], float] | None = None,
                 eval_batch: int = 1024) -> FinetuneResult:
    """Tune prompts and head on the K-shot set, early-stop on validation, test the best state.

    ``validation_hook(epoch, metric)`` may replace the validation metric (used
    to script validation sequences in tests).
    """
    if plan.task != cfg.task:
        raise ValueError(f"split plan is for task {plan.task!r}, config asks for {cfg.task!r}")
    index = index or build_index(log)
    encoder, prompt, head = build_tuned(ckpt, cfg, seed)
    phi = {id(p) for p in encoder.parameters()}
    digest_before = encoder.digests()
    disabled = cfg.disabled
    neg_rng = np.random.default_rng([seed, 12])

    trainable = head.parameters()
    omega: list[Tensor] = []
    if prompt is not None:
        for kind in PROMPT_KINDS:
            if prompt.kind_parameters(kind)[0].requires_grad:
                trainable += prompt.kind_parameters(kind)
        if "feature" not in disabled and prompt.gamma != 0:
            omega = prompt.omega_parameters()
    opt = T.Adam(trainable, lr=cfg.lr)
    model = PromptedModel(encoder, prompt, head, disabled)

    universe = negative_universe(log, cfg.negatives)
    ev = _EvalSets(encoder, index, log, plan, cfg, seed)
    tr_src = ev.queries(plan.train, log.src[plan.train])
    if cfg.task == "link":
        tr_dst = ev.queries(plan.train, log.dst[plan.train])
    else:
        tr_y = log.labels[plan.train]

    stopper = EarlyStopper(cfg.patience)
    history: list[float] = []
    best_state = {k: v.data.copy() for k, v in enumerate(trainable)}
    phi_grad_entries = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.task == "link":
            tr_neg = ev.queries(plan.train, sample_negatives(universe, log.dst[plan.train], neg_rng))
        for sl in _chunks(len(tr_src), cfg.batch_size):
            with T.Tape():
                if cfg.task == "link":
                    lp, ln = model.link_logits(tr_src.take(sl), tr_dst.take(sl), tr_neg.take(sl))
                    loss = link_loss(lp, ln, omega, cfg.reg)
                else:
                    loss = node_loss(model.node_logits(tr_src.take(sl)), tr_y[sl], omega, cfg.reg)
                grads = T.backward(loss)
            phi_grad_entries += sum(1 for p in grads if id(p) in phi)
            opt.step()
            opt.zero_grad()
        if phi_grad_entries:
            raise RuntimeError("frozen encoder parameters received gradients")

        metric = ev.validation_metric(model, eval_batch)
        if validation_hook is not None:
            metric = validation_hook(epoch, metric)
        history.append(float(metric))
        improved, stop = stopper.update(metric, epoch)
        if improved:
            best_state = {k: v.data.copy() for k, v in enumerate(trainable)}
        log_.debug("seed %d epoch %d val %.5f", seed, epoch, metric)
        if stop:
            break

    for k, p in enumerate(trainable):
        p.data[...] = best_state[k]

    metrics = ev.test_metrics(model, eval_batch)
    digest_after = encoder.digests()
    if digest_after != digest_before:
        raise RuntimeError("frozen encoder parameters changed during fine-tuning")
    return FinetuneResult(seed, metrics, history, stopper.best_epoch, epoch, prompt, head,
                          digest_before, digest_after, phi_grad_entries)


def aggregate(results: Sequence[FinetuneResult], cfg: FinetuneConfig, dataset: str = "") -> dict:
    """Report with per-seed values and their mean and (population) std."""
    report = {"task": cfg.task, "dataset": dataset, "seeds": [r.seed for r in results],
              "per_seed": [r.summary() for r in results], "config": asdict(cfg)}
    keys = ["ap", "auc"] if cfg.task == "link" else ["auc"]
    for key in keys:
        vals = np.array([r.metrics[key] for r in results])
        report[key] = float(vals.mean())
        report[f"{key}_std"] = float(vals.std())
    report["per_epoch_validation"] = [r.per_epoch_validation for r in results]
    return report


def finetune_seeds(ckpts: Checkpoint | Callable[[int], Checkpoint], log: EventLog,
                   plan: SplitPlan, cfg: FinetuneConfig, dataset: str = "",
                   index: NeighborIndex | None = None) -> tuple[dict, list[FinetuneResult]]:
    index = index or build_index(log)
    results = []
    for seed in cfg.seeds:
        ckpt = ckpts(seed) if callable(ckpts) else ckpts
        results.append(finetune_run(ckpt, log, plan, cfg, seed, index))
    return aggregate(results, cfg, dataset), results
