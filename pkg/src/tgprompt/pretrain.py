"""Self-supervised contrastive pretraining of the temporal encoder."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .graphstore import EventLog, NeighborIndex, build_index
from .model import Checkpoint, ModelConfig, TemporalEncoder
from .tensor import Tensor

log_ = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    temperature: float = 0.2
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 200
    seed: int = 0
    negatives: str = "destination"  # or "all"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("pretrain.temperature must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("pretrain.epochs and pretrain.batch_size must be >= 1")
        if self.negatives not in ("destination", "all"):
            raise ValueError(f"pretrain.negatives must be 'destination' or 'all', got {self.negatives!r}")


def negative_universe(log: EventLog, mode: str = "destination") -> np.ndarray:
    """Sorted candidate ids for negative destinations."""
    if mode == "all":
        return np.arange(log.num_nodes)
    return np.unique(log.dst)


def sample_negatives(universe: np.ndarray, positives, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw from ``universe`` per positive, never equal to that positive."""
    positives = np.asarray(positives, dtype=np.int64).reshape(-1)
    m = universe.shape[0]
    if m < 2:
        raise ValueError("negative sampling needs at least two candidate nodes")
    pos = np.searchsorted(universe, positives)
    present = (pos < m) & (universe[np.minimum(pos, m - 1)] == positives)
    out = np.empty_like(positives)
    if present.any():
        r = rng.integers(0, m - 1, size=int(present.sum()))
        r = r + (r >= pos[present])
        out[present] = universe[r]
    if (~present).any():
        out[~present] = universe[rng.integers(0, m, size=int((~present).sum()))]
    return out


def sample_negative(universe: np.ndarray, v: int, rng: np.random.Generator) -> int:
    return int(sample_negatives(universe, [v], rng)[0])


def contrastive_loss(h_u, h_v, h_neg, temperature: float) -> Tensor:
    """Mean over rows of ``-log softmax`` of the positive vs negative cosine similarity."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    s_pos = T.mul(T.cosine_similarity(h_u, h_v), 1.0 / temperature)
    s_neg = T.mul(T.cosine_similarity(h_u, h_neg), 1.0 / temperature)
    return T.neg(T.mean(T.log_softmax_pairwise(s_pos, s_neg)))


def pretrain_run(log: EventLog, event_idx, model_cfg: ModelConfig, cfg: PretrainConfig,
                 index: NeighborIndex | None = None,
                 on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train the encoder on the events ``event_idx`` (chronological batches).

    Negatives are resampled every epoch. The returned checkpoint holds the
    parameters of the epoch with the lowest mean loss.
    """
    event_idx = np.asarray(event_idx, dtype=np.int64)
    if event_idx.size == 0:
        raise ValueError("pretraining split is empty")
    index = index or build_index(log)
    enc = TemporalEncoder(model_cfg, log.d_N, log.d_E, cfg.seed)
    opt = T.Adam(enc.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 1])
    universe = negative_universe(log, cfg.negatives)
    src, dst = log.src[event_idx], log.dst[event_idx]
    ts = log.timestamps[event_idx]
    n = event_idx.size

    history: list[float] = []
    best_loss, best_state = np.inf, None
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        negs = sample_negatives(universe, dst, rng)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            hi = min(lo + cfg.batch_size, n)
            b = hi - lo
            nodes = np.concatenate([src[lo:hi], dst[lo:hi], negs[lo:hi]])
            times = np.tile(ts[lo:hi], 3)
            raw = enc.gather(index, nodes, times)
            with T.Tape():
                h = enc.embed(raw)
                loss = contrastive_loss(h[:b], h[b:2 * b], h[2 * b:], cfg.temperature)
                T.backward(loss)
            opt.step()
            opt.zero_grad()
            total += float(loss.data) * b
        epoch_loss = total / n
        history.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss, best_state = epoch_loss, enc.state_dict()
        record = {"epoch": epoch + 1, "loss": epoch_loss,
                  "wall_time": time.perf_counter() - t0}
        log_.info("pretrain epoch %d loss %.6f", epoch + 1, epoch_loss)
        if on_epoch is not None:
            on_epoch(record)

    enc.load_state_dict(best_state)
    return Checkpoint.from_encoder(enc, cfg.seed,
                                   {"pretrain": asdict(cfg), "model": asdict(model_cfg)},
                                   history)
