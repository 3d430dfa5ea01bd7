"""The pretrained encoder: projections, time encoder and backbone."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import serialize
from .backbone import make_backbone
from .featmatrix import ExpressionMatrix, ProjectionSet, RawFeatures, TimeEncoder, gather_raw, project
from .graphstore import NeighborIndex
from .layers import Module
from .tensor import Tensor


@dataclass
class ModelConfig:
    d: int = 64
    d_T: int = 64
    d_h: int = 64
    max_neighbors: int = 20
    backbone: str = "mixer"
    time_scale: float = 1.0
    token_expansion: float = 0.5
    channel_expansion: float = 4.0

    def __post_init__(self):
        for name in ("d", "d_T", "d_h", "max_neighbors"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")


class TemporalEncoder(Module):
    """Maps (node, time) queries to embeddings; its parameters are the frozen set."""

    def __init__(self, cfg: ModelConfig, d_N: int, d_E: int, seed: int = 0):
        self.cfg = cfg
        self.d_N, self.d_E = d_N, d_E
        rng = np.random.default_rng([seed, 0])
        self.enc = TimeEncoder(cfg.d_T, cfg.time_scale)
        self.proj = ProjectionSet(d_N, d_E, cfg.d_T, cfg.d, rng)
        kwargs = {}
        if cfg.backbone == "mixer":
            kwargs = dict(token_expansion=cfg.token_expansion,
                          channel_expansion=cfg.channel_expansion)
        self.backbone = make_backbone(cfg.backbone, cfg.max_neighbors, 3 * cfg.d, cfg.d_h,
                                      rng, **kwargs)

    def gather(self, index: NeighborIndex, nodes, times) -> RawFeatures:
        return gather_raw(index, nodes, times, self.cfg.max_neighbors, self.cfg.time_scale)

    def expression(self, raw: RawFeatures) -> ExpressionMatrix:
        return project(raw, self.proj, self.enc)

    def embed(self, raw: RawFeatures) -> Tensor:
        z = self.expression(raw)
        return self.backbone(z.values, z.mask)

    def freeze(self) -> None:
        self.set_trainable(False)

    def digests(self) -> dict[str, str]:
        return {k: serialize.tensor_digest(v.data) for k, v in self.named_parameters().items()}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    model: ModelConfig
    d_N: int
    d_E: int
    seed: int = 0
    config: dict = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)
    # non-encoder tensors (prompt.*, head.*) and raw metadata of a loaded file
    extra_tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def build(self) -> TemporalEncoder:
        enc = TemporalEncoder(self.model, self.d_N, self.d_E, self.seed)
        enc.load_state_dict(self.tensors)
        return enc

    @classmethod
    def from_encoder(cls, encoder: TemporalEncoder, seed: int = 0, config: dict | None = None,
                     loss_history=None) -> "Checkpoint":
        return cls(encoder.state_dict(), encoder.cfg, encoder.d_N, encoder.d_E, seed,
                   dict(config or {}), list(loss_history or []))

    def metadata(self) -> dict:
        return {"kind": "pretrain", "model": asdict(self.model), "d_N": self.d_N,
                "d_E": self.d_E, "seed": self.seed, "config": self.config,
                "loss_history": self.loss_history}

    def save(self, path, extra_tensors: dict[str, np.ndarray] | None = None,
             extra_meta: dict | None = None) -> None:
        tensors = dict(self.tensors)
        tensors.update(extra_tensors or {})
        meta = self.metadata()
        meta.update(extra_meta or {})
        serialize.save(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, meta = serialize.load(path)
        phi = {k: v for k, v in tensors.items() if k.startswith(("proj.", "backbone."))}
        return cls(phi, ModelConfig(**meta["model"]), meta["d_N"], meta["d_E"],
                   meta.get("seed", 0), meta.get("config", {}), meta.get("loss_history", []),
                   {k: v for k, v in tensors.items() if k not in phi}, meta)
