"""Node expression feature matrices.

For a query (u, t) the matrix has one row per recent interaction of u, each
row being ``[proj(neighbor feat) | proj(edge feat) | proj(cos(dt * w + phi))]``.
Rows are oldest first and zero-padded up to ``max_neighbors``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graphstore import NeighborIndex
from .layers import Linear, Module
from .tensor import Tensor


class TimeEncoder:
    """Fixed cosine encoding with log-spaced frequencies ``1 / 10000**(i/d_T)``."""

    def __init__(self, d_T: int, time_scale: float = 1.0, trainable: bool = False):
        if trainable:
            raise NotImplementedError("only the fixed-frequency encoder is supported")
        if time_scale <= 0:
            raise ValueError("time_scale must be positive")
        self.d_T = d_T
        self.time_scale = float(time_scale)
        self.omega = 1.0 / 10000.0 ** (np.arange(d_T) / d_T)
        self.phase = np.zeros(d_T)
        self.trainable = False

    def encode(self, dt) -> np.ndarray:
        dt = np.asarray(dt, dtype=np.float64)
        if np.any(dt < 0):
            raise ValueError("encode_time: time intervals must be non-negative")
        return np.cos(dt[..., None] * self.omega + self.phase)

    def encode_tensor(self, dt: Tensor) -> Tensor:
        """Differentiable encoding of a (..., n) tensor of intervals."""
        if np.any(dt.data < 0):
            raise ValueError("encode_time: time intervals must be non-negative")
        x = T.reshape(dt, dt.shape + (1,))
        return T.cos(T.add(T.mul(x, self.omega), self.phase))


def encode_time(enc: TimeEncoder, dt) -> np.ndarray:
    return enc.encode(dt)


class ProjectionSet(Module):
    """Affine projections of neighbor, edge and time features to width ``d``."""

    def __init__(self, d_N: int, d_E: int, d_T: int, d: int, rng: np.random.Generator):
        self.d = d
        self.neigh = Linear(d_N, d, rng)
        self.edge = Linear(d_E, d, rng)
        self.time = Linear(d_T, d, rng)


@dataclass
class RawFeatures:
    """Gathered, unprojected inputs for a batch of queries."""

    nodes: np.ndarray        # (B,)
    times: np.ndarray        # (B,)
    neigh_feats: np.ndarray  # (B, N, d_N)
    edge_feats: np.ndarray   # (B, N, d_E)
    dt: np.ndarray           # (B, N), in time-scale units, 0 on padding
    mask: np.ndarray         # (B, N) bool
    neighbor_ids: np.ndarray
    edge_ids: np.ndarray

    def __len__(self) -> int:
        return self.nodes.shape[0]

    def take(self, idx) -> "RawFeatures":
        return RawFeatures(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @staticmethod
    def cat(parts: list["RawFeatures"]) -> "RawFeatures":
        return RawFeatures(*(np.concatenate([getattr(p, f) for p in parts])
                             for f in RawFeatures.__dataclass_fields__))


def gather_raw(index: NeighborIndex, nodes, times, max_neighbors: int,
               time_scale: float = 1.0) -> RawFeatures:
    nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    nbr, eid, ts, mask = index.gather(nodes, times, max_neighbors)
    log = index.log
    m = mask[..., None]
    neigh = np.where(m, log.node_feats[nbr], 0.0)
    edge = np.where(m, log.edge_feats[eid], 0.0)
    dt = np.where(mask, (times[:, None] - ts) / time_scale, 0.0)
    return RawFeatures(nodes, times, neigh, edge, dt, mask, nbr, eid)


@dataclass
class ExpressionMatrix:
    """Projected feature matrix for one query (N, W) or a batch (B, N, W)."""

    values: Tensor
    mask: np.ndarray
    raw_dt: np.ndarray
    neigh: Tensor
    edge: Tensor
    time: Tensor
    extra: Tensor | None = None

    @property
    def d(self) -> int:
        return self.neigh.shape[-1]

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    def detach(self) -> "ExpressionMatrix":
        return ExpressionMatrix(self.values.detach(), self.mask, self.raw_dt,
                                self.neigh.detach(), self.edge.detach(), self.time.detach(),
                                None if self.extra is None else self.extra.detach())


def project(raw: RawFeatures, proj: ProjectionSet, enc: TimeEncoder,
            extra: Tensor | None = None) -> ExpressionMatrix:
    """Project gathered features and concatenate the blocks; padding rows are zero."""
    m = raw.mask[..., None].astype(np.float64)
    z_neigh = T.mul(proj.neigh(raw.neigh_feats), m)
    z_edge = T.mul(proj.edge(raw.edge_feats), m)
    z_time = T.mul(proj.time(enc.encode(raw.dt)), m)
    blocks = [z_neigh, z_edge, z_time]
    if extra is not None:
        extra = T.mul(extra, m)
        blocks.append(extra)
    return ExpressionMatrix(T.concat(blocks, axis=-1), raw.mask, raw.dt,
                            z_neigh, z_edge, z_time, extra)


def assemble(index: NeighborIndex, proj: ProjectionSet, enc: TimeEncoder, u: int, t: float,
             max_neighbors: int, extra: Tensor | None = None) -> ExpressionMatrix:
    """Expression matrix (max_neighbors x 3d) of node ``u`` at time ``t``.

    ``extra`` is an optional (max_neighbors x d_add) block appended column-wise.
    """
    raw = gather_raw(index, [u], [t], max_neighbors, enc.time_scale)
    if extra is not None:
        extra = T.reshape(extra, (1,) + extra.shape)
    return _squeeze(project(raw, proj, enc, extra))


def _squeeze(z: ExpressionMatrix) -> ExpressionMatrix:
    def sq(t):
        return None if t is None else T.reshape(t, t.shape[1:])
    return ExpressionMatrix(sq(z.values), z.mask[0], z.raw_dt[0], sq(z.neigh), sq(z.edge),
                            sq(z.time), sq(z.extra))
