"""Append-only interaction log and most-recent-neighbor index."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

DEFAULT_MAX_NEIGHBORS = 20


@dataclass(frozen=True)
class Event:
    src: int
    dst: int
    timestamp: float
    edge_feat: np.ndarray
    label: float | None = None


class EventLog:
    """Time-ordered interaction stream stored column-wise.

    ``labels`` holds NaN where an event carries no state label.
    ``unsorted_count`` records how many input rows arrived out of time order
    (they are stably re-sorted on construction).
    """

    def __init__(self, src, dst, timestamps, edge_feats, node_feats=None,
                 labels=None, num_nodes: int | None = None, sort: bool = True,
                 num_users: int | None = None):
        src = np.asarray(src, dtype=np.int64).reshape(-1)
        dst = np.asarray(dst, dtype=np.int64).reshape(-1)
        ts = np.asarray(timestamps, dtype=np.float64).reshape(-1)
        n = src.shape[0]
        edge_feats = np.asarray(edge_feats, dtype=np.float64)
        if edge_feats.ndim == 1 and n == 0:
            edge_feats = edge_feats.reshape(0, 0)
        if dst.shape[0] != n or ts.shape[0] != n or edge_feats.shape[0] != n:
            raise ValueError("src, dst, timestamps and edge_feats must have equal length")
        if edge_feats.ndim != 2:
            raise ValueError("edge_feats must be a 2-D array (events x d_E)")
        if labels is None:
            labels = np.full(n, np.nan)
        labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        if labels.shape[0] != n:
            raise ValueError("labels must have one entry per event")
        if n and (ts.min() < 0 or not np.all(np.isfinite(ts))):
            raise ValueError("timestamps must be finite and non-negative")
        if n and min(src.min(), dst.min()) < 0:
            raise ValueError("node ids must be non-negative")

        max_id = int(max(src.max(), dst.max())) + 1 if n else 0
        if node_feats is not None:
            node_feats = np.asarray(node_feats, dtype=np.float64)
            if node_feats.ndim != 2:
                raise ValueError("node_feats must be a 2-D array (nodes x d_N)")
        if num_nodes is None:
            num_nodes = max(max_id, 0 if node_feats is None else node_feats.shape[0])
        if max_id > num_nodes:
            raise ValueError(f"event references node {max_id - 1} but num_nodes={num_nodes}")
        if node_feats is None:
            node_feats = np.zeros((num_nodes, edge_feats.shape[1]))
        if node_feats.shape[0] != num_nodes:
            raise ValueError("node_feats must have one row per node")

        self.unsorted_count = int(np.count_nonzero(np.diff(ts) < 0)) if n > 1 else 0
        if sort and self.unsorted_count:
            order = np.argsort(ts, kind="stable")
            src, dst, ts = src[order], dst[order], ts[order]
            edge_feats, labels = edge_feats[order], labels[order]
        elif self.unsorted_count:
            raise ValueError("events are not sorted by timestamp")

        self.src, self.dst, self.timestamps = src, dst, ts
        self.edge_feats = edge_feats
        self.labels = labels
        self.node_feats = node_feats
        self.num_nodes = int(num_nodes)
        # bipartite logs: ids < num_users are sources, the rest destinations
        self.num_users = num_users

    @property
    def d_E(self) -> int:
        return self.edge_feats.shape[1]

    @property
    def d_N(self) -> int:
        return self.node_feats.shape[1]

    def __len__(self) -> int:
        return self.src.shape[0]

    def event(self, i: int) -> Event:
        lab = self.labels[i]
        return Event(int(self.src[i]), int(self.dst[i]), float(self.timestamps[i]),
                     self.edge_feats[i], None if np.isnan(lab) else float(lab))

    def __iter__(self) -> Iterator[Event]:
        return (self.event(i) for i in range(len(self)))

    def subset(self, mask_or_idx) -> "EventLog":
        """Events selected by a boolean mask or index array; node-id space kept."""
        idx = np.asarray(mask_or_idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = np.sort(idx)
        return EventLog(self.src[idx], self.dst[idx], self.timestamps[idx],
                        self.edge_feats[idx], self.node_feats, self.labels[idx],
                        num_nodes=self.num_nodes, num_users=self.num_users)

    def equals(self, other: "EventLog") -> bool:
        return (self.num_nodes == other.num_nodes
                and self.num_users == other.num_users
                and np.array_equal(self.src, other.src)
                and np.array_equal(self.dst, other.dst)
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.edge_feats, other.edge_feats)
                and np.array_equal(self.node_feats, other.node_feats)
                and np.array_equal(self.labels, other.labels, equal_nan=True))


@dataclass
class NeighborSequence:
    anchor: int
    query_time: float
    neighbor_ids: np.ndarray
    edge_ids: np.ndarray
    edge_feats: np.ndarray
    timestamps: np.ndarray

    @property
    def length(self) -> int:
        return int(self.neighbor_ids.shape[0])


class NeighborIndex:
    """Per-node adjacency in CSR form, each segment ordered oldest first.

    Every event (u, v, t) is indexed under both u and v; a self-loop (u, u, t)
    is indexed once. Equal timestamps keep event-log order, so the earlier
    event counts as older.
    """

    def __init__(self, log: EventLog):
        n = len(log)
        back = np.flatnonzero(log.src != log.dst)
        owners = np.concatenate([log.src, log.dst[back]])
        others = np.concatenate([log.dst, log.src[back]])
        eids = np.concatenate([np.arange(n), back])
        order = np.lexsort((eids, owners))
        self.log = log
        self.neighbors = others[order]
        self.edge_ids = eids[order]
        self.times = log.timestamps[self.edge_ids]
        counts = np.bincount(owners, minlength=log.num_nodes)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @property
    def num_nodes(self) -> int:
        return self.log.num_nodes

    def degree(self, u: int) -> int:
        return int(self.indptr[u + 1] - self.indptr[u])

    def adjacency(self, u: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lo, hi = self.indptr[u], self.indptr[u + 1]
        return self.neighbors[lo:hi], self.edge_ids[lo:hi], self.times[lo:hi]

    def _window(self, u: int, t: float, max_neighbors: int) -> tuple[int, int]:
        lo, hi = int(self.indptr[u]), int(self.indptr[u + 1])
        end = lo + int(np.searchsorted(self.times[lo:hi], t, side="left"))
        return max(lo, end - max_neighbors), end

    def gather(self, nodes, times, max_neighbors: int):
        """Padded most-recent-neighbor windows for a batch of (node, time) queries.

        Returns ``(neighbor_ids, edge_ids, neighbor_times, mask)``, each of
        shape (batch, max_neighbors). Valid rows come first, oldest first;
        padding rows hold id 0, time equal to the query time and mask False.
        """
        nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
        times = np.asarray(times, dtype=np.float64).reshape(-1)
        b = nodes.shape[0]
        nbr = np.zeros((b, max_neighbors), dtype=np.int64)
        eid = np.zeros((b, max_neighbors), dtype=np.int64)
        ts = np.repeat(times[:, None], max_neighbors, axis=1)
        mask = np.zeros((b, max_neighbors), dtype=bool)
        for i in range(b):
            start, end = self._window(int(nodes[i]), float(times[i]), max_neighbors)
            k = end - start
            if k:
                nbr[i, :k] = self.neighbors[start:end]
                eid[i, :k] = self.edge_ids[start:end]
                ts[i, :k] = self.times[start:end]
                mask[i, :k] = True
        return nbr, eid, ts, mask


def build_index(log: EventLog) -> NeighborIndex:
    return NeighborIndex(log)


def recent_neighbors(index: NeighborIndex, u: int, t: float,
                     max_neighbors: int = DEFAULT_MAX_NEIGHBORS) -> NeighborSequence:
    """The latest ``max_neighbors`` interactions of ``u`` strictly before ``t``."""
    if not 0 <= u < index.num_nodes:
        raise IndexError(f"node {u} outside [0, {index.num_nodes})")
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    start, end = index._window(u, t, max_neighbors)
    eids = index.edge_ids[start:end]
    return NeighborSequence(anchor=u, query_time=float(t),
                            neighbor_ids=index.neighbors[start:end].copy(),
                            edge_ids=eids.copy(),
                            edge_feats=index.log.edge_feats[eids],
                            timestamps=index.times[start:end].copy())
