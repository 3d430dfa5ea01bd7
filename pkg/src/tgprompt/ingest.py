"""JODIE-format interaction CSVs and the sparse-interaction filter."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graphstore import EventLog


class ParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


@dataclass
class RawDatasetSpec:
    """How to read one JODIE CSV.

    ``d_E`` is the declared edge-feature width (``None`` infers it from the
    first data row). ``d_E == 0`` means the file carries no features and every
    edge gets a zero vector of ``zero_feat_width`` entries.
    """

    path: str | Path
    has_header: bool = True
    d_E: int | None = None
    label_column_present: bool = True
    zero_feat_width: int = 0
    node_feat_width: int | None = None

    def __post_init__(self):
        if self.d_E is not None and self.d_E < 0:
            raise ValueError("d_E must be >= 0")


def load_jodie_csv(spec: RawDatasetSpec) -> EventLog:
    """Parse ``user_id,item_id,timestamp[,state_label],f_1..f_dE`` rows.

    Item ids are shifted by the number of users so all node ids are distinct.
    Node features are zero vectors (width ``d_E`` unless overridden).
    """
    path = Path(spec.path)
    users, items, ts, labels, feats = [], [], [], [], []
    fixed = 4 if spec.label_column_present else 3
    width = spec.d_E
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if line_no == 1 and spec.has_header:
                continue
            line = line.strip()
            if not line:
                continue
            cols = line.split(",")
            if len(cols) < fixed:
                raise ParseError(path, line_no, f"expected at least {fixed} columns, got {len(cols)}")
            ncols = len(cols) - fixed
            if width is None:
                width = ncols
            if ncols != width:
                raise ParseError(path, line_no, f"expected {width} feature columns, got {ncols}")
            try:
                u, i = int(cols[0]), int(cols[1])
                t = float(cols[2])
                lab = float(cols[3]) if spec.label_column_present and cols[3] != "" else np.nan
                f = [float(x) for x in cols[fixed:]]
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            if u < 0 or i < 0:
                raise ParseError(path, line_no, "negative node id")
            if not np.isfinite(t) or t < 0:
                raise ParseError(path, line_no, f"invalid timestamp {cols[2]!r}")
            users.append(u)
            items.append(i)
            ts.append(t)
            labels.append(lab)
            feats.append(f)

    width = width or 0
    n = len(users)
    if width == 0:
        edge = np.zeros((n, spec.zero_feat_width))
    else:
        edge = np.asarray(feats, dtype=np.float64).reshape(n, width)
    num_users = max(users) + 1 if users else 0
    num_items = max(items) + 1 if items else 0
    d_N = spec.node_feat_width if spec.node_feat_width is not None else edge.shape[1]
    num_nodes = num_users + num_items
    return EventLog(np.asarray(users, dtype=np.int64),
                    np.asarray(items, dtype=np.int64) + num_users,
                    np.asarray(ts), edge, np.zeros((num_nodes, d_N)),
                    np.asarray(labels), num_nodes=num_nodes, num_users=num_users)


def _fmt(x: float) -> str:
    # repr gives the shortest string that parses back to the same double
    return repr(float(x))


def write_jodie_csv(log: EventLog, path, header: bool = True, labels: bool = True) -> None:
    """Write ``log`` in the format :func:`load_jodie_csv` reads."""
    if log.num_users is None:
        raise ValueError("log has no user/item split (num_users is None)")
    offset = log.num_users
    lines = []
    if header:
        cols = ["user_id", "item_id", "timestamp"] + (["state_label"] if labels else [])
        cols += [f"f{i}" for i in range(log.d_E)]
        lines.append(",".join(cols))
    for k in range(len(log)):
        row = [str(int(log.src[k])), str(int(log.dst[k]) - offset), _fmt(log.timestamps[k])]
        if labels:
            lab = log.labels[k]
            row.append("" if np.isnan(lab) else (str(int(lab)) if lab == int(lab) else _fmt(lab)))
        row.extend(_fmt(v) for v in log.edge_feats[k])
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def interaction_counts(log: EventLog) -> np.ndarray:
    return (np.bincount(log.src, minlength=log.num_nodes)
            + np.bincount(log.dst, minlength=log.num_nodes))


def filter_sparse(log: EventLog, threshold: int, endpoint_rule: str = "both",
                  mode: str = "keep_sparse") -> EventLog:
    """Restrict the log to interactions of low-activity nodes.

    A node is sparse when its total interaction count is below ``threshold``.
    ``keep_sparse`` keeps events whose endpoints are sparse (``both`` or
    ``either`` endpoint); ``drop_sparse`` is the complement reading and keeps
    events whose endpoints are all non-sparse.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    if endpoint_rule not in ("both", "either"):
        raise ValueError(f"unknown endpoint_rule {endpoint_rule!r}")
    counts = interaction_counts(log)
    sparse = counts < threshold
    s, d = sparse[log.src], sparse[log.dst]
    if mode == "keep_sparse":
        keep = (s & d) if endpoint_rule == "both" else (s | d)
    elif mode == "drop_sparse":
        keep = ~s & ~d
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return log.subset(keep)
