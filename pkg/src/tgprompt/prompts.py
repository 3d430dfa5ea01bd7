"""Learnable prompts that rewrite the expression matrix before the frozen backbone.

* temporal bias: a per-row interval offset, re-encoded through the frozen
  time encoder and time projection, replaces the time block;
* edge weight: a per-row scalar that rescales the whole row;
* feature mask: a bottleneck two-layer perceptron applied row by row.

The prompted matrix is ``Z + alpha*P_temp + beta*P_edge + gamma*P_feat``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .featmatrix import ExpressionMatrix, ProjectionSet, TimeEncoder
from .graphstore import NeighborIndex
from .layers import Linear, Module
from .model import TemporalEncoder
from .tensor import Tensor

PROMPT_KINDS = ("temporal", "edge", "feature")


class PromptParams(Module):
    """Prompt heads plus their (non-trainable) mixing weights.

    The interval and edge-weight heads and the output layer of the feature
    network start at zero; the first feature layer is small uniform.
    """

    def __init__(self, d: int, width: int, rng: np.random.Generator, bottleneck: int | None = None,
                 alpha: float = 0.1, beta: float = 0.1, gamma: float = 0.1,
                 temporal_bias_input: str = "time", init_scale: float = 0.1):
        r = bottleneck if bottleneck is not None else max(1, d // 2)
        if not 1 <= r < width:
            raise ValueError(f"bottleneck {r} must lie in [1, {width})")
        if min(alpha, beta, gamma) < 0:
            raise ValueError("prompt weights alpha, beta, gamma must be non-negative")
        if temporal_bias_input not in ("time", "neighbor"):
            raise ValueError("temporal_bias_input must be 'time' or 'neighbor'")
        self.d, self.width, self.bottleneck = d, width, r
        self.alpha, self.beta, self.gamma = float(alpha), float(beta), float(gamma)
        self.temporal_bias_input = temporal_bias_input
        self.eta = Linear(d, 1, zero=True)
        self.zeta = Linear(2 * d, 1, zero=True)
        self.omega1 = Linear(width, r, zero=True)
        self.omega1.W.data[...] = rng.uniform(-init_scale, init_scale, size=(width, r))
        self.omega2 = Linear(r, width, zero=True)

    def omega_parameters(self) -> list[Tensor]:
        return self.omega1.parameters() + self.omega2.parameters()

    def kind_parameters(self, kind: str) -> list[Tensor]:
        return {"temporal": self.eta.parameters(), "edge": self.zeta.parameters(),
                "feature": self.omega_parameters()}[kind]

    def weight(self, kind: str) -> float:
        return {"temporal": self.alpha, "edge": self.beta, "feature": self.gamma}[kind]


def adjusted_intervals(z: ExpressionMatrix, eta: Linear, source: str = "time") -> Tensor:
    """``ReLU(dt + eta(block))`` per row, with the block chosen by ``source``."""
    block = z.time if source == "time" else z.neigh
    delta = eta(block)
    delta = T.reshape(delta, delta.shape[:-1])
    return T.relu(T.add(delta, z.raw_dt))


def temporal_bias_prompt(z: ExpressionMatrix, eta: Linear, enc: TimeEncoder,
                         proj: ProjectionSet, source: str = "time") -> Tensor:
    dt_bar = adjusted_intervals(z, eta, source)
    m = z.mask[..., None].astype(np.float64)
    z_time = T.mul(proj.time(enc.encode_tensor(dt_bar)), m)
    blocks = [z.neigh, z.edge, z_time]
    if z.extra is not None:
        blocks.append(z.extra)
    return T.concat(blocks, axis=-1)


def edge_weights(z: ExpressionMatrix, zeta: Linear) -> Tensor:
    return zeta(T.concat([z.neigh, z.edge], axis=-1))


def edge_weight_prompt(z: ExpressionMatrix, zeta: Linear) -> Tensor:
    return T.broadcast_mul(edge_weights(z, zeta), z.values)


def feature_mask_prompt(z: ExpressionMatrix, omega1: Linear, omega2: Linear) -> Tensor:
    m = z.mask[..., None].astype(np.float64)
    return T.mul(omega2(T.relu(omega1(z.values))), m)


def combine(z, p_temp=None, p_edge=None, p_feat=None, alpha: float = 0.0,
            beta: float = 0.0, gamma: float = 0.0) -> Tensor:
    """``Z + alpha*P_temp + beta*P_edge + gamma*P_feat``; absent or zero-weight terms are skipped."""
    values = z.values if isinstance(z, ExpressionMatrix) else T._as_tensor(z)
    out = values
    for p, w, name in ((p_temp, alpha, "P_temp"), (p_edge, beta, "P_edge"),
                       (p_feat, gamma, "P_feat")):
        if p is None or w == 0:
            continue
        if p.shape != values.shape:
            raise T.ShapeError(f"combine: {name} shape {p.shape} vs Z shape {values.shape}")
        out = T.add(out, T.mul(p, float(w)))
    return out


def prompt_values(z: ExpressionMatrix, prompt: PromptParams | None, encoder: TemporalEncoder,
                  disabled: frozenset[str] | set[str] = frozenset()) -> Tensor:
    """Prompt-adjusted matrix; disabled or zero-weight prompts are not evaluated."""
    if prompt is None:
        return z.values
    active = [k for k in PROMPT_KINDS if k not in disabled and prompt.weight(k) != 0]
    p_temp = p_edge = p_feat = None
    if "temporal" in active:
        p_temp = temporal_bias_prompt(z, prompt.eta, encoder.enc, encoder.proj,
                                      prompt.temporal_bias_input)
    if "edge" in active:
        p_edge = edge_weight_prompt(z, prompt.zeta)
    if "feature" in active:
        p_feat = feature_mask_prompt(z, prompt.omega1, prompt.omega2)
    return combine(z, p_temp, p_edge, p_feat, prompt.alpha, prompt.beta, prompt.gamma)


def prompted_embed(z: ExpressionMatrix, prompt: PromptParams | None, encoder: TemporalEncoder,
                   disabled=frozenset()) -> Tensor:
    return encoder.backbone(prompt_values(z, prompt, encoder, disabled), z.mask)


def prompted_embedding(index: NeighborIndex, encoder: TemporalEncoder, prompt: PromptParams | None,
                       u: int, t: float, disabled=frozenset()) -> Tensor:
    """Embedding of ``u`` at ``t`` after prompting its expression matrix."""
    raw = encoder.gather(index, [u], [t])
    z = encoder.expression(raw)
    h = prompted_embed(z, prompt, encoder, disabled)
    return T.reshape(h, h.shape[1:])
