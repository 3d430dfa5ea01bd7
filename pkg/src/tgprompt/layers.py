"""Parameter containers built on :mod:`tgprompt.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Anything owning named parameter tensors (possibly through children)."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and key in self._param_names():
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{key}."))
        return out

    def _param_names(self) -> tuple[str, ...]:
        return getattr(self, "_params", ())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters(prefix).items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "",
                        strict: bool = True) -> None:
        params = self.named_parameters(prefix)
        missing = [k for k in params if k not in state]
        if strict and missing:
            raise KeyError(f"missing tensors in state: {missing}")
        for k, p in params.items():
            if k in state:
                arr = np.asarray(state[k], dtype=np.float64)
                if arr.shape != p.shape:
                    raise T.ShapeError(f"{k}: stored shape {arr.shape} vs parameter {p.shape}")
                p.data[...] = arr


class Linear(Module):
    """Affine map ``x @ W + b`` on the last axis."""

    _params = ("W", "b")

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 zero: bool = False, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        if zero or rng is None:
            w = np.zeros((d_in, d_out))
        else:
            bound = 1.0 / np.sqrt(max(d_in, 1))
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)
        if bias and not zero and rng is not None:
            bound = 1.0 / np.sqrt(max(d_in, 1))
            self.b.data[...] = rng.uniform(-bound, bound, size=d_out)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.d_in:
            raise T.ShapeError(f"Linear({self.d_in}->{self.d_out}) got input width {x.shape[-1]}")
        if x.ndim == 1:
            return T.reshape(self.forward(T.reshape(x, (1, self.d_in))), (self.d_out,))
        return T.add(T.matmul(x, self.W), self.b)


class MLP(Module):
    """Two affine layers with a ReLU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))
