"""Named-parameter container shared by every learned model."""

from __future__ import annotations

import numpy as np

from . import checkpoint
from .tensor import ShapeError, Tensor


class Module:
    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, wb: tuple[Tensor, Tensor]) -> None:
        w, b = wb
        w.name, b.name = f"{name}.w", f"{name}.b"
        self.params[w.name] = w
        self.params[b.name] = b

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise checkpoint.CheckpointError(f"checkpoint lacks tensor {k!r}")
            if state[k].shape != p.shape:
                raise ShapeError(f"checkpoint tensor {k!r} has shape {state[k].shape}, model expects {p.shape}")
        extra = sorted(set(state) - set(self.params))
        if extra:
            raise checkpoint.CheckpointError(f"checkpoint has unexpected tensors: {', '.join(extra)}")
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=np.float64)

    def save(self, path) -> None:
        checkpoint.save(path, self.params)

    def load(self, path) -> None:
        self.load_state(checkpoint.load(path))

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
