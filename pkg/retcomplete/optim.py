"""Adam with global-norm gradient clipping."""

from typing import Dict, Optional, Tuple

import numpy as np

from retcomplete.errors import CheckpointError
from retcomplete.tensor_core import Tensor

STATE_PREFIX = "adam"


class Adam:
    """
    Adam over a fixed set of named parameters.

    Updates are applied in place to `Tensor.data`. Moments are kept per name so
    they can be stored in and restored from a checkpoint.
    """

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-8,
        clip_norm: Optional[float] = 1.0,
    ) -> None:
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return float(np.sqrt(total))

    def step(self) -> float:
        """
        Apply one update from the accumulated gradients.

        Returns:
            Global gradient norm before clipping
        """
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data -= update.astype(p.data.dtype)
        return norm

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        for name in self.params:
            arrays[f"{STATE_PREFIX}.m.{name}"] = self.m[name].copy()
            arrays[f"{STATE_PREFIX}.v.{name}"] = self.v[name].copy()
        return arrays

    def load_state(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        """
        Restore moments saved by `state_arrays`.

        Raises:
            CheckpointError: If a moment is missing or mis-shaped
        """
        for name, p in self.params.items():
            for moment, store in (("m", self.m), ("v", self.v)):
                key = f"{STATE_PREFIX}.{moment}.{name}"
                if key not in arrays or arrays[key].shape != p.data.shape:
                    raise CheckpointError(f"optimizer state '{key}' missing or mis-shaped")
                store[name] = np.array(arrays[key], dtype=p.data.dtype)
        self.t = int(t)
