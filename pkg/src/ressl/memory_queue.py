"""FIFO ring buffer of past teacher embeddings."""

import logging
from typing import Dict, Optional, Union

import torch

from .errors import ShapeError
from .model import NORM_TOLERANCE, EmbeddingBatch, as_tensor

logger = logging.getLogger(__name__)

DEFAULT_CAPACITIES = {32: 4096, 64: 16384, 96: 16384, 224: 65536}


class MemoryQueue:
    """Fixed-capacity store of K unit-norm rows, overwritten oldest-first.

    Entries are detached history: nothing written here carries gradient.
    """

    def __init__(self, capacity: int, dim: int, device: Union[str, torch.device] = "cpu",
                 dtype: torch.dtype = torch.float32, min_fill: Optional[int] = None):
        if capacity < 1 or dim < 1:
            raise ValueError(f"capacity and dim must be positive, got {capacity} and {dim}")
        self.capacity = capacity
        self.dim = dim
        self.min_fill = 1 if min_fill is None else min_fill
        self.store = torch.zeros(capacity, dim, device=device, dtype=dtype)
        self.cursor = 0
        self.fill = 0

    def __len__(self) -> int:
        return self.fill

    @property
    def is_full(self) -> bool:
        return self.fill == self.capacity

    @property
    def is_warm(self) -> bool:
        """True once the queue holds at least ``min_fill`` rows."""
        return self.fill >= self.min_fill

    @torch.no_grad()
    def enqueue(self, batch: Union[torch.Tensor, EmbeddingBatch]):
        """Write B rows at the cursor, wrapping around and evicting the oldest rows."""
        if isinstance(batch, EmbeddingBatch) and not batch.normalized:
            raise ValueError("queue only accepts normalized embeddings")
        rows = as_tensor(batch).detach()
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ShapeError(f"expected B x {self.dim} embeddings, got {tuple(rows.shape)}")
        b = rows.shape[0]
        if b > self.capacity:
            raise ValueError(f"batch of {b} rows exceeds queue capacity {self.capacity}")
        if b == 0:
            return
        norms = rows.norm(dim=1)
        if not torch.all((norms - 1).abs() <= NORM_TOLERANCE):
            raise ValueError(f"queue rows must be unit-norm, got norms in [{norms.min():.6f}, {norms.max():.6f}]")

        rows = rows.to(device=self.store.device, dtype=self.store.dtype)
        head = min(b, self.capacity - self.cursor)
        self.store[self.cursor:self.cursor + head] = rows[:head]
        if head < b:
            self.store[:b - head] = rows[head:]
        self.cursor = (self.cursor + b) % self.capacity
        self.fill = min(self.fill + b, self.capacity)

    def snapshot(self) -> torch.Tensor:
        """Valid rows, oldest to newest, as an independent copy."""
        if self.fill < self.capacity:
            return self.store[:self.fill].clone()
        return torch.cat([self.store[self.cursor:], self.store[:self.cursor]], dim=0)

    def state_dict(self) -> Dict:
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "min_fill": self.min_fill,
            "store": self.store.detach().cpu().clone(),
            "cursor": self.cursor,
            "fill": self.fill,
        }

    def load_state_dict(self, state: Dict):
        if state["capacity"] != self.capacity or state["dim"] != self.dim:
            raise ShapeError(
                f"queue state is {state['capacity']}x{state['dim']}, expected {self.capacity}x{self.dim}"
            )
        self.store.copy_(state["store"].to(self.store.device, self.store.dtype))
        self.cursor = int(state["cursor"])
        self.fill = int(state["fill"])
        self.min_fill = int(state.get("min_fill", self.min_fill))
