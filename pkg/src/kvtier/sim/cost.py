"""Compute-cost model standing in for GPU work."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class CostModel:
    """Seconds of simulated compute.

    ``prefill_cost(t) = a*t + b*t^2`` for ``t`` prompt tokens. Computing tokens
    ``[s, e)`` on top of a cached prefix of ``s`` tokens costs
    ``prefill_cost(e) - prefill_cost(s)``. One decode iteration costs
    ``decode_cost_per_token`` whatever the batch size. Every cost is split
    evenly across layers.
    """

    a: float = 2e-5
    b: float = 1e-10
    decode_cost_per_token: float = 0.02
    num_layers: int = 8

    def __post_init__(self):
        if self.a <= 0 or self.b < 0 or self.decode_cost_per_token <= 0 or self.num_layers < 1:
            raise ValueError("costs must be positive")

    def prefill_cost(self, tokens: int) -> float:
        return self.a * tokens + self.b * tokens * tokens

    def span_cost(self, start: int, end: int) -> float:
        """Compute for tokens ``[start, end)`` given ``start`` cached tokens."""
        return self.prefill_cost(end) - self.prefill_cost(start)

    def layer_cost(self, start: int, end: int) -> float:
        return self.span_cost(start, end) / self.num_layers

    def decode_layer_cost(self) -> float:
        return self.decode_cost_per_token / self.num_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CostModel:
        return cls(**{k: d[k] for k in ("a", "b", "decode_cost_per_token", "num_layers") if k in d})
