"""Twin Q critic with slow-moving target copies.

Both heads see [s, a] and emit a scalar. Aggregation over the pair is either the
mean (default) or the elementwise min; the TD target always aggregates the target
copies and is built off-tape so only the online heads receive gradient.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    add,
    as_tensor,
    concat,
    mean_sumsq,
    no_grad,
    scale,
    sub,
    where_mask,
)
from .errors import ConfigError
from .nn import Mlp, polyak_update

AGGREGATIONS = ("mean", "min")


def _aggregate(q1: Tensor, q2: Tensor, how: str) -> Tensor:
    if how == "mean":
        return scale(add(q1, q2), 0.5)
    return where_mask(q1.data <= q2.data, q1, q2)


class CriticPair:
    """Two online Q nets, their polyak targets, and the TD loss over a batch."""

    def __init__(self, q1: Mlp, q2: Mlp, q1_target: Mlp, q2_target: Mlp,
                 discount: float, aggregation: str = "mean"):
        if aggregation not in AGGREGATIONS:
            raise ConfigError(
                f"unknown aggregation {aggregation!r}; pick one of {AGGREGATIONS}"
            )
        self.q1 = q1
        self.q2 = q2
        self.q1_target = q1_target
        self.q2_target = q2_target
        self.discount = discount
        self.aggregation = aggregation
        self.q1_target.copy_from(self.q1)
        self.q2_target.copy_from(self.q2)

    def _features(self, s, a) -> Tensor:
        return concat([as_tensor(np.asarray(s, dtype=np.float64)), as_tensor(a)], axis=1)

    def value(self, s, a, frozen: bool = False) -> Tensor:
        """Aggregated online value; frozen detaches the head parameters."""
        x = self._features(s, a)
        return _aggregate(self.q1.forward(x, frozen=frozen),
                          self.q2.forward(x, frozen=frozen), self.aggregation)

    def head_values(self, s, a) -> tuple[Tensor, Tensor]:
        x = self._features(s, a)
        return self.q1.forward(x), self.q2.forward(x)

    def target_value(self, s, a) -> np.ndarray:
        """Aggregated target-copy value, off-tape."""
        with no_grad():
            x = self._features(s, a)
            t1 = self.q1_target.forward(x).data
            t2 = self.q2_target.forward(x).data
        if self.aggregation == "mean":
            return 0.5 * (t1 + t2)
        return np.minimum(t1, t2)

    def td_loss(self, s, a, r, s2, done, a2) -> Tensor:
        """Sum of per-head mean squared TD errors against a shared bootstrap target."""
        r = np.asarray(r, dtype=np.float64).reshape(-1, 1)
        done = np.asarray(done, dtype=np.float64).reshape(-1, 1)
        boot = self.target_value(s2, a2)
        target = Tensor(r + self.discount * (1.0 - done) * boot)
        q1, q2 = self.head_values(s, a)
        return add(mean_sumsq(sub(q1, target)), mean_sumsq(sub(q2, target)))

    def polyak(self, tau: float) -> None:
        polyak_update(self.q1_target.parameters(), self.q1.parameters(), tau)
        polyak_update(self.q2_target.parameters(), self.q2.parameters(), tau)

    def parameters(self):
        return self.q1.parameters() + self.q2.parameters()
