"""Dense MLP and the Top-K sparsely gated mixture-of-experts block."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import DimensionError, Tensor


class ConfigError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


def _param(arr, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


@dataclass
class DenseMlp:
    """Two linear layers with a GELU in between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    tensor_fields = ("w1", "b1", "w2", "b2")

    @classmethod
    def init(cls, c_in: int, hidden: int, c_out: int, rng: Rng, std: float = 0.02) -> "DenseMlp":
        return cls(
            w1=_param(rng.truncated_normal((c_in, hidden), std)),
            b1=_param(np.zeros(hidden)),
            w2=_param(rng.truncated_normal((hidden, c_out), std)),
            b2=_param(np.zeros(c_out)),
        )

    @property
    def c_in(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def c_out(self) -> int:
        return self.w2.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.c_in, self.hidden, self.c_out

    @property
    def num_params(self) -> int:
        return mlp_param_count(*self.dims)

    def copy(self) -> "DenseMlp":
        """Deep copy; the clone shares no buffers with the original."""
        return DenseMlp(*(_param(t.data.copy(), t.dtype) for t in (self.w1, self.b1, self.w2, self.b2)))

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def mlp_param_count(c_in: int, hidden: int, c_out: int) -> int:
    return c_in * hidden + hidden + hidden * c_out + c_out


def dense_forward(mlp: DenseMlp, x: Tensor) -> Tensor:
    if x.shape[-1] != mlp.c_in:
        raise DimensionError(f"input width {x.shape[-1]} != mlp input {mlp.c_in}")
    h = T.gelu(T.linear(x, mlp.w1, mlp.b1))
    return T.linear(h, mlp.w2, mlp.b2)


@dataclass
class Routing:
    logits: Tensor        # [N, S] raw router outputs
    probs: Tensor         # [N, S] softmax of logits
    topk_idx: np.ndarray  # [N, K] selected experts, best first
    weights: Tensor       # [N, K] softmax over the selected probabilities


@dataclass
class RouterStats:
    dispatch_fraction: np.ndarray
    mean_prob: np.ndarray
    token_count: int
    k: int

    @property
    def num_experts(self) -> int:
        return len(self.dispatch_fraction)

    @property
    def balance_score(self) -> float:
        """max/min dispatch ratio; the minimum is floored at one token's share."""
        floor = 1.0 / self.token_count
        return float(self.dispatch_fraction.max() / max(self.dispatch_fraction.min(), floor))

    @classmethod
    def from_routing(cls, topk_idx: np.ndarray, probs: np.ndarray) -> "RouterStats":
        n, s = probs.shape
        return cls.from_sums(np.bincount(topk_idx.reshape(-1), minlength=s), probs.sum(axis=0, dtype=np.float64), n, topk_idx.shape[1])

    @classmethod
    def from_sums(cls, counts: np.ndarray, prob_sums: np.ndarray, n: int, k: int) -> "RouterStats":
        if n == 0:
            raise EmptyInputError("no tokens routed")
        return cls(
            dispatch_fraction=np.asarray(counts, dtype=np.float64) / n,
            mean_prob=np.asarray(prob_sums, dtype=np.float64) / n,
            token_count=int(n),
            k=int(k),
        )

    def update(self, other: "RouterStats") -> None:
        """Fold another batch's stats into this one (token-weighted)."""
        if self.token_count == 0:
            self.dispatch_fraction = other.dispatch_fraction.copy()
            self.mean_prob = other.mean_prob.copy()
            self.token_count, self.k = other.token_count, other.k
            return
        n = self.token_count + other.token_count
        self.dispatch_fraction = (self.dispatch_fraction * self.token_count + other.dispatch_fraction * other.token_count) / n
        self.mean_prob = (self.mean_prob * self.token_count + other.mean_prob * other.token_count) / n
        self.token_count = n

    @classmethod
    def empty(cls, s: int, k: int) -> "RouterStats":
        return cls(np.zeros(s), np.zeros(s), 0, k)


@dataclass
class RouteRecord:
    """What one MoE forward leaves behind for the auxiliary losses."""

    name: str
    routing: Routing
    num_experts: int
    k: int

    @property
    def section(self) -> str:
        return self.name.split(".", 1)[0]


@dataclass
class MoeBlock:
    router_w: Tensor
    router_b: Tensor
    experts: list[DenseMlp]
    k: int
    name: str = field(default="", compare=False)

    tensor_fields = ("router_w", "router_b", "experts")

    def __post_init__(self):
        s = len(self.experts)
        if s < 1:
            raise ConfigError("MoE block needs at least one expert")
        if not 1 <= self.k <= s:
            raise ConfigError(f"top-k {self.k} outside [1, {s}]")
        dims = {e.dims for e in self.experts}
        if len(dims) != 1:
            raise ConfigError(f"experts differ in shape: {sorted(dims)}")
        if self.router_w.shape != (self.c_in, s) or self.router_b.shape != (s,):
            raise ConfigError("router shape does not match experts")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def c_in(self) -> int:
        return self.experts[0].c_in

    @property
    def c_out(self) -> int:
        return self.experts[0].c_out

    @property
    def num_params(self) -> int:
        s = self.num_experts
        return s * self.experts[0].num_params + self.c_in * s + s

    @property
    def active_params(self) -> int:
        s = self.num_experts
        return self.k * self.experts[0].num_params + self.c_in * s + s

    def __call__(self, x: Tensor, records: list | None = None) -> Tensor:
        return moe_forward(self, x, records=records)


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, largest first; ties go to the lower index."""
    return np.argsort(-probs, axis=1, kind="stable")[:, :k]


def route(block: MoeBlock, x: Tensor) -> Routing:
    if x.ndim != 2 or x.shape[1] != block.c_in:
        raise DimensionError(f"route expects [N, {block.c_in}], got {x.shape}")
    if block.k > block.num_experts:
        raise ConfigError(f"top-k {block.k} > {block.num_experts} experts")
    logits = T.linear(x, block.router_w, block.router_b)
    probs = T.softmax(logits)
    idx = topk_indices(probs.data, block.k)
    weights = T.softmax(T.take_along_rows(probs, idx))
    return Routing(logits, probs, idx, weights)


def moe_forward(block: MoeBlock, x: Tensor, stats_out: RouterStats | None = None,
                records: list | None = None) -> Tensor:
    """Weighted sum of the Top-K experts' outputs for every token.

    Accepts any leading shape; tokens are flattened for routing. Only the
    selected experts are evaluated, each on the rows that chose it.
    """
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
    r = route(block, x2)
    n, k = r.topk_idx.shape
    flat_w = r.weights.reshape(n * k)
    parts = []
    for e, expert in enumerate(block.experts):
        rows, slots = np.nonzero(r.topk_idx == e)
        if rows.size == 0:
            continue
        y = dense_forward(expert, T.take(x2, rows))
        w = T.take(flat_w, rows * k + slots).reshape(rows.size, 1)
        parts.append((rows, T.mul(y, w)))
    out = T.index_add(n, parts, block.c_out, dtype=x.dtype)
    if stats_out is not None:
        stats_out.update(RouterStats.from_routing(r.topk_idx, r.probs.data))
    if records is not None:
        records.append(RouteRecord(block.name, r, block.num_experts, block.k))
    return out.reshape(*lead, block.c_out) if x.ndim != 2 else out


def collect_stats(block: MoeBlock, batches) -> RouterStats:
    """Aggregate dispatch fractions and mean router probabilities over batches."""
    stats = RouterStats.empty(block.num_experts, block.k)
    with T.no_grad():
        for xb in batches:
            xb = xb if isinstance(xb, Tensor) else Tensor(xb)
            x2 = xb.reshape(-1, xb.shape[-1])
            r = route(block, x2)
            stats.update(RouterStats.from_routing(r.topk_idx, r.probs.data))
    if stats.token_count == 0:
        raise EmptyInputError("collect_stats needs at least one token")
    return stats
