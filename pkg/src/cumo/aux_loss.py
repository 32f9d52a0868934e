"""Load-balancing loss, router z-loss and the combined training objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .moe import ConfigError, RouteRecord
from .tensor import Tensor

SECTIONS = ("encoder", "connector", "decoder")


@dataclass
class AuxLossConfig:
    alpha_b: float = 0.1
    alpha_z: float = 0.01
    applied_sections: frozenset = field(default_factory=lambda: frozenset(SECTIONS))

    def __post_init__(self):
        self.applied_sections = frozenset(self.applied_sections)
        if self.alpha_b < 0 or self.alpha_z < 0:
            raise ConfigError("aux loss coefficients must be >= 0")
        unknown = self.applied_sections - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown sections {sorted(unknown)}")

    @classmethod
    def disabled(cls) -> "AuxLossConfig":
        return cls(0.0, 0.0)

    @property
    def enabled(self) -> bool:
        return self.alpha_b > 0 or self.alpha_z > 0


def block_balance_loss(dispatch_fraction: np.ndarray, mean_prob, k: int):
    """``S * sum_s f_s p_s`` for one block.

    ``dispatch_fraction`` counts Top-K membership per token (so it sums to k);
    it is divided by k before use. ``mean_prob`` may be a Tensor, in which case
    the result is differentiable through it.
    """
    f = np.asarray(dispatch_fraction, dtype=np.float64) / k
    s = len(f)
    if isinstance(mean_prob, Tensor):
        return T.mul(T.sum(T.mul(mean_prob, f.astype(mean_prob.dtype))), float(s))
    return float(s * np.dot(f, np.asarray(mean_prob, dtype=np.float64)))


def block_z_loss(logits):
    """Mean over tokens of the squared row log-sum-exp of raw router logits."""
    if isinstance(logits, Tensor):
        lse = T.logsumexp(logits)
        return T.mean(T.mul(lse, lse))
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]
    return float(np.mean(lse * lse))


def _applied(records: list[RouteRecord], cfg: AuxLossConfig | None) -> list[RouteRecord]:
    if cfg is None:
        return list(records)
    return [r for r in records if r.section in cfg.applied_sections]


def _average(terms):
    if not terms:
        return None
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def load_balance_loss(records: list[RouteRecord], cfg: AuxLossConfig | None = None):
    """Balance loss averaged over the MoE blocks of the applied sections (None if no blocks)."""
    terms = []
    for rec in _applied(records, cfg):
        r = rec.routing
        n, s = r.probs.shape
        f = np.bincount(r.topk_idx.reshape(-1), minlength=s) / n
        terms.append(block_balance_loss(f, T.mean(r.probs, axis=0), rec.k))
    return _average(terms)


def router_z_loss(records: list[RouteRecord], cfg: AuxLossConfig | None = None):
    """Router z-loss averaged over the MoE blocks of the applied sections (None if no blocks)."""
    return _average([block_z_loss(rec.routing.logits) for rec in _applied(records, cfg)])


def total_loss(l_ce, l_b, l_z, cfg: AuxLossConfig):
    """``l_ce + alpha_b * l_b + alpha_z * l_z``; missing aux terms count as zero."""
    out = l_ce
    if l_b is not None and cfg.alpha_b:
        out = out + l_b * cfg.alpha_b
    if l_z is not None and cfg.alpha_z:
        out = out + l_z * cfg.alpha_z
    return out
