"""Independent reference implementations used by the tests."""

from __future__ import annotations

import numpy as np

from cumo import tensor as T
from cumo.moe import DenseMlp, MoeBlock


def cast_tree(obj, dtype) -> None:
    """Cast every tensor of a module tree in place (grads reset)."""
    for _, t in T.named_tensors(obj):
        t.data = t.data.astype(dtype)
        t.grad = np.zeros_like(t.data) if t.requires_grad else None


def numeric_grad(loss_fn, param: T.Tensor, coords, h: float, guard=None):
    """Central differences of ``loss_fn()`` w.r.t. chosen flat coordinates of ``param``.

    ``guard()`` returns a hashable signature of discrete choices (e.g. Top-K
    selections); coordinates whose two probes disagree on it are dropped.
    Returns ``(kept_coords, values)``.
    """
    flat = param.data.reshape(-1)
    kept, vals = [], []
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        hi = float(loss_fn().data)
        sig_hi = guard() if guard else None
        flat[c] = orig - h
        lo = float(loss_fn().data)
        sig_lo = guard() if guard else None
        flat[c] = orig
        if guard is not None and sig_hi != sig_lo:
            continue
        kept.append(c)
        vals.append((hi - lo) / (2 * h))
    return kept, np.asarray(vals)


def grad_check(loss_fn, params, h: float, max_coords: int = 24, seed: int = 0, guard=None,
               pooled: bool = False, floor: float = 1e-8) -> float:
    """Norm-wise relative error between analytic and numeric gradients.

    Per tensor (worst case) by default; ``pooled`` measures all sampled
    coordinates of all tensors as one vector. ``floor`` bounds the
    denominator, so gradients that are zero by symmetry compare absolutely.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss_fn().backward()
    worst = 0.0
    all_ana, all_num = [], []
    for p in params:
        ana_full = p.grad.reshape(-1).astype(np.float64).copy()
        n = p.data.size
        coords = rng.choice(n, size=min(n, max_coords), replace=False)
        kept, num = numeric_grad(loss_fn, p, coords, h, guard)
        if not kept:
            continue
        ana = ana_full[kept]
        all_ana.append(ana)
        all_num.append(num)
        scale = max(np.linalg.norm(ana), np.linalg.norm(num), floor)
        worst = max(worst, float(np.linalg.norm(ana - num) / scale))
    if pooled:
        ana, num = np.concatenate(all_ana), np.concatenate(all_num)
        return float(np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-8))
    return worst


def gelu_ref(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def dense_ref(mlp: DenseMlp, x: np.ndarray) -> np.ndarray:
    f = lambda t: t.data.astype(np.float64)  # noqa: E731
    return gelu_ref(x @ f(mlp.w1) + f(mlp.b1)) @ f(mlp.w2) + f(mlp.b2)


def moe_ref(block: MoeBlock, x: np.ndarray) -> np.ndarray:
    """Evaluate every expert on every token in float64, then gather and weight per token."""
    x = np.asarray(x, dtype=np.float64)
    logits = x @ block.router_w.data.astype(np.float64) + block.router_b.data.astype(np.float64)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = z / z.sum(axis=1, keepdims=True)
    all_out = np.stack([dense_ref(e, x) for e in block.experts], axis=1)  # [N, S, C]
    out = np.zeros((x.shape[0], block.c_out))
    for n in range(x.shape[0]):
        # explicit selection: repeatedly take the largest remaining, lowest index on ties
        remaining = list(range(block.num_experts))
        chosen = []
        for _ in range(block.k):
            best = max(remaining, key=lambda s: (probs[n, s], -s))
            chosen.append(best)
            remaining.remove(best)
        sel = probs[n, chosen]
        w = np.exp(sel - sel.max())
        w /= w.sum()
        for j, s in enumerate(chosen):
            out[n] += w[j] * all_out[n, s]
    return out


def recount(topk_idx_batches, num_experts: int) -> np.ndarray:
    """Dispatch fractions by plain Python counting."""
    counts = [0] * num_experts
    tokens = 0
    for idx in topk_idx_batches:
        for row in np.asarray(idx).tolist():
            tokens += 1
            for e in row:
                counts[e] += 1
    return np.asarray(counts, dtype=np.float64) / tokens
